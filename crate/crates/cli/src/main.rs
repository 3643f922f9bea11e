use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rapport_core::analysis::{analyze, read_measures, report_csv, AnalysisError, MeasureReport};
use rapport_core::backchannel::{Lexicon, LlmSentiment, SentimentBackend};
use rapport_core::bop::{replay_trace, replay_vad, write_events, BopError, RuleId};
use rapport_core::completion::{CompletionClient, HttpCompletionClient, HttpConfig, MockCompletionClient};
use rapport_core::disclosure::{
    score_transcript, session_means, write_scores_csv, DisclosureScorer, HeuristicScorer, LlmScorer,
};
use rapport_core::listener::word_count;
use rapport_core::session::{Condition, Driver, Input, Phase, Session, SessionConfig};
use rapport_core::transcript::{self, EventKind, TranscriptError, TranscriptEvent, TranscriptWriter};
use serde::Deserialize;

/// Listening-engine tools.
///
/// Text sessions carry no prosody, so backchannel timing is not exercised
/// there: a text turn gets at most one backchannel, when it is finalized.
/// Prosodic timing is exercised by `bop-replay` and by the gateway's audio
/// stream.
#[derive(Parser)]
#[command(name = "rapport", version)]
struct Cli {
    /// TOML file with optional [session] and [llm] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the nine-question protocol interactively on stdin.
    ///
    /// Type an answer over one or more lines; a blank line ends the turn.
    /// Text mode has no prosodic timing: backchannels (BC and BC+AL) are
    /// emitted once per turn when it is finalized, not during pauses.
    Session {
        /// control, bc or bc_al.
        #[arg(long)]
        condition: Condition,
        #[arg(long, value_enum, default_value_t = Backend::Mock)]
        backend: Backend,
        #[arg(long, value_enum, default_value_t = SentimentArg::Lexicon)]
        sentiment: SentimentArg,
        /// Where to write the transcript.
        #[arg(long)]
        out: PathBuf,
        /// Fixes the session id and creation time for reproducible output.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Replay a prosody trace (JSONL frames) through the backchannel rules
    /// and print the events as JSONL.
    BopReplay {
        trace: PathBuf,
        /// Also enable the PITCH_DROP rule.
        #[arg(long)]
        pitch_drop: bool,
    },
    /// Score self-disclosure of every answer in one or more transcripts and
    /// print CSV.
    Score {
        #[arg(required = true)]
        transcripts: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = ScoreBackend::Heuristic)]
        backend: ScoreBackend,
        /// Print per-session means instead of per-answer rows.
        #[arg(long)]
        per_session: bool,
    },
    /// Compare conditions on each measure in a CSV of
    /// session_id,condition,measure_name,value rows.
    Stats {
        measures: PathBuf,
        #[arg(long, conflicts_with = "csv")]
        json: bool,
        #[arg(long)]
        csv: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Llm,
    Mock,
}

#[derive(Clone, Copy, ValueEnum)]
enum SentimentArg {
    Lexicon,
    Llm,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreBackend {
    Heuristic,
    Llm,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    session: SessionConfig,
    llm: HttpConfig,
}

/// Marks an error as bad input rather than a runtime failure.
#[derive(Debug)]
struct BadInput(String);

impl fmt::Display for BadInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for BadInput {}

fn bad_input(e: impl fmt::Display) -> anyhow::Error {
    anyhow!(BadInput(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<BadInput>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file_cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<FileConfig>(&text).map_err(bad_input)?
        }
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Session {
            condition,
            backend,
            sentiment,
            out,
            seed,
        } => {
            let completion: Arc<dyn CompletionClient> = match backend {
                Backend::Mock => Arc::new(MockCompletionClient::default()),
                Backend::Llm => Arc::new(HttpCompletionClient::new(file_cfg.llm.clone())),
            };
            let sentiment: Arc<dyn SentimentBackend> = match sentiment {
                SentimentArg::Lexicon => Arc::new(Lexicon::bundled()),
                SentimentArg::Llm => Arc::new(LlmSentiment::new(completion.clone())),
            };
            let stdin = io::stdin();
            cmd_session(
                condition,
                file_cfg.session,
                completion.as_ref(),
                sentiment.as_ref(),
                &out,
                seed,
                stdin.lock(),
                &mut io::stdout().lock(),
            )
        }
        Command::BopReplay { trace, pitch_drop } => {
            let mut cfg = file_cfg.session.bop;
            if pitch_drop {
                cfg.enabled_rules.insert(RuleId::PitchDrop);
            }
            cfg.validate().map_err(bad_input)?;
            let file = File::open(&trace).with_context(|| format!("opening {}", trace.display()))?;
            let events = replay_trace(BufReader::new(file), replay_vad(), &cfg).map_err(|e| match e {
                BopError::Io(io) => anyhow!(io),
                other => bad_input(format!("{}: {other}", trace.display())),
            })?;
            write_events(io::stdout().lock(), &events)?;
            Ok(())
        }
        Command::Score {
            transcripts,
            backend,
            per_session,
        } => {
            let llm;
            let scorer: &dyn DisclosureScorer = match backend {
                ScoreBackend::Heuristic => &HeuristicScorer,
                ScoreBackend::Llm => {
                    llm = LlmScorer::new(HttpCompletionClient::new(file_cfg.llm.clone()));
                    &llm
                }
            };
            cmd_score(&transcripts, scorer, per_session, &mut io::stdout().lock())
        }
        Command::Stats { measures, json, csv } => {
            let file = File::open(&measures).with_context(|| format!("opening {}", measures.display()))?;
            let reports = stats_reports(file)?;
            let mut out = io::stdout().lock();
            if json {
                serde_json::to_writer_pretty(&mut out, &reports)?;
                writeln!(out)?;
            } else if csv {
                write!(out, "{}", report_csv(&reports))?;
            } else {
                write!(out, "{}", render_table(&reports))?;
            }
            Ok(())
        }
    }
}

/// Milliseconds credited per typed word.
const MS_PER_WORD: u64 = 400;
/// Silence credited to the blank line that ends a turn.
const END_OF_TURN_MS: u64 = 2000;

#[allow(clippy::too_many_arguments)]
fn cmd_session(
    condition: Condition,
    mut cfg: SessionConfig,
    completion: &dyn CompletionClient,
    sentiment: &dyn SentimentBackend,
    out_path: &Path,
    seed: Option<u64>,
    input: impl BufRead,
    out: &mut impl Write,
) -> Result<()> {
    cfg.text_mode_backchannel = true;
    let (id, created_at) = match seed {
        Some(s) => (format!("session-{s}"), "1970-01-01T00:00:00Z".to_string()),
        None => {
            let now = chrono::Utc::now();
            (
                format!("session-{}", now.timestamp_millis()),
                now.to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            )
        }
    };
    let mut session = Session::new(id, condition, cfg, created_at);
    let mut writer = TranscriptWriter::create(out_path, &session.transcript().header)
        .with_context(|| format!("creating {}", out_path.display()))?;
    let driver = Driver::new(sentiment, completion);
    let mut shown = 0;
    let mut flush = |session: &Session, out: &mut dyn Write| -> Result<()> {
        for e in &session.transcript().events[shown..] {
            writer.append(e)?;
            print_event(e, out)?;
        }
        shown = session.transcript().events.len();
        out.flush()?;
        Ok(())
    };

    driver.start(&mut session)?;
    flush(&session, out)?;
    let mut t = 0u64;
    let mut typed = false;
    for line in input.lines() {
        let line = line?;
        if session.phase() == Phase::Done {
            break;
        }
        let input = if line.trim().is_empty() {
            t += END_OF_TURN_MS;
            typed = false;
            Input::EndOfTurn { t }
        } else {
            t += MS_PER_WORD * word_count(&line).max(1) as u64;
            typed = true;
            Input::Text { chunk: line, t }
        };
        driver.feed(&mut session, input)?;
        t = t.max(session.clock());
        flush(&session, out)?;
    }
    if session.phase() == Phase::Listening && typed {
        driver.feed(&mut session, Input::EndOfTurn { t: t + END_OF_TURN_MS })?;
        flush(&session, out)?;
    }
    if session.phase() != Phase::Done {
        eprintln!(
            "input ended before question {} was answered; transcript is partial",
            session.question_index()
        );
    }
    Ok(())
}

fn print_event(e: &TranscriptEvent, out: &mut dyn Write) -> io::Result<()> {
    match &e.kind {
        EventKind::QuestionAsked { index, text } => writeln!(out, "\nQ{index}. {text}"),
        EventKind::Backchannel { verbal, gesture, .. } => {
            writeln!(out, "  [{}] {verbal}", serde_json::to_value(gesture).unwrap().as_str().unwrap_or(""))
        }
        EventKind::Response { text, .. } => writeln!(out, "Listener: {text}"),
        EventKind::SessionEnded => writeln!(out, "\nThank you. The session is complete."),
        EventKind::UserUtterance { .. } => Ok(()),
    }
}

fn cmd_score(paths: &[PathBuf], scorer: &dyn DisclosureScorer, per_session: bool, out: &mut impl Write) -> Result<()> {
    let mut rows = Vec::new();
    for p in paths {
        let t = transcript::load(p).map_err(|e| match e {
            TranscriptError::Io(io) => anyhow!(io).context(format!("reading {}", p.display())),
            other => bad_input(format!("{}: {other}", p.display())),
        })?;
        rows.extend(score_transcript(&t, scorer).with_context(|| format!("scoring {}", p.display()))?);
    }
    if per_session {
        writeln!(out, "session_id,information,thoughts,feelings")?;
        for (id, m) in session_means(&rows) {
            writeln!(out, "{id},{},{},{}", m[0], m[1], m[2])?;
        }
    } else {
        write_scores_csv(out, &rows, true)?;
    }
    Ok(())
}

fn stats_reports(input: impl io::Read) -> Result<Vec<MeasureReport>> {
    let measures = read_measures(input).map_err(bad_input)?;
    if measures.is_empty() {
        bail!(BadInput("no measures in input".into()));
    }
    measures
        .iter()
        .map(|(name, g)| {
            analyze(name, g).map_err(|e| match e {
                AnalysisError::Csv(_) => anyhow!(e),
                other => bad_input(format!("{name}: {other}")),
            })
        })
        .collect()
}

fn fmt_num(v: Option<f64>, places: usize) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.places$}"),
        Some(x) => format!("{x}"),
        None => "-".into(),
    }
}

fn render_table(reports: &[MeasureReport]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<20} {:>9} {:>9} {:>9} {:>9} {:>8} {:>7}  {:>9} {:>9} {:>9}\n",
        "measure", "control", "bc", "bc_al", "chi2(df)", "p", "eps2", "slope", "t", "p(trend)"
    ));
    for r in reports {
        let kw = &r.kruskal_wallis;
        let trend = r.trend.as_ref();
        s.push_str(&format!(
            "{:<20} {:>9} {:>9} {:>9} {:>9} {:>8} {:>7}  {:>9} {:>9} {:>9}\n",
            r.measure,
            fmt_num(r.medians[0], 2),
            fmt_num(r.medians[1], 2),
            fmt_num(r.medians[2], 2),
            format!("{:.3}({})", kw.h, kw.df),
            fmt_num(Some(kw.p), 4),
            fmt_num(Some(kw.epsilon_sq), 3),
            fmt_num(trend.map(|t| t.slope), 3),
            fmt_num(trend.map(|t| t.t), 3),
            fmt_num(trend.map(|t| t.p), 4),
        ));
        for d in &r.dunn {
            s.push_str(&format!(
                "    dunn {} vs {}: z = {:.3}, p = {:.4}, p_adj = {:.4}\n",
                d.a, d.b, d.z, d.p_raw, d.p_adj
            ));
        }
        if trend.is_some_and(|t| t.degenerate) {
            s.push_str("    trend: zero residual variance\n");
        }
    }
    s
}
