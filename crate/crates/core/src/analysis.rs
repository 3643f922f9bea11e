//! Condition comparisons: Kruskal-Wallis with epsilon-squared, Dunn's
//! post-hoc tests with Benjamini-Hochberg adjustment, and an ordered-contrast
//! linear trend.

use std::io::Read;

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::transcript::Condition;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least {need} observations, got {got}")]
    TooFewObservations { got: usize, need: usize },
    #[error("need at least two non-empty groups")]
    TooFewGroups,
    #[error("p-value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("non-finite measure value")]
    NonFinite,
    #[error("measures line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Per-participant measures grouped by condition.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GroupedSamples {
    pub control: Vec<f64>,
    pub bc: Vec<f64>,
    pub bc_al: Vec<f64>,
}

impl GroupedSamples {
    pub fn new(control: Vec<f64>, bc: Vec<f64>, bc_al: Vec<f64>) -> Self {
        Self { control, bc, bc_al }
    }

    pub fn get(&self, c: Condition) -> &[f64] {
        match c {
            Condition::Control => &self.control,
            Condition::Bc => &self.bc,
            Condition::BcAl => &self.bc_al,
        }
    }

    pub fn push(&mut self, c: Condition, value: f64) {
        match c {
            Condition::Control => self.control.push(value),
            Condition::Bc => self.bc.push(value),
            Condition::BcAl => self.bc_al.push(value),
        }
    }

    pub fn total(&self) -> usize {
        self.control.len() + self.bc.len() + self.bc_al.len()
    }

    fn non_empty(&self) -> Vec<Condition> {
        Condition::ALL.into_iter().filter(|c| !self.get(*c).is_empty()).collect()
    }

    fn check(&self) -> Result<(), AnalysisError> {
        if Condition::ALL.iter().flat_map(|c| self.get(*c)).any(|v| !v.is_finite()) {
            return Err(AnalysisError::NonFinite);
        }
        if self.non_empty().len() < 2 {
            return Err(AnalysisError::TooFewGroups);
        }
        if self.total() < 3 {
            return Err(AnalysisError::TooFewObservations {
                got: self.total(),
                need: 3,
            });
        }
        Ok(())
    }
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

/// Mid-ranks (1-based) of `xs`, with tied values sharing their average rank.
pub fn midranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

struct Ranked {
    /// (condition, size, mean rank) per non-empty group.
    groups: Vec<(Condition, usize, f64)>,
    n: usize,
    /// Sum over all observations of (rank - mean rank)^2.
    rank_ss: f64,
}

fn rank_groups(g: &GroupedSamples) -> Ranked {
    let conds = g.non_empty();
    let pooled: Vec<f64> = conds.iter().flat_map(|c| g.get(*c).iter().copied()).collect();
    let ranks = midranks(&pooled);
    let n = pooled.len();
    let grand = (n as f64 + 1.0) / 2.0;
    let mut groups = Vec::new();
    let mut offset = 0;
    for c in conds {
        let size = g.get(c).len();
        let mean = ranks[offset..offset + size].iter().sum::<f64>() / size as f64;
        groups.push((c, size, mean));
        offset += size;
    }
    let rank_ss = ranks.iter().map(|r| (r - grand).powi(2)).sum();
    Ranked { groups, n, rank_ss }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KwResult {
    /// Tie-corrected H statistic (chi-square approximation).
    pub h: f64,
    pub df: usize,
    pub p: f64,
    pub epsilon_sq: f64,
    pub n: usize,
}

/// Effect size for Kruskal-Wallis: H (n + 1) / (n^2 - 1), i.e. H / (n - 1).
pub fn epsilon_squared(h: f64, n: usize) -> f64 {
    let n = n as f64;
    h * (n + 1.0) / (n * n - 1.0)
}

pub fn kruskal_wallis(g: &GroupedSamples) -> Result<KwResult, AnalysisError> {
    g.check()?;
    let r = rank_groups(g);
    let df = r.groups.len() - 1;
    if r.rank_ss == 0.0 {
        return Ok(KwResult {
            h: 0.0,
            df,
            p: 1.0,
            epsilon_sq: 0.0,
            n: r.n,
        });
    }
    let grand = (r.n as f64 + 1.0) / 2.0;
    let between: f64 = r
        .groups
        .iter()
        .map(|&(_, size, mean)| size as f64 * (mean - grand).powi(2))
        .sum();
    let h = (r.n as f64 - 1.0) * between / r.rank_ss;
    let chi = ChiSquared::new(df as f64).expect("df >= 1");
    Ok(KwResult {
        h,
        df,
        p: chi.sf(h).min(1.0),
        epsilon_sq: epsilon_squared(h, r.n),
        n: r.n,
    })
}

/// Benjamini-Hochberg step-up adjustment; output keeps input order.
pub fn benjamini_hochberg(p: &[f64]) -> Result<Vec<f64>, AnalysisError> {
    if let Some(&bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(AnalysisError::OutOfRange(bad));
    }
    let m = p.len() as f64;
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut adjusted = vec![0.0; p.len()];
    let mut running = 1.0f64;
    for (pos, &i) in order.iter().enumerate().rev() {
        let rank = (pos + 1) as f64;
        // m / rank >= 1; the max guards against rounding below p
        running = running.min((m * p[i] / rank).max(p[i]));
        adjusted[i] = running;
    }
    Ok(adjusted)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DunnPair {
    pub a: Condition,
    pub b: Condition,
    /// Positive when `a` ranks higher than `b`.
    pub z: f64,
    pub p_raw: f64,
    pub p_adj: f64,
}

pub fn dunn_posthoc(g: &GroupedSamples) -> Result<Vec<DunnPair>, AnalysisError> {
    g.check()?;
    let r = rank_groups(g);
    // rank_ss / (n - 1) equals the tie-corrected pooled variance
    // n(n+1)/12 - sum(t^3 - t) / (12 (n - 1)).
    let var = r.rank_ss / (r.n as f64 - 1.0);
    let normal = Normal::standard();
    let mut pairs = Vec::new();
    for (i, &(a, na, ma)) in r.groups.iter().enumerate() {
        for &(b, nb, mb) in &r.groups[i + 1..] {
            let se = (var * (1.0 / na as f64 + 1.0 / nb as f64)).sqrt();
            let z = if se > 0.0 { (ma - mb) / se } else { 0.0 };
            let p_raw = (2.0 * normal.sf(z.abs())).min(1.0);
            pairs.push(DunnPair {
                a,
                b,
                z,
                p_raw,
                p_adj: p_raw,
            });
        }
    }
    let raw: Vec<f64> = pairs.iter().map(|p| p.p_raw).collect();
    for (pair, adj) in pairs.iter_mut().zip(benjamini_hochberg(&raw)?) {
        pair.p_adj = adj;
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrendResult {
    pub slope: f64,
    pub intercept: f64,
    pub t: f64,
    /// t squared: the F statistic of a single contrast.
    pub f: f64,
    pub df: usize,
    pub p: f64,
    pub r_sq: f64,
    pub f_sq: f64,
    /// Residual variance was zero; `t` and `f_sq` are infinite (or zero for
    /// a flat line) and `p` is reported as 0 (or 1).
    pub degenerate: bool,
    pub codes: [f64; 3],
}

/// Least-squares regression of the measure on the condition contrast code.
pub fn contrast_trend(g: &GroupedSamples) -> Result<TrendResult, AnalysisError> {
    let (x, y): (Vec<f64>, Vec<f64>) = Condition::ALL
        .iter()
        .flat_map(|c| g.get(*c).iter().map(move |v| (c.contrast_code(), *v)))
        .unzip();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    if y.len() < 4 {
        return Err(AnalysisError::TooFewObservations { got: y.len(), need: 4 });
    }
    if g.non_empty().len() < 2 {
        return Err(AnalysisError::TooFewGroups);
    }
    let n = y.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|xi| (xi - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(xi, yi)| (xi - mx) * (yi - my)).sum();
    let sst: f64 = y.iter().map(|yi| (yi - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(&y)
        .map(|(xi, yi)| (yi - intercept - slope * xi).powi(2))
        .sum();
    let df = y.len() - 2;
    let codes = [-1.0, 0.0, 1.0];

    if sse <= f64::EPSILON * sst || sst == 0.0 {
        let flat = slope == 0.0 || sst == 0.0;
        return Ok(TrendResult {
            slope: if sst == 0.0 { 0.0 } else { slope },
            intercept,
            t: if flat { 0.0 } else { f64::INFINITY.copysign(slope) },
            f: if flat { 0.0 } else { f64::INFINITY },
            df,
            p: if flat { 1.0 } else { 0.0 },
            r_sq: if flat { 0.0 } else { 1.0 },
            f_sq: if flat { 0.0 } else { f64::INFINITY },
            degenerate: true,
            codes,
        });
    }

    let se = (sse / df as f64 / sxx).sqrt();
    let t = slope / se;
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 2");
    let r_sq = 1.0 - sse / sst;
    Ok(TrendResult {
        slope,
        intercept,
        t,
        f: t * t,
        df,
        p: (2.0 * dist.sf(t.abs())).min(1.0),
        r_sq,
        f_sq: r_sq / (1.0 - r_sq),
        degenerate: false,
        codes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeasureReport {
    pub measure: String,
    pub n: [usize; 3],
    pub medians: [Option<f64>; 3],
    pub kruskal_wallis: KwResult,
    pub dunn: Vec<DunnPair>,
    pub trend: Option<TrendResult>,
}

pub fn analyze(measure: &str, g: &GroupedSamples) -> Result<MeasureReport, AnalysisError> {
    let kruskal_wallis = kruskal_wallis(g)?;
    let dunn = dunn_posthoc(g)?;
    let trend = contrast_trend(g).ok();
    Ok(MeasureReport {
        measure: measure.to_string(),
        n: Condition::ALL.map(|c| g.get(c).len()),
        medians: Condition::ALL.map(|c| median(g.get(c))),
        kruskal_wallis,
        dunn,
        trend,
    })
}

/// Reads `session_id,condition,measure_name,value` rows (with a header) into
/// one group set per measure, in first-seen order.
pub fn read_measures<R: Read>(reader: R) -> Result<Vec<(String, GroupedSamples)>, AnalysisError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out: Vec<(String, GroupedSamples)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let parse_err = |message: String| AnalysisError::Parse { line, message };
        if rec.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, got {}", rec.len())));
        }
        let cond: Condition = rec[1].parse().map_err(|e: crate::transcript::UnknownCondition| parse_err(e.to_string()))?;
        let value: f64 = rec[3]
            .parse()
            .map_err(|_| parse_err(format!("value {:?} is not a number", &rec[3])))?;
        if !value.is_finite() {
            return Err(parse_err("value is not finite".into()));
        }
        let name = &rec[2];
        let idx = match out.iter().position(|(m, _)| m == name) {
            Some(i) => i,
            None => {
                out.push((name.to_string(), GroupedSamples::default()));
                out.len() - 1
            }
        };
        out[idx].1.push(cond, value);
    }
    Ok(out)
}

pub const REPORT_CSV_HEADER: &str = "measure,median_control,median_bc,median_bc_al,chi_sq,df,p,epsilon_sq,\
dunn_control_bc_p_adj,dunn_control_bc_al_p_adj,dunn_bc_bc_al_p_adj,trend_slope,trend_t,trend_f,trend_p,trend_f_sq";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// One CSV row per measure with the columns of [`REPORT_CSV_HEADER`].
pub fn report_csv(reports: &[MeasureReport]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in reports {
        let dunn = |a: Condition, b: Condition| {
            fmt_opt(r.dunn.iter().find(|d| d.a == a && d.b == b).map(|d| d.p_adj))
        };
        let kw = &r.kruskal_wallis;
        let cols = [
            r.measure.clone(),
            fmt_opt(r.medians[0]),
            fmt_opt(r.medians[1]),
            fmt_opt(r.medians[2]),
            format!("{}", kw.h),
            kw.df.to_string(),
            format!("{}", kw.p),
            format!("{}", kw.epsilon_sq),
            dunn(Condition::Control, Condition::Bc),
            dunn(Condition::Control, Condition::BcAl),
            dunn(Condition::Bc, Condition::BcAl),
            fmt_opt(r.trend.map(|t| t.slope)),
            fmt_opt(r.trend.map(|t| t.t)),
            fmt_opt(r.trend.map(|t| t.f)),
            fmt_opt(r.trend.map(|t| t.p)),
            fmt_opt(r.trend.map(|t| t.f_sq)),
        ];
        out.push_str(&cols.join(","));
        out.push('\n');
    }
    out
}
