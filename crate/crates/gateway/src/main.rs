use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use rapport_gateway::{AppState, Backends, GatewayConfig, ListenerBackend};

/// Serve listening sessions over HTTP and WebSocket.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// TOML (or .json) config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `listen` from the config.
    #[arg(long)]
    listen: Option<String>,
    /// Overrides `data_dir` from the config.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Use the offline mock listener regardless of the config.
    #[arg(long)]
    mock: bool,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let mut cfg = match &args.config {
        Some(p) => GatewayConfig::load(p)?,
        None => GatewayConfig::default(),
    };
    if let Some(l) = args.listen {
        cfg.listen = l;
    }
    if let Some(d) = args.data_dir {
        cfg.data_dir = d;
    }
    if args.mock {
        cfg.listener_backend = ListenerBackend::Mock;
    }
    cfg.session.bop.validate()?;

    let listener = tokio::net::TcpListener::bind(&cfg.listen)
        .await
        .with_context(|| format!("binding {}", cfg.listen))?;
    log::info!("listening on {}", listener.local_addr()?);
    let backends = Backends::from_config(&cfg);
    let state = AppState::new(cfg, backends).context("creating data directory")?;
    tokio::select! {
        r = rapport_gateway::serve(listener, state) => r?,
        _ = tokio::signal::ctrl_c() => log::info!("shutting down"),
    }
    Ok(())
}
