use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use dds_core::clock::SystemClock;
use dds_core::store::{FileLog, Store};
use dds_server::host::start_daemons;
use dds_server::{router, AppState, BackendConfig, TokenStore};
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(name = "dds-server", version, about = "HTTP head service for the data delivery service")]
struct Args {
    /// Address to listen on. Port 0 picks a free port.
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// JSON array of {token, subject, expires_at} (expires_at in Unix ms).
    #[arg(long)]
    tokens: PathBuf,
    /// Append-only store log. Without it the store lives in memory.
    #[arg(long)]
    store: Option<PathBuf>,
    /// fsync the store log after every write.
    #[arg(long)]
    fsync: bool,
    /// Also run the daemons in this process.
    #[arg(long)]
    daemons: bool,
    /// Backend configuration for hosted daemons (JSON).
    #[arg(long, requires = "daemons")]
    backends: Option<PathBuf>,
}

fn setup(args: &Args) -> Result<(Store, TokenStore, BackendConfig), String> {
    let tokens = TokenStore::load(&args.tokens)?;
    let clock = Arc::new(SystemClock::new());
    let store = match &args.store {
        Some(p) => {
            let log = FileLog::open(p, args.fsync).map_err(|e| format!("{}: {e}", p.display()))?;
            Store::open(Box::new(log), clock).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => Store::in_memory(clock),
    };
    let backends = match &args.backends {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            BackendConfig::parse(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => BackendConfig::default(),
    };
    Ok((store, tokens, backends))
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    let (store, tokens, backends) = match setup(&args) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("dds-server: {e}");
            return ExitCode::from(2);
        }
    };
    let hosted = if args.daemons {
        match start_daemons(&store, &backends, "server") {
            Ok(h) => Some(h),
            Err(e) => {
                eprintln!("dds-server: {e}");
                return ExitCode::from(2);
            }
        }
    } else {
        None
    };
    let state = AppState::hosting(
        store,
        tokens,
        hosted.as_ref().map(|h| h.hub.clone()),
        hosted.as_ref().map(|h| h.handle.stats()),
    );
    let listener = match tokio::net::TcpListener::bind(args.listen).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("dds-server: bind {}: {e}", args.listen);
            return ExitCode::from(2);
        }
    };
    // Scripts starting the server on port 0 read the bound address from here.
    match listener.local_addr() {
        Ok(a) => println!("listening on {a}"),
        Err(e) => {
            eprintln!("dds-server: {e}");
            return ExitCode::from(2);
        }
    }
    let served = axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await;
    if let Some(h) = hosted {
        h.handle.stop();
    }
    match served {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dds-server: {e}");
            ExitCode::FAILURE
        }
    }
}
