use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Duration;

use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Deserialize;
use yomo_coordinator::{BackgroundCoordinator, CoordinatorConfig};
use yomo_core::fixtures::{builtin_fixtures, load_fixtures};
use yomo_simctl::{
    format_report, replay, report_tables, Clock, LossyTransport, MeterNode, NodeConfig, SimClock,
    SystemClock, Transport, UdpTransport,
};

#[derive(Parser)]
#[command(name = "yomo", version, about = "YoMo smart-meter simulator")]
struct Cli {
    /// Configuration file (TOML) for the chosen subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, env = "YOMO_LOG", default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a simulated meter node (requires --config).
    Node {
        /// Coordinator address, overriding the config file.
        #[arg(long)]
        coordinator: Option<String>,
        /// Stop after this many readings.
        #[arg(long)]
        readings: Option<u32>,
        /// Run on a simulated clock, as fast as the network allows.
        #[arg(long)]
        simulated: bool,
    },
    /// Run the coordinator service.
    Coordinator {
        #[command(flatten)]
        cfg: CoordinatorConfig,
    },
    /// Re-send a stored readings.log to a coordinator.
    Replay {
        log: PathBuf,
        /// Time scale; 0 sends as fast as possible.
        #[arg(long, default_value_t = 0.0)]
        speed: f64,
        #[arg(long, default_value = "127.0.0.1:7753")]
        coordinator: String,
    },
    /// Print measured versus configured power for the appliance fixtures.
    Report {
        /// Fixture file; the bundled appliances when omitted.
        #[arg(long)]
        fixtures: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        Failure::Config(e.to_string())
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let level: tracing::Level = match cli.log_level.parse() {
        Ok(l) => l,
        Err(_) => {
            eprintln!("error: invalid log level `{}`", cli.log_level);
            return ExitCode::from(1);
        }
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();

    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    let result = match cli.command {
        Cmd::Node { coordinator, readings, simulated } => {
            run_node(cli.config.as_deref(), cli.seed, coordinator, readings, simulated)
        }
        Cmd::Coordinator { cfg } => run_coordinator(cli.config.as_deref(), cfg, sub),
        Cmd::Replay { log, speed, coordinator } => run_replay(&log, speed, &coordinator),
        Cmd::Report { fixtures } => run_report(fixtures.as_deref(), cli.seed.unwrap_or(0)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn stop_on_interrupt() -> Result<Arc<AtomicBool>, Failure> {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)).map_err(Failure::runtime)?;
    Ok(stop)
}

fn run_node(
    config: Option<&Path>,
    seed: Option<u64>,
    coordinator: Option<String>,
    readings: Option<u32>,
    simulated: bool,
) -> Result<(), Failure> {
    let path = config.ok_or_else(|| Failure::config("node requires --config"))?;
    let mut cfg = NodeConfig::load(path).map_err(Failure::config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(addr) = coordinator {
        cfg.coordinator = addr;
    }
    if readings.is_some() {
        cfg.readings = readings;
    }
    let state = cfg.meter_state().map_err(Failure::config)?;
    let udp = UdpTransport::connect(cfg.coordinator.as_str(), None)
        .map_err(|e| Failure::runtime(format!("coordinator {}: {e}", cfg.coordinator)))?;
    let transport: Box<dyn Transport> = if cfg.loss > 0.0 {
        Box::new(LossyTransport::new(udp, cfg.loss, cfg.seed))
    } else {
        Box::new(udp)
    };
    let stop = stop_on_interrupt()?;
    let timing = (Duration::from_millis(cfg.handshake_timeout_ms), cfg.resync_interval_s);
    let clock: Box<dyn Clock> = if simulated {
        Box::new(SimClock::starting_at(SystemClock.now()))
    } else {
        Box::new(SystemClock)
    };
    let mut node = MeterNode::new(state, clock, transport).with_timing(timing.0, timing.1);
    tracing::info!(meter = %cfg.meter_id, coordinator = %cfg.coordinator, "node starting");
    let stats = node.run(&stop, cfg.readings);
    let s = node.state();
    println!(
        "meter {}: emitted {} sent {} buffered {} evicted {} commands {} next_seq {}",
        s.meter_id(),
        stats.emitted,
        stats.sent,
        s.buffered(),
        s.evicted(),
        stats.commands,
        s.seq_next()
    );
    Ok(())
}

/// Coordinator settings file: any subset of the flag names.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoordinatorFile {
    bind: Option<std::net::IpAddr>,
    udp_port: Option<u16>,
    http_port: Option<u16>,
    data_dir: Option<PathBuf>,
    liveness_s: Option<f64>,
    retry_attempts: Option<u32>,
    retry_interval_ms: Option<u64>,
    queue_capacity: Option<usize>,
    workers: Option<usize>,
    cors_origin: Option<String>,
}

/// File values fill in whatever neither a flag nor the environment set.
fn merge_file(cfg: &mut CoordinatorConfig, file: CoordinatorFile, m: &ArgMatches) {
    let unset = |id: &str| matches!(m.value_source(id), None | Some(ValueSource::DefaultValue));
    macro_rules! fill {
        ($($field:ident),*) => {$(
            if let Some(v) = file.$field {
                if unset(stringify!($field)) {
                    cfg.$field = v;
                }
            }
        )*};
    }
    fill!(bind, udp_port, http_port, data_dir, liveness_s, retry_attempts, retry_interval_ms,
          queue_capacity, workers, cors_origin);
}

fn run_coordinator(
    config: Option<&Path>,
    mut cfg: CoordinatorConfig,
    matches: &ArgMatches,
) -> Result<(), Failure> {
    if let Some(path) = config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let file: CoordinatorFile = toml::from_str(&text).map_err(Failure::config)?;
        merge_file(&mut cfg, file, matches);
    }
    cfg.validate().map_err(Failure::Config)?;
    let (tx, rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })
    .map_err(Failure::runtime)?;
    let running = BackgroundCoordinator::spawn(cfg).map_err(|e| match e {
        yomo_coordinator::ServiceError::Config(m) => Failure::Config(m),
        other => Failure::runtime(other),
    })?;
    println!("coordinator: udp {} http {}", running.udp_addr, running.http_addr);
    let _ = rx.recv();
    tracing::info!("shutting down");
    running.stop();
    Ok(())
}

fn run_replay(log: &Path, speed: f64, coordinator: &str) -> Result<(), Failure> {
    if !(speed.is_finite() && speed >= 0.0) {
        return Err(Failure::config(format!("--speed must be non-negative, got {speed}")));
    }
    let file = File::open(log).map_err(|e| Failure::config(format!("{}: {e}", log.display())))?;
    let mut transport = UdpTransport::connect(coordinator, None)
        .map_err(|e| Failure::runtime(format!("coordinator {coordinator}: {e}")))?;
    let report = replay(BufReader::new(file), &mut transport, &SystemClock, speed)
        .map_err(Failure::runtime)?;
    println!("replayed {} readings, skipped {} lines", report.sent, report.skipped);
    Ok(())
}

fn run_report(fixtures: Option<&Path>, seed: u64) -> Result<(), Failure> {
    let set = match fixtures {
        Some(path) => load_fixtures(path).map_err(Failure::config)?,
        None => builtin_fixtures(),
    };
    let rows = report_tables(&set, seed).map_err(Failure::runtime)?;
    print!("{}", format_report(&rows));
    Ok(())
}
