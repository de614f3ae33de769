use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use haven_core::config::{builtin_map, builtin_map_names, PolicyConfig, ScenarioKind, SimConfig};
use haven_core::engine::{replay, ReplayError};
use haven_core::log::{EndReason, TrialLog};
use haven_core::metrics::{finalize_metrics, TrialMetrics};
use haven_core::planner::MapFile;
use haven_core::policy::run_trial;
use haven_server::ServerConfig;

/// Prints to stdout, ignoring a closed pipe.
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

#[derive(Parser)]
#[command(name = "haven", version, about = "Human-robot interaction trials: run, verify, serve")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run trials headless with a scripted human.
    Run(RunArgs),
    /// Re-simulate a log and report the first divergence.
    Verify {
        log: PathBuf,
        /// Refuse unless the log was recorded with this configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the metrics of a recorded trial.
    Metrics { log: PathBuf },
    /// Serve live sessions over WebSocket.
    Serve(ServeArgs),
    /// Validate map files, or list the builtin maps.
    Maps { files: Vec<PathBuf> },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scenario: Option<String>,
    /// Map file path or builtin:<name>.
    #[arg(long)]
    map: Option<String>,
    /// idle, blocker, greedy, random_walk.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Tick budget.
    #[arg(long)]
    ticks: Option<u64>,
    /// Log file, or the log directory when running several trials.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trial configuration file; the other flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of trials, with consecutive seeds.
    #[arg(long, default_value_t = 1)]
    trials: u64,
    /// Worker threads for multi-trial sweeps.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Trial log directory; HAVEN_LOG_DIR when unset.
    #[arg(long)]
    log_dir: Option<PathBuf>,
    /// Snapshot every N ticks.
    #[arg(long, default_value_t = 2)]
    decimation: u64,
    #[arg(long, default_value_t = 16)]
    max_sessions: usize,
    /// Scenario configuration served under its scenario name.
    #[arg(long)]
    config: Vec<PathBuf>,
}

enum Failure {
    /// Bad usage or unparsable input.
    Usage(String),
    /// A trial or verification failed.
    Trial(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Trial(_) => 1,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Verify { log, config } => verify(&log, config.as_deref()),
        Command::Metrics { log } => metrics(&log),
        Command::Serve(args) => serve(args),
        Command::Maps { files } => maps(&files),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) | Failure::Trial(m) => eprintln!("haven: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn trial_config(args: &RunArgs) -> Result<SimConfig, Failure> {
    let scenario = args
        .scenario
        .as_deref()
        .map(|s| ScenarioKind::parse(s).ok_or_else(|| usage(format!("unknown scenario {s:?}"))))
        .transpose()?;
    let mut cfg = match (&args.config, scenario) {
        (Some(path), _) => SimConfig::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))?,
        (None, Some(kind)) => SimConfig::for_scenario(kind),
        (None, None) => return Err(usage("run needs --scenario or --config")),
    };
    if let Some(kind) = scenario {
        if args.config.is_some() && kind != cfg.scenario {
            return Err(usage(format!("--scenario {} contradicts the config file", kind.name())));
        }
    }
    if let Some(map) = &args.map {
        cfg.map = map.clone();
    }
    if let Some(p) = &args.policy {
        cfg.policy = match PolicyConfig::parse(p) {
            Some(PolicyConfig::Remote) | None => return Err(usage(format!("unknown policy {p:?}"))),
            Some(p) => p,
        };
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(t) = args.ticks {
        cfg.tick_budget = t;
    }
    cfg.validate().map_err(usage)?;
    cfg.load_map().map_err(usage)?;
    Ok(cfg)
}

#[derive(Serialize)]
struct SweepEntry {
    seed: u64,
    log: PathBuf,
    metrics: TrialMetrics,
}

fn write_log(path: &Path, log: &TrialLog) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, log.to_text()).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn trial_failed(m: &TrialMetrics) -> bool {
    m.end_reason != Some(EndReason::Completed)
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let base = trial_config(&args)?;
    if args.trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    let scenario = base.scenario.name();
    if args.trials == 1 {
        let (log, m) = run_trial(&base).map_err(usage)?;
        let out = args.out.clone().unwrap_or_else(|| PathBuf::from(format!("haven-{scenario}-{}.jsonl", base.seed)));
        write_log(&out, &log)?;
        out!("{}", serde_json::to_string_pretty(&m).expect("metrics serialize"));
        return if trial_failed(&m) {
            Err(Failure::Trial(format!("trial ended with {:?}", m.end_reason)))
        } else {
            Ok(())
        };
    }
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from(format!("haven-{scenario}-logs")));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.max(1))
        .build()
        .map_err(usage)?;
    let results: Vec<Result<SweepEntry, Failure>> = pool.install(|| {
        (0..args.trials)
            .into_par_iter()
            .map(|k| {
                let cfg = SimConfig { seed: base.seed.wrapping_add(k), ..base.clone() };
                let (log, metrics) = run_trial(&cfg).map_err(usage)?;
                let path = dir.join(format!("{scenario}-{}.jsonl", cfg.seed));
                write_log(&path, &log)?;
                Ok(SweepEntry { seed: cfg.seed, log: path, metrics })
            })
            .collect()
    });
    let trials = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let failed = trials.iter().filter(|t| trial_failed(&t.metrics)).count();
    let summary = serde_json::json!({ "trials": trials, "failed": failed });
    out!("{}", serde_json::to_string_pretty(&summary).expect("metrics serialize"));
    if failed > 0 {
        Err(Failure::Trial(format!("{failed} of {} trials did not complete", trials.len())))
    } else {
        Ok(())
    }
}

fn read_log(path: &Path) -> Result<TrialLog, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    TrialLog::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn verify(path: &Path, config: Option<&Path>) -> Result<(), Failure> {
    let log = read_log(path)?;
    let config = config
        .map(|p| SimConfig::load(p).map_err(|e| usage(format!("{}: {e}", p.display()))))
        .transpose()?;
    match replay(&log, config.as_ref()) {
        Ok(_) => {
            out!("ok: {} replays identically", path.display());
            Ok(())
        }
        Err(ReplayError::Divergence { tick, expected, actual, .. }) => {
            out!("divergence at tick {tick}");
            out!("  recorded: {expected}");
            out!("  replayed: {actual}");
            Err(Failure::Trial(format!("replay diverged at tick {tick}")))
        }
        Err(e @ (ReplayError::ConfigMismatch { .. } | ReplayError::MapMismatch { .. })) => {
            Err(Failure::Trial(format!("refusing to verify: {e}")))
        }
        Err(e) => Err(usage(e)),
    }
}

fn metrics(path: &Path) -> Result<(), Failure> {
    let m = finalize_metrics(&read_log(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    out!("{}", serde_json::to_string_pretty(&m).expect("metrics serialize"));
    Ok(())
}

fn serve(args: ServeArgs) -> Result<(), Failure> {
    let mut cfg = match args.log_dir {
        Some(dir) => ServerConfig::new(dir),
        None => ServerConfig::from_env(),
    };
    cfg.decimation = args.decimation.max(1);
    cfg.max_sessions = args.max_sessions;
    for path in &args.config {
        let mut c = SimConfig::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        c.load_map().map_err(usage)?;
        c.policy = PolicyConfig::Remote;
        cfg.scenarios.insert(c.scenario.name().to_owned(), c);
    }
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let runtime = tokio::runtime::Runtime::new().map_err(usage)?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port))
            .await
            .map_err(|e| usage(format!("bind {}:{}: {e}", args.host, args.port)))?;
        eprintln!(
            "haven: serving haven/1 on ws://{}/session, logs in {}",
            listener.local_addr().map_err(usage)?,
            cfg.log_dir.display()
        );
        haven_server::serve(listener, cfg)
            .await
            .map_err(|e| Failure::Trial(format!("server stopped: {e}")))
    })?;
    runtime.shutdown_timeout(Duration::from_secs(1));
    Ok(())
}

fn describe(map: &MapFile) -> String {
    format!(
        "{}x{} cells at {} m, {} rooms, {} gem slots, base {}",
        map.width,
        map.height,
        map.resolution,
        map.room_centers.len(),
        map.gem_slots.len(),
        if map.base.is_some() { "yes" } else { "no" }
    )
}

fn maps(files: &[PathBuf]) -> Result<(), Failure> {
    if files.is_empty() {
        for name in builtin_map_names() {
            let map = MapFile::parse(builtin_map(name).expect("listed builtin")).map_err(usage)?;
            out!("builtin:{name}  {}", describe(&map));
        }
        return Ok(());
    }
    let mut bad = 0;
    for f in files {
        match MapFile::load(f) {
            Ok(map) => out!("{}  ok  {}", f.display(), describe(&map)),
            Err(e) => {
                eprintln!("{}: {e}", f.display());
                bad += 1;
            }
        }
    }
    if bad > 0 {
        Err(usage(format!("{bad} of {} maps failed to parse", files.len())))
    } else {
        Ok(())
    }
}
