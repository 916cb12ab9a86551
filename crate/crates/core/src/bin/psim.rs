use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use psim::io::{run, EngineKind, RunConfig};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EngineArg {
    Prefix,
    Naive,
    Eager,
}

/// Maintain top-k influential users per keyword subscription over an action stream.
#[derive(Debug, Parser)]
#[command(name = "psim", version)]
struct Args {
    /// Actions, one JSON object per line: {"ue","te","ur","tr"}
    #[arg(long)]
    actions: PathBuf,
    /// User profiles: {"user","kw":[..]}
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// Subscriptions: {"q","kw":[..]}
    #[arg(long)]
    subscriptions: Option<PathBuf>,
    /// Result CSV (stdout if omitted); stats go to <output>.stats.json
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    k: usize,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Raw influence that triggers a rebase
    #[arg(long, default_value_t = psim::influence::DEFAULT_TAU_F)]
    tau_f: f64,
    /// Detection floor for decayed influences
    #[arg(long, default_value_t = psim::influence::DEFAULT_TAU_D)]
    tau_d: f64,
    /// Emit results after every N actions
    #[arg(long, default_value_t = 1000)]
    emit_every: u64,
    /// Also emit whenever the stream clock advances
    #[arg(long)]
    emit_on_ts_change: bool,
    #[arg(long, value_enum, default_value = "off")]
    pruning3: Switch,
    #[arg(long, value_enum, default_value = "prefix")]
    engine: EngineArg,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let mut config = RunConfig::new(args.actions);
    config.profiles = args.profiles;
    config.subscriptions = args.subscriptions;
    config.output = args.output;
    config.k = args.k;
    config.lambda = args.lambda;
    config.epsilon = args.epsilon;
    config.tau_f = args.tau_f;
    config.tau_d = args.tau_d;
    config.emit_every = args.emit_every;
    config.emit_on_timestamp_change = args.emit_on_ts_change;
    config.pruning3 = matches!(args.pruning3, Switch::On);
    config.engine = match args.engine {
        EngineArg::Prefix => EngineKind::Prefix,
        EngineArg::Naive => EngineKind::Naive,
        EngineArg::Eager => EngineKind::Eager,
    };
    match run(&config) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("psim: {e}");
            ExitCode::FAILURE
        }
    }
}
