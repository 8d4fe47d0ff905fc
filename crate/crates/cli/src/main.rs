use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ofo_core::simkit::Method;

mod commands;
mod config;
mod error;

use config::RunConfigFile;
use error::CliError;

#[derive(Parser)]
#[command(name = "ofo", version, about = "Closed-loop EV tariff simulator")]
struct Cli {
    /// Worker threads for fleet solves and run suites.
    #[arg(long, global = true, env = "OFO_GRID_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic fleet (scenario.json) and reference tariff (tariff.csv).
    Generate(GenerateArgs),
    /// Estimate an initial sensitivity matrix from perturbed history.
    Warmstart(WarmstartArgs),
    /// Run the day-by-day loop and write one trace directory per run.
    Simulate(SimulateArgs),
    /// Solve the full-information bilevel benchmark.
    Benchmark(BenchmarkArgs),
    /// Summarize trace directories, or check ratios from given numbers.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML or JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario JSON or session CSV.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Tariff CSV.
    #[arg(long)]
    tariff: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    evs: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct WarmstartArgs {
    #[command(flatten)]
    common: Common,
    /// History length D.
    #[arg(long)]
    days: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    ridge: Option<f64>,
    /// Output CSV.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Ofo,
    Benchmark,
    Reference,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ofo => Method::Ofo,
            MethodArg::Benchmark => Method::Benchmark,
            MethodArg::Reference => Method::Reference,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    days: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    /// Delay the plant's charging windows by this many steps.
    #[arg(long, allow_negative_numbers = true)]
    mismatch: Option<i64>,
    /// Precomputed H0 CSV.
    #[arg(long)]
    h0: Option<PathBuf>,
    /// Fixed price CSV for `--method benchmark`.
    #[arg(long)]
    price: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Trace directories, or directories holding trace directories.
    traces: Vec<PathBuf>,
    /// Trailing days averaged for the peak table.
    #[arg(long, default_value_t = 14)]
    window: usize,
    /// Write summary.txt, summary.csv, bands.csv and plot_data.csv here.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Peaks `REF,BENCH,OFO` in kW; prints the ratio table.
    #[arg(long, value_delimiter = ',')]
    peaks: Option<Vec<f64>>,
    /// Daily costs `REF,OFO,BENCH`; prints the savings.
    #[arg(long, value_delimiter = ',')]
    costs: Option<Vec<f64>>,
}

/// File config with flag overrides on top.
fn resolve_config(common: &Common) -> Result<RunConfigFile, CliError> {
    let mut cfg = RunConfigFile::load(common.config.as_deref())?;
    if let Some(p) = &common.scenario {
        cfg.scenario.path = Some(p.clone());
    }
    if let Some(p) = &common.tariff {
        cfg.scenario.tariff = Some(p.clone());
    }
    if let Some(s) = common.seed {
        cfg.scenario.seed = s;
        cfg.warmstart.seed = s;
        cfg.experiment.seed = s;
        cfg.benchmark.seed = s;
    }
    Ok(cfg)
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Generate(a) => {
            let mut cfg = resolve_config(&a.common)?;
            if let Some(n) = a.evs {
                cfg.scenario.evs = n;
            }
            if let Some(n) = a.steps {
                cfg.scenario.steps = n;
            }
            finish(&mut cfg)?;
            commands::generate(&cfg, &a.out)
        }
        Command::Warmstart(a) => {
            let mut cfg = resolve_config(&a.common)?;
            if let Some(d) = a.days {
                cfg.warmstart.days = d;
            }
            if let Some(s) = a.sigma {
                cfg.warmstart.sigma = s;
            }
            if a.ridge.is_some() {
                cfg.warmstart.ridge = a.ridge;
            }
            finish(&mut cfg)?;
            commands::warmstart(&cfg, &a.out)
        }
        Command::Simulate(a) => {
            let mut cfg = resolve_config(&a.common)?;
            if let Some(m) = a.method {
                cfg.experiment.method = m.into();
            }
            if let Some(d) = a.days {
                cfg.experiment.days = d;
            }
            if let Some(r) = a.runs {
                cfg.experiment.runs = r;
            }
            if let Some(k) = a.mismatch {
                cfg.experiment.mismatch = k;
            }
            if a.h0.is_some() {
                cfg.warmstart.h0 = a.h0;
            }
            if a.price.is_some() {
                cfg.experiment.price = a.price;
            }
            finish(&mut cfg)?;
            commands::simulate(&cfg, &a.out)
        }
        Command::Benchmark(a) => {
            let mut cfg = resolve_config(&a.common)?;
            if let Some(s) = a.starts {
                cfg.benchmark.starts = s;
            }
            finish(&mut cfg)?;
            commands::benchmark(&cfg, &a.out)
        }
        Command::Report(a) => commands::report(&a.traces, a.window, a.out.as_deref(), a.peaks.as_deref(), a.costs.as_deref()),
    }
}

fn finish(cfg: &mut RunConfigFile) -> Result<(), CliError> {
    cfg.check_paths()?;
    cfg.validate()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
