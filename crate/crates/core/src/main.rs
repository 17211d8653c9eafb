use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use tailsgd::harness::{self, Experiment, ExperimentConfig};
use tailsgd::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExperimentArg {
    FigureA,
    FigureGrid,
    Rates,
    VerifyFilters,
    Probe,
}

impl From<ExperimentArg> for Experiment {
    fn from(e: ExperimentArg) -> Self {
        match e {
            ExperimentArg::FigureA => Experiment::FigureA,
            ExperimentArg::FigureGrid => Experiment::FigureGrid,
            ExperimentArg::Rates => Experiment::Rates,
            ExperimentArg::VerifyFilters => Experiment::VerifyFilters,
            ExperimentArg::Probe => Experiment::Probe,
        }
    }
}

/// Tail-averaged SGD experiments for least squares.
///
/// Exit codes: 0 success, 1 configuration error, 2 verification failure, 3 I/O error.
#[derive(Debug, Parser)]
#[command(name = "tailsgd", version)]
struct Cli {
    #[arg(value_enum)]
    experiment: ExperimentArg,

    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,

    /// Output CSV path; overrides `output_path` in the config. Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Worker threads (falls back to TAILSGD_THREADS, then the rayon default).
    #[arg(long)]
    threads: Option<usize>,

    /// Master seed; overrides `master_seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_IO: u8 = 3;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Csv(_) => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

fn threads(cli: &Cli) -> Result<Option<usize>, Error> {
    if let Some(t) = cli.threads {
        return Ok(Some(t));
    }
    match std::env::var("TAILSGD_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("TAILSGD_THREADS is not a count: {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn execute(cli: &Cli) -> Result<u8, Error> {
    let experiment = Experiment::from(cli.experiment);
    let mut config = match ExperimentConfig::from_path(&cli.config) {
        Err(Error::Io(e)) => return Err(Error::Config(format!("{}: {e}", cli.config.display()))),
        other => other?,
    };
    if let Some(seed) = cli.seed {
        config.master_seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_path = Some(out.clone());
    }

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads(cli)? {
        if n == 0 {
            return Err(Error::Config("thread count must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let report = pool.install(|| harness::run(experiment, &config))?;

    match &config.output_path {
        Some(path) => std::fs::write(path, &report.csv)?,
        None => print!("{}", report.csv),
    }
    if let (Some(path), Some(csv)) = (&config.trajectory_path, &report.trajectory_csv) {
        std::fs::write(path, csv)?;
    }
    if report.failed_checks > 0 {
        eprintln!("{} verification check(s) failed", report.failed_checks);
        return Ok(EXIT_VERIFY);
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("tailsgd: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
