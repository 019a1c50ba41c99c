use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use nrurn::cli_io::{self, Emit, RegionFamily, RegionSpec};
use nrurn::error::{Result, UrnError};
use nrurn::model::ExperimentConfig;

#[derive(Parser)]
#[command(name = "nrurn", version, about = "Negatively reinforced urn simulator and analyzer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Drift, stability, regime and limiting covariances of a model.
    Analyze(Common),
    /// Simulate a single trajectory.
    Simulate(Common),
    /// Run an ensemble and check it against the analytic predictions.
    Verify(Common),
    /// Tabulate rho over a (theta, Re lambda) grid.
    Regions(RegionArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum EmitArg {
    Json,
    Csv,
    Both,
}

impl From<EmitArg> for Emit {
    fn from(e: EmitArg) -> Self {
        match e {
            EmitArg::Json => Emit::Json,
            EmitArg::Csv => Emit::Csv,
            EmitArg::Both => Emit::Both,
        }
    }
}

#[derive(Args)]
struct Output {
    /// Output directory; results go to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    emit: EmitArg,
    /// Worker threads for ensembles (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured replica count.
    #[arg(long)]
    replicas: Option<u64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct RegionArgs {
    /// linear, inverse_power or exponential.
    #[arg(long)]
    family: String,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    k: usize,
    /// Theta range as `lo:hi`.
    #[arg(long)]
    theta: String,
    /// Range of Re(lambda_min) as `lo:hi`.
    #[arg(long, default_value = "-1:1", allow_hyphen_values = true)]
    lambda: String,
    /// Nodes per axis, `N` or `NTHETAxNLAMBDA`.
    #[arg(long, default_value = "21")]
    resolution: String,
    #[command(flatten)]
    output: Output,
}

fn parse_range(name: &str, s: &str) -> Result<(f64, f64)> {
    let bad = || UrnError::config(name, format!("expected `lo:hi`, got `{s}`"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    let bad = || UrnError::config("resolution", format!("expected `N` or `NxM`, got `{s}`"));
    match s.split_once('x') {
        Some((a, b)) => Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?)),
        None => {
            let n = s.parse().map_err(|_| bad())?;
            Ok((n, n))
        }
    }
}

fn set_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| UrnError::config("threads", e.to_string()))?;
    }
    Ok(())
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut config = cli_io::load_config(&common.config)?;
    if let Some(seed) = common.seed {
        config = config.with_seed(seed);
    }
    if let Some(r) = common.replicas {
        config = config.with_replicas(r)?;
    }
    Ok(config)
}

fn report_written(paths: &[PathBuf]) {
    for p in paths {
        eprintln!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Analyze(c) => {
            set_threads(c.output.threads)?;
            let config = load(&c)?;
            report_written(&cli_io::run_analyze(&config, c.output.out.as_deref(), c.output.emit.into())?);
            Ok(true)
        }
        Command::Simulate(c) => {
            set_threads(c.output.threads)?;
            let config = load(&c)?;
            report_written(&cli_io::cmd_simulate(&config, c.output.out.as_deref(), c.output.emit.into())?);
            Ok(true)
        }
        Command::Verify(c) => {
            set_threads(c.output.threads)?;
            let config = load(&c)?;
            let outcome = cli_io::cmd_verify(&config, c.output.out.as_deref(), c.output.emit.into())?;
            for line in &outcome.lines {
                println!("{line}");
            }
            for note in &outcome.notes {
                println!("NOTE {note}");
            }
            report_written(&outcome.written);
            Ok(outcome.pass())
        }
        Command::Regions(a) => {
            set_threads(a.output.threads)?;
            let spec = RegionSpec {
                family: RegionFamily::parse(&a.family, a.alpha)?,
                k: a.k,
                theta_range: parse_range("theta", &a.theta)?,
                lambda_range: parse_range("lambda", &a.lambda)?,
                resolution: parse_resolution(&a.resolution)?,
            };
            report_written(&cli_io::cmd_regions(&spec, a.output.out.as_deref(), a.output.emit.into())?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            if cli_io::is_input_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
