use std::path::PathBuf;
use std::process::ExitCode;

use bipkit::commands;
use bipkit::config::{parse_rates, RunConfig};
use bipkit::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "bipkit", version, about = "Train, run and evaluate interaction primitives")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root random seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Basis functions per DoF.
    #[arg(long, global = true, value_name = "INT")]
    basis: Option<usize>,
    /// Sample, inference and execution rates in Hz.
    #[arg(long, global = true, value_name = "SAMPLE,INFER,EXEC")]
    rates: Option<String>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn a model from a directory of demonstrations.
    Train { demo_dir: PathBuf },
    /// Replay recordings through the filter and write phase traces and executed interactions.
    Infer {
        model: PathBuf,
        /// Interaction files or directories of them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Write synthetic demonstrations, test scenarios and static controls.
    Simulate,
    /// Summarise executed runs: completion times, correlations, rank tests.
    Eval {
        model: PathBuf,
        #[arg(required = true)]
        runs_dirs: Vec<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numerical(_) => 3,
        Error::Dof { source, .. } => exit_code(source),
        _ if e.is_data_error() => 2,
        _ => 1,
    }
}

fn resolve(common: &Common) -> Result<(RunConfig, PathBuf), Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(b) = common.basis {
        cfg.basis.count = b;
    }
    if let Some(r) = &common.rates {
        cfg.rates = parse_rates(r)?;
    }
    cfg.validate()?;
    let out = common
        .out
        .clone()
        .ok_or_else(|| Failure::Usage("--out <DIR> is required".into()))?;
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (cfg, out) = resolve(&cli.common)?;
    match cli.command {
        Command::Train { demo_dir } => {
            let s = commands::train(&demo_dir, &cfg, &out)?;
            println!("demonstrations: {}", s.demos);
            println!("basis per DoF: {}", s.basis_count);
            println!(
                "layout: {} observed, {} controlled ({})",
                s.layout.observed_count(),
                s.layout.controlled_count(),
                s.layout.names().join(" ")
            );
            println!("latent weights: {} (filter state {})", s.weight_dim, s.state_dim);
            println!("worst design condition: {:.3e}", s.worst_condition);
            println!("regularized fits: {}", s.regularized_fits);
            println!("model: {}", s.model_path.display());
        }
        Command::Infer { model, inputs } => {
            for s in commands::infer(&model, &inputs, &cfg, &out)? {
                println!(
                    "{}: {} samples, terminal phase {:.4}, phase velocity {:.4e}, plans {}",
                    s.name, s.samples, s.terminal.phase, s.terminal.phase_vel, s.plans_issued
                );
            }
        }
        Command::Simulate => {
            let s = commands::simulate(&cfg, &out)?;
            println!(
                "demos: {}, tests: {}, static: {} under {}",
                s.demos,
                s.tests,
                s.statics,
                out.display()
            );
        }
        Command::Eval { model, runs_dirs } => {
            let report = commands::eval(&model, &runs_dirs, &cfg, &out)?;
            for g in &report.groups {
                println!(
                    "{}: {} runs, mean completion ratio {:.4}",
                    g.group, g.runs, g.ttc_mean
                );
            }
            for t in &report.test_stats {
                println!("{}: U = {}, p = {:.4}", t.name, t.statistic, t.p_value);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BIPKIT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
