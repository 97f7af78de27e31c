use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use snailopt::pipeline::{self, OptimizeOverrides, RunContext};
use snailopt::Error;

#[derive(Parser, Debug)]
#[command(
    name = "snailopt",
    version,
    about = "SNAIL traveling-wave amplifier design optimizer"
)]
struct Cli {
    /// Run directory, overriding `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (defaults to the config, then all cores).
    #[arg(long, global = true, env = "SNAILOPT_WORKERS")]
    workers: Option<usize>,

    /// Replace a run directory produced by a different config.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Linear sweep over the parameter grid.
    Stage1 {
        #[arg(long)]
        config: PathBuf,
    },
    /// Bayesian optimization of the device metric.
    Optimize {
        #[arg(long)]
        config: PathBuf,
        /// Stage-1 CSV used as warm start.
        #[arg(long, required_unless_present = "cold_start")]
        stage1: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Evaluations per enumerated combination, warm start included.
        #[arg(long)]
        budget: Option<usize>,
        /// Ignore Stage-1 data and start from a Latin hypercube.
        #[arg(long)]
        cold_start: bool,
    },
    /// Three-wave-mixing gain and working-point search.
    Stage3 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        pstar: PathBuf,
    },
    /// All stages and the report, resuming completed stages.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
    },
    /// Regenerate plot-ready exports for a run directory.
    Report { run_dir: PathBuf },
}

fn context(cli: &Cli, config: &Path) -> snailopt::Result<RunContext> {
    let mut ctx = RunContext::load(config, cli.out.as_deref())?;
    if cli.workers.is_some() {
        ctx.workers = cli.workers;
    }
    if ctx.workers == Some(0) {
        return Err(Error::Config("workers must be >= 1".into()));
    }
    Ok(ctx)
}

fn warn_failed(n: usize) {
    if n > 0 {
        eprintln!("warning: {n} Stage-1 grid points failed and were excluded");
    }
}

fn run(cli: &Cli) -> snailopt::Result<()> {
    match &cli.command {
        Command::Stage1 { config } => {
            let ctx = context(cli, config)?;
            let out = pipeline::run_stage1(&ctx, cli.force)?;
            warn_failed(out.failed_count());
            println!(
                "stage1: {} points written to {}",
                out.records.len(),
                ctx.run_dir.join(pipeline::STAGE1_CSV).display()
            );
        }
        Command::Optimize {
            config,
            stage1,
            seed,
            budget,
            cold_start,
        } => {
            let ctx = context(cli, config)?;
            let over = OptimizeOverrides {
                seed: *seed,
                budget: *budget,
                cold_start: *cold_start,
            };
            let out = pipeline::run_optimize(&ctx, stage1.as_deref(), over, cli.force)?;
            let p = &out.pstar;
            println!(
                "p*: A_J={} um2 rho={} uA/um2 alpha={} t={} nm L={} C={} P={}  metric={}",
                p.params.junction_area,
                p.params.current_density,
                p.params.alpha,
                p.params.dielectric_thickness,
                p.params.inductance_load_ratio,
                p.params.capacitance_load_ratio,
                p.params.pitch,
                p.metric.total
            );
        }
        Command::Stage3 { config, pstar } => {
            let ctx = context(cli, config)?;
            let out = pipeline::run_stage3(&ctx, pstar, cli.force)?;
            let q = &out.qstar;
            println!(
                "q*: pump={} uA (xi={:.4}) flux={:.5} Phi0  band gain={:.3} dB",
                q.pump_amplitude_ua, q.xi, q.flux, q.performance_db
            );
        }
        Command::Pipeline { config } => {
            let ctx = context(cli, config)?;
            let out = pipeline::run_pipeline(&ctx, cli.force)?;
            warn_failed(out.failed_rows);
            println!(
                "pipeline: ran [{}] in {}; metric(p*)={} gain(q*)={:.3} dB at {} uA",
                out.ran.join(", "),
                ctx.run_dir.display(),
                out.pstar.metric.total,
                out.qstar.performance_db,
                out.qstar.pump_amplitude_ua
            );
        }
        Command::Report { run_dir } => {
            for f in pipeline::report(run_dir)? {
                println!("{}", run_dir.join(f).display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
