use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mjoda_cli::pipeline::{self, Method};
use mjoda_cli::{CliError, CliResult, ExperimentConfig, Forcing};

#[derive(Parser)]
#[command(
    name = "mjoda",
    version,
    about = "Constrained ensemble assimilation twin experiments on the MJO skeleton model"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// Flat `key = value` configuration file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory shared by all stages.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Overrides the forcing mode: homogeneous or warm-pool.
    #[arg(long, global = true)]
    forcing: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrates the truth trajectory.
    SimulateTruth,
    /// Draws observations of the truth.
    Observe,
    /// Runs an assimilation filter over the observations.
    RunFilter {
        /// enkf, eakf or cenkf.
        #[arg(long, default_value = "cenkf")]
        method: String,
    },
    /// Rebuilds the imitation dataset from the constrained-filter archive.
    MakeDataset,
    /// Trains one agent per ensemble member.
    TrainRl {
        /// Trains without the energy penalty (multiplier held at zero).
        #[arg(long)]
        no_constraint: bool,
        /// Continues from the checkpoints in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Runs the trained agents over the observations.
    InferRl,
    /// Scores every available estimate against the truth.
    Evaluate {
        /// Scores only times present in every estimate.
        #[arg(long)]
        common_times: bool,
    },
    /// Writes plot-ready tables.
    ExportPlotsData,
}

fn load_config(args: &Args) -> CliResult<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(f) = &args.forcing {
        cfg.forcing = Forcing::parse(f)
            .ok_or_else(|| CliError::Config(format!("--forcing expects homogeneous or warm-pool, got {f:?}")))?;
    }
    if let Command::TrainRl {
        no_constraint: true, ..
    } = args.command
    {
        cfg.rl_constrained = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: &Args) -> CliResult<String> {
    let cfg = load_config(args)?;
    let out = &args.out;
    Ok(match &args.command {
        Command::SimulateTruth => {
            pipeline::simulate_truth(&cfg, out)?;
            format!("truth written to {}", out.display())
        }
        Command::Observe => {
            pipeline::observe_truth(&cfg, out)?;
            format!("observations written to {}", out.display())
        }
        Command::RunFilter { method } => {
            let m = Method::parse(method)
                .ok_or_else(|| CliError::Config(format!("--method expects enkf, eakf or cenkf, got {method:?}")))?;
            let r = pipeline::run_filter(&cfg, out, m)?;
            format!(
                "{}: {} cycles, {:.4} s per analysis",
                m.name(),
                r.cycles_completed,
                r.analysis_seconds_per_step
            )
        }
        Command::MakeDataset => {
            pipeline::make_dataset(&cfg, out)?;
            format!("dataset written to {}", out.display())
        }
        Command::TrainRl { .. } => {
            let r = pipeline::train_rl(&cfg, out, matches!(args.command, Command::TrainRl { resume: true, .. }))?;
            let mean = r.final_lambda.iter().sum::<f64>() / r.final_lambda.len() as f64;
            format!(
                "{} agents trained to epoch {}, mean multiplier {mean:.4}",
                r.agents, r.epochs_done
            )
        }
        Command::InferRl => {
            let r = pipeline::infer_rl(&cfg, out)?;
            format!(
                "{} steps, {:.5} s per step, energy occupancy {:.4}, min A+Abar {:e}",
                r.steps, r.seconds_per_step, r.occupancy, r.min_activity
            )
        }
        Command::Evaluate { common_times } => {
            let r = pipeline::evaluate(&cfg, out, *common_times)?;
            let mut lines = Vec::new();
            for m in &r.methods {
                let (rmse, corr) = m.score("MJO");
                lines.push(format!("{:6} MJO rmse {rmse:.4} corr {corr:.4}", m.method));
            }
            lines.join("\n")
        }
        Command::ExportPlotsData => {
            pipeline::export_plots_data(&cfg, out)?;
            format!("plot tables written to {}", out.join(pipeline::PLOTS_DIR).display())
        }
    })
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("mjoda: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
