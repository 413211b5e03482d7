//! Command-line front end; every subcommand is a thin shell over a library
//! operation in `pipeline` (or `rollout`/`dmd` for the single-shot tools).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use koopman_lab::dynsys::load_dataset;
use koopman_lab::koopman::load_model;
use koopman_lab::pipeline::{
    compare_report, dmd_fit_dataset, eval_stage, export_checkpoint, generate_stage,
    load_experiment_config, read_metrics, rollout_csv, run_experiment, train_stage,
    ExperimentConfig, MetricsDoc, PipelineError,
};
use koopman_lab::rollout::{rollout, RolloutPlan};

#[derive(Parser)]
#[command(
    name = "koopman-lab",
    version,
    about = "Koopman autoencoder toolkit: train linear latent models and roll them out with periodic reencoding"
)]
struct Cli {
    /// Override the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap worker threads (env: KOOPMAN_LAB_JOBS).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset described by an experiment config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; trajectories land in OUT/data.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a previously generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (the OUT/data of a generate run).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out a trained model from a single initial condition.
    Rollout {
        #[arg(long)]
        ckpt: PathBuf,
        /// Initial state, comma-separated.
        #[arg(long, value_delimiter = ',', required = true)]
        x0: Vec<f64>,
        #[arg(long)]
        horizon: usize,
        /// 0 = never reencode, 1 = every step, k = every k steps.
        #[arg(long, default_value_t = 0)]
        reencode_period: usize,
        /// CSV destination for the predicted states.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the eval split; writes metrics.json and curves.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump a checkpoint as readable JSON.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit DMD (or monomial-lifted eDMD) on a dataset's training split.
    DmdFit {
        #[arg(long)]
        data: PathBuf,
        /// Lift with all monomials up to this total degree; omit for raw DMD.
        #[arg(long)]
        degree: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline: generate, train, evaluate, one config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Consolidate several metrics.json files into one comparison table.
    Report {
        /// metrics.json files sharing the same horizon/period grid.
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig, PipelineError> {
    let mut config = load_experiment_config(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn print_metrics_table(doc: &MetricsDoc) -> Result<(), PipelineError> {
    let report = compare_report(&[(doc.experiment.clone(), doc.clone())])?;
    print!("{}", report.text);
    Ok(())
}

fn real_main(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Generate { config, out } => {
            let config = load_config(&config, cli.seed)?;
            let manifest = generate_stage(&config, &out)?;
            println!(
                "wrote {} train + {} eval trajectories ({} system, dt {}) to {}",
                manifest.n_train_trajectories,
                manifest.n_eval_trajectories,
                manifest.system.name,
                manifest.dt,
                out.join("data").display()
            );
        }
        Command::Train { config, data, out } => {
            let config = load_config(&config, cli.seed)?;
            let dataset = load_dataset(&data)?;
            let (_, _) = train_stage(&config, &dataset, &out)?;
            println!("checkpoint: {}", out.join("ckpt/final.ckpt").display());
        }
        Command::Rollout { ckpt, x0, horizon, reencode_period, out } => {
            let (model, _) = load_model(&ckpt)?;
            let plan = RolloutPlan::discrete(horizon, reencode_period);
            let result = rollout(&model, &x0, &plan)?;
            std::fs::write(&out, rollout_csv(&result.predicted_states, None))?;
            println!("wrote {} steps to {}", horizon, out.display());
        }
        Command::Eval { config, ckpt, data, out } => {
            let config = load_config(&config, cli.seed)?;
            let (model, _) = load_model(&ckpt)?;
            let dataset = load_dataset(&data)?;
            std::fs::create_dir_all(&out)?;
            let doc = eval_stage(&config, &model, None, &dataset, &out)?;
            print_metrics_table(&doc)?;
        }
        Command::Export { ckpt, out } => {
            export_checkpoint(&ckpt, &out)?;
            println!("wrote {}", out.display());
        }
        Command::DmdFit { data, degree, out } => {
            let report = dmd_fit_dataset(&data, degree, &out)?;
            println!(
                "fit {} pairs, {} features, residual {:.6e}; model at {}",
                report.n_pairs,
                report.n_features,
                report.fit_residual,
                out.display()
            );
        }
        Command::Run { config, out } => {
            let config = load_config(&config, cli.seed)?;
            let doc = run_experiment(&config, &out)?;
            print_metrics_table(&doc)?;
            println!("artifacts under {}", out.display());
        }
        Command::Report { metrics, csv } => {
            let mut inputs = Vec::with_capacity(metrics.len());
            for path in &metrics {
                let doc = read_metrics(path)?;
                inputs.push((doc.experiment.clone(), doc));
            }
            let report = compare_report(&inputs)?;
            print!("{}", report.text);
            if let Some(path) = csv {
                std::fs::write(&path, report.csv)?;
                println!("csv: {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let jobs = cli.jobs.or_else(|| {
        std::env::var("KOOPMAN_LAB_JOBS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(n) = jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not cap worker threads: {e}");
        }
    }

    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
