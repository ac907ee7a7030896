use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use sparse_eta_cli::{
    cmd_eval, cmd_export_conditions, cmd_gen, cmd_infer, cmd_train, ExperimentConfig, Overrides,
};

/// Travel-time distributions and route recovery from sparse GPS trajectories.
#[derive(Parser)]
#[command(name = "sparse-eta", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; overrides the config.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate network, ground truth, dense trips and sparse corpora.
    Gen,
    /// Run EM on every corpus.
    Train,
    /// Travel-time and route-recovery reports on the test split.
    Eval,
    /// Per-gap routes and times of a single trajectory.
    Infer {
        /// Sampling-interval label of the model, e.g. `2min`.
        #[arg(long)]
        label: String,
        /// JSON-lines file of sparse trajectories; defaults to the model's corpus.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        id: Option<u64>,
    },
    /// Write road-condition GeoJSON for chosen time steps.
    ExportConditions {
        #[arg(long)]
        label: String,
        /// Half-hour time step (0-47); repeatable.
        #[arg(long = "time-step", required = true)]
        time_steps: Vec<usize>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let base = match &cli.common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let cfg = base.resolve(&Overrides {
        seed: cli.common.seed,
        threads: cli.common.threads,
        out: cli.common.out.clone(),
    })?;
    match cli.command {
        Command::Gen => {
            let m = cmd_gen(&cfg)?;
            println!("wrote {} corpora of {} trajectories to {}", m.corpora.len(), m.sidecar.trajectories, cfg.out.display());
        }
        Command::Train => {
            for s in cmd_train(&cfg)? {
                println!(
                    "{}: {} iterations, stop {:?}, delta_mu_max {:.4}, reassigned {}",
                    s.label, s.iterations, s.stop, s.delta_mu_max, s.reassigned_count
                );
            }
        }
        Command::Eval => {
            let report = cmd_eval(&cfg)?;
            for r in &report.ratios {
                let tte = r
                    .tte
                    .as_ref()
                    .map_or("no test trajectories".to_owned(), |t| format!("MAPE {:.3}% RMSE {:.3} min", t.mape_pct, t.rmse_min));
                let route = r.route.as_ref().map_or("route n/a".to_owned(), |a| format!("route accuracy {:.4}", a.mean_accuracy));
                println!("{}: {tte}, {route}", r.label);
            }
        }
        Command::Infer { label, input, id } => {
            let (est, path) = cmd_infer(&cfg, &label, input.as_deref(), id)?;
            for p in &est.pairs {
                match (&p.route, &p.error) {
                    (Some(r), _) => println!("pair {}: {:.1} s over {} segments", p.position, p.seconds, r.segment_ids.len()),
                    (None, Some(e)) => println!("pair {}: failed: {e}", p.position),
                    (None, None) => println!("pair {}: no estimate", p.position),
                }
            }
            println!("total {:.1} s, coverage {:.2}; wrote {}", est.total_seconds, est.coverage, path.display());
        }
        Command::ExportConditions { label, time_steps } => {
            for p in cmd_export_conditions(&cfg, &label, &time_steps)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPARSE_ETA_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
