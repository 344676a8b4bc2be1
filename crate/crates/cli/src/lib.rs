pub mod commands;
pub mod config;
pub mod error;
pub mod serve;

use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use reach_intent::surrogate::TrainConfig;
use reach_intent::task_sim::Policy;

use crate::config::{pick, FileConfig, InferenceFlags};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "reach-intent", version, about = "Reaching-intent inference: datasets, surrogate training, benchmarks, task simulation and a live service")]
pub struct Cli {
    /// Flat JSON config; flags given on the command line take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate reaches to uniformly drawn targets and write an ITRJ dataset.
    GenDataset {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Scene JSON whose obstacles shape the reaches (default: empty table).
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Train the surrogate on an ITRJ dataset and write ISUR weights.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Time cold and warm grid inference and surrogate vs simulator generation.
    Bench {
        /// Grid spec JSON (default: the 130 x 70 workspace grid).
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        surrogate: PathBuf,
        #[arg(long)]
        repeats: Option<usize>,
        /// Time the simulator on this many evenly spread cells and scale up.
        #[arg(long)]
        sim_cells: Option<usize>,
        #[command(flatten)]
        inference: InferenceFlags,
    },
    /// Run the pick-and-place task and write task logs, diagrams and metrics.
    Simulate {
        /// solo_human, solo_robot, turn_taking, intent_prediction or all.
        #[arg(long, default_value = "all")]
        policy: String,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Surrogate for the intent policy's grid (default: the simulator).
        #[arg(long)]
        surrogate: Option<PathBuf>,
        #[command(flatten)]
        inference: InferenceFlags,
    },
    /// Posterior for a recorded partial reach.
    InferFile {
        #[arg(long)]
        surrogate: PathBuf,
        #[arg(long)]
        scene: Option<PathBuf>,
        /// ITRJ dataset (see --index) or JSON {"dt", "points"}.
        #[arg(long)]
        trajectory: PathBuf,
        /// Write the posterior: JSON if the name ends in .json, IPOS otherwise.
        #[arg(long)]
        emit_posterior: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Leading fraction of the trajectory that is observed.
        #[arg(long)]
        fraction: Option<f64>,
        #[command(flatten)]
        inference: InferenceFlags,
    },
    /// Serve live inference sessions over TCP, newline-delimited JSON.
    Serve {
        #[arg(long)]
        host: Option<String>,
        /// 0 picks a free port; the bound address is printed on stdout.
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        surrogate: PathBuf,
        #[arg(long)]
        scene: Option<PathBuf>,
        #[command(flatten)]
        inference: InferenceFlags,
    },
}

pub const DEFAULT_DATASET_COUNT: usize = 10_000;
pub const DEFAULT_REPEATS: usize = 1_000;
pub const DEFAULT_SEEDS: usize = 10;
pub const DEFAULT_PORT: u16 = 7878;
pub const DEFAULT_FRACTION: f64 = 0.6;

fn policies(name: &str) -> CliResult<Vec<Policy>> {
    if name == "all" {
        return Ok(Policy::ALL.to_vec());
    }
    name.parse::<Policy>()
        .map(|p| vec![p])
        .map_err(|e| CliError::Usage(e.to_string()))
}

pub fn run(cli: Cli) -> CliResult<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenDataset { count, out, seed, scene } => commands::gen_dataset(
            pick(count, file.count, DEFAULT_DATASET_COUNT),
            &out,
            pick(seed, file.seed, 0),
            scene.as_deref(),
        ),
        Command::Train {
            dataset,
            out,
            epochs,
            seed,
            batch_size,
            learning_rate,
        } => {
            let base = TrainConfig::default();
            let config = TrainConfig {
                epochs: pick(epochs, file.epochs, base.epochs),
                seed: pick(seed, file.seed, base.seed),
                batch_size: pick(batch_size, file.batch_size, base.batch_size),
                learning_rate: pick(learning_rate, file.learning_rate, base.learning_rate),
                ..base
            };
            commands::train(&dataset, &out, config)
        }
        Command::Bench {
            grid,
            surrogate,
            repeats,
            sim_cells,
            inference,
        } => {
            let report = commands::bench(
                grid.as_deref(),
                &surrogate,
                pick(repeats, file.repeats, DEFAULT_REPEATS),
                sim_cells.or(file.sim_cells),
                inference.inference(&file)?,
            )?;
            commands::print_json(&report)
        }
        Command::Simulate {
            policy,
            seeds,
            out,
            surrogate,
            inference,
        } => commands::simulate(
            &policies(&policy)?,
            pick(seeds, file.seeds, DEFAULT_SEEDS),
            &out,
            surrogate.as_deref(),
            &inference.task(&file)?,
        ),
        Command::InferFile {
            surrogate,
            scene,
            trajectory,
            emit_posterior,
            index,
            fraction,
            inference,
        } => {
            let session = inference.session(&file)?;
            let args = commands::InferArgs {
                surrogate: &surrogate,
                scene: scene.as_deref(),
                trajectory: &trajectory,
                emit_posterior: emit_posterior.as_deref(),
                index,
                fraction: pick(fraction, file.fraction, DEFAULT_FRACTION),
                inference: session.inference,
                prior_weights: session.prior_weights,
                conflict_radius: session.conflict_radius,
                p_safe: session.p_safe,
            };
            let (report, _) = commands::infer_file(&args)?;
            commands::print_json(&report)
        }
        Command::Serve {
            host,
            port,
            surrogate,
            scene,
            inference,
        } => {
            let shared = commands::serve_state(&surrogate, scene.as_deref(), inference.session(&file)?)?;
            let host = pick(host, file.host.clone(), "127.0.0.1".to_string());
            let port = pick(port, file.port, DEFAULT_PORT);
            let listener = TcpListener::bind((host.as_str(), port))
                .map_err(|e| CliError::Runtime(format!("cannot listen on {host}:{port}: {e}")))?;
            let addr = listener.local_addr().map_err(|e| CliError::Runtime(e.to_string()))?;
            // One line, so that a supervising process can read the address.
            println!("{}", serde_json::json!({ "listening": addr.to_string() }));
            serve::serve(listener, Arc::new(shared)).map_err(|e| CliError::Runtime(e.to_string()))
        }
    }
}
