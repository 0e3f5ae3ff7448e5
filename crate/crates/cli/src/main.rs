use std::path::PathBuf;
use std::process::ExitCode;

use cellseg::experiment::{
    cmd_evaluate, cmd_fine_tune, cmd_grid_search, cmd_meta_train, cmd_prepare_data, cmd_report, cmd_run_protocol,
    cmd_synth_gen, cmd_transfer_train, EvaluateArgs, FineTuneArgs, RunConfig, RunOptions,
};
use cellseg::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

/// Few-shot meta-learning for binary cell segmentation.
#[derive(Parser)]
#[command(name = "cellseg", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Compute device; only `cpu` is supported.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Continue from the ledger and checkpoints in the output directory.
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Crop the training domains into `<output>/crops`.
    PrepareData,
    /// Write synthetic domains under the data root.
    SynthGen,
    /// Meta-train on the source domains; writes `ckpt/meta.ckpt`.
    MetaTrain,
    /// Train the pooled transfer baseline; writes `ckpt/transfer.ckpt`.
    TransferTrain,
    /// Fine-tune a checkpoint on K shots of a target domain.
    FineTune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long, short = 'k')]
        k: usize,
        #[arg(long, default_value_t = 0)]
        repeat: usize,
    },
    /// Mean IoU of a checkpoint on a target domain.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: String,
        /// Score only the test images left by this K-shot selection.
        #[arg(long, short = 'k')]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        repeat: usize,
    },
    /// Run the method × target × K protocol and write results and charts.
    RunProtocol {
        /// Stop after this many new (method, target, K) cells.
        #[arg(long)]
        max_cells: Option<usize>,
    },
    /// Grid search over the entropy and distillation weights.
    GridSearch {
        /// Comma-separated α values (overrides the configuration).
        #[arg(long, value_delimiter = ',')]
        alpha: Option<Vec<f64>>,
        /// Comma-separated β values (overrides the configuration).
        #[arg(long, value_delimiter = ',')]
        beta: Option<Vec<f64>>,
    },
    /// Render charts from `<output>/summary.csv`.
    Report,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    if common.device != "cpu" {
        return Err(Error::Config(format!(
            "device {:?} is not available; this build computes on the CPU only",
            common.device
        )));
    }
    let mut config = match &common.config {
        Some(path) => RunConfig::read(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.output {
        config.output_dir = out.clone();
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let mut config = load_config(&cli.common)?;
    let resume = cli.common.resume;
    Ok(match cli.command {
        Command::PrepareData => {
            let (manifest, written) = cmd_prepare_data(&config)?;
            json!({ "sha256": manifest.sha256, "domains": manifest.domains, "written": written })
        }
        Command::SynthGen => json!({ "domains": cmd_synth_gen(&config)? }),
        Command::MetaTrain => json!({ "checkpoint": cmd_meta_train(&config, resume)? }),
        Command::TransferTrain => json!({ "checkpoint": cmd_transfer_train(&config)? }),
        Command::FineTune { checkpoint, target, k, repeat } => {
            let (path, sel) = cmd_fine_tune(&config, &FineTuneArgs { checkpoint, target, k, repeat })?;
            json!({ "checkpoint": path, "shot_ids": sel.shot_ids })
        }
        Command::Evaluate { checkpoint, target, k, repeat } => {
            let args = EvaluateArgs { checkpoint, target, selection: k.map(|k| (k, repeat)) };
            let (mean_iou, images) = cmd_evaluate(&config, &args)?;
            json!({ "mean_iou": mean_iou, "images": images })
        }
        Command::RunProtocol { max_cells } => {
            let run = cmd_run_protocol(&config, RunOptions { resume, max_new_cells: max_cells })?;
            json!({ "results": run.results.len(), "complete": run.complete, "output": config.output_dir })
        }
        Command::GridSearch { alpha, beta } => {
            if let Some(a) = alpha {
                config.grid_search.alpha_grid = a;
            }
            if let Some(b) = beta {
                config.grid_search.beta_grid = b;
            }
            let rows = cmd_grid_search(&config)?;
            json!({ "best": rows.first(), "rows": rows.len() })
        }
        Command::Report => json!({ "plots": cmd_report(&config.output_dir)? }),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
