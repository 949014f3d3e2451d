mod commands;
mod grids;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "vstain", version, about = "Foundation-model-conditioned H&E to IHC virtual staining")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Root seed; overrides `seed` from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Compute device; only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    pub device: String,
    /// Worker threads for data preparation and generation.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// TOML run config; `VSTAIN__section__key` environment variables override keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackboneArg {
    Toy,
    Pretrained,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ClassifierArg {
    Stub,
    External,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic paired dataset, its manifest and a CPU-sized config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        pairs_per_stain: usize,
        #[arg(long, default_value_t = 1)]
        test_pairs_per_stain: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
    },
    /// Cache backbone token grids for every manifest image.
    ExtractFeatures {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = BackboneArg::Toy)]
        backbone: BackboneArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the unified generator; writes checkpoints, the loss log and loss curves.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop at this step instead of `train.steps`.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Generate IHC images with the checkpoint's EMA weights.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, conflicts_with = "image", required_unless_present = "image")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        image: Option<PathBuf>,
        /// Stain token by name or index; defaults to each manifest sample's own.
        #[arg(long, required_unless_present = "manifest")]
        token: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the metric report over the manifest's test split.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-tissue failure rates, worst-case grids and the failure predictor.
    StratifyFailures {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = ClassifierArg::Stub)]
        classifier: ClassifierArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compose comparison grids: one row per file, one column per directory.
    ExportGrids {
        /// Source directories with identical relative file sets, in column order.
        #[arg(long, num_args = 1.., required = true)]
        dirs: Vec<PathBuf>,
        /// Orders rows and labels stain blocks.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        tile: usize,
        /// Rows per output image.
        #[arg(long, default_value_t = 8)]
        rows: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render loss curves from a loss log.
    PlotLog {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
