use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sparsecomp::{Padding, Split};

mod commands;
mod config;

/// Thumbnail compression by masked convolutional sparse coding, with a
/// bottleneck autoencoder baseline.
#[derive(Parser, Debug)]
#[command(name = "sparsecomp", version, about, args_override_self = true)]
pub struct Cli {
    /// Worker threads (defaults to all cores)
    #[arg(long)]
    pub threads: Option<usize>,
    /// key=value file whose entries act as flags of the chosen command
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
#[command(args_override_self = true)]
pub enum Command {
    /// Learn a convolutional dictionary and write it as a .scd file
    TrainDict {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        lca: LcaArgs,
        #[arg(long)]
        out: PathBuf,
        /// CSV of per-batch energy, sparsity and PSNR
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Train the bottleneck autoencoder and write it as a .sca file
    TrainAe {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        ae: AeArgs,
        #[arg(long)]
        out: PathBuf,
        /// CSV of per-batch mean loss
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Train one epoch per lambda and report held-out sparsity and PSNR
    SweepLambda {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        lca: LcaArgs,
        /// Comma-separated lambda values
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
        /// Number of test-split images used for scoring
        #[arg(long, default_value_t = 100)]
        holdout: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keep half the pixels of each image and write .sci files
    Compress {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value_t = MaskArg::Checkerboard)]
        mask: MaskArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Reconstruct .sci files with a dictionary into a tensor directory
    Decompress {
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        dict: PathBuf,
        #[command(flatten)]
        lca: LcaArgs,
        /// Return the sparse reconstruction everywhere instead of restoring stored pixels
        #[arg(long)]
        pure_reconstruction: bool,
        /// Method tag written to the manifest (defaults to the mask kind)
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Encode and decode images with a trained autoencoder
    AeRoundtrip {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// PSNR/SSIM report of reconstruction directories against originals
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        /// Tensor directory of originals; overrides --data-dir
        #[arg(long)]
        original: Option<PathBuf>,
        /// Tensor directory of reconstructions (repeatable)
        #[arg(long, required = true)]
        recon: Vec<PathBuf>,
        /// Summary CSV
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Directory for per-image CSVs, one per method
        #[arg(long)]
        per_image: Option<PathBuf>,
    },
    /// Write reconstructions (or originals) with labels as tensor files
    ExportRecons {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        method: MethodArg,
        /// Dictionary for the sparse-coding methods
        #[arg(long)]
        dict: Option<PathBuf>,
        /// Autoencoder checkpoint for the bottleneck method
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        lca: LcaArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        pure_reconstruction: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Directory holding the CIFAR-10 binary batches
    #[arg(long, default_value = "data/cifar-10-batches-bin")]
    pub data_dir: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: Split,
    /// Use only the first N images
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 1024)]
    pub atoms: usize,
    /// Square patch side
    #[arg(long, default_value_t = 16)]
    pub patch: usize,
    #[arg(long, default_value_t = 2)]
    pub stride: usize,
    #[arg(long, default_value = "same")]
    pub padding: Padding,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 50)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2)]
    pub epochs: usize,
    #[arg(long, value_enum, default_value_t = MaskArg::Checkerboard)]
    pub mask: MaskArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct LcaArgs {
    /// Sparsity penalty (decompression defaults to the dictionary's own)
    #[arg(long)]
    pub lambda: Option<f64>,
    /// LCA step size
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Relative energy change that counts as converged
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct AeArgs {
    #[arg(long, default_value_t = 0.005)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 50)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Decode with the transposed encoder instead of a dense layer
    #[arg(long)]
    pub tied_weights: bool,
    /// Encoder feature maps; 24 gives a half-size code, 12 a quarter
    #[arg(long, default_value_t = 24)]
    pub code_channels: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskArg {
    Checkerboard,
    Random,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodArg {
    Original,
    Checkerboard,
    Random,
    Bottleneck,
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let args = match config::expand(raw) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code());
        }
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
