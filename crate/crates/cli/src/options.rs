use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::CliError;

#[derive(Parser, Debug)]
#[command(name = "ptsparse", version, about = "Post-training sparsity calibration for small networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic digit dataset as IDX files.
    Synth(SynthArgs),
    /// Train a dense toy model and write its checkpoint.
    Train(TrainArgs),
    /// Learn per-layer thresholds for a dense checkpoint and write the sparse model and report.
    Calibrate(CalibrateArgs),
    /// Top-1 accuracy of one or more checkpoints or sparse models.
    Eval(EvalArgs),
    /// Latency and memory of a sparse model against its dense checkpoint.
    Bench(BenchArgs),
}

/// Declares an options struct whose every field is optional, readable both
/// from flags and from a TOML file, with flags winning.
macro_rules! options {
    ($(#[$sm:meta])* pub struct $name:ident { $($(#[$fm:meta])* $field:ident: $ty:ty,)* }) => {
        $(#[$sm])*
        #[derive(Args, Debug, Default, Deserialize)]
        #[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
        pub struct $name {
            /// TOML file with defaults for any of these flags.
            #[arg(long)]
            #[serde(skip)]
            pub config: Option<PathBuf>,
            $($(#[$fm])* pub $field: Option<$ty>,)*
        }

        impl $name {
            /// Fills every unset flag from the `--config` file, if one was given.
            pub fn resolve(self) -> Result<Self, CliError> {
                let Some(path) = self.config.clone() else { return Ok(self) };
                let file: Self = read_config(&path)?;
                Ok(Self { config: self.config, $($field: self.$field.or(file.$field),)* })
            }
        }
    };
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
}

options! {
    pub struct SynthArgs {
        /// Directory for `images.idx` and `labels.idx`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        /// Image side in pixels.
        #[arg(long)]
        side: usize,
    }
}

options! {
    pub struct TrainArgs {
        /// `mlp-<depth>x<width>` or `cnn-2conv-2fc`.
        #[arg(long)]
        arch: String,
        #[arg(long)]
        dataset_images: PathBuf,
        #[arg(long)]
        dataset_labels: PathBuf,
        /// Held-out images for the printed accuracy (defaults to the training set).
        #[arg(long)]
        eval_images: PathBuf,
        #[arg(long)]
        eval_labels: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        batch_size: usize,
        #[arg(long)]
        learning_rate: f64,
    }
}

options! {
    pub struct CalibrateArgs {
        /// Dense checkpoint to sparsify.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Calibration images; labels are only checked for count.
        #[arg(long)]
        dataset_images: PathBuf,
        #[arg(long)]
        dataset_labels: PathBuf,
        /// Adds dense and sparse accuracy on this set to the report.
        #[arg(long)]
        eval_images: PathBuf,
        #[arg(long)]
        eval_labels: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Passes over the calibration set.
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        target_sparsity: f64,
        /// fcpts, uniform, erk or l2norm.
        #[arg(long)]
        allocator: String,
        /// Learn the thresholds (default: only for fcpts).
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        learn_rates: bool,
        /// Skip the weight reconstruction updates.
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        no_reconstruct: bool,
        /// Step budget; overrides --epochs.
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        batch_size: usize,
        #[arg(long)]
        lr_thresholds: f64,
        #[arg(long)]
        lr_weights: f64,
        #[arg(long)]
        lambda_c: f64,
        #[arg(long)]
        kde_samples: usize,
        /// Kernel bandwidth as a multiple of each layer's weight std.
        #[arg(long, conflicts_with = "kde_absolute_bandwidth")]
        kde_bandwidth: f64,
        /// Kernel bandwidth in raw weight units, the same for every layer.
        #[arg(long)]
        kde_absolute_bandwidth: f64,
        /// quantile or random.
        #[arg(long)]
        kde_strategy: String,
        /// Shift each layer's bridge onto its hard count at every refit.
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        debias_bridge: bool,
        /// constant or cosine.
        #[arg(long)]
        schedule: String,
        /// Rescale all thresholds at the end to land within 0.001 of the target.
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        project_to_target: bool,
        #[arg(long)]
        calib_size: usize,
    }
}

options! {
    pub struct EvalArgs {
        /// Checkpoint or sparse model files; one accuracy row each.
        #[arg(long = "model", num_args = 1..)]
        models: Vec<PathBuf>,
        #[arg(long)]
        dataset_images: PathBuf,
        #[arg(long)]
        dataset_labels: PathBuf,
        /// JSON file for the rows.
        #[arg(long)]
        out: PathBuf,
    }
}

options! {
    pub struct BenchArgs {
        #[arg(long)]
        sparse: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        batch_size: usize,
        #[arg(long)]
        warmup: usize,
        #[arg(long)]
        repetitions: usize,
        #[arg(long)]
        seed: u64,
        /// JSON file for the result.
        #[arg(long)]
        out: PathBuf,
    }
}

/// `value` or a configuration error naming the flag.
pub fn required<T>(value: Option<T>, flag: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Config(format!("missing --{flag}")))
}

/// Fails unless `path` is an existing file.
pub fn existing(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} {} does not exist", path.display())))
    }
}
