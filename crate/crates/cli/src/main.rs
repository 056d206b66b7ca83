use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use ptsparse_core::report::emit_report;
use ptsparse_core::sparse::SPARSE_MAGIC;
use ptsparse_core::zoo::synth::{generate, SynthConfig};
use ptsparse_core::zoo::{load_idx_dataset, save_idx_dataset, train_dense, TrainConfig, CHECKPOINT_MAGIC};
use ptsparse_core::{
    bench, calibrate, evaluate, Bandwidth, BenchConfig, CalibrationPlan, Checkpoint, Dataset,
    Error, ModelSpec, SampleStrategy, SparseModel,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

mod options;

use options::{existing, required, BenchArgs, CalibrateArgs, Cli, Command, EvalArgs, SynthArgs, TrainArgs};

pub const SPARSE_FILE: &str = "sparse.bin";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or input files: exit 2.
    Config(String),
    /// Divergence or non-finite values: exit 3.
    Numerical(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(a) => a.resolve().and_then(cmd_synth),
        Command::Train(a) => a.resolve().and_then(cmd_train),
        Command::Calibrate(a) => a.resolve().and_then(cmd_calibrate),
        Command::Eval(a) => a.resolve().and_then(cmd_eval),
        Command::Bench(a) => a.resolve().and_then(cmd_bench),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(3)
        }
    }
}

/// Creates `dir` up front so an unwritable output fails before any compute.
fn output_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))
}

/// Checks the parent directory of an output file exists (creating it).
fn output_file(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => output_dir(p),
        _ => Ok(()),
    }
}

fn dataset_pair(images: Option<PathBuf>, labels: Option<PathBuf>, flag: &str) -> Result<Option<(PathBuf, PathBuf)>, CliError> {
    match (images, labels) {
        (None, None) => Ok(None),
        (Some(i), Some(l)) => {
            existing(&i, "image file")?;
            existing(&l, "label file")?;
            Ok(Some((i, l)))
        }
        _ => Err(CliError::Config(format!("--{flag}-images and --{flag}-labels go together"))),
    }
}

fn load(pair: &(PathBuf, PathBuf)) -> Result<Dataset, CliError> {
    Ok(load_idx_dataset(&pair.0, &pair.1)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let out = required(a.out, "out")?;
    output_dir(&out)?;
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        count: a.count.unwrap_or(defaults.count),
        seed: a.seed.unwrap_or(defaults.seed),
        side: a.side.unwrap_or(defaults.side),
        ..defaults
    };
    let data = generate(&cfg)?;
    let (images, labels) = (out.join("images.idx"), out.join("labels.idx"));
    save_idx_dataset(&data, &images, &labels)?;
    println!("wrote {} samples to {} and {}", data.len(), images.display(), labels.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let arch = a.arch.as_deref().unwrap_or("mlp-3x256").parse()?;
    let train_files = dataset_pair(a.dataset_images, a.dataset_labels, "dataset")?
        .ok_or_else(|| CliError::Config("missing --dataset-images and --dataset-labels".into()))?;
    let eval_files = dataset_pair(a.eval_images, a.eval_labels, "eval")?;
    let out = required(a.out, "out")?;
    output_file(&out)?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(defaults.epochs),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        learning_rate: a.learning_rate.unwrap_or(defaults.learning_rate),
        seed: a.seed.unwrap_or(defaults.seed),
    };

    let train = load(&train_files)?;
    let spec = ModelSpec::new(arch, train.input_shape(), train.classes().max(2))?;
    let outcome = train_dense(spec, &train, &cfg)?;
    let eval = match &eval_files {
        Some(p) => load(p)?,
        None => train,
    };
    let accuracy = evaluate(&outcome.network, &eval)?;
    let bytes = Checkpoint::from_network(&outcome.network).to_bytes();
    fs::write(&out, &bytes).map_err(|e| CliError::Config(format!("cannot write {}: {e}", out.display())))?;
    println!("final loss {:.4}", outcome.final_loss);
    println!("top1 {accuracy:.4}");
    println!("sha256 {}", hex::encode(Sha256::digest(&bytes)));
    println!("wrote {}", out.display());
    Ok(())
}

fn plan_from(a: &CalibrateArgs) -> Result<CalibrationPlan, CliError> {
    let mut plan = CalibrationPlan::default();
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => { $(if let Some(v) = a.$flag { plan.$field = v; })* };
    }
    set!(seed => seed, epochs => epochs, target_sparsity => target, batch_size => batch_size,
         lr_thresholds => lr_thresholds, lr_weights => lr_weights, lambda_c => lambda_c,
         debias_bridge => debias_bridge,
         project_to_target => project_to_target, calib_size => calib_size);
    plan.steps = a.steps.or(plan.steps);
    plan.learn_rates = a.learn_rates;
    if let Some(no) = a.no_reconstruct {
        plan.reconstruct = !no;
    }
    if let Some(s) = &a.allocator {
        plan.allocator = s.parse()?;
    }
    if let Some(n) = a.kde_samples {
        plan.kde.samples = n;
    }
    if let Some(h) = a.kde_bandwidth {
        plan.kde.bandwidth = Bandwidth::Relative(h);
    }
    if let Some(h) = a.kde_absolute_bandwidth {
        plan.kde.bandwidth = Bandwidth::Absolute(h);
    }
    if let Some(s) = &a.kde_strategy {
        plan.kde.strategy = match s.as_str() {
            "quantile" => SampleStrategy::Quantile,
            "random" => SampleStrategy::Random,
            _ => return Err(CliError::Config(format!("unknown KDE strategy `{s}`"))),
        };
    }
    if let Some(s) = &a.schedule {
        plan.schedule = serde_json::from_value(serde_json::Value::String(s.clone()))
            .map_err(|_| CliError::Config(format!("unknown schedule `{s}`")))?;
    }
    plan.validate()?;
    Ok(plan)
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<(), CliError> {
    let plan = plan_from(&a)?;
    let checkpoint = required(a.checkpoint, "checkpoint")?;
    existing(&checkpoint, "checkpoint")?;
    let calib_files = dataset_pair(a.dataset_images, a.dataset_labels, "dataset")?
        .ok_or_else(|| CliError::Config("missing --dataset-images and --dataset-labels".into()))?;
    let eval_files = dataset_pair(a.eval_images, a.eval_labels, "eval")?;
    let out = required(a.out, "out")?;
    output_dir(&out)?;

    let dense = Checkpoint::load(&checkpoint)?.to_network()?;
    let calib = load(&calib_files)?;
    let eval = eval_files.as_ref().map(load).transpose()?;
    let (sparse, report) = calibrate(&dense, &calib, &plan, eval.as_ref())?;
    let model_path = out.join(SPARSE_FILE);
    sparse.save(&model_path)?;
    let paths = emit_report(&report, &out)?;

    println!("target {:.4} achieved {:.4}", plan.target, report.achieved_rate);
    if let (Some(d), Some(s)) = (report.accuracy_dense, report.accuracy_sparse) {
        println!("top1 dense {d:.4} sparse {s:.4}");
    }
    println!("wall clock {:.2}s", report.wall_clock_seconds);
    for p in [&model_path, &paths.report, &paths.allocation, &paths.timing] {
        println!("wrote {}", p.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    model: String,
    kind: &'static str,
    sparsity: f64,
    top1: f64,
}

fn magic(path: &Path) -> Result<[u8; 8], CliError> {
    let mut head = [0u8; 8];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut head))
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(head)
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let models = a.models.filter(|m| !m.is_empty()).ok_or_else(|| CliError::Config("missing --model".into()))?;
    for m in &models {
        existing(m, "model")?;
    }
    let files = dataset_pair(a.dataset_images, a.dataset_labels, "dataset")?
        .ok_or_else(|| CliError::Config("missing --dataset-images and --dataset-labels".into()))?;
    if let Some(out) = &a.out {
        output_file(out)?;
    }

    let data = load(&files)?;
    let mut rows = Vec::new();
    for m in &models {
        let head = magic(m)?;
        let row = if &head == CHECKPOINT_MAGIC {
            let net = Checkpoint::load(m)?.to_network()?;
            EvalRow { model: m.display().to_string(), kind: "dense", sparsity: 0.0, top1: evaluate(&net, &data)? }
        } else if &head == SPARSE_MAGIC {
            let sparse = SparseModel::load(m)?;
            EvalRow {
                model: m.display().to_string(),
                kind: "sparse",
                sparsity: sparse.global_rate(),
                top1: evaluate(&sparse, &data)?,
            }
        } else {
            return Err(CliError::Config(format!("{} is neither a checkpoint nor a sparse model", m.display())));
        };
        println!("{}\t{}\tsparsity {:.4}\ttop1 {:.4}", row.model, row.kind, row.sparsity, row.top1);
        rows.push(row);
    }
    if let Some(out) = &a.out {
        write_json(out, &rows)?;
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<(), CliError> {
    let sparse_path = required(a.sparse, "sparse")?;
    existing(&sparse_path, "sparse model")?;
    let checkpoint = required(a.checkpoint, "checkpoint")?;
    existing(&checkpoint, "checkpoint")?;
    if let Some(out) = &a.out {
        output_file(out)?;
    }
    let defaults = BenchConfig::default();
    let cfg = BenchConfig {
        batch: a.batch_size.unwrap_or(defaults.batch),
        warmup: a.warmup.unwrap_or(defaults.warmup),
        repetitions: a.repetitions.unwrap_or(defaults.repetitions),
        seed: a.seed.unwrap_or(defaults.seed),
    };

    let sparse = SparseModel::load(&sparse_path)?;
    let dense = Checkpoint::load(&checkpoint)?.to_network()?;
    let result = bench(&sparse, &dense, &cfg)?;
    println!("sparsity {:.4}", sparse.global_rate());
    println!("latency sparse {:.3} ms dense {:.3} ms speedup {:.2}x", result.latency_sparse_ms, result.latency_dense_ms, result.speedup);
    println!("memory sparse {} B dense {} B ratio {:.3}", result.bytes_sparse, result.bytes_dense, result.memory_ratio());
    if let Some(out) = &a.out {
        write_json(out, &result)?;
    }
    Ok(())
}
