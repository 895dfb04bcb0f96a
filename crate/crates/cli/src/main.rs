//! `spdnn`: merge architectures, generate data, train and evaluate.
//!
//! Exit codes: 0 success, 2 bad input or usage, 3 parameter parity not
//! reachable, 4 artifacts do not fit each other, 5 numeric failure.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spdnn_core::arch_ir::{parse_network, NetworkSpec};
use spdnn_core::engine::{checkpoint, EngineError, ParameterStore, Real};
use spdnn_core::graph::{contract, dump, network_to_graph, parallel_compose};
use spdnn_core::merge::{parse_any, spdnn_merge_report, MergeError, MergeOptions, MergedNetworkSpec};
use spdnn_core::metrics::{aggregate_report, pooled_report, MetricsError};
use spdnn_core::synth::{self, DataError, SegmentationSet, Subset};
use spdnn_core::train::{self, loss_csv, Precision, TrainConfig, TrainError};

#[derive(Parser)]
#[command(name = "spdnn", version, about = "Semi-parallel network merging and training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge parent architectures into one network file.
    Merge(MergeArgs),
    /// Print per-layer and total trainable parameter counts.
    Params {
        /// Network files (plain or merged).
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Generate a synthetic ring-segmentation dataset.
    GenData(GenArgs),
    /// Train a network and write a checkpoint plus a loss CSV.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Print the composed graph before and after contraction.
    GraphDump {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct MergeArgs {
    /// Parent architecture files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Allowed relative deviation from the parameter target.
    #[arg(long, default_value_t = 0.10)]
    tolerance: f64,
    /// Parameter target; 0 means the mean of the parents.
    #[arg(long, default_value_t = 0)]
    target_params: u64,
    /// Kernel size of the convolutional output merge.
    #[arg(long, default_value_t = 1)]
    merge_kernel: usize,
    /// Keep parent output sigmoids in front of the output merge.
    #[arg(long)]
    keep_branch_sigmoid: bool,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Image side length in pixels (at least 16).
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    network: PathBuf,
    data: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = Precision::F32)]
    precision: Precision,
    #[arg(long)]
    loss_csv: PathBuf,
    /// Checkpoint path.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    network: PathBuf,
    data: PathBuf,
    /// A pixel is positive when the prediction is at least this.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// train, validation, test or all.
    #[arg(long, default_value = "test")]
    split: Subset,
    /// Score the summed counts instead of averaging per image.
    #[arg(long)]
    pooled: bool,
    /// Also write one row per image here.
    #[arg(long)]
    per_image: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

const INPUT: u8 = 2;
const INFEASIBLE: u8 = 3;
const MISMATCH: u8 = 4;
const NUMERIC: u8 = 5;

impl From<MergeError> for Failure {
    fn from(e: MergeError) -> Self {
        let code = match e {
            MergeError::Infeasible { .. } => INFEASIBLE,
            _ => INPUT,
        };
        Failure::new(code, e.to_string())
    }
}

fn engine_code(e: &EngineError) -> u8 {
    match e {
        EngineError::Mismatch { .. } | EngineError::ChannelMismatch { .. } | EngineError::Shape(_) => MISMATCH,
        EngineError::NonFinite { .. } | EngineError::DegenerateBatch { .. } => NUMERIC,
        EngineError::Format(_) | EngineError::Io(_) => INPUT,
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        Failure::new(engine_code(&e), e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::Config(_) | TrainError::Metrics(_) => INPUT,
            TrainError::Shape(_) => MISMATCH,
            TrainError::Numeric { .. } => NUMERIC,
            TrainError::Engine(inner) => engine_code(inner),
        };
        Failure::new(code, e.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::new(INPUT, e.to_string())
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        Failure::new(INPUT, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::new(INPUT, format!("{}: {e}", path.display())))
}

fn read_chain(path: &Path) -> Result<NetworkSpec, Failure> {
    parse_network(&read(path)?).map_err(|e| Failure::new(INPUT, format!("{}: {e}", path.display())))
}

fn read_any(path: &Path) -> Result<MergedNetworkSpec, Failure> {
    parse_any(&read(path)?).map_err(|e| Failure::new(INPUT, format!("{}: {e}", path.display())))
}

fn read_data(path: &Path) -> Result<SegmentationSet, Failure> {
    synth::load_set(path).map_err(|e| Failure::new(INPUT, format!("{}: {e}", path.display())))
}

/// Writes to a sibling temporary file, then renames over `path`.
fn write_atomic(path: &Path, bytes: &[u8]) -> Outcome {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let fail = |e: std::io::Error| Failure::new(INPUT, format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(fail)?;
    tmp.write_all(bytes).map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

fn cmd_merge(a: MergeArgs) -> Outcome {
    let parents = a.inputs.iter().map(|p| read_chain(p)).collect::<Result<Vec<_>, _>>()?;
    let opts = MergeOptions {
        target_params: a.target_params,
        parity_tolerance: a.tolerance,
        output_merge_kernel: a.merge_kernel,
        keep_branch_sigmoid: a.keep_branch_sigmoid,
    };
    let report = spdnn_merge_report(&parents, &opts)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for (p, n) in parents.iter().zip(&report.parent_params) {
        println!("parent {} params {n}", p.name());
    }
    println!("target params {:.1}", report.target_params);
    println!("merged params {}", report.merged_params);
    println!("parity {:+.3}%", report.parity() * 100.0);
    println!("nodes {}", report.network.nodes.len());
    write_atomic(&a.output, report.network.serialize().as_bytes())
}

fn cmd_params(files: &[PathBuf]) -> Outcome {
    for path in files {
        let net = read_any(path)?;
        println!("{} ({})", net.name, path.display());
        for node in &net.nodes {
            println!("  {:<16} {}", node.id, node.op.param_count(node.in_shape));
        }
        if net.output_merge.param_count() > 0 {
            println!("  {:<16} {}", "outmerge", net.output_merge.param_count());
        }
        println!("  total {}", net.param_count());
    }
    Ok(())
}

fn cmd_gen(a: GenArgs) -> Outcome {
    let set = synth::generate(a.seed, a.count, a.size)?;
    write_atomic(&a.output, &set.to_bytes())?;
    println!(
        "wrote {} samples of {}x{} (train {}, validation {}, test {}) seed {}",
        set.len(),
        a.size,
        a.size,
        set.split.train.len(),
        set.split.validation.len(),
        set.split.test.len(),
        a.seed
    );
    Ok(())
}

fn run_training<T: Real>(
    spec: &MergedNetworkSpec,
    data: &SegmentationSet,
    cfg: &TrainConfig,
) -> Result<(Vec<u8>, String), Failure> {
    let outcome = train::train::<T>(spec, data, cfg, |e| {
        println!(
            "epoch {} train_loss {:.6} val_loss {:.6}",
            e.epoch, e.train_loss, e.val_loss
        );
    })?;
    Ok((checkpoint::encode(&outcome.store), loss_csv(&outcome.history)))
}

fn cmd_train(a: TrainArgs) -> Outcome {
    let cfg = TrainConfig {
        learning_rate: a.lr,
        momentum: a.momentum,
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
        precision: a.precision,
    };
    cfg.validate()?;
    let spec = read_any(&a.network)?;
    let data = read_data(&a.data)?;
    let resolved = format!(
        "network={} data={} {cfg} loss_csv={} checkpoint={}",
        a.network.display(),
        a.data.display(),
        a.loss_csv.display(),
        a.output.display()
    );
    println!("config {resolved}");
    let (ckpt, csv) = match cfg.precision {
        Precision::F32 => run_training::<f32>(&spec, &data, &cfg)?,
        Precision::F64 => run_training::<f64>(&spec, &data, &cfg)?,
    };
    write_atomic(&a.output, &ckpt)?;
    write_atomic(&a.loss_csv, csv.as_bytes())?;
    let mut sidecar = a.loss_csv.clone().into_os_string();
    sidecar.push(".config");
    write_atomic(Path::new(&sidecar), format!("{resolved}\n").as_bytes())
}

fn evaluate<T: Real>(
    spec: &MergedNetworkSpec,
    stored: &[checkpoint::StoredTensor],
    data: &SegmentationSet,
    a: &EvalArgs,
) -> Result<Vec<spdnn_core::metrics::MetricReport>, Failure> {
    let mut store = ParameterStore::<T>::zeros(spec);
    checkpoint::apply(&mut store, stored)?;
    Ok(train::evaluate(
        spec,
        &store,
        data,
        &data.indices(a.split),
        a.threshold,
    )?)
}

fn cmd_eval(a: EvalArgs) -> Outcome {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Failure::new(
            INPUT,
            format!("threshold {} is outside [0, 1]", a.threshold),
        ));
    }
    let spec = read_any(&a.network)?;
    let data = read_data(&a.data)?;
    let bytes =
        std::fs::read(&a.checkpoint).map_err(|e| Failure::new(INPUT, format!("{}: {e}", a.checkpoint.display())))?;
    let stored = checkpoint::decode(&bytes)?;
    let per_image = match checkpoint::dtype_tag(&bytes) {
        Some(8) => evaluate::<f64>(&spec, &stored, &data, &a)?,
        _ => evaluate::<f32>(&spec, &stored, &data, &a)?,
    };
    if per_image.is_empty() {
        return Err(Failure::new(INPUT, "the selected split is empty"));
    }
    let report = if a.pooled {
        pooled_report(&per_image)?
    } else {
        aggregate_report(&per_image)?
    };
    write_atomic(&a.output, report.summary_csv().as_bytes())?;
    if let Some(path) = &a.per_image {
        write_atomic(path, aggregate_report(&per_image)?.per_image_csv().as_bytes())?;
    }
    let mut summary = String::new();
    for line in report.summary_csv().lines().skip(1) {
        let mut f = line.split(',');
        let _ = writeln!(summary, "{:<13} {}", f.next().unwrap_or(""), f.next().unwrap_or(""));
    }
    print!("{} images, threshold {}\n{summary}", per_image.len(), a.threshold);
    Ok(())
}

fn cmd_graph_dump(files: &[PathBuf]) -> Outcome {
    let graphs = files
        .iter()
        .map(|p| read_chain(p).map(|n| network_to_graph(&n)))
        .collect::<Result<Vec<_>, _>>()?;
    let composed = parallel_compose(&graphs).map_err(|e| Failure::new(INPUT, e.to_string()))?;
    print!(
        "== composed ==\n{}== contracted ==\n{}",
        dump(&composed),
        dump(&contract(&composed))
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { INPUT } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Merge(a) => cmd_merge(a),
        Command::Params { files } => cmd_params(&files),
        Command::GenData(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::GraphDump { files } => cmd_graph_dump(&files),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
