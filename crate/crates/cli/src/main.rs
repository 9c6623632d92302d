//! `dcnn`: dataset generation, training, evaluation and the numerical checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use dcnn_core::data::{
    generate, read_dataset, read_pgm16_depth, write_dataset, DatasetSpec, Scene,
};
use dcnn_core::metrics::{depth_variance_report, VarianceKind};
use dcnn_core::model::{read_checkpoint, LayerKind, Model, ModelSpec, Preset};
use dcnn_core::rftrace::{kernel_profile, rf_trace, rf_trace_ones};
use dcnn_core::similarity::{DEFAULT_ALPHA, DEFAULT_CLIP_THRESHOLD};
use dcnn_core::train::{
    bench_conv, evaluate, gradcheck_model, gradcheck_op, gradcheck_scene, train, AugmentConfig,
    BenchConfig, LrMode, OpTarget, TrainConfig, BENCH_CSV_HEADER, GRADCHECK_EPS, MODEL_SPEC_FILE,
};
use dcnn_core::{Error, Rng, SimilaritySpec};

#[derive(Parser)]
#[command(
    name = "dcnn",
    version,
    about = "Depth-aware CNN toolkit for RGB-D segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic RGB-D dataset.
    GenData(GenDataArgs),
    /// Train a preset network with SGD and poly decay.
    Train(TrainArgs),
    /// Segmentation metrics of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Time standard against depth-aware convolution.
    Bench(BenchArgs),
    /// Trace the receptive field of stacked depth-aware convolutions.
    RfTrace(RfTraceArgs),
    /// Per-class and whole-image depth variance of a dataset.
    DepthVariance(DepthVarianceArgs),
}

#[derive(Args, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 250)]
    images: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Give class 1 the background's colors so only depth separates them.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    ambiguous: bool,
    /// Standard deviation of RGB noise.
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    /// Standard deviation of depth noise in meters.
    #[arg(long, default_value_t = 0.0)]
    depth_noise: f64,
    #[arg(long, default_value_t = 0.0)]
    hole_prob: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    dump_config: bool,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SimKind {
    Exp,
    Clip,
    One,
}

#[derive(Args, Serialize)]
struct SimArgs {
    #[arg(long, value_enum, default_value = "exp")]
    sim: SimKind,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Depth difference in meters at which the clip similarity drops to 0.
    #[arg(long, default_value_t = DEFAULT_CLIP_THRESHOLD)]
    clip_threshold: f64,
}

impl SimArgs {
    fn resolve(&self) -> Result<SimilaritySpec, Error> {
        match self.sim {
            SimKind::Exp => SimilaritySpec::exponential(self.alpha),
            SimKind::Clip => SimilaritySpec::clip(self.clip_threshold),
            SimKind::One => Ok(SimilaritySpec::ConstantOne),
        }
    }
}

/// Contiguous slice of a dataset, for train/test splits of one directory.
#[derive(Args, Serialize)]
struct SubsetArgs {
    /// Leading images to leave out.
    #[arg(long, default_value_t = 0)]
    skip: usize,
    /// Number of images to use after skipping (default: all).
    #[arg(long)]
    take: Option<usize>,
}

impl SubsetArgs {
    fn load(&self, root: &Path) -> Result<Vec<Scene>, Error> {
        let scenes = read_dataset(root)?;
        let end = self
            .take
            .map_or(scenes.len(), |t| (self.skip + t).min(scenes.len()));
        if self.skip >= end {
            return Err(Error::Data(format!(
                "no images left in {} after skipping {}",
                root.display(),
                self.skip
            )));
        }
        Ok(scenes[self.skip..end].to_vec())
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_preset, default_value = "dcnn-mini")]
    preset: Preset,
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, value_parser = parse_lr_mode, default_value = "poly")]
    lr_mode: LrMode,
    /// Iterations between learning-rate updates.
    #[arg(long, default_value_t = 10)]
    lr_period: usize,
    #[arg(long, default_value_t = 0.9)]
    power: f64,
    /// Random scale, crop and color jitter.
    #[arg(long)]
    augment: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also checkpoint every N iterations.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    subset: SubsetArgs,
    #[arg(long)]
    dump_config: bool,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_lr_mode(s: &str) -> Result<LrMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Model spec JSON (default: the one saved next to the checkpoint).
    #[arg(long)]
    model_spec: Option<PathBuf>,
    #[command(flatten)]
    subset: SubsetArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    dump_config: bool,
}

#[derive(Args, Serialize)]
struct GradcheckArgs {
    /// An operator name, `model`, or `all`.
    #[arg(long, default_value = "all")]
    target: String,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = GRADCHECK_EPS)]
    eps: f64,
    /// Maximum relative error (default 1e-6 for operators, 1e-5 for the model).
    #[arg(long)]
    tolerance: Option<f64>,
    /// Entries sampled per parameter block in model checks.
    #[arg(long, default_value_t = 4)]
    per_block: usize,
    /// Image side for model checks.
    #[arg(long, default_value_t = 12)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    dump_config: bool,
}

#[derive(Args, Serialize)]
struct BenchArgs {
    /// Comma-separated `CHANNELSxSIDE` configurations.
    #[arg(long, default_value = "64x128")]
    sizes: String,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    dump_config: bool,
}

#[derive(Args, Serialize)]
#[command(group(ArgGroup::new("weights").required(true).args(["checkpoint", "fresh"])))]
struct RfTraceArgs {
    /// Use the spatial weight profile of a trained network's depth-aware
    /// layers (their own similarity applies; the sim flags are ignored).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use all-ones kernels.
    #[arg(long)]
    fresh: bool,
    #[arg(long)]
    model_spec: Option<PathBuf>,
    /// 16-bit PGM depth in millimeters.
    #[arg(long)]
    depth_file: PathBuf,
    /// Output pixel as `y,x`.
    #[arg(long, value_parser = parse_pixel)]
    pixel: (usize, usize),
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[command(flatten)]
    sim: SimArgs,
    /// Heatmap PGM path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    dump_config: bool,
}

fn parse_pixel(s: &str) -> Result<(usize, usize), String> {
    let (y, x) = s.split_once(',').ok_or("expected y,x")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(y)?, p(x)?))
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum VarianceArg {
    Population,
    Sample,
}

#[derive(Args, Serialize)]
struct DepthVarianceArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, value_enum, default_value = "population")]
    variance: VarianceArg,
    #[command(flatten)]
    subset: SubsetArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    dump_config: bool,
}

enum Failure {
    Core(Error),
    /// A numerical check ran but missed its threshold.
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) | Error::Spec(_) | Error::Shape(_) => 2,
        Error::Io { .. } | Error::Format { .. } | Error::Data(_) | Error::UndefinedMetric(_) => 3,
        _ => 1,
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), Error> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        }),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn dump(value: &impl Serialize) -> Outcome {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("plain data")
    );
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>, Error> {
    fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_spec(checkpoint: &Path, explicit: Option<&Path>) -> Result<ModelSpec, Error> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => checkpoint.with_file_name(MODEL_SPEC_FILE),
    };
    let text = read_file(&path)?;
    serde_json::from_slice(&text).map_err(|e| Error::Format {
        offset: 0,
        message: format!("{}: {e}", path.display()),
    })
}

fn load_model(
    checkpoint: &Path,
    explicit_spec: Option<&Path>,
    input_hw: (usize, usize),
) -> Result<Model, Error> {
    let spec = load_spec(checkpoint, explicit_spec)?;
    let tensors = read_checkpoint(&read_file(checkpoint)?[..])?;
    let mut model = Model::build(spec, input_hw, &mut Rng::new(0))?;
    model.load_parameters(&tensors)?;
    Ok(model)
}

fn gen_data(a: &GenDataArgs) -> Outcome {
    let spec = DatasetSpec {
        num_images: a.images,
        height: a.size,
        width: a.size,
        num_classes: a.classes,
        ambiguous: a.ambiguous,
        rgb_noise: a.noise,
        depth_noise: a.depth_noise,
        hole_prob: a.hole_prob,
        seed: a.seed,
        ..DatasetSpec::default()
    };
    if a.dump_config {
        return dump(&json!({ "out": a.out, "dataset": spec }));
    }
    let scenes = generate(&spec)?;
    write_dataset(&a.out, &scenes)?;
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Outcome {
    let sim = a.sim.resolve()?;
    let config = TrainConfig {
        base_lr: a.lr,
        momentum: a.momentum,
        batch_size: a.batch_size,
        max_iter: a.iters,
        lr_period: a.lr_period,
        power: a.power,
        lr_mode: a.lr_mode,
        seed: a.seed,
        augment: if a.augment {
            AugmentConfig::all()
        } else {
            AugmentConfig::default()
        },
        checkpoint_every: a.checkpoint_every,
    };
    if a.dump_config {
        return dump(&json!({
            "data": a.data,
            "out": a.out,
            "preset": a.preset,
            "similarity": sim,
            "subset": a.subset,
            "train": config,
        }));
    }
    config.validate()?;
    let scenes = a.subset.load(&a.data)?;
    let num_classes = scenes
        .iter()
        .flat_map(|s| s.labels.as_slice())
        .filter(|&&l| l != dcnn_core::IGNORE_LABEL)
        .max()
        .map_or(1, |&l| l as usize + 1);
    let spec = ModelSpec::preset(a.preset, num_classes, sim);
    let mut model = Model::build(spec, scenes[0].dims(), &mut Rng::new(a.seed))?;
    let outcome = train(&mut model, &scenes, &config, Some(&a.out))?;
    let last = outcome.losses.last().map(|r| r.loss);
    println!(
        "{}",
        json!({ "iterations": outcome.losses.len(), "final_loss": last, "checkpoints": outcome.checkpoints })
    );
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Outcome {
    if a.dump_config {
        return dump(a);
    }
    let scenes = a.subset.load(&a.data)?;
    let model = load_model(&a.checkpoint, a.model_spec.as_deref(), scenes[0].dims())?;
    let report = evaluate(&model, &scenes)?;
    emit(&report.to_json(), a.out.as_deref())?;
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Outcome {
    if a.dump_config {
        return dump(a);
    }
    let targets: Vec<Option<OpTarget>> = match a.target.as_str() {
        "all" => OpTarget::ALL.into_iter().map(Some).chain([None]).collect(),
        "model" => vec![None],
        name => vec![Some(name.parse::<OpTarget>()?)],
    };
    if a.instances == 0 {
        return Err(Error::Argument("need at least one instance".into()).into());
    }
    let root = Rng::new(a.seed);
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for (t, target) in targets.iter().enumerate() {
        let name = target.map_or("model", |t| t.name());
        let tolerance = a
            .tolerance
            .unwrap_or(if target.is_some() { 1e-6 } else { 1e-5 });
        let mut worst = 0.0f64;
        let mut checked = 0;
        for i in 0..a.instances {
            let mut rng = root.derive(((t as u64) << 32) | i as u64);
            let report = match target {
                Some(op) => gradcheck_op(*op, &mut rng, a.eps)?,
                None => {
                    let scene = gradcheck_scene(&mut rng, a.size, a.size, 4)?;
                    let spec = ModelSpec::preset(Preset::DcnnMini, 4, SimilaritySpec::default());
                    let model = Model::build(spec, scene.dims(), &mut rng)?;
                    gradcheck_model(&model, &scene, a.eps, a.per_block, &mut rng)?
                }
            };
            worst = worst.max(report.max_rel());
            checked += report.checked();
        }
        if worst >= tolerance {
            failed.push(name);
        }
        rows.push(json!({
            "target": name,
            "instances": a.instances,
            "checked": checked,
            "max_rel": worst,
            "tolerance": tolerance,
            "passed": worst < tolerance,
        }));
    }
    let text =
        serde_json::to_string_pretty(&json!({ "eps": a.eps, "results": rows })).expect("json");
    emit(&text, a.out.as_deref())?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn parse_bench_size(s: &str) -> Result<(usize, usize), Error> {
    let bad = || Error::Argument(format!("bench size {s:?} is not CHANNELSxSIDE"));
    let (c, n) = s.trim().split_once('x').ok_or_else(bad)?;
    Ok((c.parse().map_err(|_| bad())?, n.parse().map_err(|_| bad())?))
}

fn bench_cmd(a: &BenchArgs) -> Outcome {
    if a.dump_config {
        return dump(a);
    }
    let sizes = a
        .sizes
        .split(',')
        .map(parse_bench_size)
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = Rng::new(a.seed);
    let mut csv = format!("{BENCH_CSV_HEADER}\n");
    for (channels, side) in sizes {
        let config = BenchConfig {
            warmup: a.warmup,
            reps: a.reps,
            ..BenchConfig::new(channels, side, a.kernel)
        };
        let row = bench_conv(&config, &mut rng)?;
        csv.push_str(&row.csv_line());
        csv.push('\n');
    }
    emit(csv.trim_end(), a.out.as_deref())?;
    Ok(())
}

fn rf_trace_cmd(a: &RfTraceArgs) -> Outcome {
    if a.dump_config {
        return dump(a);
    }
    let depth = read_pgm16_depth(&read_file(&a.depth_file)?)?;
    let trace = match &a.checkpoint {
        None => rf_trace_ones(&depth, a.pixel, a.levels, &a.sim.resolve()?)?,
        Some(path) => {
            let model = load_model(path, a.model_spec.as_deref(), depth.dims())?;
            let mut kernels = Vec::new();
            let mut sim = None;
            for (i, layer) in model.spec().layers.iter().enumerate() {
                let square3 = layer
                    .conv
                    .is_some_and(|c| c.kernel_h == 3 && c.kernel_w == 3);
                if layer.kind == LayerKind::Dconv && square3 && kernels.len() < a.levels {
                    let name = format!("layer{i}.weight");
                    let p = model
                        .params()
                        .iter()
                        .find(|p| p.name == name)
                        .expect("built from spec");
                    kernels.push(kernel_profile(&p.value)?);
                    sim = sim.or(layer.similarity);
                }
            }
            if kernels.len() < a.levels {
                return Err(Error::Argument(format!(
                    "checkpoint has {} depth-aware 3x3 layers, {} levels requested",
                    kernels.len(),
                    a.levels
                ))
                .into());
            }
            rf_trace(&depth, a.pixel, &kernels, &sim.expect("at least one level"))?
        }
    };
    let mut buf = Vec::new();
    trace.write_pgm(&mut buf)?;
    fs::write(&a.out, buf).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let total: f64 = trace.weights().iter().sum();
    println!(
        "{}",
        json!({ "pixel": [a.pixel.0, a.pixel.1], "levels": a.levels, "total_weight": total })
    );
    Ok(())
}

fn depth_variance_cmd(a: &DepthVarianceArgs) -> Outcome {
    if a.dump_config {
        return dump(a);
    }
    let scenes = a.subset.load(&a.data)?;
    let kind = match a.variance {
        VarianceArg::Population => VarianceKind::Population,
        VarianceArg::Sample => VarianceKind::Sample,
    };
    let report = depth_variance_report(&scenes, a.classes, kind)?;
    emit(&report.to_json(), a.out.as_deref())?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::RfTrace(a) => rf_trace_cmd(a),
        Command::DepthVariance(a) => depth_variance_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(4)
        }
    }
}
