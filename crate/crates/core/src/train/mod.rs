//! SGD training with poly learning-rate decay, evaluation, gradient checks
//! and timing.

mod augment;
mod bench;
mod gradcheck;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore};
use crate::data::{build_pyramid, DepthPyramid, Scene};
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::metrics::{compute_metrics, ConfusionMatrix, Metrics};
use crate::model::{write_checkpoint, Model};
use crate::tensor::{Rng, Tensor};

pub use augment::{augment, AugmentConfig};
pub use bench::{bench_conv, bench_pair, BenchConfig, BenchRow, BENCH_CSV_HEADER};
pub use gradcheck::{
    gradcheck_model, gradcheck_op, gradcheck_scene, BlockReport, GradcheckReport, OpTarget,
    GRADCHECK_EPS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrMode {
    /// Factor evaluated from the base rate at each period boundary.
    #[default]
    Poly,
    /// Factor multiplied into the running rate at each period boundary.
    Compound,
}

impl std::str::FromStr for LrMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poly" => Ok(LrMode::Poly),
            "compound" => Ok(LrMode::Compound),
            other => Err(Error::arg(format!("unknown lr mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_iter: usize,
    pub lr_period: usize,
    pub power: f64,
    pub lr_mode: LrMode,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Write a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.001,
            momentum: 0.9,
            batch_size: 1,
            max_iter: 1000,
            lr_period: 10,
            power: 0.9,
            lr_mode: LrMode::Poly,
            seed: 0,
            augment: AugmentConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::arg(format!(
                "base_lr must be finite and non-negative, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::arg(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.max_iter == 0 || self.batch_size == 0 || self.lr_period == 0 {
            return Err(Error::arg(
                "max_iter, batch_size and lr_period must be positive",
            ));
        }
        if !(self.power >= 0.0 && self.power.is_finite()) {
            return Err(Error::arg(format!(
                "power must be finite and non-negative, got {}",
                self.power
            )));
        }
        self.augment.validate()
    }
}

/// Learning rate at `iter`. Both modes only change the rate at multiples of
/// `period`:
///
/// * `Poly`: `base · (1 − floor(iter/period)·period / max_iter)^power`
/// * `Compound`: the running rate is multiplied by `(1 − iter/max_iter)^power`
///   at each boundary.
pub fn poly_lr(
    base_lr: f64,
    iter: usize,
    max_iter: usize,
    power: f64,
    period: usize,
    mode: LrMode,
) -> Result<f64> {
    if max_iter == 0 || period == 0 {
        return Err(Error::arg("max_iter and period must be positive"));
    }
    if iter > max_iter {
        return Err(Error::arg(format!(
            "iteration {iter} beyond max_iter {max_iter}"
        )));
    }
    let factor = |boundary: usize| {
        (1.0 - boundary as f64 / max_iter as f64)
            .max(0.0)
            .powf(power)
    };
    let steps = iter / period;
    Ok(match mode {
        LrMode::Poly => base_lr * factor(steps * period),
        LrMode::Compound => (1..=steps).fold(base_lr, |lr, k| lr * factor(k * period)),
    })
}

/// `v ← μ·v + g; p ← p − lr·v` for every trainable parameter.
pub fn sgd_step(
    params: &mut ParamStore,
    lr: f64,
    momentum: f64,
    velocity: &mut [Tensor],
) -> Result<()> {
    if velocity.len() != params.len() {
        return Err(Error::State(format!(
            "{} velocity buffers for {} parameters",
            velocity.len(),
            params.len()
        )));
    }
    for (p, v) in params.iter().zip(velocity.iter()) {
        if p.value.shape() != v.shape() || p.grad.shape() != v.shape() {
            return Err(Error::State(format!(
                "velocity shape {:?} does not match parameter {:?} {:?}",
                v.shape(),
                p.name,
                p.value.shape()
            )));
        }
    }
    for (p, v) in params.iter_mut().zip(velocity.iter_mut()) {
        if !p.trainable {
            continue;
        }
        for ((w, vel), &g) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(v.data_mut())
            .zip(p.grad.data())
        {
            *vel = momentum * *vel + g;
            *w -= lr * *vel;
        }
    }
    Ok(())
}

pub fn velocity_buffers(params: &ParamStore) -> Vec<Tensor> {
    params
        .iter()
        .map(|p| Tensor::zeros(p.value.shape()).expect("parameter shapes are non-empty"))
        .collect()
}

/// Builds the depth pyramid a model needs for `scene`.
pub fn pyramid_for(model: &Model, scene: &Scene) -> DepthPyramid {
    build_pyramid(&scene.depth, model.spec().max_depth_level())
}

/// Loss graph for one scene; returns the graph and its scalar loss node.
pub(crate) fn logits_graph(
    model: &Model,
    scene: &Scene,
) -> Result<(Graph, crate::autograd::NodeId)> {
    let pyramid = pyramid_for(model, scene);
    let mg = model.graph(&scene.rgb, &pyramid)?;
    Ok((mg.graph, mg.logits))
}

pub(crate) fn loss_graph(model: &Model, scene: &Scene) -> Result<(Graph, crate::autograd::NodeId)> {
    let (mut graph, logits) = logits_graph(model, scene)?;
    let loss = graph.cross_entropy(logits, Arc::new(scene.labels.clone()), IGNORE_LABEL);
    Ok((graph, loss))
}

/// Forward and backward on one scene, accumulating into the model's
/// gradients. Returns the loss.
pub fn loss_and_grad(model: &mut Model, scene: &Scene) -> Result<f64> {
    let (mut graph, loss) = loss_graph(model, scene)?;
    graph.forward(model.params())?;
    let value = graph.value(loss)?.data()[0];
    graph.backward(loss, model.params_mut())?;
    Ok(value)
}

pub fn loss_only(model: &Model, scene: &Scene) -> Result<f64> {
    let (mut graph, loss) = loss_graph(model, scene)?;
    graph.forward(model.params())?;
    Ok(graph.value(loss)?.data()[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
}

pub const LOSS_CSV_HEADER: &str = "iter,loss,lr";

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for r in records {
        s.push_str(&format!("{},{},{}\n", r.iter, r.loss, r.lr));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub losses: Vec<LossRecord>,
    /// Checkpoints written, in order; the last one is the final model.
    pub checkpoints: Vec<PathBuf>,
}

impl TrainOutcome {
    /// Mean loss over the last `n` iterations.
    pub fn tail_mean_loss(&self, n: usize) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64
    }
}

fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &model.named_tensors()).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Written next to checkpoints; they store tensors only.
pub const MODEL_SPEC_FILE: &str = "model.json";

/// Trains in place. Images are visited in a fresh seeded shuffle each epoch;
/// augmentation draws from a stream keyed by the iteration index, so runs
/// are bit-reproducible. With `out` set, writes `loss.csv`, periodic
/// `checkpoint_<iter>.bin` files, `final.bin` and the model spec.
pub fn train(
    model: &mut Model,
    scenes: &[Scene],
    config: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for s in scenes {
        s.labels.check_classes(model.spec().num_classes)?;
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MODEL_SPEC_FILE);
        let json = serde_json::to_string_pretty(model.spec()).expect("plain struct");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    let root = Rng::new(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut velocity = velocity_buffers(model.params());
    let mut losses = Vec::with_capacity(config.max_iter);
    let mut checkpoints = Vec::new();
    let mut cursor = 0usize;
    for iter in 0..config.max_iter {
        let lr = poly_lr(
            config.base_lr,
            iter,
            config.max_iter,
            config.power,
            config.lr_period,
            config.lr_mode,
        )?;
        model.params_mut().zero_grad();
        let mut loss = 0.0;
        for _ in 0..config.batch_size {
            if cursor.is_multiple_of(scenes.len()) {
                let epoch = (cursor / scenes.len()) as u64;
                order = (0..scenes.len()).collect();
                root.derive(epoch << 1).shuffle(&mut order);
            }
            let scene = &scenes[order[cursor % scenes.len()]];
            let mut aug_rng = root.derive(((cursor as u64) << 1) | 1);
            cursor += 1;
            let augmented;
            let input = if config.augment.any() {
                augmented = augment(scene, &config.augment, &mut aug_rng)?;
                &augmented
            } else {
                scene
            };
            loss += loss_and_grad(model, input)?;
        }
        if config.batch_size > 1 {
            let k = 1.0 / config.batch_size as f64;
            loss *= k;
            for p in model.params_mut().iter_mut() {
                p.grad = p.grad.scale(k);
            }
        }
        if !loss.is_finite() {
            return Err(Error::State(format!("loss diverged at iteration {iter}")));
        }
        sgd_step(model.params_mut(), lr, config.momentum, &mut velocity)?;
        losses.push(LossRecord { iter, loss, lr });
        if let Some(dir) = out {
            let done = iter + 1;
            if config.checkpoint_every > 0
                && done % config.checkpoint_every == 0
                && done < config.max_iter
            {
                let path = dir.join(format!("checkpoint_{done:06}.bin"));
                save_checkpoint(model, &path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = out {
        let path = dir.join("final.bin");
        save_checkpoint(model, &path)?;
        checkpoints.push(path);
        let csv = dir.join("loss.csv");
        let mut f = fs::File::create(&csv).map_err(|e| Error::io(&csv, e))?;
        f.write_all(loss_csv(&losses).as_bytes())
            .map_err(|e| Error::io(&csv, e))?;
    }
    Ok(TrainOutcome {
        losses,
        checkpoints,
    })
}

/// Per-pixel argmax over `[n_C, H, W]` logits; ties go to the lower class.
pub fn argmax_labels(logits: &Tensor) -> Result<LabelMap> {
    let (c, h, w) = logits.chw()?;
    if c > IGNORE_LABEL as usize {
        return Err(Error::shape(format!(
            "{c} classes do not fit in a label map"
        )));
    }
    let plane = h * w;
    let d = logits.data();
    let labels = (0..plane)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if d[k * plane + p] > d[best * plane + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, labels)
}

pub fn predict(model: &Model, scene: &Scene) -> Result<LabelMap> {
    let logits = crate::model::forward_segmentation(model, &scene.rgb, &pyramid_for(model, scene))?;
    argmax_labels(&logits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    /// IoU per class, `None` for classes absent from the truth.
    pub class_iou: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({
            "acc": self.metrics.acc,
            "macc": self.metrics.macc,
            "miou": self.metrics.miou,
            "fwiou": self.metrics.fwiou,
            "class_iou": self.class_iou,
        }))
        .expect("json value")
    }
}

pub fn evaluate_predictions<'a>(
    num_classes: usize,
    pairs: impl IntoIterator<Item = (&'a LabelMap, &'a LabelMap)>,
) -> Result<EvalReport> {
    let mut cm = ConfusionMatrix::new(num_classes);
    let mut any = false;
    for (pred, truth) in pairs {
        cm.accumulate(pred, truth)?;
        any = true;
    }
    if !any {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    Ok(EvalReport {
        metrics: compute_metrics(&cm)?,
        class_iou: cm.class_iou(),
        confusion: cm,
    })
}

pub fn evaluate(model: &Model, scenes: &[Scene]) -> Result<EvalReport> {
    let preds = scenes
        .iter()
        .map(|s| predict(model, s))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(
        model.spec().num_classes,
        preds.iter().zip(scenes.iter().map(|s| &s.labels)),
    )
}
