//! Central-difference gradient checks for single operators and whole models.

use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::model::Model;
use crate::nnops::{self, ConvKernel, ConvSpec, PoolMode, PoolSpec};
use crate::similarity::{DepthMap, SimilaritySpec};
use crate::tensor::{Rng, Tensor};

pub const GRADCHECK_EPS: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    /// Entries whose ±eps probes crossed a ReLU or max-pool switch, where
    /// the function is not differentiable along that coordinate.
    pub skipped: usize,
    pub max_rel: f64,
    pub mean_rel: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub target: String,
    pub eps: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradcheckReport {
    pub fn max_rel(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.blocks.iter().map(|b| b.checked).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct")
    }
}

/// Checks the entries `indices` of one block. `probe(i, delta)` evaluates
/// the scalar function, given as a list of terms, with entry `i` shifted by
/// `delta`, and reports whether the evaluation stayed on the same smooth
/// piece. Differencing term by term before summing keeps the rounding of a
/// large total out of the small difference.
fn check_block(
    name: &str,
    analytic: &[f64],
    indices: impl IntoIterator<Item = usize>,
    eps: f64,
    probe: impl FnMut(usize, f64) -> Result<(Vec<f64>, bool)>,
) -> Result<BlockReport> {
    check_block_with(name, analytic, indices, eps, probe, |plus, minus| {
        Ok(plus.iter().zip(minus).map(|(p, m)| p - m).sum())
    })
}

/// Like [`check_block`], with the probe output of any type and
/// `difference(plus, minus)` giving f(+delta) - f(-delta).
fn check_block_with<V>(
    name: &str,
    analytic: &[f64],
    indices: impl IntoIterator<Item = usize>,
    eps: f64,
    mut probe: impl FnMut(usize, f64) -> Result<(V, bool)>,
    difference: impl Fn(&V, &V) -> Result<f64>,
) -> Result<BlockReport> {
    let (mut checked, mut skipped, mut max_rel, mut sum_rel) = (0, 0, 0.0f64, 0.0);
    for i in indices {
        let (plus, smooth_p) = probe(i, eps)?;
        let (minus, smooth_m) = probe(i, -eps)?;
        if !(smooth_p && smooth_m) {
            skipped += 1;
            continue;
        }
        let numeric = difference(&plus, &minus)? / (2.0 * eps);
        let rel = relative_error(analytic[i], numeric);
        max_rel = max_rel.max(rel);
        sum_rel += rel;
        checked += 1;
    }
    Ok(BlockReport {
        name: name.to_string(),
        checked,
        skipped,
        max_rel,
        mean_rel: if checked > 0 {
            sum_rel / checked as f64
        } else {
            0.0
        },
    })
}

fn perturbed(t: &Tensor, i: usize, delta: f64) -> Tensor {
    let mut t = t.clone();
    t.data_mut()[i] += delta;
    t
}

/// Terms of `a · b`.
fn products(a: &Tensor, b: &Tensor) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpTarget {
    Conv,
    Dconv,
    Avgpool,
    Davgpool,
    Maxpool,
    Relu,
    GlobalConcat,
    Upsample,
    CrossEntropy,
}

impl OpTarget {
    pub const ALL: [OpTarget; 9] = [
        OpTarget::Conv,
        OpTarget::Dconv,
        OpTarget::Avgpool,
        OpTarget::Davgpool,
        OpTarget::Maxpool,
        OpTarget::Relu,
        OpTarget::GlobalConcat,
        OpTarget::Upsample,
        OpTarget::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpTarget::Conv => "conv",
            OpTarget::Dconv => "dconv",
            OpTarget::Avgpool => "avgpool",
            OpTarget::Davgpool => "davgpool",
            OpTarget::Maxpool => "maxpool",
            OpTarget::Relu => "relu",
            OpTarget::GlobalConcat => "global-concat",
            OpTarget::Upsample => "upsample",
            OpTarget::CrossEntropy => "cross-entropy",
        }
    }
}

impl std::str::FromStr for OpTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpTarget::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown gradcheck target {s:?}")))
    }
}

/// Depth with a vertical step plus jitter, so similarities span (0, 1].
fn random_depth(rng: &mut Rng, h: usize, w: usize) -> DepthMap {
    let step = rng.uniform(0.05, 0.5);
    let edge = 1 + rng.below(w.max(2) - 1);
    let values = (0..h * w)
        .map(|p| 1.0 + if p % w >= edge { step } else { 0.0 } + rng.uniform(0.0, 0.05))
        .collect();
    DepthMap::new(h, w, values).expect("positive depths")
}

fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::rand_uniform(rng, shape, -1.0, 1.0).expect("valid range")
}

/// One random instance of `target`, checked over every input entry.
/// Inputs avoid the non-differentiable points of ReLU and max pooling.
pub fn gradcheck_op(target: OpTarget, rng: &mut Rng, eps: f64) -> Result<GradcheckReport> {
    let c = 1 + rng.below(3);
    let h = 4 + rng.below(4);
    let w = 4 + rng.below(4);
    let smooth = |v: Vec<f64>| Ok((v, true));
    let mut blocks = Vec::new();
    match target {
        OpTarget::Conv | OpTarget::Dconv => {
            let k = [1, 3, 5][rng.below(3)];
            let dilation = 1 + rng.below(2);
            let span = dilation * (k - 1) + 1;
            let min_pad = span.saturating_sub(h.min(w)).div_ceil(2);
            let max_pad = dilation * (k - 1) / 2;
            let spec = ConvSpec {
                in_channels: c,
                out_channels: 1 + rng.below(3),
                kernel_h: k,
                kernel_w: k,
                stride: 1 + rng.below(2),
                padding: min_pad + rng.below(max_pad - min_pad + 1),
                dilation,
                has_bias: true,
            };
            let x = random_tensor(rng, &[c, h, w]);
            let kernel = ConvKernel::new(
                random_tensor(rng, &spec.weight_shape()),
                Some(random_tensor(rng, &[spec.out_channels])),
            );
            let depth = random_depth(rng, h, w);
            let sim = SimilaritySpec::default();
            let aware = target == OpTarget::Dconv;
            let forward = |kernel: &ConvKernel, x: &Tensor| {
                if aware {
                    nnops::depth_conv_forward(&spec, kernel, x, &depth, &sim)
                } else {
                    nnops::conv_forward(&spec, kernel, x)
                }
            };
            let r = random_tensor(rng, forward(&kernel, &x)?.shape());
            let grads = if aware {
                nnops::depth_conv_backward(&spec, &kernel, &x, &depth, &sim, &r)?
            } else {
                nnops::conv_backward(&spec, &kernel, &x, &r)?
            };
            blocks.push(check_block(
                "x",
                grads.x.data(),
                0..x.len(),
                eps,
                |i, d| smooth(products(&forward(&kernel, &perturbed(&x, i, d))?, &r)),
            )?);
            blocks.push(check_block(
                "weight",
                grads.weights.data(),
                0..kernel.weights.len(),
                eps,
                |i, d| {
                    let k2 = ConvKernel::new(perturbed(&kernel.weights, i, d), kernel.bias.clone());
                    smooth(products(&forward(&k2, &x)?, &r))
                },
            )?);
            let gb = grads.bias.expect("conv has bias");
            let bias = kernel.bias.clone().expect("conv has bias");
            blocks.push(check_block(
                "bias",
                gb.data(),
                0..bias.len(),
                eps,
                |i, d| {
                    let k2 = ConvKernel::new(kernel.weights.clone(), Some(perturbed(&bias, i, d)));
                    smooth(products(&forward(&k2, &x)?, &r))
                },
            )?);
        }
        OpTarget::Avgpool | OpTarget::Davgpool => {
            let k = 2 + rng.below(2);
            let aware = target == OpTarget::Davgpool;
            let mode = if aware {
                PoolMode::DepthAvg
            } else {
                PoolMode::Avg
            };
            let spec = PoolSpec::new(k, 1 + rng.below(2), rng.below(k), mode);
            let x = random_tensor(rng, &[c, h, w]);
            let depth = random_depth(rng, h, w);
            let sim = SimilaritySpec::default();
            let forward = |x: &Tensor| {
                if aware {
                    nnops::depth_avg_pool_forward(&spec, x, &depth, &sim)
                } else {
                    nnops::avg_pool_forward(&spec, x)
                }
            };
            let r = random_tensor(rng, forward(&x)?.shape());
            let gx = if aware {
                nnops::depth_avg_pool_backward(&spec, x.shape(), &depth, &sim, &r)?
            } else {
                nnops::avg_pool_backward(&spec, x.shape(), &r)?
            };
            blocks.push(check_block("x", gx.data(), 0..x.len(), eps, |i, d| {
                smooth(products(&forward(&perturbed(&x, i, d))?, &r))
            })?);
        }
        OpTarget::Maxpool => {
            let spec = PoolSpec::new(
                2 + rng.below(2),
                1 + rng.below(2),
                rng.below(2),
                PoolMode::Max,
            );
            // Distinct values at least 0.01 apart keep every window's winner
            // unambiguous under ±eps.
            let mut ranks: Vec<usize> = (0..c * h * w).collect();
            rng.shuffle(&mut ranks);
            let x = Tensor::new(
                &[c, h, w],
                ranks.iter().map(|&r| r as f64 * 0.01 - 0.5).collect(),
            )?;
            let (y, idx) = nnops::max_pool_forward(&spec, &x)?;
            let r = random_tensor(rng, y.shape());
            let gx = nnops::max_pool_backward(&idx, &r)?;
            blocks.push(check_block("x", gx.data(), 0..x.len(), eps, |i, d| {
                smooth(products(
                    &nnops::max_pool_forward(&spec, &perturbed(&x, i, d))?.0,
                    &r,
                ))
            })?);
        }
        OpTarget::Relu => {
            let data = (0..c * h * w)
                .map(|_| {
                    let m = rng.uniform(0.01, 1.0);
                    if rng.bernoulli(0.5) {
                        m
                    } else {
                        -m
                    }
                })
                .collect();
            let x = Tensor::new(&[c, h, w], data)?;
            let r = random_tensor(rng, x.shape());
            let gx = nnops::relu_backward(&x, &r)?;
            blocks.push(check_block("x", gx.data(), 0..x.len(), eps, |i, d| {
                smooth(products(&nnops::relu_forward(&perturbed(&x, i, d)), &r))
            })?);
        }
        OpTarget::GlobalConcat => {
            let x = random_tensor(rng, &[c, h, w]);
            let r = random_tensor(rng, &[2 * c, h, w]);
            let gx = nnops::global_pool_concat_backward(x.shape(), &r)?;
            blocks.push(check_block("x", gx.data(), 0..x.len(), eps, |i, d| {
                smooth(products(
                    &nnops::global_pool_concat(&perturbed(&x, i, d))?,
                    &r,
                ))
            })?);
        }
        OpTarget::Upsample => {
            let (oh, ow) = (h + rng.below(2 * h), w + rng.below(2 * w));
            let x = random_tensor(rng, &[c, h, w]);
            let r = random_tensor(rng, &[c, oh, ow]);
            let gx = nnops::upsample_nearest_backward(x.shape(), &r)?;
            blocks.push(check_block("x", gx.data(), 0..x.len(), eps, |i, d| {
                smooth(products(
                    &nnops::upsample_nearest(&perturbed(&x, i, d), oh, ow)?,
                    &r,
                ))
            })?);
        }
        OpTarget::CrossEntropy => {
            let classes = 2 + rng.below(3);
            let logits = Tensor::rand_uniform(rng, &[classes, h, w], -2.0, 2.0)?;
            let labels = (0..h * w)
                .map(|_| {
                    if rng.bernoulli(0.1) {
                        IGNORE_LABEL
                    } else {
                        rng.below(classes) as u8
                    }
                })
                .collect();
            let mut labels = LabelMap::new(h, w, labels)?;
            labels.as_mut_slice()[0] = 0;
            let ce = nnops::softmax_cross_entropy(&logits, &labels, IGNORE_LABEL)?;
            blocks.push(check_block(
                "logits",
                ce.grad_logits.data(),
                0..logits.len(),
                eps,
                |i, d| {
                    smooth(nnops::cross_entropy_terms(
                        &perturbed(&logits, i, d),
                        &labels,
                        IGNORE_LABEL,
                    )?)
                },
            )?);
        }
    }
    Ok(GradcheckReport {
        target: target.name().to_string(),
        eps,
        blocks,
    })
}

/// End-to-end check of the segmentation loss on `scene` with respect to
/// up to `per_block` randomly chosen entries of every parameter.
/// A random instance for end-to-end checks: uniform RGB, a depth plane with
/// one rectangular step of at most 0.4 m, a few holes, and one class.
///
/// Depth gaps stay moderate so similarity weights are not vanishingly
/// small; with large gaps many parameter gradients fall below what a
/// central difference of an O(1) loss can resolve in 64-bit.
pub fn gradcheck_scene(
    rng: &mut Rng,
    height: usize,
    width: usize,
    num_classes: usize,
) -> Result<Scene> {
    if num_classes == 0 || num_classes > IGNORE_LABEL as usize {
        return Err(Error::arg(format!(
            "class count {num_classes} out of range"
        )));
    }
    let rgb = Tensor::rand_uniform(rng, &[3, height, width], 0.0, 1.0)?;
    let (ey, ex) = (rng.below(height.max(1)), rng.below(width.max(1)));
    let base = rng.uniform(1.0, 2.0);
    let step = rng.uniform(-0.4, 0.4);
    let class = rng.below(num_classes) as u8;
    let n = height * width;
    let mut depth = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for p in 0..n {
        let inside = p / width >= ey && p % width >= ex;
        depth.push(base + if inside { step } else { 0.0 } + rng.uniform(0.0, 0.02));
        let hole = rng.uniform(0.0, 1.0) < 0.05;
        valid.push(!hole);
        labels.push(if hole { IGNORE_LABEL } else { class });
    }
    Scene::new(
        rgb,
        DepthMap::with_mask(height, width, depth, valid)?,
        LabelMap::new(height, width, labels)?,
    )
}

pub fn gradcheck_model(
    model: &Model,
    scene: &Scene,
    eps: f64,
    per_block: usize,
    rng: &mut Rng,
) -> Result<GradcheckReport> {
    let mut model = model.clone();
    model.params_mut().zero_grad();
    super::loss_and_grad(&mut model, scene)?;
    let (mut graph, logits) = super::logits_graph(&model, scene)?;
    graph.forward(model.params())?;
    let base_pattern = graph.activation_pattern()?;

    let ids: Vec<_> = model.params().ids().collect();
    let mut blocks = Vec::new();
    for id in ids {
        let (name, analytic, n) = {
            let p = model.params().get(id);
            (p.name.clone(), p.grad.data().to_vec(), p.value.len())
        };
        let mut indices: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut indices);
        indices.truncate(per_block);
        indices.sort_unstable();
        let probe = |i: usize, d: f64| {
            let original = model.params().get(id).value.data()[i];
            model.params_mut().get_mut(id).value.data_mut()[i] = original + d;
            let out = graph.forward(model.params()).and_then(|_| {
                Ok((
                    graph.value(logits)?.clone(),
                    graph.activation_pattern()? == base_pattern,
                ))
            });
            model.params_mut().get_mut(id).value.data_mut()[i] = original;
            out
        };
        let report = check_block_with(&name, &analytic, indices, eps, probe, |plus, minus| {
            nnops::cross_entropy_difference(plus, minus, &scene.labels, IGNORE_LABEL)
        })?;
        blocks.push(report);
    }
    Ok(GradcheckReport {
        target: "model".into(),
        eps,
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, Preset};

    #[test]
    fn relative_error_formula() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-15);
    }

    #[test]
    fn linear_ops_have_only_rounding_error() {
        let mut rng = Rng::new(11);
        for t in [
            OpTarget::Conv,
            OpTarget::GlobalConcat,
            OpTarget::Upsample,
            OpTarget::Avgpool,
        ] {
            let r = gradcheck_op(t, &mut rng, GRADCHECK_EPS).unwrap();
            assert!(r.max_rel() < 1e-7, "{t:?}: {}", r.max_rel());
        }
    }

    #[test]
    fn every_op_passes() {
        let mut rng = Rng::new(12);
        for t in OpTarget::ALL {
            for _ in 0..3 {
                let r = gradcheck_op(t, &mut rng, GRADCHECK_EPS).unwrap();
                assert!(r.checked() > 0);
                assert!(r.max_rel() < 1e-6, "{t:?}: {r:?}");
            }
        }
        let r = gradcheck_op(OpTarget::Relu, &mut rng, GRADCHECK_EPS).unwrap();
        assert!(r.max_rel() < 1e-8);
    }

    #[test]
    fn broken_gradient_is_detected() {
        let report = check_block("x", &[1.0, 3.0], 0..2, 1e-5, |i, d| {
            Ok((vec![(i as f64 + 1.0) * d], true))
        })
        .unwrap();
        assert!(report.max_rel > 0.3);
        assert_eq!(report.checked, 2);
    }

    #[test]
    fn target_names_round_trip() {
        for t in OpTarget::ALL {
            assert_eq!(t.name().parse::<OpTarget>().unwrap(), t);
        }
        assert!("bogus".parse::<OpTarget>().is_err());
    }

    #[test]
    fn small_model_end_to_end() {
        let scene = gradcheck_scene(&mut Rng::new(3), 10, 10, 4).unwrap();
        let m = Model::build(
            ModelSpec::preset(Preset::DcnnMini, 4, SimilaritySpec::default()),
            (10, 10),
            &mut Rng::new(1),
        )
        .unwrap();
        let r = gradcheck_model(&m, &scene, GRADCHECK_EPS, 4, &mut Rng::new(2)).unwrap();
        assert!(r.checked() > 40);
        assert!(r.max_rel() < 1e-5, "{}", r.to_json());
    }
}
