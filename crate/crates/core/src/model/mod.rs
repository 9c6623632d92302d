//! Declarative segmentation networks and their parameters.
//!
//! The two presets share one topology: three VGG-style blocks with widths
//! 16/32/64 separated by max pooling, a dilation-2 block, 3×3 average
//! pooling, global-context concatenation and a 1×1 classifier. The
//! depth-aware preset swaps the first convolution of every block and the
//! average pooling for their depth-aware counterparts and changes nothing
//! else.

mod checkpoint;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{DepthInput, Graph, NodeId, ParamId, ParamStore};
use crate::data::DepthPyramid;
use crate::error::{Error, Result};
use crate::nnops::{ConvSpec, PoolMode, PoolSpec};
use crate::similarity::SimilaritySpec;
use crate::tensor::{Rng, Tensor};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Dconv,
    Relu,
    Maxpool,
    Avgpool,
    Davgpool,
    GlobalConcat,
    Classifier1x1,
}

impl LayerKind {
    pub fn is_depth_aware(self) -> bool {
        matches!(self, LayerKind::Dconv | LayerKind::Davgpool)
    }

    fn has_weights(self) -> bool {
        matches!(
            self,
            LayerKind::Conv | LayerKind::Dconv | LayerKind::Classifier1x1
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub conv: Option<ConvSpec>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pool: Option<PoolSpec>,
    /// Used by depth-aware layers only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub similarity: Option<SimilaritySpec>,
    /// Pyramid level whose resolution matches this layer's input.
    pub depth_level: usize,
}

impl LayerSpec {
    fn conv(kind: LayerKind, conv: ConvSpec, level: usize, sim: SimilaritySpec) -> Self {
        LayerSpec {
            kind,
            conv: Some(conv),
            pool: None,
            similarity: kind.is_depth_aware().then_some(sim),
            depth_level: level,
        }
    }

    fn pool(kind: LayerKind, pool: PoolSpec, level: usize, sim: SimilaritySpec) -> Self {
        LayerSpec {
            kind,
            conv: None,
            pool: Some(pool),
            similarity: kind.is_depth_aware().then_some(sim),
            depth_level: level,
        }
    }

    fn plain(kind: LayerKind, level: usize) -> Self {
        LayerSpec {
            kind,
            conv: None,
            pool: None,
            similarity: None,
            depth_level: level,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    BaselineMini,
    DcnnMini,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::BaselineMini => "baseline-mini",
            Preset::DcnnMini => "dcnn-mini",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline-mini" => Ok(Preset::BaselineMini),
            "dcnn-mini" => Ok(Preset::DcnnMini),
            other => Err(Error::arg(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub preset: Option<Preset>,
    pub in_channels: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// Widths of the three pooled blocks.
pub const MINI_WIDTHS: [usize; 3] = [16, 32, 64];
/// Number of max-pool stages; inputs are reduced by `2^MINI_LEVELS`.
pub const MINI_LEVELS: usize = 2;

impl ModelSpec {
    pub fn empty(in_channels: usize, num_classes: usize) -> Self {
        ModelSpec {
            preset: None,
            in_channels,
            num_classes,
            layers: Vec::new(),
        }
    }

    pub fn preset(preset: Preset, num_classes: usize, sim: SimilaritySpec) -> Self {
        let aware = preset == Preset::DcnnMini;
        let first = if aware {
            LayerKind::Dconv
        } else {
            LayerKind::Conv
        };
        let mut layers = Vec::new();
        let mut level = 0;
        let mut channels = 3;
        let block =
            |layers: &mut Vec<LayerSpec>, cin: usize, cout: usize, dil: usize, level: usize| {
                layers.push(LayerSpec::conv(
                    first,
                    ConvSpec::same(cin, cout, 3, dil),
                    level,
                    sim,
                ));
                layers.push(LayerSpec::plain(LayerKind::Relu, level));
                layers.push(LayerSpec::conv(
                    LayerKind::Conv,
                    ConvSpec::same(cout, cout, 3, dil),
                    level,
                    sim,
                ));
                layers.push(LayerSpec::plain(LayerKind::Relu, level));
            };
        for (i, &width) in MINI_WIDTHS.iter().enumerate() {
            block(&mut layers, channels, width, 1, level);
            channels = width;
            if i < MINI_LEVELS {
                layers.push(LayerSpec::pool(
                    LayerKind::Maxpool,
                    PoolSpec::new(3, 2, 1, PoolMode::Max),
                    level,
                    sim,
                ));
                level += 1;
            }
        }
        block(&mut layers, channels, channels, 2, level);
        let (avg, mode) = if aware {
            (LayerKind::Davgpool, PoolMode::DepthAvg)
        } else {
            (LayerKind::Avgpool, PoolMode::Avg)
        };
        layers.push(LayerSpec::pool(
            avg,
            PoolSpec::new(3, 1, 1, mode),
            level,
            sim,
        ));
        layers.push(LayerSpec::plain(LayerKind::GlobalConcat, level));
        layers.push(LayerSpec::conv(
            LayerKind::Classifier1x1,
            ConvSpec::same(2 * channels, num_classes, 1, 1),
            level,
            sim,
        ));
        ModelSpec {
            preset: Some(preset),
            in_channels: 3,
            num_classes,
            layers,
        }
    }

    /// Deepest pyramid level any layer reads.
    pub fn max_depth_level(&self) -> usize {
        self.layers.iter().map(|l| l.depth_level).max().unwrap_or(0)
    }

    /// Checks payloads, channel chaining and that every depth-aware layer
    /// reads the pyramid level matching its input resolution for an
    /// `input_hw` image (levels halve with rounding up).
    pub fn validate(&self, input_hw: (usize, usize)) -> Result<()> {
        if self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::Spec(
                "model needs at least one class and one input channel".into(),
            ));
        }
        let mut channels = self.in_channels;
        let (mut h, mut w) = input_hw;
        for (i, layer) in self.layers.iter().enumerate() {
            let level_hw =
                (0..layer.depth_level).fold(input_hw, |(a, b), _| (a.div_ceil(2), b.div_ceil(2)));
            if layer.kind.is_depth_aware() {
                match layer.similarity {
                    Some(s) => s.validate()?,
                    None => {
                        return Err(Error::Spec(format!(
                            "layer {i} is depth-aware but has no similarity"
                        )))
                    }
                }
                if level_hw != (h, w) {
                    return Err(Error::Spec(format!(
                        "layer {i} reads depth level {} ({}x{}) but its input is {h}x{w}",
                        layer.depth_level, level_hw.0, level_hw.1
                    )));
                }
            }
            match layer.kind {
                LayerKind::Conv | LayerKind::Dconv | LayerKind::Classifier1x1 => {
                    let conv = layer
                        .conv
                        .ok_or_else(|| Error::Spec(format!("layer {i} lacks a conv spec")))?;
                    if conv.in_channels != channels {
                        return Err(Error::Spec(format!(
                            "layer {i} expects {} channels, receives {channels}",
                            conv.in_channels
                        )));
                    }
                    if layer.kind == LayerKind::Classifier1x1
                        && (conv.kernel_h, conv.kernel_w) != (1, 1)
                    {
                        return Err(Error::Spec(format!("classifier layer {i} is not 1x1")));
                    }
                    (h, w) = conv
                        .output_hw(h, w)
                        .map_err(|e| Error::Spec(e.to_string()))?;
                    channels = conv.out_channels;
                }
                LayerKind::Maxpool | LayerKind::Avgpool | LayerKind::Davgpool => {
                    let pool = layer
                        .pool
                        .ok_or_else(|| Error::Spec(format!("layer {i} lacks a pool spec")))?;
                    (h, w) = pool
                        .output_hw(h, w)
                        .map_err(|e| Error::Spec(e.to_string()))?;
                }
                LayerKind::GlobalConcat => channels *= 2,
                LayerKind::Relu => {}
            }
        }
        if !self.layers.is_empty() && channels != self.num_classes {
            return Err(Error::Spec(format!(
                "network ends with {channels} channels, expected {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Copy of this spec with every depth-aware layer using `sim`.
    pub fn with_similarity(&self, sim: SimilaritySpec) -> Self {
        let mut spec = self.clone();
        for l in &mut spec.layers {
            if l.kind.is_depth_aware() {
                l.similarity = Some(sim);
            }
        }
        spec
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerParams {
    weights: ParamId,
    bias: Option<ParamId>,
}

/// A built network: its spec plus initialized parameters.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: ParamStore,
    layer_params: Vec<Option<LayerParams>>,
}

/// Result of assembling a model's graph for one image.
pub struct ModelGraph {
    pub graph: Graph,
    pub logits: NodeId,
}

impl Model {
    /// Builds parameters with fan-in He-uniform weights and zero biases.
    /// The spec is validated against a reference input of `input_hw`.
    pub fn build(spec: ModelSpec, input_hw: (usize, usize), rng: &mut Rng) -> Result<Self> {
        spec.validate(input_hw)?;
        let mut params = ParamStore::new();
        let mut layer_params = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            if !layer.kind.has_weights() {
                layer_params.push(None);
                continue;
            }
            let conv = layer.conv.expect("validated");
            let fan_in = (conv.in_channels * conv.kernel_h * conv.kernel_w) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let w = Tensor::rand_uniform(rng, &conv.weight_shape(), -bound, bound)?;
            let weights = params.add(format!("layer{i}.weight"), w);
            let bias = conv.has_bias.then(|| {
                params.add(
                    format!("layer{i}.bias"),
                    Tensor::zeros(&[conv.out_channels]).expect("nonzero"),
                )
            });
            layer_params.push(Some(LayerParams { weights, bias }));
        }
        Ok(Model {
            spec,
            params,
            layer_params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces parameter values by name; every parameter must be present
    /// with a matching shape.
    pub fn load_parameters(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        for p in self.params.iter_mut() {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Spec(format!("checkpoint has no tensor {:?}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Spec(format!(
                    "tensor {:?} has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Assembles the forward graph for one `[3, H, W]` image. Logits are
    /// resized to `H × W` by nearest-neighbor upsampling.
    pub fn graph(&self, rgb: &Tensor, pyramid: &DepthPyramid) -> Result<ModelGraph> {
        let (c, h, w) = rgb.chw()?;
        if c != self.spec.in_channels {
            return Err(Error::shape(format!(
                "model expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        let mut g = Graph::new();
        let mut x = g.input(rgb.clone());
        let mut depth_cache: Vec<Option<Arc<crate::similarity::DepthMap>>> = Vec::new();
        let mut depth_at = |level: usize| -> Result<Arc<crate::similarity::DepthMap>> {
            if depth_cache.len() <= level {
                depth_cache.resize(level + 1, None);
            }
            if let Some(d) = &depth_cache[level] {
                return Ok(d.clone());
            }
            let d = Arc::new(
                pyramid
                    .level(level)
                    .ok_or_else(|| Error::Spec(format!("depth pyramid has no level {level}")))?
                    .clone(),
            );
            depth_cache[level] = Some(d.clone());
            Ok(d)
        };
        for (layer, lp) in self.spec.layers.iter().zip(&self.layer_params) {
            let depth = if layer.kind.is_depth_aware() {
                Some(DepthInput {
                    depth: depth_at(layer.depth_level)?,
                    sim: layer.similarity.expect("validated"),
                })
            } else {
                None
            };
            x = match layer.kind {
                LayerKind::Conv | LayerKind::Dconv | LayerKind::Classifier1x1 => {
                    let lp = lp.expect("weighted layer");
                    let wn = g.param(lp.weights);
                    let bn = lp.bias.map(|b| g.param(b));
                    let spec = layer.conv.expect("validated");
                    match depth {
                        Some(d) => g.depth_conv(x, wn, bn, spec, d),
                        None => g.conv(x, wn, bn, spec),
                    }
                }
                LayerKind::Relu => g.relu(x),
                LayerKind::Maxpool => g.max_pool(x, layer.pool.expect("validated")),
                LayerKind::Avgpool => g.avg_pool(x, layer.pool.expect("validated")),
                LayerKind::Davgpool => g.depth_avg_pool(
                    x,
                    layer.pool.expect("validated"),
                    depth.expect("depth-aware"),
                ),
                LayerKind::GlobalConcat => g.global_concat(x),
            };
        }
        let logits = g.upsample_nearest(x, h, w);
        Ok(ModelGraph { graph: g, logits })
    }
}

/// Exact number of scalar parameters.
pub fn parameter_count(model: &Model) -> usize {
    model.params.scalar_count()
}

/// Parameter count implied by a spec without building it.
pub fn spec_parameter_count(spec: &ModelSpec) -> usize {
    spec.layers
        .iter()
        .filter(|l| l.kind.has_weights())
        .filter_map(|l| l.conv.map(|c| c.parameter_count()))
        .sum()
}

/// Forward pass producing `[n_C, H, W]` logits.
pub fn forward_segmentation(model: &Model, rgb: &Tensor, pyramid: &DepthPyramid) -> Result<Tensor> {
    let ModelGraph { mut graph, logits } = model.graph(rgb, pyramid)?;
    graph.forward(model.params())?;
    Ok(graph.value(logits)?.clone())
}
