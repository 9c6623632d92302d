//! Depth similarity functions and the depth map they read.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default exponential falloff, in 1/meter.
pub const DEFAULT_ALPHA: f64 = 8.3;
/// Default clip threshold, in meters.
pub const DEFAULT_CLIP_THRESHOLD: f64 = 1.0;

/// Which similarity function a depth-aware operator uses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimilaritySpec {
    /// `exp(-alpha * |d_i - d_j|)`.
    Exponential { alpha: f64 },
    /// 0 when `|d_i - d_j| >= threshold`, else 1.
    Clip { threshold: f64 },
    /// Always 1; depth-aware operators collapse to their standard form.
    ConstantOne,
}

impl Default for SimilaritySpec {
    fn default() -> Self {
        SimilaritySpec::Exponential {
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl SimilaritySpec {
    pub fn exponential(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::arg(format!("alpha must be positive, got {alpha}")));
        }
        Ok(SimilaritySpec::Exponential { alpha })
    }

    pub fn clip(threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold.is_finite()) {
            return Err(Error::arg(format!(
                "clip threshold must be positive, got {threshold}"
            )));
        }
        Ok(SimilaritySpec::Clip { threshold })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SimilaritySpec::Exponential { alpha } => Self::exponential(alpha).map(drop),
            SimilaritySpec::Clip { threshold } => Self::clip(threshold).map(drop),
            SimilaritySpec::ConstantOne => Ok(()),
        }
    }

    pub fn is_constant_one(&self) -> bool {
        matches!(self, SimilaritySpec::ConstantOne)
    }

    /// Similarity of two depths; `None` marks a missing measurement and any
    /// pair involving one is treated as fully similar.
    #[inline]
    pub fn eval(&self, d_i: Option<f64>, d_j: Option<f64>) -> f64 {
        let (a, b) = match (d_i, d_j) {
            (Some(a), Some(b)) => (a, b),
            _ => return 1.0,
        };
        match *self {
            SimilaritySpec::Exponential { alpha } => (-alpha * (a - b).abs()).exp(),
            SimilaritySpec::Clip { threshold } => {
                if (a - b).abs() >= threshold {
                    0.0
                } else {
                    1.0
                }
            }
            SimilaritySpec::ConstantOne => 1.0,
        }
    }
}

/// Free-function form of [`SimilaritySpec::eval`].
pub fn similarity(spec: &SimilaritySpec, d_i: Option<f64>, d_j: Option<f64>) -> f64 {
    spec.eval(d_i, d_j)
}

/// Per-pixel scene depth in meters with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// A fully valid depth map.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let valid = vec![true; values.len()];
        Self::with_mask(height, width, values, valid)
    }

    pub fn with_mask(
        height: usize,
        width: usize,
        mut values: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "depth map must be non-empty, got {height}x{width}"
            )));
        }
        if values.len() != height * width || valid.len() != height * width {
            return Err(Error::shape(format!(
                "depth map {height}x{width} given {} values and {} mask entries",
                values.len(),
                valid.len()
            )));
        }
        for (i, (v, &ok)) in values.iter_mut().zip(&valid).enumerate() {
            if ok && !(v.is_finite() && *v >= 0.0) {
                return Err(Error::Data(format!(
                    "depth {v} at pixel {i} is not a finite non-negative distance"
                )));
            }
            if !ok {
                *v = 0.0;
            }
        }
        Ok(DepthMap {
            height,
            width,
            values,
            valid,
        })
    }

    pub fn constant(height: usize, width: usize, depth: f64) -> Result<Self> {
        Self::new(height, width, vec![depth; height * width])
    }

    /// Every pixel missing.
    pub fn missing(height: usize, width: usize) -> Result<Self> {
        Self::with_mask(
            height,
            width,
            vec![0.0; height * width],
            vec![false; height * width],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Raw values; entries under a false mask are 0.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> Option<f64> {
        let i = y * self.width + x;
        if self.valid[i] {
            Some(self.values[i])
        } else {
            None
        }
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.width + x]
    }
}
