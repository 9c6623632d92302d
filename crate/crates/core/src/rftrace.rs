//! Effective receptive field of stacked depth-aware convolutions.
//!
//! A one-hot gradient at one output pixel is pushed back through `L`
//! single-channel 3×3 depth-aware convolutions. The weight reaching each
//! input pixel is the sum over all tap paths of the product of kernel
//! weights and depth similarities along the path.

use std::io::Write;

use crate::data::write_pgm8_gray;
use crate::error::{Error, Result};
use crate::nnops::{self, ConvKernel, ConvSpec};
use crate::similarity::{DepthMap, SimilaritySpec};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct RfTrace {
    height: usize,
    width: usize,
    weights: Vec<f64>,
}

impl RfTrace {
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.weights[y * self.width + x]
    }

    /// Sum of weights over pixels where `select(y, x)` holds.
    pub fn sum_where(&self, mut select: impl FnMut(usize, usize) -> bool) -> f64 {
        let mut total = 0.0;
        for (p, &v) in self.weights.iter().enumerate() {
            if select(p / self.width, p % self.width) {
                total += v;
            }
        }
        total
    }

    /// Weights scaled so the largest becomes 255, rounded to bytes.
    pub fn heatmap(&self) -> Vec<u8> {
        let max = self.weights.iter().copied().fold(0.0, f64::max);
        self.weights
            .iter()
            .map(|&v| {
                if max > 0.0 {
                    (255.0 * v.max(0.0) / max).round() as u8
                } else {
                    0
                }
            })
            .collect()
    }

    pub fn write_pgm<W: Write>(&self, out: W) -> Result<()> {
        write_pgm8_gray(out, self.height, self.width, &self.heatmap())
    }
}

/// Traces through one 3×3 kernel per level, applied last level first.
pub fn rf_trace(
    depth: &DepthMap,
    pixel: (usize, usize),
    kernels: &[Tensor],
    sim: &SimilaritySpec,
) -> Result<RfTrace> {
    let (h, w) = depth.dims();
    let (py, px) = pixel;
    if py >= h || px >= w {
        return Err(Error::arg(format!(
            "pixel ({py}, {px}) outside the {h}x{w} depth map"
        )));
    }
    if kernels.is_empty() {
        return Err(Error::arg("need at least one level"));
    }
    sim.validate()?;
    let spec = ConvSpec {
        has_bias: false,
        ..ConvSpec::same(1, 1, 3, 1)
    };
    let x = Tensor::zeros(&[1, h, w])?;
    let mut grad = Tensor::zeros(&[1, h, w])?;
    grad.data_mut()[py * w + px] = 1.0;
    for k in kernels.iter().rev() {
        if k.shape() != [3, 3] {
            return Err(Error::shape(format!(
                "trace kernels must be 3x3, got {:?}",
                k.shape()
            )));
        }
        let kernel = ConvKernel::new(k.clone().reshape(&[1, 1, 3, 3])?, None);
        grad = nnops::depth_conv_backward(&spec, &kernel, &x, depth, sim, &grad)?.x;
    }
    Ok(RfTrace {
        height: h,
        width: w,
        weights: grad.into_data(),
    })
}

/// [`rf_trace`] with `levels` all-ones kernels.
pub fn rf_trace_ones(
    depth: &DepthMap,
    pixel: (usize, usize),
    levels: usize,
    sim: &SimilaritySpec,
) -> Result<RfTrace> {
    let ones = Tensor::fill(&[3, 3], 1.0)?;
    rf_trace(depth, pixel, &vec![ones; levels], sim)
}

/// Spatial magnitude of a trained `[C_out, C_in, 3, 3]` kernel: `Σ |w|` over
/// channels, scaled to mean 1 so levels contribute comparably.
pub fn kernel_profile(weights: &Tensor) -> Result<Tensor> {
    let shape = weights.shape();
    if shape.len() != 4 || shape[2] != 3 || shape[3] != 3 {
        return Err(Error::shape(format!(
            "expected a [o, i, 3, 3] kernel, got {shape:?}"
        )));
    }
    let mut profile = vec![0.0; 9];
    for (i, v) in weights.data().iter().enumerate() {
        profile[i % 9] += v.abs();
    }
    let mean = profile.iter().sum::<f64>() / 9.0;
    if mean > 0.0 {
        for v in &mut profile {
            *v /= mean;
        }
    }
    Tensor::new(&[3, 3], profile)
}
