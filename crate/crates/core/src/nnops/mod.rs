//! Forward and backward kernels for every layer type.
//!
//! Convolutions are lowered to a patch matrix followed by one GEMM. The
//! depth-aware variant scales each patch entry by the similarity between the
//! window center and the sampled location before the GEMM, so both variants
//! share a single summation order. With a similarity of exactly 1 the two are
//! bitwise identical.
//!
//! All feature maps are single images laid out as `[C, H, W]`.

mod activation;
mod conv;
mod gemm;
mod loss;
mod pool;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::{DepthMap, SimilaritySpec};

pub use activation::{
    global_pool_concat, global_pool_concat_backward, relu_backward, relu_forward, upsample_nearest,
    upsample_nearest_backward,
};
pub use conv::{
    conv_backward, conv_forward, depth_conv_backward, depth_conv_forward, ConvGrads, ConvKernel,
};
pub(crate) use conv::{conv_backward_saved, conv_forward_saved, ConvSaved};
pub use loss::{
    cross_entropy_difference, cross_entropy_terms, softmax_cross_entropy, CrossEntropy,
};
pub use pool::{
    avg_pool_backward, avg_pool_forward, depth_avg_pool_backward, depth_avg_pool_forward,
    max_pool_backward, max_pool_forward, MaxPoolIndices,
};
pub(crate) use pool::{pool_avg_backward_weighted, pool_avg_forward_weighted};

/// Output length of a sliding window along one axis, or `None` if the window
/// does not fit.
pub fn output_len(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Square kernel, stride 1, "same" padding for odd kernels.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
            has_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.in_channels,
            self.out_channels,
            self.kernel_h,
            self.kernel_w,
            self.stride,
            self.dilation,
        ];
        if dims.contains(&0) {
            return Err(Error::arg(format!("conv spec has a zero field: {self:?}")));
        }
        Ok(())
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let oh = output_len(h, self.kernel_h, self.stride, self.padding, self.dilation);
        let ow = output_len(w, self.kernel_w, self.stride, self.padding, self.dilation);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::shape(format!(
                "{h}x{w} input too small for conv {}x{} dilation {} padding {}",
                self.kernel_h, self.kernel_w, self.dilation, self.padding
            ))),
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>()
            + if self.has_bias { self.out_channels } else { 0 }
    }

    pub(crate) fn geometry(&self, h: usize, w: usize) -> Result<WindowGeometry> {
        let (out_h, out_w) = self.output_hw(h, w)?;
        Ok(WindowGeometry {
            in_h: h,
            in_w: w,
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            stride: self.stride,
            padding: self.padding,
            dilation: self.dilation,
            out_h,
            out_w,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Max,
    Avg,
    DepthAvg,
    GlobalAvg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub mode: PoolMode,
}

impl PoolSpec {
    pub fn new(kernel: usize, stride: usize, padding: usize, mode: PoolMode) -> Self {
        PoolSpec {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            mode,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 {
            return Err(Error::arg(format!("pool spec has a zero field: {self:?}")));
        }
        if self.padding >= self.kernel_h.min(self.kernel_w) {
            return Err(Error::arg(format!(
                "pool padding {} must be smaller than the window",
                self.padding
            )));
        }
        let oh = output_len(h, self.kernel_h, self.stride, self.padding, 1);
        let ow = output_len(w, self.kernel_w, self.stride, self.padding, 1);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::shape(format!(
                "{h}x{w} input too small for {}x{} pooling",
                self.kernel_h, self.kernel_w
            ))),
        }
    }

    pub(crate) fn geometry(&self, h: usize, w: usize) -> Result<WindowGeometry> {
        let (out_h, out_w) = self.output_hw(h, w)?;
        Ok(WindowGeometry {
            in_h: h,
            in_w: w,
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            stride: self.stride,
            padding: self.padding,
            dilation: 1,
            out_h,
            out_w,
        })
    }
}

/// Sliding-window layout shared by convolution and pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct WindowGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl WindowGeometry {
    pub fn taps(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input row sampled by tap row `ki` at output row `oy`; may be negative
    /// or past the edge (zero padding).
    #[inline]
    pub fn in_row(&self, oy: usize, ki: usize) -> isize {
        (oy * self.stride + ki * self.dilation) as isize - self.padding as isize
    }

    #[inline]
    pub fn in_col(&self, ox: usize, kj: usize) -> isize {
        (ox * self.stride + kj * self.dilation) as isize - self.padding as isize
    }

    /// The window center tap. For even kernels this is the tap just before
    /// the geometric center.
    #[inline]
    pub fn center_tap(&self) -> (usize, usize) {
        ((self.kernel_h - 1) / 2, (self.kernel_w - 1) / 2)
    }

    #[inline]
    pub fn inside(&self, y: isize, x: isize) -> bool {
        y >= 0 && x >= 0 && (y as usize) < self.in_h && (x as usize) < self.in_w
    }
}

/// Similarity between each window center and each of its taps, laid out as
/// `[tap][output position]`. Padded coordinates count as fully similar.
pub(crate) fn window_similarity(
    geom: &WindowGeometry,
    depth: &DepthMap,
    sim: &SimilaritySpec,
) -> Result<Vec<f64>> {
    if depth.dims() != (geom.in_h, geom.in_w) {
        return Err(Error::shape(format!(
            "depth map is {}x{} but features are {}x{}",
            depth.height(),
            depth.width(),
            geom.in_h,
            geom.in_w
        )));
    }
    sim.validate()?;
    let positions = geom.positions();
    let mut table = vec![1.0; geom.taps() * positions];
    if sim.is_constant_one() {
        return Ok(table);
    }
    let sample = |y: isize, x: isize| -> Option<f64> {
        if geom.inside(y, x) {
            depth.get(y as usize, x as usize)
        } else {
            None
        }
    };
    let (cki, ckj) = geom.center_tap();
    for oy in 0..geom.out_h {
        for ox in 0..geom.out_w {
            let p = oy * geom.out_w + ox;
            let center = sample(geom.in_row(oy, cki), geom.in_col(ox, ckj));
            for ki in 0..geom.kernel_h {
                let y = geom.in_row(oy, ki);
                for kj in 0..geom.kernel_w {
                    let x = geom.in_col(ox, kj);
                    table[(ki * geom.kernel_w + kj) * positions + p] =
                        sim.eval(center, sample(y, x));
                }
            }
        }
    }
    Ok(table)
}
