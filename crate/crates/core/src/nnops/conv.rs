use super::gemm::{matmul, matmul_at, matmul_bt};
use super::{window_similarity, ConvSpec, WindowGeometry};
use crate::error::{Error, Result};
use crate::similarity::{DepthMap, SimilaritySpec};
use crate::tensor::Tensor;

/// Convolution parameters: weights `[out, in, kh, kw]` and an optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    pub weights: Tensor,
    pub bias: Option<Tensor>,
}

impl ConvKernel {
    pub fn new(weights: Tensor, bias: Option<Tensor>) -> Self {
        ConvKernel { weights, bias }
    }

    pub fn check(&self, spec: &ConvSpec) -> Result<()> {
        check_kernel(spec, &self.weights, self.bias.as_ref())
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }
}

fn check_kernel(spec: &ConvSpec, weights: &Tensor, bias: Option<&Tensor>) -> Result<()> {
    spec.validate()?;
    if weights.shape() != spec.weight_shape() {
        return Err(Error::shape(format!(
            "kernel weights {:?} do not match spec {:?}",
            weights.shape(),
            spec.weight_shape()
        )));
    }
    match (bias, spec.has_bias) {
        (Some(b), true) if b.shape() == [spec.out_channels] => Ok(()),
        (None, false) => Ok(()),
        (b, _) => Err(Error::shape(format!(
            "bias {:?} does not match spec (has_bias = {})",
            b.map(|b| b.shape().to_vec()),
            spec.has_bias
        ))),
    }
}

/// Gradients of a convolution. There is deliberately no depth gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub x: Tensor,
    pub weights: Tensor,
    pub bias: Option<Tensor>,
}

/// State kept between forward and backward: the (similarity-scaled) patch
/// matrix and the similarity table used to build it.
#[derive(Clone, Debug)]
pub(crate) struct ConvSaved {
    geom: WindowGeometry,
    in_channels: usize,
    cols: Vec<f64>,
    similarity: Option<Vec<f64>>,
}

/// Patch matrix `[C·kh·kw, positions]`; entry order is channel, tap row, tap
/// column. Out-of-bounds taps read zero.
fn im2col(
    x: &[f64],
    channels: usize,
    geom: &WindowGeometry,
    similarity: Option<&[f64]>,
) -> Vec<f64> {
    let positions = geom.positions();
    let plane = geom.in_h * geom.in_w;
    let mut cols = vec![0.0; channels * geom.taps() * positions];
    for c in 0..channels {
        let xc = &x[c * plane..(c + 1) * plane];
        for ki in 0..geom.kernel_h {
            for kj in 0..geom.kernel_w {
                let tap = ki * geom.kernel_w + kj;
                let row = (c * geom.taps() + tap) * positions;
                let dst = &mut cols[row..row + positions];
                let fd = similarity.map(|s| &s[tap * positions..(tap + 1) * positions]);
                for oy in 0..geom.out_h {
                    let y = geom.in_row(oy, ki);
                    if y < 0 || y as usize >= geom.in_h {
                        continue;
                    }
                    let src_row = &xc[y as usize * geom.in_w..(y as usize + 1) * geom.in_w];
                    for ox in 0..geom.out_w {
                        let x = geom.in_col(ox, kj);
                        if x < 0 || x as usize >= geom.in_w {
                            continue;
                        }
                        let p = oy * geom.out_w + ox;
                        let v = src_row[x as usize];
                        dst[p] = match fd {
                            Some(f) => v * f[p],
                            None => v,
                        };
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(
    grad_cols: &[f64],
    channels: usize,
    geom: &WindowGeometry,
    similarity: Option<&[f64]>,
) -> Vec<f64> {
    let positions = geom.positions();
    let plane = geom.in_h * geom.in_w;
    let mut gx = vec![0.0; channels * plane];
    for c in 0..channels {
        let gc = &mut gx[c * plane..(c + 1) * plane];
        for ki in 0..geom.kernel_h {
            for kj in 0..geom.kernel_w {
                let tap = ki * geom.kernel_w + kj;
                let row = (c * geom.taps() + tap) * positions;
                let src = &grad_cols[row..row + positions];
                let fd = similarity.map(|s| &s[tap * positions..(tap + 1) * positions]);
                for oy in 0..geom.out_h {
                    let y = geom.in_row(oy, ki);
                    if y < 0 || y as usize >= geom.in_h {
                        continue;
                    }
                    let dst_row = &mut gc[y as usize * geom.in_w..(y as usize + 1) * geom.in_w];
                    for ox in 0..geom.out_w {
                        let x = geom.in_col(ox, kj);
                        if x < 0 || x as usize >= geom.in_w {
                            continue;
                        }
                        let p = oy * geom.out_w + ox;
                        dst_row[x as usize] += match fd {
                            Some(f) => src[p] * f[p],
                            None => src[p],
                        };
                    }
                }
            }
        }
    }
    gx
}

fn check_input(
    spec: &ConvSpec,
    weights: &Tensor,
    bias: Option<&Tensor>,
    x: &Tensor,
) -> Result<WindowGeometry> {
    check_kernel(spec, weights, bias)?;
    let (c, h, w) = x.chw()?;
    if c != spec.in_channels {
        return Err(Error::shape(format!(
            "input has {c} channels but conv expects {}",
            spec.in_channels
        )));
    }
    spec.geometry(h, w)
}

/// Shared forward path. `similarity` is the `[tap][position]` table for the
/// depth-aware variant, `None` for the standard one.
pub(crate) fn conv_forward_saved(
    spec: &ConvSpec,
    weights: &Tensor,
    bias: Option<&Tensor>,
    x: &Tensor,
    similarity: Option<Vec<f64>>,
) -> Result<(Tensor, ConvSaved)> {
    let geom = check_input(spec, weights, bias, x)?;
    if let Some(s) = &similarity {
        if s.len() != geom.taps() * geom.positions() {
            return Err(Error::shape(
                "similarity table does not match conv geometry",
            ));
        }
    }
    let cols = im2col(x.data(), spec.in_channels, &geom, similarity.as_deref());
    let k = spec.in_channels * geom.taps();
    let p = geom.positions();
    let mut out = vec![0.0; spec.out_channels * p];
    matmul(spec.out_channels, k, p, weights.data(), &cols, &mut out);
    if let Some(bias) = bias {
        for (row, &b) in out.chunks_exact_mut(p).zip(bias.data()) {
            for v in row {
                *v += b;
            }
        }
    }
    let y = Tensor::new(&[spec.out_channels, geom.out_h, geom.out_w], out)?;
    Ok((
        y,
        ConvSaved {
            geom,
            in_channels: spec.in_channels,
            cols,
            similarity,
        },
    ))
}

/// Shared backward path. `grad_x` is skipped when `need_x` is false.
pub(crate) fn conv_backward_saved(
    spec: &ConvSpec,
    weights: &Tensor,
    saved: &ConvSaved,
    grad_y: &Tensor,
    need_x: bool,
) -> Result<(Option<Tensor>, Tensor, Option<Tensor>)> {
    let geom = &saved.geom;
    let want = [spec.out_channels, geom.out_h, geom.out_w];
    if grad_y.shape() != want {
        return Err(Error::shape(format!(
            "output gradient {:?} does not match conv output {want:?}",
            grad_y.shape()
        )));
    }
    let k = saved.in_channels * geom.taps();
    let p = geom.positions();
    let gy = grad_y.data();

    let mut gw = vec![0.0; spec.out_channels * k];
    matmul_bt(spec.out_channels, p, k, gy, &saved.cols, &mut gw);
    let grad_w = Tensor::new(&spec.weight_shape(), gw)?;

    let grad_b = if spec.has_bias {
        let gb = gy.chunks_exact(p).map(|row| row.iter().sum()).collect();
        Some(Tensor::new(&[spec.out_channels], gb)?)
    } else {
        None
    };

    let grad_x = if need_x {
        let mut gcols = vec![0.0; k * p];
        matmul_at(k, spec.out_channels, p, weights.data(), gy, &mut gcols);
        let gx = col2im(&gcols, saved.in_channels, geom, saved.similarity.as_deref());
        Some(Tensor::new(&[saved.in_channels, geom.in_h, geom.in_w], gx)?)
    } else {
        None
    };
    Ok((grad_x, grad_w, grad_b))
}

/// Standard 2-D cross-correlation with zero padding.
pub fn conv_forward(spec: &ConvSpec, kernel: &ConvKernel, x: &Tensor) -> Result<Tensor> {
    conv_forward_saved(spec, &kernel.weights, kernel.bias.as_ref(), x, None).map(|(y, _)| y)
}

pub fn conv_backward(
    spec: &ConvSpec,
    kernel: &ConvKernel,
    x: &Tensor,
    grad_y: &Tensor,
) -> Result<ConvGrads> {
    let (_, saved) = conv_forward_saved(spec, &kernel.weights, kernel.bias.as_ref(), x, None)?;
    let (gx, gw, gb) = conv_backward_saved(spec, &kernel.weights, &saved, grad_y, true)?;
    Ok(ConvGrads {
        x: gx.expect("requested"),
        weights: gw,
        bias: gb,
    })
}

/// Depth-aware convolution: every tap is scaled by the depth similarity
/// between the window center and the tap's (dilated) sampling location.
pub fn depth_conv_forward(
    spec: &ConvSpec,
    kernel: &ConvKernel,
    x: &Tensor,
    depth: &DepthMap,
    sim: &SimilaritySpec,
) -> Result<Tensor> {
    let geom = check_input(spec, &kernel.weights, kernel.bias.as_ref(), x)?;
    let table = window_similarity(&geom, depth, sim)?;
    conv_forward_saved(spec, &kernel.weights, kernel.bias.as_ref(), x, Some(table)).map(|(y, _)| y)
}

/// Gradients of [`depth_conv_forward`] with the similarity held constant.
pub fn depth_conv_backward(
    spec: &ConvSpec,
    kernel: &ConvKernel,
    x: &Tensor,
    depth: &DepthMap,
    sim: &SimilaritySpec,
    grad_y: &Tensor,
) -> Result<ConvGrads> {
    let geom = check_input(spec, &kernel.weights, kernel.bias.as_ref(), x)?;
    let table = window_similarity(&geom, depth, sim)?;
    let (_, saved) =
        conv_forward_saved(spec, &kernel.weights, kernel.bias.as_ref(), x, Some(table))?;
    let (gx, gw, gb) = conv_backward_saved(spec, &kernel.weights, &saved, grad_y, true)?;
    Ok(ConvGrads {
        x: gx.expect("requested"),
        weights: gw,
        bias: gb,
    })
}
