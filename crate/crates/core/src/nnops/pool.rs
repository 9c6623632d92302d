use super::{window_similarity, PoolMode, PoolSpec, WindowGeometry};
use crate::error::{Error, Result};
use crate::similarity::{DepthMap, SimilaritySpec};
use crate::tensor::Tensor;

fn geometry(spec: &PoolSpec, x_shape: &[usize]) -> Result<(usize, WindowGeometry)> {
    let (c, h, w) = match *x_shape {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::shape(format!(
                "pooling expects [C, H, W], got {x_shape:?}"
            )))
        }
    };
    Ok((c, spec.geometry(h, w)?))
}

/// Per-position normalizer: the summed weights of the in-bounds taps.
/// Padded taps join neither numerator nor denominator.
fn denominators(geom: &WindowGeometry, weights: Option<&[f64]>) -> Vec<f64> {
    let positions = geom.positions();
    let mut den = vec![0.0; positions];
    for oy in 0..geom.out_h {
        for ox in 0..geom.out_w {
            let p = oy * geom.out_w + ox;
            let mut acc = 0.0;
            for ki in 0..geom.kernel_h {
                for kj in 0..geom.kernel_w {
                    if geom.inside(geom.in_row(oy, ki), geom.in_col(ox, kj)) {
                        acc +=
                            weights.map_or(1.0, |s| s[(ki * geom.kernel_w + kj) * positions + p]);
                    }
                }
            }
            den[p] = acc;
        }
    }
    den
}

/// Weighted window mean shared by standard (`weights = None`) and
/// depth-aware average pooling.
pub(crate) fn pool_avg_forward_weighted(
    spec: &PoolSpec,
    x: &Tensor,
    weights: Option<&[f64]>,
) -> Result<Tensor> {
    let (c, geom) = geometry(spec, x.shape())?;
    let positions = geom.positions();
    let plane = geom.in_h * geom.in_w;
    let den = denominators(&geom, weights);
    let mut out = vec![0.0; c * positions];
    for ch in 0..c {
        let xc = &x.data()[ch * plane..(ch + 1) * plane];
        for oy in 0..geom.out_h {
            for ox in 0..geom.out_w {
                let p = oy * geom.out_w + ox;
                let mut num = 0.0;
                for ki in 0..geom.kernel_h {
                    let y = geom.in_row(oy, ki);
                    for kj in 0..geom.kernel_w {
                        let xx = geom.in_col(ox, kj);
                        if !geom.inside(y, xx) {
                            continue;
                        }
                        let v = xc[y as usize * geom.in_w + xx as usize];
                        num += match weights {
                            Some(s) => s[(ki * geom.kernel_w + kj) * positions + p] * v,
                            None => v,
                        };
                    }
                }
                out[ch * positions + p] = num / den[p];
            }
        }
    }
    Tensor::new(&[c, geom.out_h, geom.out_w], out)
}

pub(crate) fn pool_avg_backward_weighted(
    spec: &PoolSpec,
    x_shape: &[usize],
    weights: Option<&[f64]>,
    grad_y: &Tensor,
) -> Result<Tensor> {
    let (c, geom) = geometry(spec, x_shape)?;
    let want = [c, geom.out_h, geom.out_w];
    if grad_y.shape() != want {
        return Err(Error::shape(format!(
            "output gradient {:?} does not match pool output {want:?}",
            grad_y.shape()
        )));
    }
    let positions = geom.positions();
    let plane = geom.in_h * geom.in_w;
    let den = denominators(&geom, weights);
    let mut gx = vec![0.0; c * plane];
    for ch in 0..c {
        let gc = &mut gx[ch * plane..(ch + 1) * plane];
        let gyc = &grad_y.data()[ch * positions..(ch + 1) * positions];
        for oy in 0..geom.out_h {
            for ox in 0..geom.out_w {
                let p = oy * geom.out_w + ox;
                for ki in 0..geom.kernel_h {
                    let y = geom.in_row(oy, ki);
                    for kj in 0..geom.kernel_w {
                        let xx = geom.in_col(ox, kj);
                        if !geom.inside(y, xx) {
                            continue;
                        }
                        let g = match weights {
                            Some(s) => gyc[p] * s[(ki * geom.kernel_w + kj) * positions + p],
                            None => gyc[p],
                        };
                        gc[y as usize * geom.in_w + xx as usize] += g / den[p];
                    }
                }
            }
        }
    }
    Tensor::new(x_shape, gx)
}

/// Window mean over the in-bounds members (padding excluded from the count).
pub fn avg_pool_forward(spec: &PoolSpec, x: &Tensor) -> Result<Tensor> {
    pool_avg_forward_weighted(spec, x, None)
}

pub fn avg_pool_backward(spec: &PoolSpec, x_shape: &[usize], grad_y: &Tensor) -> Result<Tensor> {
    pool_avg_backward_weighted(spec, x_shape, None, grad_y)
}

fn similarity_table(
    spec: &PoolSpec,
    x_shape: &[usize],
    depth: &DepthMap,
    sim: &SimilaritySpec,
) -> Result<Vec<f64>> {
    let (_, geom) = geometry(spec, x_shape)?;
    window_similarity(&geom, depth, sim)
}

/// Window mean weighted by depth similarity to the window center, normalized
/// so the weights of each window sum to one.
pub fn depth_avg_pool_forward(
    spec: &PoolSpec,
    x: &Tensor,
    depth: &DepthMap,
    sim: &SimilaritySpec,
) -> Result<Tensor> {
    let table = similarity_table(spec, x.shape(), depth, sim)?;
    pool_avg_forward_weighted(spec, x, Some(&table))
}

pub fn depth_avg_pool_backward(
    spec: &PoolSpec,
    x_shape: &[usize],
    depth: &DepthMap,
    sim: &SimilaritySpec,
    grad_y: &Tensor,
) -> Result<Tensor> {
    let table = similarity_table(spec, x_shape, depth, sim)?;
    pool_avg_backward_weighted(spec, x_shape, Some(&table), grad_y)
}

/// Flat input offset of the winning element for every output element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaxPoolIndices {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl MaxPoolIndices {
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// Max pooling; padded positions never win, ties go to the first element in
/// row-major window order.
pub fn max_pool_forward(spec: &PoolSpec, x: &Tensor) -> Result<(Tensor, MaxPoolIndices)> {
    if spec.mode != PoolMode::Max {
        return Err(Error::arg(format!(
            "max_pool_forward called with {:?}",
            spec.mode
        )));
    }
    let (c, geom) = geometry(spec, x.shape())?;
    let positions = geom.positions();
    let plane = geom.in_h * geom.in_w;
    let mut out = vec![0.0; c * positions];
    let mut argmax = vec![0; c * positions];
    for ch in 0..c {
        let xc = &x.data()[ch * plane..(ch + 1) * plane];
        for oy in 0..geom.out_h {
            for ox in 0..geom.out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = usize::MAX;
                for ki in 0..geom.kernel_h {
                    let y = geom.in_row(oy, ki);
                    for kj in 0..geom.kernel_w {
                        let xx = geom.in_col(ox, kj);
                        if !geom.inside(y, xx) {
                            continue;
                        }
                        let i = y as usize * geom.in_w + xx as usize;
                        if best_at == usize::MAX || xc[i] > best {
                            best = xc[i];
                            best_at = i;
                        }
                    }
                }
                let o = ch * positions + oy * geom.out_w + ox;
                out[o] = best;
                argmax[o] = ch * plane + best_at;
            }
        }
    }
    Ok((
        Tensor::new(&[c, geom.out_h, geom.out_w], out)?,
        MaxPoolIndices {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn max_pool_backward(indices: &MaxPoolIndices, grad_y: &Tensor) -> Result<Tensor> {
    if grad_y.len() != indices.argmax.len() {
        return Err(Error::shape(format!(
            "output gradient has {} elements, pool output has {}",
            grad_y.len(),
            indices.argmax.len()
        )));
    }
    let mut gx = Tensor::zeros(&indices.input_shape)?;
    let gxd = gx.data_mut();
    for (&i, &g) in indices.argmax.iter().zip(grad_y.data()) {
        gxd[i] += g;
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(kh: usize, kw: usize, mode: PoolMode) -> PoolSpec {
        PoolSpec {
            kernel_h: kh,
            kernel_w: kw,
            stride: 1,
            padding: 0,
            mode,
        }
    }

    #[test]
    fn constant_depth_reduces_to_mean() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let spec = pool(2, 2, PoolMode::DepthAvg);
        let depth = DepthMap::constant(2, 2, 1.5).unwrap();
        let y = depth_avg_pool_forward(&spec, &x, &depth, &SimilaritySpec::default()).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(avg_pool_forward(&spec, &x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn half_similar_neighbor() {
        // Center is the first pixel of a 1x2 window; the second sits ln2/alpha
        // meters away so its similarity is exactly 0.5.
        let alpha = 8.3;
        let x = Tensor::new(&[1, 1, 2], vec![0.0, 10.0]).unwrap();
        let depth = DepthMap::new(1, 2, vec![1.0, 1.0 + std::f64::consts::LN_2 / alpha]).unwrap();
        let sim = SimilaritySpec::exponential(alpha).unwrap();
        let y = depth_avg_pool_forward(&pool(1, 2, PoolMode::DepthAvg), &x, &depth, &sim).unwrap();
        assert!((y.data()[0] - 10.0 / 3.0).abs() < 1e-12, "{:?}", y);
    }

    #[test]
    fn unit_window_is_identity() {
        let x = Tensor::new(&[2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        let depth = DepthMap::new(2, 3, vec![0.5, 3.0, 1.0, 9.0, 2.0, 0.1]).unwrap();
        let y = depth_avg_pool_forward(
            &pool(1, 1, PoolMode::DepthAvg),
            &x,
            &depth,
            &SimilaritySpec::default(),
        )
        .unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn constant_depth_backward_is_uniform() {
        let spec = PoolSpec::new(3, 1, 1, PoolMode::DepthAvg);
        let depth = DepthMap::constant(4, 4, 2.0).unwrap();
        let gy = Tensor::new(&[1, 4, 4], (0..16).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let a = depth_avg_pool_backward(&spec, &[1, 4, 4], &depth, &SimilaritySpec::default(), &gy)
            .unwrap();
        let b = avg_pool_backward(&spec, &[1, 4, 4], &gy).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn backward_weights_sum_to_one_per_window() {
        // With a single unit gradient at one output, the input gradient is the
        // window's effective weight vector.
        let spec = PoolSpec::new(3, 1, 1, PoolMode::DepthAvg);
        let depth =
            DepthMap::new(4, 4, (0..16).map(|i| ((i * 5) % 7) as f64 * 0.15).collect()).unwrap();
        for p in 0..16 {
            let mut gy = Tensor::zeros(&[1, 4, 4]).unwrap();
            gy.data_mut()[p] = 1.0;
            let gx =
                depth_avg_pool_backward(&spec, &[1, 4, 4], &depth, &SimilaritySpec::default(), &gy)
                    .unwrap();
            assert!((gx.sum() - 1.0).abs() < 1e-15);
            assert!(gx.data().iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn max_pool_routes_to_argmax() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let spec = pool(2, 2, PoolMode::Max);
        let (y, idx) = max_pool_forward(&spec, &x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let gx = max_pool_backward(&idx, &Tensor::fill(&[1, 1, 1], 1.0).unwrap()).unwrap();
        assert_eq!(gx.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn max_pool_tie_goes_to_first() {
        let x = Tensor::new(&[1, 2, 2], vec![5.0, 5.0, 0.0, 0.0]).unwrap();
        let (_, idx) = max_pool_forward(&pool(2, 2, PoolMode::Max), &x).unwrap();
        let gx = max_pool_backward(&idx, &Tensor::fill(&[1, 1, 1], 1.0).unwrap()).unwrap();
        assert_eq!(gx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_ignores_padding() {
        let x = Tensor::fill(&[1, 2, 2], -3.0).unwrap();
        let (y, _) = max_pool_forward(&PoolSpec::new(3, 2, 1, PoolMode::Max), &x).unwrap();
        assert_eq!(y.data(), &[-3.0]);
    }

    #[test]
    fn padded_average_excludes_padding() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = avg_pool_forward(&PoolSpec::new(3, 1, 1, PoolMode::Avg), &x).unwrap();
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::zeros(&[1, 4, 4]).unwrap();
        let depth = DepthMap::constant(3, 4, 1.0).unwrap();
        let spec = PoolSpec::new(2, 2, 0, PoolMode::DepthAvg);
        assert!(matches!(
            depth_avg_pool_forward(&spec, &x, &depth, &SimilaritySpec::default()),
            Err(Error::Shape(_))
        ));
        let gy = Tensor::zeros(&[1, 3, 3]).unwrap();
        assert!(matches!(
            avg_pool_backward(&spec, &[1, 4, 4], &gy),
            Err(Error::Shape(_))
        ));
        let flat = Tensor::zeros(&[4, 4]).unwrap();
        assert!(matches!(
            avg_pool_forward(&spec, &flat),
            Err(Error::Shape(_))
        ));
    }
}
