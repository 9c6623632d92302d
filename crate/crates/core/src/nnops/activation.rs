use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { 0.0 })
        .collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Passes the gradient where the forward input was strictly positive.
pub fn relu_backward(x: &Tensor, grad_y: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_y.shape() {
        return Err(Error::shape(format!(
            "relu gradient {:?} does not match input {:?}",
            grad_y.shape(),
            x.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_y.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape(), data)
}

/// Appends the per-channel spatial mean, broadcast over every position:
/// `[C, H, W] -> [2C, H, W]`.
pub fn global_pool_concat(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let plane = h * w;
    let mut out = Vec::with_capacity(2 * c * plane);
    out.extend_from_slice(x.data());
    for ch in 0..c {
        let mean = x.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64;
        out.extend(std::iter::repeat_n(mean, plane));
    }
    Tensor::new(&[2 * c, h, w], out)
}

pub fn global_pool_concat_backward(x_shape: &[usize], grad_y: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match *x_shape {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape(format!("expected [C, H, W], got {x_shape:?}"))),
    };
    if grad_y.shape() != [2 * c, h, w] {
        return Err(Error::shape(format!(
            "concat gradient {:?} does not match [{}, {h}, {w}]",
            grad_y.shape(),
            2 * c
        )));
    }
    let plane = h * w;
    let gy = grad_y.data();
    let mut gx = gy[..c * plane].to_vec();
    for ch in 0..c {
        let pooled = gy[(c + ch) * plane..(c + ch + 1) * plane]
            .iter()
            .sum::<f64>()
            / plane as f64;
        for v in &mut gx[ch * plane..(ch + 1) * plane] {
            *v += pooled;
        }
    }
    Tensor::new(x_shape, gx)
}

/// Nearest-neighbor resize of `[C, h, w]` to `[C, out_h, out_w]`; output
/// pixel `(y, x)` reads source `(y·h/out_h, x·w/out_w)` rounded down.
pub fn upsample_nearest(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("upsample target must be non-empty"));
    }
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let xc = &x.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..out_h {
            let sy = y * h / out_h;
            for xx in 0..out_w {
                out.push(xc[sy * w + xx * w / out_w]);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

pub fn upsample_nearest_backward(x_shape: &[usize], grad_y: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match *x_shape {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape(format!("expected [C, H, W], got {x_shape:?}"))),
    };
    let (gc, out_h, out_w) = grad_y.chw()?;
    if gc != c {
        return Err(Error::shape("upsample gradient channel mismatch"));
    }
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = &grad_y.data()[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
        for y in 0..out_h {
            let sy = y * h / out_h;
            for xx in 0..out_w {
                dst[sy * w + xx * w / out_w] += src[y * out_w + xx];
            }
        }
    }
    Tensor::new(x_shape, gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_examples() {
        let x = Tensor::new(&[2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::fill(&[2], 5.0).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 5.0]);
        assert!(relu_backward(&x, &Tensor::zeros(&[3]).unwrap()).is_err());
    }

    #[test]
    fn concat_constant_map() {
        let x = Tensor::fill(&[3, 2, 4], 1.75).unwrap();
        let y = global_pool_concat(&x).unwrap();
        assert_eq!(y.shape(), &[6, 2, 4]);
        assert!(y.data().iter().all(|&v| v == 1.75));
    }

    #[test]
    fn concat_appends_channel_means() {
        let x = Tensor::new(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, -1.0, -1.0, 5.0, 1.0]).unwrap();
        let y = global_pool_concat(&x).unwrap();
        assert_eq!(&y.data()[..8], x.data());
        assert!(y.data()[8..12].iter().all(|&v| v == 2.5));
        assert!(y.data()[12..16].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn concat_of_single_pixel_duplicates() {
        let x = Tensor::new(&[3, 1, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let y = global_pool_concat(&x).unwrap();
        assert_eq!(y.data(), &[1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);
    }

    #[test]
    fn concat_backward_adds_pooled_gradient() {
        let gy = Tensor::new(&[2, 1, 2], vec![1.0, 2.0, 4.0, 6.0]).unwrap();
        let gx = global_pool_concat_backward(&[1, 1, 2], &gy).unwrap();
        assert_eq!(gx.data(), &[6.0, 7.0]);
    }

    #[test]
    fn upsample_replicates_blocks() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample_nearest(&x, 4, 4).unwrap();
        assert_eq!(
            y.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let gx =
            upsample_nearest_backward(&[1, 2, 2], &Tensor::fill(&[1, 4, 4], 1.0).unwrap()).unwrap();
        assert_eq!(gx.data(), &[4.0; 4]);
    }
}
