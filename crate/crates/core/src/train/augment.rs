use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::similarity::DepthMap;
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub scale: bool,
    pub crop: bool,
    pub jitter: bool,
    pub scale_range: (f64, f64),
    /// Maximum relative gain change and additive offset per RGB channel.
    pub jitter_strength: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale: false,
            crop: false,
            jitter: false,
            scale_range: (0.75, 1.25),
            jitter_strength: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn all() -> Self {
        AugmentConfig {
            scale: true,
            crop: true,
            jitter: true,
            ..Self::default()
        }
    }

    pub fn any(&self) -> bool {
        self.scale || self.crop || self.jitter
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::arg(format!("scale range {lo}..{hi} is invalid")));
        }
        if !(0.0..1.0).contains(&self.jitter_strength) {
            return Err(Error::arg(format!(
                "jitter strength {} not in [0, 1)",
                self.jitter_strength
            )));
        }
        Ok(())
    }
}

/// Nearest-neighbor resize of every part of a scene by factor `s`. Depth
/// values are divided by `s`: enlarging the image moves the scene closer.
fn rescale(scene: &Scene, s: f64) -> Result<Scene> {
    let (h, w) = scene.dims();
    let nh = ((h as f64 * s).round() as usize).max(1);
    let nw = ((w as f64 * s).round() as usize).max(1);
    let src = |i: usize, n: usize, m: usize| ((i * m) / n).min(m - 1);
    let mut rgb = vec![0.0; 3 * nh * nw];
    let mut depth = vec![0.0; nh * nw];
    let mut valid = vec![false; nh * nw];
    let mut labels = vec![IGNORE_LABEL; nh * nw];
    for y in 0..nh {
        let sy = src(y, nh, h);
        for x in 0..nw {
            let sx = src(x, nw, w);
            let (p, q) = (y * nw + x, sy * w + sx);
            for c in 0..3 {
                rgb[c * nh * nw + p] = scene.rgb.data()[c * h * w + q];
            }
            depth[p] = scene.depth.values()[q] / s;
            valid[p] = scene.depth.mask()[q];
            labels[p] = scene.labels.as_slice()[q];
        }
    }
    Scene::new(
        Tensor::new(&[3, nh, nw], rgb)?,
        DepthMap::with_mask(nh, nw, depth, valid)?,
        LabelMap::new(nh, nw, labels)?,
    )
}

/// Window of size `h × w` at offset `(oy, ox)` (may be negative); outside
/// pixels are black, depthless and ignored.
fn crop(scene: &Scene, h: usize, w: usize, oy: isize, ox: isize) -> Result<Scene> {
    let (sh, sw) = scene.dims();
    let mut rgb = vec![0.0; 3 * h * w];
    let mut depth = vec![0.0; h * w];
    let mut valid = vec![false; h * w];
    let mut labels = vec![IGNORE_LABEL; h * w];
    for y in 0..h {
        let sy = y as isize + oy;
        if sy < 0 || sy >= sh as isize {
            continue;
        }
        for x in 0..w {
            let sx = x as isize + ox;
            if sx < 0 || sx >= sw as isize {
                continue;
            }
            let (p, q) = (y * w + x, sy as usize * sw + sx as usize);
            for c in 0..3 {
                rgb[c * h * w + p] = scene.rgb.data()[c * sh * sw + q];
            }
            depth[p] = scene.depth.values()[q];
            valid[p] = scene.depth.mask()[q];
            labels[p] = scene.labels.as_slice()[q];
        }
    }
    Scene::new(
        Tensor::new(&[3, h, w], rgb)?,
        DepthMap::with_mask(h, w, depth, valid)?,
        LabelMap::new(h, w, labels)?,
    )
}

/// Random scale, crop back to the original size, and per-channel color
/// jitter on RGB only.
pub fn augment(scene: &Scene, config: &AugmentConfig, rng: &mut Rng) -> Result<Scene> {
    let (h, w) = scene.dims();
    let mut out = if config.scale {
        let (lo, hi) = config.scale_range;
        let s = if lo < hi { rng.uniform(lo, hi) } else { lo };
        rescale(scene, s)?
    } else {
        scene.clone()
    };
    let (nh, nw) = out.dims();
    if config.crop || (nh, nw) != (h, w) {
        let offset = |n: usize, target: usize, rng: &mut Rng| -> isize {
            let slack = n as isize - target as isize;
            if !config.crop || slack == 0 {
                return slack / 2;
            }
            let span = slack.unsigned_abs() + 1;
            let k = rng.below(span) as isize;
            if slack > 0 {
                k
            } else {
                -k
            }
        };
        let oy = offset(nh, h, rng);
        let ox = offset(nw, w, rng);
        out = crop(&out, h, w, oy, ox)?;
    }
    if config.jitter {
        let j = config.jitter_strength;
        let plane = h * w;
        for c in 0..3 {
            let gain = rng.uniform(1.0 - j, 1.0 + j);
            let bias = rng.uniform(-j / 2.0, j / 2.0);
            for v in &mut out.rgb.data_mut()[c * plane..(c + 1) * plane] {
                *v = (*v * gain + bias).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec};

    fn scene() -> Scene {
        generate(&DatasetSpec {
            num_images: 1,
            height: 16,
            width: 12,
            ..DatasetSpec::default()
        })
        .unwrap()
        .remove(0)
    }

    #[test]
    fn disabled_is_identity() {
        let s = scene();
        assert_eq!(
            augment(&s, &AugmentConfig::default(), &mut Rng::new(0)).unwrap(),
            s
        );
    }

    #[test]
    fn output_keeps_training_size_and_invariants() {
        let s = scene();
        for seed in 0..20 {
            let a = augment(&s, &AugmentConfig::all(), &mut Rng::new(seed)).unwrap();
            assert_eq!(a.dims(), s.dims());
            assert!(a.rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
            a.labels.check_classes(4).unwrap();
        }
    }

    #[test]
    fn depth_divided_by_scale() {
        let s = scene();
        let up = rescale(&s, 2.0).unwrap();
        assert_eq!(up.dims(), (32, 24));
        assert_eq!(
            up.depth.get(0, 0).unwrap(),
            s.depth.get(0, 0).unwrap() / 2.0
        );
        assert_eq!(up.labels.get(31, 23), s.labels.get(15, 11));
    }

    #[test]
    fn jitter_touches_rgb_only() {
        let s = scene();
        let cfg = AugmentConfig {
            jitter: true,
            ..AugmentConfig::default()
        };
        let a = augment(&s, &cfg, &mut Rng::new(4)).unwrap();
        assert_eq!(a.depth, s.depth);
        assert_eq!(a.labels, s.labels);
        assert_ne!(a.rgb, s.rgb);
    }

    #[test]
    fn shrunk_image_padded_with_ignore() {
        let s = scene();
        let small = rescale(&s, 0.5).unwrap();
        let c = crop(&small, 16, 12, -4, -3).unwrap();
        assert_eq!(c.labels.get(0, 0), IGNORE_LABEL);
        assert!(!c.depth.is_valid(0, 0));
        assert_eq!(c.labels.get(4, 3), small.labels.get(0, 0));
    }
}
