//! Synthetic RGB-D scenes, depth pyramids and on-disk datasets.

mod pnm;
mod store;
mod synth;

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::similarity::DepthMap;
use crate::tensor::Tensor;

pub use pnm::{
    read_pgm16_depth, read_pgm8_labels, read_ppm_rgb, write_pgm16_depth, write_pgm8_gray,
    write_pgm8_labels, write_ppm_rgb,
};
pub use store::{read_dataset, write_dataset, MANIFEST};
pub use synth::{generate, DatasetSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub rgb: Tensor,
    pub depth: DepthMap,
    pub labels: LabelMap,
}

impl Scene {
    pub fn new(rgb: Tensor, depth: DepthMap, labels: LabelMap) -> Result<Self> {
        let (c, h, w) = rgb.chw()?;
        if c != 3 {
            return Err(Error::shape(format!("scene rgb has {c} channels")));
        }
        if depth.dims() != (h, w) || labels.dims() != (h, w) {
            return Err(Error::shape(format!(
                "scene parts disagree: rgb {h}x{w}, depth {:?}, labels {:?}",
                depth.dims(),
                labels.dims()
            )));
        }
        for (i, &l) in labels.as_slice().iter().enumerate() {
            if l != IGNORE_LABEL && !depth.mask()[i] {
                return Err(Error::Data(format!(
                    "pixel {i} is labeled {l} but has no depth"
                )));
            }
        }
        Ok(Scene { rgb, depth, labels })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.depth.dims()
    }
}

/// Depth maps at successively halved resolutions; level 0 is the source.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthPyramid {
    levels: Vec<DepthMap>,
}

impl DepthPyramid {
    pub fn level(&self, k: usize) -> Option<&DepthMap> {
        self.levels.get(k)
    }

    /// Number of downsampled levels above the source.
    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn levels(&self) -> &[DepthMap] {
        &self.levels
    }
}

/// Builds levels `0..=levels` by keeping the top-left sample of every 2×2
/// block, so each level is `ceil(previous / 2)` on each side and every depth
/// (or hole) it holds is one that exists in the source.
pub fn build_pyramid(depth: &DepthMap, levels: usize) -> DepthPyramid {
    let mut out = vec![depth.clone()];
    for _ in 0..levels {
        let prev = out.last().expect("level 0 present");
        let (h, w) = prev.dims();
        let (nh, nw) = (h.div_ceil(2), w.div_ceil(2));
        let mut values = Vec::with_capacity(nh * nw);
        let mut valid = Vec::with_capacity(nh * nw);
        for y in 0..nh {
            for x in 0..nw {
                let i = 2 * y * w + 2 * x;
                values.push(prev.values()[i]);
                valid.push(prev.mask()[i]);
            }
        }
        let next = DepthMap::with_mask(nh, nw, values, valid).expect("downsampled map is valid");
        out.push(next);
    }
    DepthPyramid { levels: out }
}
