use serde::{Deserialize, Serialize};

use super::Scene;
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::similarity::DepthMap;
use crate::tensor::{Rng, Tensor};

/// Parameters of the synthetic scene generator.
///
/// Every scene is a far background wall (class 0) with axis-aligned
/// rectangles and discs in front of it. Each class owns a depth band and a
/// three-shade color palette. With `ambiguous` set, class 1 uses the
/// background palette, so only depth separates it from the wall.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Nearest and farthest depth in meters.
    pub depth_range: (f64, f64),
    pub ambiguous: bool,
    /// Side of the square color blocks that texture every surface.
    pub texture_block: usize,
    pub rgb_noise: f64,
    pub depth_noise: f64,
    pub hole_prob: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_images: 250,
            height: 64,
            width: 64,
            num_classes: 4,
            min_shapes: 2,
            max_shapes: 5,
            depth_range: (0.5, 4.0),
            ambiguous: true,
            texture_block: 2,
            rgb_noise: 0.02,
            depth_noise: 0.0,
            hole_prob: 0.0,
            seed: 42,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if self.num_images == 0 {
            return fail("dataset needs at least one image".into());
        }
        if self.num_classes == 0 || self.num_classes > IGNORE_LABEL as usize {
            return fail(format!(
                "num_classes must be in 1..=254, got {}",
                self.num_classes
            ));
        }
        if self.height == 0 || self.width == 0 {
            return fail(format!(
                "image size {}x{} is empty",
                self.height, self.width
            ));
        }
        if self.min_shapes > self.max_shapes {
            return fail(format!(
                "min_shapes {} exceeds max_shapes {}",
                self.min_shapes, self.max_shapes
            ));
        }
        let (near, far) = self.depth_range;
        if !(near > 0.0 && near < far && far.is_finite()) {
            return fail(format!("depth range {near}..{far} is invalid"));
        }
        if self.ambiguous && self.num_classes < 2 {
            return fail("color ambiguity needs at least two classes".into());
        }
        if self.texture_block == 0 {
            return fail("texture_block must be positive".into());
        }
        for (name, v) in [
            ("rgb_noise", self.rgb_noise),
            ("depth_noise", self.depth_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.hole_prob) {
            return fail(format!(
                "hole_prob must be in [0, 1], got {}",
                self.hole_prob
            ));
        }
        Ok(())
    }

    /// Depth band `[lo, hi)` of a class. The background takes the far fifth
    /// of the range; the rest is split evenly between the object classes
    /// with a gap between neighboring bands.
    pub fn depth_band(&self, class: usize) -> (f64, f64) {
        let (near, far) = self.depth_range;
        let span = far - near;
        if class == 0 {
            return (far - 0.2 * span, far);
        }
        let usable = 0.75 * span;
        let width = usable / (self.num_classes - 1) as f64;
        let lo = near + (class - 1) as f64 * width;
        (lo, lo + 0.8 * width)
    }

    /// Palette a class draws surface colors from.
    pub fn palette(&self, class: usize) -> [[f64; 3]; 3] {
        let source = if self.ambiguous && class == 1 {
            0
        } else {
            class
        };
        let hue = source as f64 / self.num_classes as f64;
        [0.45, 0.65, 0.85].map(|v| hsv(hue, 0.55, v))
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect {
        y0: isize,
        x0: isize,
        y1: isize,
        x1: isize,
    },
    Disc {
        cy: f64,
        cx: f64,
        r: f64,
    },
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => {
                let (y, x) = (y as isize, x as isize);
                y >= y0 && y < y1 && x >= x0 && x < x1
            }
            Shape::Disc { cy, cx, r } => {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                dy * dy + dx * dx <= r * r
            }
        }
    }
}

struct Surface {
    class: usize,
    shape: Option<Shape>,
    /// Palette index per texture block.
    texture: Vec<usize>,
}

/// Generates `spec.num_images` scenes. Scene `i` depends only on the seed
/// and `i`, so prefixes of larger datasets are identical.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<Scene>> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    (0..spec.num_images)
        .map(|i| scene(spec, &mut root.derive(i as u64)))
        .collect()
}

fn scene(spec: &DatasetSpec, rng: &mut Rng) -> Result<Scene> {
    let (h, w) = (spec.height, spec.width);
    let b = spec.texture_block;
    let (bh, bw) = (h.div_ceil(b), w.div_ceil(b));
    let class_depth: Vec<f64> = (0..spec.num_classes)
        .map(|c| {
            let (lo, hi) = spec.depth_band(c);
            rng.uniform(lo, hi)
        })
        .collect();
    let texture = |rng: &mut Rng| (0..bh * bw).map(|_| rng.below(3)).collect::<Vec<_>>();

    let mut surfaces = vec![Surface {
        class: 0,
        shape: None,
        texture: texture(rng),
    }];
    let count = spec.min_shapes + rng.below(spec.max_shapes - spec.min_shapes + 1);
    let min_side = (h.min(w) / 8).max(1) as f64;
    let max_side = (h.min(w) as f64 / 2.5).max(min_side + 1.0);
    for _ in 0..count {
        if spec.num_classes < 2 {
            break;
        }
        let class = 1 + rng.below(spec.num_classes - 1);
        let shape = if rng.bernoulli(0.5) {
            let sh = rng.uniform(min_side, max_side);
            let sw = rng.uniform(min_side, max_side);
            let y0 = rng.uniform(-sh / 4.0, h as f64 - 3.0 * sh / 4.0);
            let x0 = rng.uniform(-sw / 4.0, w as f64 - 3.0 * sw / 4.0);
            Shape::Rect {
                y0: y0.round() as isize,
                x0: x0.round() as isize,
                y1: (y0 + sh).round() as isize,
                x1: (x0 + sw).round() as isize,
            }
        } else {
            Shape::Disc {
                cy: rng.uniform(0.0, h as f64),
                cx: rng.uniform(0.0, w as f64),
                r: rng.uniform(min_side, max_side) / 2.0,
            }
        };
        surfaces.push(Surface {
            class,
            shape: Some(shape),
            texture: texture(rng),
        });
    }
    // Paint far to near so nearer surfaces occlude farther ones.
    surfaces[1..].sort_by(|a, b| class_depth[b.class].total_cmp(&class_depth[a.class]));

    let mut owner = vec![0usize; h * w];
    for (si, s) in surfaces.iter().enumerate().skip(1) {
        let shape = s.shape.expect("objects have shapes");
        for y in 0..h {
            for x in 0..w {
                if shape.contains(y, x) {
                    owner[y * w + x] = si;
                }
            }
        }
    }

    let palettes: Vec<_> = (0..spec.num_classes).map(|c| spec.palette(c)).collect();
    let mut rgb = vec![0.0; 3 * h * w];
    let mut depth = vec![0.0; h * w];
    let mut valid = vec![true; h * w];
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let s = &surfaces[owner[p]];
            let color = palettes[s.class][s.texture[(y / b) * bw + x / b]];
            for (c, &v) in color.iter().enumerate() {
                let noisy = if spec.rgb_noise > 0.0 {
                    rng.normal(v, spec.rgb_noise)
                } else {
                    v
                };
                rgb[c * h * w + p] = noisy.clamp(0.0, 1.0);
            }
            let d = class_depth[s.class];
            depth[p] = if spec.depth_noise > 0.0 {
                rng.normal(d, spec.depth_noise).max(0.01)
            } else {
                d
            };
            labels[p] = s.class as u8;
            if spec.hole_prob > 0.0 && rng.bernoulli(spec.hole_prob) {
                valid[p] = false;
                labels[p] = IGNORE_LABEL;
            }
        }
    }
    Scene::new(
        Tensor::new(&[3, h, w], rgb)?,
        DepthMap::with_mask(h, w, depth, valid)?,
        LabelMap::new(h, w, labels)?,
    )
}
