//! Procedural four-class grayscale images standing in for MRI slices.
//!
//! Every image shares a dim oval "head" with pixel noise (always below 0.5).
//! Classes add bright structure on top:
//!
//! 0. one large rotated ellipse near the center
//! 1. two overlapping round blobs
//! 2. one small disk well off center
//! 3. nothing

use std::f32::consts::PI;

use rand::Rng as _;

use super::{LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const SYNTH_CLASSES: [&str; 4] = ["0-ellipse", "1-two-blobs", "2-small-disk", "3-no-tumor"];

/// Smooth inside-indicator for a unit-normalized radial distance.
fn soft_inside(r: f32, edge: f32) -> f32 {
    ((1.0 - r) / edge + 0.5).clamp(0.0, 1.0)
}

struct Canvas {
    res: usize,
    px: Vec<f32>,
}

impl Canvas {
    fn coords(&self, i: usize) -> (f32, f32) {
        let r = self.res as f32;
        ((i % self.res) as f32 / r - 0.5, (i / self.res) as f32 / r - 0.5)
    }

    /// Paints an ellipse of semi-axes `(a, b)` rotated by `theta`, in units of the image side.
    fn ellipse(&mut self, cx: f32, cy: f32, a: f32, b: f32, theta: f32, level: f32) {
        let (s, c) = theta.sin_cos();
        let edge = 1.5 / (a.min(b) * self.res as f32);
        for i in 0..self.px.len() {
            let (x, y) = self.coords(i);
            let (dx, dy) = (x - cx, y - cy);
            let u = (dx * c + dy * s) / a;
            let v = (-dx * s + dy * c) / b;
            let w = soft_inside((u * u + v * v).sqrt(), edge);
            if w > 0.0 {
                self.px[i] = self.px[i].max(level * w + self.px[i] * (1.0 - w));
            }
        }
    }
}

fn render(label: usize, res: usize, r: &mut rng::Rng) -> Tensor<f32> {
    let mut canvas = Canvas {
        res,
        px: vec![0.0; res * res],
    };
    let head = r.gen_range(0.22..0.3);
    canvas.ellipse(
        r.gen_range(-0.03..0.03),
        r.gen_range(-0.03..0.03),
        r.gen_range(0.36..0.44),
        r.gen_range(0.3..0.4),
        r.gen_range(-0.3..0.3),
        head,
    );
    match label {
        0 => {
            let a = r.gen_range(0.2..0.25);
            let b = a * r.gen_range(0.45..0.62);
            canvas.ellipse(
                r.gen_range(-0.08..0.08),
                r.gen_range(-0.08..0.08),
                a,
                b,
                r.gen_range(0.0..PI),
                r.gen_range(0.8..1.0),
            );
        }
        1 => {
            let rad = r.gen_range(0.065..0.085);
            let dir = r.gen_range(0.0..2.0 * PI);
            let sep = rad * r.gen_range(1.7..1.95);
            let (cx, cy) = (r.gen_range(-0.06..0.06), r.gen_range(-0.06..0.06));
            let (dx, dy) = (dir.cos() * sep / 2.0, dir.sin() * sep / 2.0);
            let level = r.gen_range(0.8..1.0);
            canvas.ellipse(cx - dx, cy - dy, rad, rad, 0.0, level);
            canvas.ellipse(cx + dx, cy + dy, rad, rad, 0.0, level);
        }
        2 => {
            let rad = r.gen_range(0.035..0.05);
            let ang = r.gen_range(0.0..2.0 * PI);
            let dist = r.gen_range(0.2..0.28);
            canvas.ellipse(ang.cos() * dist, ang.sin() * dist, rad, rad, 0.0, r.gen_range(0.8..1.0));
        }
        _ => {}
    }
    let noise = r.gen_range(0.05..0.12);
    for v in &mut canvas.px {
        *v = (*v + r.gen_range(-noise..noise)).clamp(0.0, 1.0);
    }
    Tensor::new(&[1, res, res], canvas.px).expect("canvas has res*res pixels")
}

/// `n_per_class` single-channel images per class at `resolution`×`resolution`,
/// ordered class-major. Sample `i` of class `c` depends only on `(seed, c, i)`.
pub fn synth_dataset(n_per_class: usize, resolution: usize, seed: u64) -> Result<LabeledDataset> {
    if n_per_class == 0 {
        return Err(Error::arg("need at least one image per class"));
    }
    if resolution < 16 {
        return Err(Error::arg(format!("synthetic resolution must be at least 16, got {resolution}")));
    }
    let mut items = Vec::with_capacity(4 * n_per_class);
    for label in 0..SYNTH_CLASSES.len() {
        for i in 0..n_per_class {
            let mut r = rng::stream(seed, "synth", &[label as u64, i as u64]);
            items.push(Sample {
                image: render(label, resolution, &mut r),
                label,
            });
        }
    }
    LabeledDataset::new(items, SYNTH_CLASSES.iter().map(|s| s.to_string()).collect())
}
