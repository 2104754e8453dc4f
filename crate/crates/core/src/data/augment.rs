use rand::Rng as _;

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const STD_FLOOR: f32 = 1e-6;
const CROP_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub flip_h_prob: f32,
    pub flip_v_prob: f32,
    /// Multiplicative brightness factor range.
    pub brightness: (f32, f32),
    /// Fraction of the source area kept by the random crop.
    pub crop_scale: (f32, f32),
    /// Width/height ratio range of the random crop.
    pub crop_ratio: (f32, f32),
    pub resolution: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            brightness: (0.8, 1.2),
            crop_scale: (0.8, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            resolution: 224,
        }
    }
}

impl AugmentConfig {
    /// No flips, unit brightness, full-area crops.
    pub fn identity(resolution: usize) -> Self {
        AugmentConfig {
            flip_h_prob: 0.0,
            flip_v_prob: 0.0,
            brightness: (1.0, 1.0),
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            resolution,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f32| (0.0..=1.0).contains(&p);
        let range = |(lo, hi): (f32, f32)| lo > 0.0 && lo <= hi && hi.is_finite();
        if !prob(self.flip_h_prob) || !prob(self.flip_v_prob) {
            return Err(Error::config("flip probabilities must lie in [0, 1]"));
        }
        if !range(self.brightness) || !range(self.crop_ratio) {
            return Err(Error::config("brightness and ratio ranges need 0 < lo <= hi"));
        }
        if !range(self.crop_scale) || self.crop_scale.1 > 1.0 {
            return Err(Error::config("crop scale range needs 0 < lo <= hi <= 1"));
        }
        if self.resolution == 0 {
            return Err(Error::config("output resolution must be positive"));
        }
        Ok(())
    }
}

/// Per-channel standardization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardize {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Standardize {
    pub fn fixed(channels: usize, mean: f32, std: f32) -> Self {
        Standardize {
            mean: vec![mean; channels],
            std: vec![std; channels],
        }
    }

    /// Statistics over every pixel of `data.items()[indices]`.
    pub fn fit(data: &LabeledDataset, indices: &[usize]) -> Result<Self> {
        let c = data.channels().ok_or_else(|| Error::arg("cannot fit statistics on an empty dataset"))?;
        if indices.is_empty() {
            return Err(Error::arg("cannot fit statistics on zero samples"));
        }
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut count = 0usize;
        for &i in indices {
            let img = &data.items()[i].image;
            let plane = img.len() / c;
            count += plane;
            for (ch, px) in img.data().chunks_exact(plane).enumerate() {
                for &v in px {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let n = count as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std = sq
            .iter()
            .zip(&sum)
            .map(|(q, s)| ((q / n - (s / n).powi(2)).max(0.0)).sqrt() as f32)
            .collect();
        Ok(Standardize { mean, std })
    }

    pub fn apply(&self, image: &mut Tensor<f32>) -> Result<()> {
        let c = image.shape()[0];
        if c != self.mean.len() {
            return Err(Error::shape(format!(
                "standardization has {} channels, image has {c}",
                self.mean.len()
            )));
        }
        let plane = image.len() / c;
        for (ch, px) in image.data_mut().chunks_exact_mut(plane).enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch].max(STD_FLOOR));
            for v in px {
                *v = (*v - m) / s;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Crop {
    x0: f32,
    y0: f32,
    w: f32,
    h: f32,
}

fn center_crop(h: usize, w: usize) -> Crop {
    let side = h.min(w) as f32;
    Crop {
        x0: (w as f32 - side) / 2.0,
        y0: (h as f32 - side) / 2.0,
        w: side,
        h: side,
    }
}

fn random_crop(h: usize, w: usize, cfg: &AugmentConfig, rng: &mut Rng) -> Crop {
    let area = (h * w) as f32;
    for _ in 0..CROP_ATTEMPTS {
        let scale = sample(rng, cfg.crop_scale);
        let (lr0, lr1) = (cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln());
        let ratio = sample(rng, (lr0, lr1)).exp();
        let cw = (area * scale * ratio).sqrt().round();
        let ch = (area * scale / ratio).sqrt().round();
        if cw >= 1.0 && ch >= 1.0 && cw <= w as f32 && ch <= h as f32 {
            let x0 = rng.gen_range(0..=(w - cw as usize)) as f32;
            let y0 = rng.gen_range(0..=(h - ch as usize)) as f32;
            return Crop { x0, y0, w: cw, h: ch };
        }
    }
    center_crop(h, w)
}

fn sample(rng: &mut Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Bilinear resample of `crop` (source pixel coordinates) to `out`×`out`.
fn resize_crop(image: &Tensor<f32>, crop: Crop, out: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = image.data();
    let sx = crop.w / out as f32;
    let sy = crop.h / out as f32;
    let mut dst = Vec::with_capacity(c * out * out);
    for ch in 0..c {
        let plane = &src[ch * h * w..][..h * w];
        for oy in 0..out {
            let fy = (crop.y0 + (oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let ty = fy - y0 as f32;
            for ox in 0..out {
                let fx = (crop.x0 + (ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let tx = fx - x0 as f32;
                let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
                let bot = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
                dst.push(top * (1.0 - ty) + bot * ty);
            }
        }
    }
    Tensor::new(&[c, out, out], dst)
}

fn flip(image: &mut Tensor<f32>, horizontal: bool) {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let d = image.data_mut();
    for ch in 0..c {
        let plane = &mut d[ch * h * w..][..h * w];
        if horizontal {
            for row in plane.chunks_exact_mut(w) {
                row.reverse();
            }
        } else {
            for y in 0..h / 2 {
                let (top, bottom) = plane.split_at_mut((h - 1 - y) * w);
                top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
            }
        }
    }
}

/// Training: random-area crop resized to the output resolution, random
/// flips, brightness scaling (clamped to `[0, 1]`), then standardization.
/// Eval: center crop, resize, standardization; no randomness is drawn.
pub fn preprocess(
    image: &Tensor<f32>,
    cfg: &AugmentConfig,
    norm: &Standardize,
    training: bool,
    rng: &mut Rng,
) -> Result<Tensor<f32>> {
    let (h, w) = match image.shape() {
        &[_, h, w] => (h, w),
        other => return Err(Error::shape(format!("expected C×H×W image, got {other:?}"))),
    };
    if h < 32 || w < 32 {
        return Err(Error::arg(format!("images must be at least 32×32, got {h}×{w}")));
    }
    let mut out = if training {
        let crop = random_crop(h, w, cfg, rng);
        let mut t = resize_crop(image, crop, cfg.resolution)?;
        if rng.gen::<f32>() < cfg.flip_h_prob {
            flip(&mut t, true);
        }
        if rng.gen::<f32>() < cfg.flip_v_prob {
            flip(&mut t, false);
        }
        let factor = sample(rng, cfg.brightness);
        if factor != 1.0 {
            for v in t.data_mut() {
                *v = (*v * factor).clamp(0.0, 1.0);
            }
        }
        t
    } else {
        resize_crop(image, center_crop(h, w), cfg.resolution)?
    };
    norm.apply(&mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn gradient_image(c: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(&[c, h, w], |i| (i % (h * w)) as f32 / (h * w) as f32).unwrap()
    }

    #[test]
    fn eval_is_deterministic() {
        let img = gradient_image(1, 48, 40);
        let cfg = AugmentConfig {
            resolution: 32,
            ..AugmentConfig::default()
        };
        let norm = Standardize::fixed(1, 0.5, 0.5);
        let a = preprocess(&img, &cfg, &norm, false, &mut rng::stream(1, "a", &[])).unwrap();
        let b = preprocess(&img, &cfg, &norm, false, &mut rng::stream(2, "b", &[])).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), [1, 32, 32]);
    }

    #[test]
    fn identity_resize_and_photometric_identity() {
        let img = gradient_image(1, 32, 32);
        let norm = Standardize::fixed(1, 0.0, 1.0);
        let cfg = AugmentConfig::identity(32);
        let t = preprocess(&img, &cfg, &norm, true, &mut rng::stream(0, "x", &[])).unwrap();
        assert!(t.max_abs_diff(&img).unwrap() < 1e-6);
    }

    #[test]
    fn flips_are_involutions() {
        let mut img = gradient_image(2, 5, 4);
        let orig = img.clone();
        flip(&mut img, false);
        assert_ne!(img, orig);
        flip(&mut img, false);
        assert_eq!(img, orig);
        flip(&mut img, true);
        assert_eq!(img.data()[0], orig.data()[3]);
    }

    #[test]
    fn constant_image_standardizes_to_zero() {
        let img = Tensor::full(&[1, 40, 40], 0.3f32).unwrap();
        let data = LabeledDataset::new(
            vec![super::super::Sample { image: img.clone(), label: 0 }],
            vec!["a".into()],
        )
        .unwrap();
        let norm = Standardize::fit(&data, &[0]).unwrap();
        let t = preprocess(&img, &AugmentConfig::identity(32), &norm, false, &mut rng::stream(0, "", &[])).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_small_images_and_bad_configs() {
        let img = gradient_image(1, 16, 16);
        let r = preprocess(&img, &AugmentConfig::default(), &Standardize::fixed(1, 0.0, 1.0), false, &mut rng::stream(0, "", &[]));
        assert!(r.is_err());
        let mut cfg = AugmentConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.flip_h_prob = 1.5;
        assert!(cfg.validate().is_err());
        let cfg = AugmentConfig {
            brightness: (1.2, 0.8),
            ..AugmentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
