use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use super::{LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .collect();
    out.sort();
    Ok(out)
}

fn is_png(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Planar C×H×W pixels in `[0, 1]`; 16-bit images are scaled by 1/65535.
fn decode(img: &DynamicImage) -> (usize, usize, usize, Vec<f32>) {
    let sixteen = matches!(
        img,
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_)
    );
    let color = img.color().has_color();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let planar = |interleaved: Vec<f32>, c: usize| {
        let mut out = vec![0.0; interleaved.len()];
        for (i, v) in interleaved.into_iter().enumerate() {
            out[(i % c) * h * w + i / c] = v;
        }
        out
    };
    match (color, sixteen) {
        (false, false) => (1, h, w, img.to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect()),
        (false, true) => (1, h, w, img.to_luma16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()),
        (true, false) => (3, h, w, planar(img.to_rgb8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(), 3)),
        (true, true) => (3, h, w, planar(img.to_rgb16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(), 3)),
    }
}

/// Loads `root/<class_name>/*.png`. Classes are ordered by directory name;
/// files that fail to decode are skipped with a warning. Mixed gray and color
/// inputs are unified to three channels.
pub fn load_image_dir(root: &Path) -> Result<LabeledDataset> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::arg(format!("{} has no class subdirectories", root.display())));
    }
    let mut names = Vec::new();
    let mut raw = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::arg(format!("class directory {} is not valid UTF-8", dir.display())))?
            .to_string();
        let mut count = 0;
        for file in sorted_entries(dir)?.into_iter().filter(|p| p.is_file() && is_png(p)) {
            match image::open(&file) {
                Ok(img) => {
                    raw.push((label, decode(&img)));
                    count += 1;
                }
                Err(e) => log::warn!("skipping {}: {e}", file.display()),
            }
        }
        if count == 0 {
            return Err(Error::arg(format!("class directory {} has no readable PNG images", dir.display())));
        }
        names.push(name);
    }
    let channels = if raw.iter().any(|(_, (c, ..))| *c == 3) { 3 } else { 1 };
    let items = raw
        .into_iter()
        .map(|(label, (c, h, w, px))| {
            let data = if c == channels {
                px
            } else {
                px.iter().copied().cycle().take(channels * h * w).collect()
            };
            Ok(Sample {
                image: Tensor::new(&[channels, h, w], data)?,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(items, names)
}

/// Writes every sample as an 8-bit PNG under `root/<class_name>/NNNN.png`.
pub fn save_image_dir(data: &LabeledDataset, root: &Path) -> Result<()> {
    let mut counters = vec![0usize; data.num_classes()];
    for name in data.class_names() {
        fs::create_dir_all(root.join(name))?;
    }
    for s in data.items() {
        let (c, h, w) = (s.image.shape()[0], s.image.shape()[1], s.image.shape()[2]);
        let to8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let path = root
            .join(&data.class_names()[s.label])
            .join(format!("{:04}.png", counters[s.label]));
        counters[s.label] += 1;
        let px = s.image.data();
        let result = match c {
            1 => ImageBuffer::<Luma<u8>, Vec<u8>>::from_raw(w as u32, h as u32, px.iter().map(|&v| to8(v)).collect())
                .map(|b| b.save(&path)),
            3 => {
                let interleaved = (0..h * w).flat_map(|i| (0..3).map(move |ch| to8(px[ch * h * w + i]))).collect();
                ImageBuffer::<Rgb<u8>, Vec<u8>>::from_raw(w as u32, h as u32, interleaved).map(|b| b.save(&path))
            }
            other => return Err(Error::arg(format!("cannot write {other}-channel image"))),
        };
        result
            .ok_or_else(|| Error::Image { path: path.clone(), detail: "buffer size mismatch".into() })?
            .map_err(|e| Error::Image { path: path.clone(), detail: e.to_string() })?;
    }
    Ok(())
}
