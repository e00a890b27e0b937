//! Image/mask samples, folder ingestion, grayscale export, and a synthetic
//! polyp generator for desk-scale runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Mask pixels at or above this 8-bit level are foreground.
pub const MASK_LEVEL: u8 = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `1×H×W`, values in `{0, 1}`.
    pub mask: Tensor<f32>,
}

impl SegSample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let id = id.into();
        let (ish, msh) = (image.shape(), mask.shape());
        if ish.len() != 3 || ish[0] != 3 || msh.len() != 3 || msh[0] != 1 || ish[1..] != msh[1..] {
            return Err(Error::Shape(format!(
                "sample {id}: image {ish:?} and mask {msh:?} do not pair"
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract(format!("sample {id}: mask is not binary")));
        }
        Ok(Self { id, image, mask })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.mask.shape()[1], self.mask.shape()[2])
    }

    /// The image as a `1×3×h×w` batch at the requested size.
    pub fn input(&self, size: (usize, usize)) -> Result<Tensor<f32>> {
        let (h, w) = self.size();
        let x = self.image.clone().reshape(&[1, 3, h, w])?;
        if (h, w) == size {
            Ok(x)
        } else {
            x.resize_bilinear(size.0, size.1)
        }
    }
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// RGB image as a `3×H×W` tensor in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(image_err(path))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Grayscale mask as a `1×H×W` tensor, binarized at [`MASK_LEVEL`].
pub fn read_mask(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(image_err(path))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .pixels()
        .map(|p| if p[0] >= MASK_LEVEL { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(&[1, h, w], data)
}

/// Writes a `[0, 1]` map (`h·w` values) as an 8-bit grayscale PNG.
pub fn write_gray(path: &Path, values: &[f32], h: usize, w: usize) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::Shape(format!(
            "{} values for a {h}x{w} image",
            values.len()
        )));
    }
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = values[y as usize * w + x as usize];
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(image_err(path))
}

/// Writes a `3×H×W` tensor in `[0, 1]` as an RGB PNG.
pub fn write_rgb(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::Shape(format!("expected 3xHxW, got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let d = image.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| {
            (d[(ch * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([at(0), at(1), at(2)])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(image_err(path))
}

fn stems(dir: &Path, allowed: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir)
        .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", dir.display())))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        let stem = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned);
        if let (Some(ext), Some(stem), true) = (ext, stem, path.is_file()) {
            if allowed.contains(&ext.as_str()) {
                if let Some(prev) = out.insert(stem.clone(), path.clone()) {
                    return Err(Error::Ingestion(format!(
                        "ambiguous sample {stem}: {} and {}",
                        prev.display(),
                        path.display()
                    )));
                }
            }
        }
    }
    Ok(out)
}

/// Loads `<dir>/images/<name>.(png|jpg|jpeg)` paired with
/// `<dir>/masks/<name>.png`, sorted by name.
pub fn load_dir(dir: &Path) -> Result<Vec<SegSample>> {
    let images = stems(&dir.join("images"), &IMAGE_EXTENSIONS)?;
    let masks = stems(&dir.join("masks"), &["png"])?;
    if let Some(name) = images.keys().find(|k| !masks.contains_key(*k)) {
        return Err(Error::Ingestion(format!(
            "image {name} has no mask in {}",
            dir.join("masks").display()
        )));
    }
    if let Some(name) = masks.keys().find(|k| !images.contains_key(*k)) {
        return Err(Error::Ingestion(format!(
            "mask {name} has no image in {}",
            dir.join("images").display()
        )));
    }
    if images.is_empty() {
        return Err(Error::Config(format!("no samples under {}", dir.display())));
    }
    images
        .iter()
        .map(|(name, ipath)| {
            let image = read_rgb(ipath)?;
            let mask = read_mask(&masks[name])?;
            SegSample::new(name.clone(), image, mask).map_err(|e| Error::Ingestion(e.to_string()))
        })
        .collect()
}

/// Writes samples in the layout [`load_dir`] reads.
pub fn save_dir(dir: &Path, samples: &[SegSample]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    for s in samples {
        let (h, w) = s.size();
        write_rgb(&dir.join("images").join(format!("{}.png", s.id)), &s.image)?;
        write_gray(
            &dir.join("masks").join(format!("{}.png", s.id)),
            s.mask.data(),
            h,
            w,
        )?;
    }
    Ok(())
}

/// Textured pinkish background with one bright elliptical blob spanning
/// roughly half to four fifths of each side. Pixel values are quantized to
/// 8 bits so a save/load cycle is lossless.
pub fn synthetic(count: usize, size: (usize, usize), seed: u64) -> Vec<SegSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = size;
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0;
    (0..count)
        .map(|i| {
            let shapes: Vec<(f64, f64, f64, f64)> = (0..1)
                .map(|_| {
                    let ry = rng.gen_range(0.25..0.4) * h as f64;
                    let rx = rng.gen_range(0.25..0.4) * w as f64;
                    let cy = rng.gen_range(ry..h as f64 - ry);
                    let cx = rng.gen_range(rx..w as f64 - rx);
                    (cy, cx, ry, rx)
                })
                .collect();
            let tint: [f64; 3] = [
                rng.gen_range(0.6..0.8),
                rng.gen_range(0.3..0.45),
                rng.gen_range(0.3..0.45),
            ];
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let mut image = vec![0.0f32; 3 * h * w];
            let mut mask = vec![0.0f32; h * w];
            for y in 0..h {
                for x in 0..w {
                    let r = shapes
                        .iter()
                        .map(|&(cy, cx, ry, rx)| {
                            ((y as f64 + 0.5 - cy) / ry).powi(2)
                                + ((x as f64 + 0.5 - cx) / rx).powi(2)
                        })
                        .fold(f64::INFINITY, f64::min);
                    let inside = r <= 1.0;
                    let texture = 0.05 * ((x as f64 * 0.7 + phase).sin() * (y as f64 * 0.5).cos());
                    let noise = rng.gen_range(-0.03..0.03);
                    for (c, &t) in tint.iter().enumerate() {
                        let v = if inside {
                            t * 0.6 + 0.25 * (1.0 - r) + [0.15, 0.1, 0.05][c]
                        } else {
                            t
                        };
                        image[(c * h + y) * w + x] = q(v + texture + noise);
                    }
                    mask[y * w + x] = if inside { 1.0 } else { 0.0 };
                }
            }
            SegSample {
                id: format!("synth_{i:03}"),
                image: Tensor::new(&[3, h, w], image).expect("shape matches"),
                mask: Tensor::new(&[1, h, w], mask).expect("shape matches"),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_rejects_mismatched_extent() {
        let r = SegSample::new("a", Tensor::zeros(&[3, 4, 4]), Tensor::zeros(&[1, 4, 5]));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn synthetic_roundtrips_through_png() {
        let dir = tempfile::tempdir().unwrap();
        let s = synthetic(2, (32, 32), 3);
        save_dir(dir.path(), &s).unwrap();
        assert_eq!(load_dir(dir.path()).unwrap(), s);
    }

    #[test]
    fn unmatched_pair_names_offender() {
        let dir = tempfile::tempdir().unwrap();
        save_dir(dir.path(), &synthetic(2, (32, 32), 3)).unwrap();
        fs::remove_file(dir.path().join("masks/synth_001.png")).unwrap();
        match load_dir(dir.path()) {
            Err(Error::Ingestion(m)) => assert!(m.contains("synth_001")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_dataset_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        fs::create_dir_all(dir.path().join("masks")).unwrap();
        assert!(matches!(load_dir(dir.path()), Err(Error::Config(_))));
    }
}
