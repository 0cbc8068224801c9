//! Image corpora: directory ingestion and a deterministic procedural toy
//! corpus, with training crops and evaluation cropping.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Evaluation images are centre-cropped to multiples of this.
pub const EVAL_MULTIPLE: usize = 64;

#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<ImageTensor>,
    names: Vec<String>,
}

impl Dataset {
    pub fn new(images: Vec<ImageTensor>, names: Vec<String>) -> Result<Self> {
        if images.len() != names.len() {
            return Err(Error::Dataset("one name per image required".into()));
        }
        Ok(Dataset { images, names })
    }

    /// Loads every PNG/JPEG in a directory, sorted by file name.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut files: Vec<PathBuf> = rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Dataset(format!(
                "no PNG/JPEG images in {}",
                dir.display()
            )));
        }
        let mut images = Vec::with_capacity(files.len());
        let mut names = Vec::with_capacity(files.len());
        for f in files {
            images.push(ImageTensor::load(&f)?);
            names.push(
                f.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            );
        }
        Ok(Dataset { images, names })
    }

    /// Deterministic procedural corpus of `n` images of size h x w.
    pub fn synthetic(n: usize, h: usize, w: usize, seed: u64) -> Self {
        let images = (0..n)
            .map(|i| synthetic_image(h, w, seed.wrapping_mul(0x9E37_79B9).wrapping_add(i as u64)))
            .collect();
        let names = (0..n).map(|i| format!("synthetic_{i:04}")).collect();
        Dataset { images, names }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Splits off the last `n` images.
    pub fn split_tail(mut self, n: usize) -> (Dataset, Dataset) {
        let k = self.images.len().saturating_sub(n);
        let ti = self.images.split_off(k);
        let tn = self.names.split_off(k);
        (
            self,
            Dataset {
                images: ti,
                names: tn,
            },
        )
    }

    /// `batch` random crops of `crop` x `crop` from uniformly chosen images.
    pub fn random_crops<R: Rng>(
        &self,
        batch: usize,
        crop: usize,
        rng: &mut R,
    ) -> Result<Vec<ImageTensor>> {
        if self.images.is_empty() {
            return Err(Error::Dataset("empty dataset".into()));
        }
        (0..batch)
            .map(|_| {
                let im = &self.images[rng.random_range(0..self.images.len())];
                if im.height() < crop || im.width() < crop {
                    return Err(Error::Dataset(format!(
                        "image {}x{} smaller than crop {crop}",
                        im.height(),
                        im.width()
                    )));
                }
                let top = rng.random_range(0..=im.height() - crop);
                let left = rng.random_range(0..=im.width() - crop);
                im.crop(top, left, crop, crop)
            })
            .collect()
    }

    /// Evaluation view: every image centre-cropped to multiples of `multiple`.
    pub fn eval_cropped(&self, multiple: usize) -> Result<Dataset> {
        let images = self
            .images
            .iter()
            .map(|im| im.center_crop_to_multiple(multiple))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            images,
            names: self.names.clone(),
        })
    }
}

/// Piecewise-smooth synthetic scene: a colour gradient background, several
/// flat or shaded shapes, an occasional stripe texture and mild grain.
pub fn synthetic_image(h: usize, w: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut px = vec![0.0f32; h * w * 3];
    let c0: [f32; 3] = [rng.random(), rng.random(), rng.random()];
    let c1: [f32; 3] = [rng.random(), rng.random(), rng.random()];
    let angle: f32 = rng.random::<f32>() * std::f32::consts::TAU;
    let (ca, sa) = (angle.cos(), angle.sin());
    for r in 0..h {
        for c in 0..w {
            let u = ((c as f32 / w as f32 - 0.5) * ca + (r as f32 / h as f32 - 0.5) * sa + 0.5)
                .clamp(0.0, 1.0);
            for ch in 0..3 {
                px[(r * w + c) * 3 + ch] = c0[ch] * (1.0 - u) + c1[ch] * u;
            }
        }
    }
    let shapes = rng.random_range(2..7);
    for _ in 0..shapes {
        let col: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let cy = rng.random::<f32>() * h as f32;
        let cx = rng.random::<f32>() * w as f32;
        let ry = (0.08 + rng.random::<f32>() * 0.3) * h as f32;
        let rx = (0.08 + rng.random::<f32>() * 0.3) * w as f32;
        let kind = rng.random_range(0..3);
        let shade: f32 = rng.random::<f32>() * 0.4;
        for r in 0..h {
            for c in 0..w {
                let dy = (r as f32 - cy) / ry;
                let dx = (c as f32 - cx) / rx;
                let inside = match kind {
                    0 => dx * dx + dy * dy <= 1.0,
                    1 => dx.abs() <= 1.0 && dy.abs() <= 1.0,
                    _ => dx.abs() + dy.abs() <= 1.0,
                };
                if inside {
                    let s = 1.0 - shade * (dx * 0.5 + dy * 0.5 + 0.5).clamp(0.0, 1.0);
                    for ch in 0..3 {
                        px[(r * w + c) * 3 + ch] = col[ch] * s;
                    }
                }
            }
        }
    }
    if rng.random_bool(0.4) {
        let period = rng.random_range(3.0f32..12.0);
        let amp = rng.random_range(0.05f32..0.2);
        let vertical = rng.random_bool(0.5);
        for r in 0..h {
            for c in 0..w {
                let t = if vertical { c } else { r } as f32;
                let v = amp * (t / period * std::f32::consts::TAU).sin();
                for ch in 0..3 {
                    px[(r * w + c) * 3 + ch] += v;
                }
            }
        }
    }
    let grain = rng.random::<f32>() * 0.03;
    for v in px.iter_mut() {
        *v = (*v + grain * (rng.random::<f32>() - 0.5)).clamp(0.0, 1.0);
    }
    ImageTensor::new(h, w, px).expect("pixels clamped to range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_corpus_is_deterministic() {
        let a = Dataset::synthetic(4, 32, 48, 7);
        let b = Dataset::synthetic(4, 32, 48, 7);
        assert_eq!(a.images(), b.images());
        assert_ne!(a.images()[0], a.images()[1]);
        let c = Dataset::synthetic(4, 32, 48, 8);
        assert_ne!(a.images()[0], c.images()[0]);
    }

    #[test]
    fn crops_and_eval_view() {
        let d = Dataset::synthetic(3, 70, 130, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let crops = d.random_crops(5, 48, &mut rng).unwrap();
        assert!(crops.iter().all(|c| c.height() == 48 && c.width() == 48));
        let e = d.eval_cropped(64).unwrap();
        assert_eq!((e.images()[0].height(), e.images()[0].width()), (64, 128));
        assert!(d.random_crops(1, 100, &mut rng).is_err());
        let empty = Dataset::new(vec![], vec![]).unwrap();
        assert!(empty.random_crops(1, 8, &mut rng).is_err());
    }

    #[test]
    fn directory_loading_sorted() {
        let dir = tempfile::tempdir().unwrap();
        for (i, name) in ["b.png", "a.png"].iter().enumerate() {
            synthetic_image(16, 16, i as u64)
                .save_png(dir.path().join(name))
                .unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let d = Dataset::from_dir(dir.path()).unwrap();
        assert_eq!(d.names(), &["a", "b"]);
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(
            Dataset::from_dir(empty.path()),
            Err(Error::Dataset(_))
        ));
    }
}
