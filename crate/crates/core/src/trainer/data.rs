//! Image-folder dataset with random crops and horizontal flips.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Sorted list of the image files directly inside `dir`.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("cannot read dataset directory {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// Images at least `crop_size` on both sides, loaded into memory.
pub struct Dataset {
    images: Vec<RgbImage>,
    crop_size: usize,
    skipped: usize,
}

impl Dataset {
    /// Loads every readable image of `dir`; unreadable or undersized files
    /// are skipped with a warning.
    pub fn open(dir: impl AsRef<Path>, crop_size: usize) -> Result<Self> {
        Self::open_limited(dir, crop_size, usize::MAX)
    }

    /// Like [`Dataset::open`], keeping at most `limit` usable images.
    pub fn open_limited(dir: impl AsRef<Path>, crop_size: usize, limit: usize) -> Result<Self> {
        if crop_size == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        let dir = dir.as_ref();
        let mut images = Vec::new();
        let mut skipped = 0;
        for path in list_images(dir)? {
            if images.len() >= limit {
                break;
            }
            match image::open(&path) {
                Ok(img) => {
                    let img = img.to_rgb8();
                    let (w, h) = img.dimensions();
                    if (w as usize) < crop_size || (h as usize) < crop_size {
                        log::warn!("skipping {}: {w}x{h} is smaller than the {crop_size} crop", path.display());
                        skipped += 1;
                    } else {
                        images.push(img);
                    }
                }
                Err(e) => {
                    log::warn!("skipping unreadable {}: {e}", path.display());
                    skipped += 1;
                }
            }
        }
        if skipped > 0 {
            log::warn!("{skipped} image(s) excluded from {}", dir.display());
        }
        if images.is_empty() {
            return Err(Error::Config(format!("no usable images of at least {crop_size}px in {}", dir.display())));
        }
        log::info!("dataset {}: {} images", dir.display(), images.len());
        Ok(Self { images, crop_size, skipped })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn crop_size(&self) -> usize {
        self.crop_size
    }

    /// Endless batch stream, deterministic for a given `seed`.
    pub fn batches(&self, batch_size: usize, seed: u64) -> Batches<'_> {
        Batches { data: self, batch_size: batch_size.max(1), rng: ChaCha8Rng::seed_from_u64(seed), order: Vec::new() }
    }

    fn crop(&self, index: usize, rng: &mut impl Rng, out: &mut Vec<f32>) {
        let img = &self.images[index];
        let (w, h) = (img.width() as usize, img.height() as usize);
        let c = self.crop_size;
        let x0 = rng.random_range(0..=w - c);
        let y0 = rng.random_range(0..=h - c);
        let flip = rng.random_bool(0.5);
        let start = out.len();
        out.resize(start + 3 * c * c, 0.0);
        for y in 0..c {
            for x in 0..c {
                let sx = if flip { x0 + c - 1 - x } else { x0 + x };
                let px = img.get_pixel(sx as u32, (y0 + y) as u32);
                for ch in 0..3 {
                    out[start + ch * c * c + y * c + x] = f32::from(px[ch]) / 255.0;
                }
            }
        }
    }
}

/// Iterator of `(batch, 3, crop, crop)` tensors in `[0, 1]`; visits the
/// images in a fresh random order each epoch.
pub struct Batches<'a> {
    data: &'a Dataset,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
}

impl Batches<'_> {
    pub fn next_batch(&mut self) -> Result<Tensor> {
        let c = self.data.crop_size;
        let mut values = Vec::with_capacity(self.batch_size * 3 * c * c);
        for _ in 0..self.batch_size {
            if self.order.is_empty() {
                self.order = (0..self.data.len()).collect();
                self.order.shuffle(&mut self.rng);
            }
            let index = self.order.pop().expect("refilled above");
            self.data.crop(index, &mut self.rng, &mut values);
        }
        Ok(Tensor::from_vec(values, (self.batch_size, 3, c, c), &Device::Cpu)?)
    }
}

impl Iterator for Batches<'_> {
    type Item = Result<Tensor>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::synth::write_synthetic_dataset;

    #[test]
    fn batches_are_deterministic_and_shaped() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_dataset(dir.path(), 5, 80, 7).unwrap();
        let ds = Dataset::open(dir.path(), 64).unwrap();
        let sum = |seed| ds.batches(3, seed).next_batch().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(sum(1), sum(1));
        assert_ne!(sum(1), sum(2));
        assert_eq!(ds.batches(3, 1).next_batch().unwrap().dims(), &[3, 3, 64, 64]);
    }

    #[test]
    fn undersized_and_unreadable_files_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_dataset(dir.path(), 2, 80, 1).unwrap();
        RgbImage::new(40, 90).save(dir.path().join("small.png")).unwrap();
        std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        let ds = Dataset::open(dir.path(), 64).unwrap();
        assert_eq!((ds.len(), ds.skipped()), (2, 2));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::open(dir.path(), 64), Err(Error::Config(_))));
    }
}
