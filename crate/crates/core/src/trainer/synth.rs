//! Procedural images for smoke runs: gradients, shapes, stripes and grain.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::Result;

/// One `size x size` image drawn from `rng`.
pub fn synthetic_image(size: usize, rng: &mut impl Rng) -> RgbImage {
    synthetic_image_wh(size, size, rng)
}

pub fn synthetic_image_wh(width: usize, height: usize, rng: &mut impl Rng) -> RgbImage {
    let (w, h) = (width as f32, height as f32);
    let c0: [f32; 3] = rng.random();
    let c1: [f32; 3] = rng.random();
    let angle = rng.random_range(0.0..std::f32::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut px = vec![[0f32; 3]; width * height];
    for y in 0..height {
        for x in 0..width {
            let t = (((x as f32 / w - 0.5) * ca + (y as f32 / h - 0.5) * sa) + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                px[y * width + x][c] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }
    for _ in 0..rng.random_range(2..7) {
        let color: [f32; 3] = rng.random();
        let (cx, cy) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
        let (rx, ry) = (rng.random_range(0.05..0.35) * w, rng.random_range(0.05..0.35) * h);
        let ellipse = rng.random_bool(0.5);
        let stripes = rng.random_bool(0.3).then(|| (rng.random_range(0.1..0.6f32), rng.random_range(0.0..std::f32::consts::TAU)));
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = ((x as f32 - cx) / rx, (y as f32 - cy) / ry);
                let inside = if ellipse { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                if !inside {
                    continue;
                }
                let shade = stripes.map_or(1.0, |(f, p)| 0.75 + 0.25 * (f * x as f32 + p).sin());
                for c in 0..3 {
                    px[y * width + x][c] = color[c] * shade;
                }
            }
        }
    }
    let grain = Normal::new(0.0f32, 0.02).expect("valid std");
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let p = px[y as usize * width + x as usize];
        let mut q = |v: f32| ((v + grain.sample(rng)).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(p[0]), q(p[1]), q(p[2])])
    })
}

/// Writes `count` PNGs named `img_NNNN.png` into `dir` and returns their paths.
pub fn write_synthetic_dataset(dir: impl AsRef<Path>, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let path = dir.join(format!("img_{i:04}.png"));
            synthetic_image(size, &mut rng).save(&path)?;
            Ok(path)
        })
        .collect()
}
