//! Reproducible blob dataset with exact masks.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{save_image, save_mask};
use crate::tensor::{BinaryMask, Image, SampleRecord};

pub const SYNTH_SIZE: usize = 256;

/// Parameters of one generated sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub background: f64,
    pub contrast: f64,
    /// Boundary wobble: `r(θ) = radius·(1 + a2·sin(2θ+p2) + a3·sin(3θ+p3))`.
    pub wobble: [f64; 4],
    /// Background texture `amp·sin(fx·x + px)·cos(fy·y + py)`.
    pub texture: [f64; 5],
    pub noise_seed: u64,
}

impl BlobSpec {
    pub fn random(rng: &mut impl Rng) -> Self {
        let lo = SYNTH_SIZE as f64 / 4.0;
        let hi = 3.0 * SYNTH_SIZE as f64 / 4.0;
        Self {
            cx: rng.random_range(lo..hi),
            cy: rng.random_range(lo..hi),
            radius: rng.random_range(20.0..60.0),
            background: rng.random_range(0.1..0.3),
            contrast: rng.random_range(0.3..0.5),
            wobble: [
                rng.random_range(0.0..0.06),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.0..0.06),
                rng.random_range(0.0..2.0 * PI),
            ],
            texture: [
                rng.random_range(0.01..0.02),
                rng.random_range(0.05..0.15),
                rng.random_range(0.05..0.15),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.0..2.0 * PI),
            ],
            noise_seed: rng.random(),
        }
    }

    fn boundary_radius(&self, theta: f64) -> f64 {
        let [a2, p2, a3, p3] = self.wobble;
        self.radius * (1.0 + a2 * (2.0 * theta + p2).sin() + a3 * (3.0 * theta + p3).sin())
    }

    /// Distance from pixel center to the boundary along the ray, positive
    /// inside.
    fn depth(&self, x: usize, y: usize) -> f64 {
        let (dx, dy) = (x as f64 - self.cx, y as f64 - self.cy);
        self.boundary_radius(dy.atan2(dx)) - dx.hypot(dy)
    }

    /// Image and the mask of pixel centers inside the boundary. The edge is
    /// hard so the intensity step coincides with the mask.
    pub fn render(&self, size: usize) -> (Image<f32>, BinaryMask) {
        let mut noise = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let [amp, fx, fy, px, py] = self.texture;
        let data = (0..size * size)
            .map(|k| {
                let (x, y) = (k % size, k / size);
                let coverage = if self.depth(x, y) >= 0.0 { 1.0 } else { 0.0 };
                let tex = amp * (fx * x as f64 + px).sin() * (fy * y as f64 + py).cos()
                    + noise.random_range(-0.01..0.01);
                (self.background + self.contrast * coverage + tex).clamp(0.0, 1.0) as f32
            })
            .collect();
        let img = Image::new(size, size, 1, data).expect("values clamped to [0, 1]");
        let mask = BinaryMask::from_fn(size, size, |x, y| self.depth(x, y) >= 0.0);
        (img, mask)
    }
}

/// Blob specs of a dataset without touching the disk.
pub fn synthetic_specs(n: usize, seed: u64) -> Vec<BlobSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| BlobSpec::random(&mut rng)).collect()
}

pub fn synthetic_id(i: usize) -> String {
    format!("case_{i:03}")
}

/// Write `n` 256×256 grayscale images and masks to
/// `<out>/images/<id>.png` and `<out>/masks/<id>.png`.
pub fn make_synthetic_dataset(n: usize, seed: u64, out_dir: &Path) -> Result<Vec<SampleRecord>> {
    if n < 2 {
        return Err(Error::InvalidInput("a dataset needs at least two samples".into()));
    }
    synthetic_specs(n, seed)
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let id = synthetic_id(i);
            let (img, mask) = spec.render(SYNTH_SIZE);
            let image_path = out_dir.join("images").join(format!("{id}.png"));
            let mask_path = out_dir.join("masks").join(format!("{id}.png"));
            save_image(&img, &image_path)?;
            save_mask(&mask, &mask_path)?;
            Ok(SampleRecord {
                id,
                image_path,
                mask_path: Some(mask_path),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = make_synthetic_dataset(3, 7, a.path()).unwrap();
        let rb = make_synthetic_dataset(3, 7, b.path()).unwrap();
        for (x, y) in ra.iter().zip(&rb) {
            assert_eq!(std::fs::read(&x.image_path).unwrap(), std::fs::read(&y.image_path).unwrap());
            assert_eq!(
                std::fs::read(x.mask_path.as_ref().unwrap()).unwrap(),
                std::fs::read(y.mask_path.as_ref().unwrap()).unwrap()
            );
        }
        assert!(make_synthetic_dataset(1, 7, a.path()).is_err());
    }

    #[test]
    fn contract_holds_for_thirty_samples() {
        for spec in synthetic_specs(30, 7) {
            let (img, mask) = spec.render(SYNTH_SIZE);
            assert!(!mask.is_empty());
            assert!(spec.contrast >= 0.3);
            assert!((64.0..192.0).contains(&spec.cx) && (64.0..192.0).contains(&spec.cy));
            assert!((20.0..60.0).contains(&spec.radius));
            // interior and exterior stay well separated for region growing
            let (mut lo_in, mut hi_out) = (f32::MAX, f32::MIN);
            for y in 0..SYNTH_SIZE {
                for x in 0..SYNTH_SIZE {
                    let d = spec.depth(x, y);
                    if d >= 1.0 {
                        lo_in = lo_in.min(img.get(x, y, 0));
                    } else if d <= -1.0 {
                        hi_out = hi_out.max(img.get(x, y, 0));
                    }
                }
            }
            assert!(lo_in - hi_out > 0.2, "{lo_in} vs {hi_out}");
        }
    }
}
