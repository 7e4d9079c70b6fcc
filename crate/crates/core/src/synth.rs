//! Synthetic "lesion" slices: bright anti-aliased ellipses on a noisy,
//! slowly varying background. Used as a desk-scale training substrate.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{BinaryMap, CtSlice, DatasetRecord, SegMask};
use crate::error::{bail, Result};

/// Admissible foreground fraction of a generated mask.
pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.5;

const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx) * (u / self.rx) + (v / self.ry) * (v / self.ry) <= 1.0
    }
}

fn random_ellipse<R: Rng>(rng: &mut R, height: usize, width: usize) -> Ellipse {
    let side = height.min(width) as f64;
    let theta: f64 = rng.random_range(0.0..core::f64::consts::PI);
    Ellipse {
        cy: rng.random_range(0.15..0.85) * height as f64,
        cx: rng.random_range(0.15..0.85) * width as f64,
        ry: rng.random_range(0.07..0.2) * side,
        rx: rng.random_range(0.07..0.2) * side,
        cos: libm::cos(theta),
        sin: libm::sin(theta),
    }
}

/// Generate `n` records of size `height×width`, fully determined by `seed`.
pub fn synth_blobs(n: usize, height: usize, width: usize, seed: u64) -> Result<Vec<DatasetRecord>> {
    if n == 0 {
        bail!(Validation, "synth_blobs needs n >= 1");
    }
    if height < 8 || width < 8 {
        bail!(Validation, "synthetic images must be at least 8x8, got {height}x{width}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.04).expect("valid normal");
    let area = (height * width) as f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let blobs = loop {
            let count = rng.random_range(1..=4);
            let blobs: Vec<Ellipse> = (0..count).map(|_| random_ellipse(&mut rng, height, width)).collect();
            let fg = (0..height * width)
                .filter(|p| {
                    let (y, x) = ((p / width) as f64 + 0.5, (p % width) as f64 + 0.5);
                    blobs.iter().any(|e| e.contains(y, x))
                })
                .count() as f64;
            if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&(fg / area)) {
                break blobs;
            }
        };
        let mask = BinaryMap::from_fn(height, width, |y, x| {
            blobs.iter().any(|e| e.contains(y as f64 + 0.5, x as f64 + 0.5))
        });
        let base: f64 = rng.random_range(0.12..0.3);
        let contrast: f64 = rng.random_range(0.35..0.55);
        let (gy, gx): (f64, f64) = (rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08));
        let mut plane = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                        let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                        if blobs.iter().any(|e| e.contains(py, px)) {
                            hits += 1;
                        }
                    }
                }
                let coverage = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                let shade = base + gy * (y as f64 / height as f64 - 0.5) + gx * (x as f64 / width as f64 - 0.5);
                let v = shade + contrast * coverage + noise.sample(&mut rng);
                plane.push(v.clamp(0.0, 1.0));
            }
        }
        let id = format!("synth_{i:04}");
        let slice = CtSlice::from_plane(height, width, &plane, id.clone())?;
        out.push(DatasetRecord::new(id, slice, SegMask(mask))?);
    }
    Ok(out)
}
