//! Seeded synthetic dataset generator.
//!
//! Each class gets a fixed spatial signature (grating orientation/frequency
//! or a radial bowl) plus class-specific random features and per-pixel
//! noise. Mean intensity is kept near 0.5 for every class, so classes are
//! learnable from spatial structure but not separable by brightness alone.

use super::{save_pgm, ClassLabel, DataError, DatasetManifest, ManifestEntry, Split};
use crate::seeding;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use std::f64::consts::TAU;
use std::path::Path;

/// Images requested per split for one class.
#[derive(Debug, Clone, Copy)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Test => self.test,
        }
    }
}

fn add_blob(img: &mut [f64], side: usize, row: f64, col: f64, sigma: f64, amp: f64) {
    let denom = 2.0 * sigma * sigma;
    for r in 0..side {
        for c in 0..side {
            let d2 = (r as f64 - row).powi(2) + (c as f64 - col).powi(2);
            img[r * side + c] += amp * (-d2 / denom).exp();
        }
    }
}

fn add_vertical_streak(img: &mut [f64], side: usize, col: f64, sigma: f64, amp: f64) {
    for r in 0..side {
        for c in 0..side {
            let d = c as f64 - col;
            img[r * side + c] += amp * (-d * d / (2.0 * sigma * sigma)).exp();
        }
    }
}

fn render(label: ClassLabel, side: usize, seed: u64) -> Vec<f64> {
    let n = side as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = vec![0.5; side * side];

    // Fixed per-class signature.
    for r in 0..side {
        for c in 0..side {
            let (u, v) = (c as f64 / n, r as f64 / n);
            img[r * side + c] += match label {
                ClassLabel::Cancer => 0.18 * (TAU * 2.0 * v).sin(),
                ClassLabel::Pneumonia => 0.18 * (TAU * 2.0 * u).sin(),
                ClassLabel::Tuberculosis => 0.18 * (TAU * 3.0 * (u + v)).sin(),
                ClassLabel::Fibrosis => 0.18 * (TAU * 6.0 * v).sin(),
                ClassLabel::Normal => {
                    let du = u - 0.5;
                    let dv = v - 0.5;
                    0.20 * (1.0 - 4.0 * (du * du + dv * dv))
                }
            };
        }
    }

    // Class-specific random features, drawn in a fixed order.
    let mut center = |rng: &mut ChaCha8Rng| {
        let lo = 0.15 * n;
        let hi = 0.85 * n;
        (
            lo + rng.random::<f64>() * (hi - lo),
            lo + rng.random::<f64>() * (hi - lo),
        )
    };
    match label {
        ClassLabel::Cancer => {
            for _ in 0..3 {
                let (row, col) = center(&mut rng);
                add_blob(&mut img, side, row, col, n / 7.0, 0.30);
            }
        }
        ClassLabel::Pneumonia => {
            for _ in 0..2 {
                let (row, col) = center(&mut rng);
                add_blob(&mut img, side, row, col, n / 4.0, 0.20);
            }
        }
        ClassLabel::Tuberculosis => {
            for _ in 0..12 {
                let (row, col) = center(&mut rng);
                add_blob(&mut img, side, row, col, n / 22.0, 0.35);
            }
        }
        ClassLabel::Fibrosis => {
            for _ in 0..3 {
                let (_, col) = center(&mut rng);
                add_vertical_streak(&mut img, side, col, n / 40.0, 0.25);
            }
        }
        ClassLabel::Normal => {
            let (row, col) = center(&mut rng);
            add_blob(&mut img, side, row, col, n / 5.0, 0.08);
        }
    }

    for p in img.iter_mut() {
        *p += -0.05 + rng.random::<f64>() * 0.10;
        *p = p.clamp(0.02, 0.98);
    }
    img
}

/// Generate the requested images under `out_dir/images/`, write
/// `out_dir/manifest.csv`, and return the manifest. Fully determined by
/// `global_seed`: the same request produces byte-identical files.
pub fn generate_synthetic(
    per_class: &[(ClassLabel, SplitCounts)],
    side: usize,
    global_seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest, DataError> {
    if side < 16 {
        return Err(DataError::SideTooSmall { side });
    }
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir)
        .map_err(|source| DataError::Io { path: images_dir.clone(), source })?;

    let mut entries = Vec::new();
    for &(label, counts) in per_class {
        for split in Split::ALL {
            for i in 0..counts.get(split) {
                let id = format!("{}_{}_{:05}", label.as_str().to_lowercase(), split, i);
                entries.push(ManifestEntry { path: format!("images/{id}.pgm"), label, split });
            }
        }
    }

    let write_one = |entry: &ManifestEntry| -> Result<(), DataError> {
        let full = out_dir.join(&entry.path);
        let id = full.file_stem().unwrap().to_string_lossy().into_owned();
        let seed = seeding::derive_seed(global_seed, &[seeding::fnv1a64(id.as_bytes())]);
        let data = render(entry.label, side, seed);
        let pixels = Tensor::new(vec![1, side, side], data)?;
        save_pgm(&pixels, &full)
    };

    #[cfg(feature = "parallel")]
    entries.par_iter().try_for_each(write_one)?;
    #[cfg(not(feature = "parallel"))]
    entries.iter().try_for_each(write_one)?;

    let manifest_path = out_dir.join("manifest.csv");
    super::write_manifest(&manifest_path, &entries)?;
    Ok(DatasetManifest::new(out_dir.to_path_buf(), entries))
}
