//! The three augmentation transforms and the deterministic per-sample
//! augmentation pipeline (rotate, then zoom, then illumination).

use super::{DataError, ImageSample};
use crate::seeding;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Rotation angle is drawn from [-max, +max] degrees.
    pub rotation_max_degrees: f64,
    /// (low, high) with 0 < low <= 1 <= high.
    pub zoom_range: (f64, f64),
    /// Multiplicative gain range, positive.
    pub illumination_gain: (f64, f64),
    /// Additive bias range.
    pub illumination_bias: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            rotation_max_degrees: 15.0,
            zoom_range: (0.9, 1.1),
            illumination_gain: (0.8, 1.2),
            illumination_bias: (-0.05, 0.05),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig { enabled: false, ..AugmentConfig::default() }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |reason: String| Err(DataError::BadAugmentConfig { reason });
        if self.rotation_max_degrees < 0.0 {
            return bad(format!("rotation_max_degrees {} < 0", self.rotation_max_degrees));
        }
        let (zl, zh) = self.zoom_range;
        if !(0.0 < zl && zl <= 1.0 && 1.0 <= zh) {
            return bad(format!("zoom_range ({zl}, {zh}) must satisfy 0 < low <= 1 <= high"));
        }
        let (gl, gh) = self.illumination_gain;
        if !(0.0 < gl && gl <= gh) {
            return bad(format!("illumination_gain ({gl}, {gh}) must be positive and ordered"));
        }
        let (bl, bh) = self.illumination_bias;
        if bl > bh {
            return bad(format!("illumination_bias ({bl}, {bh}) must be ordered"));
        }
        Ok(())
    }
}

// Bilinear sample with zero fill outside bounds, written in incremental
// form so integral coordinates and constant neighborhoods are exact.
fn bilinear(data: &[f64], h: usize, w: usize, row: f64, col: f64) -> f64 {
    let r0 = row.floor();
    let c0 = col.floor();
    let dr = row - r0;
    let dc = col - c0;
    let fetch = |r: f64, c: f64| -> f64 {
        if r < 0.0 || c < 0.0 || r >= h as f64 || c >= w as f64 {
            0.0
        } else {
            data[r as usize * w + c as usize]
        }
    };
    let v00 = fetch(r0, c0);
    let v01 = fetch(r0, c0 + 1.0);
    let v10 = fetch(r0 + 1.0, c0);
    let v11 = fetch(r0 + 1.0, c0 + 1.0);
    v00 + dc * (v01 - v00) + dr * (v10 - v00) + dr * dc * (v00 + v11 - v01 - v10)
}

/// Rotate about the image center; positive angles are clockwise. Bilinear
/// interpolation, zero outside bounds. Exact multiples of 90 degrees are
/// pixel permutations.
pub fn rotate(pixels: &Tensor, degrees: f64) -> Tensor {
    let shape = pixels.shape();
    let (h, w) = (shape[1], shape[2]);
    let src = pixels.data();

    let quarter_turns = degrees / 90.0;
    if h == w && quarter_turns == quarter_turns.round() && quarter_turns.abs() < 2.0_f64.powi(53) {
        let k = (quarter_turns.round() as i64).rem_euclid(4) as usize;
        if k == 0 {
            return pixels.clone();
        }
        let n = h;
        let mut out = vec![0.0; src.len()];
        for r in 0..n {
            for c in 0..n {
                out[r * n + c] = match k {
                    1 => src[(n - 1 - c) * n + r],
                    2 => src[(n - 1 - r) * n + (n - 1 - c)],
                    _ => src[c * n + (n - 1 - r)],
                };
            }
        }
        return Tensor::new(shape.to_vec(), out).expect("same shape");
    }

    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; src.len()];
    for r in 0..h {
        for c in 0..w {
            let x = c as f64 - cx;
            let y = r as f64 - cy;
            let src_col = cos * x + sin * y + cx;
            let src_row = -sin * x + cos * y + cy;
            out[r * w + c] = bilinear(src, h, w, src_row, src_col);
        }
    }
    Tensor::new(shape.to_vec(), out).expect("same shape")
}

/// Scale about the center by `factor` onto the original grid. Factor 1 is a
/// bitwise identity; factors below 1 shrink with zero padding.
pub fn zoom(pixels: &Tensor, factor: f64) -> Result<Tensor, DataError> {
    if factor <= 0.0 {
        return Err(DataError::NonPositiveZoom { factor });
    }
    if factor == 1.0 {
        return Ok(pixels.clone());
    }
    let shape = pixels.shape();
    let (h, w) = (shape[1], shape[2]);
    let src = pixels.data();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; src.len()];
    for r in 0..h {
        for c in 0..w {
            let src_row = cy + (r as f64 - cy) / factor;
            let src_col = cx + (c as f64 - cx) / factor;
            out[r * w + c] = bilinear(src, h, w, src_row, src_col);
        }
    }
    Ok(Tensor::new(shape.to_vec(), out).expect("same shape"))
}

/// p' = clamp(gain * p + bias, 0, 1).
pub fn adjust_illumination(pixels: &Tensor, gain: f64, bias: f64) -> Tensor {
    let data: Vec<f64> = pixels.data().iter().map(|&p| (gain * p + bias).clamp(0.0, 1.0)).collect();
    Tensor::new(pixels.shape().to_vec(), data).expect("same shape")
}

fn draw(rng: &mut ChaCha8Rng, low: f64, high: f64) -> f64 {
    low + rng.random::<f64>() * (high - low)
}

/// Apply one random draw of rotate -> zoom -> illumination. The draw is a
/// pure function of (global_seed, sample id, epoch), so augmentation does
/// not depend on batch order. A disabled config returns the sample
/// unchanged.
pub fn augment(
    sample: &ImageSample,
    config: &AugmentConfig,
    epoch: u64,
    global_seed: u64,
) -> Result<ImageSample, DataError> {
    config.validate()?;
    if !config.enabled {
        return Ok(sample.clone());
    }
    let seed = seeding::sample_seed(global_seed, &sample.id, epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = draw(&mut rng, -config.rotation_max_degrees, config.rotation_max_degrees);
    let factor = draw(&mut rng, config.zoom_range.0, config.zoom_range.1);
    let gain = draw(&mut rng, config.illumination_gain.0, config.illumination_gain.1);
    let bias = draw(&mut rng, config.illumination_bias.0, config.illumination_bias.1);

    let pixels = adjust_illumination(&zoom(&rotate(&sample.pixels, angle), factor)?, gain, bias);
    ImageSample::new(sample.id.clone(), pixels, sample.label, sample.split)
}
