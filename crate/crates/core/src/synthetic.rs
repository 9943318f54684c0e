//! Synthetic LOL-style pairs for smoke tests and toy-scale runs.
//!
//! Clean images are smooth colour fields; the low-light partner is a gamma-darkened,
//! noisy copy. They are written in the canonical `<split>/{low,high}` layout.

use std::path::Path;

use rand::Rng;

use crate::data::{derived_rng, save_image};
use crate::error::Result;
use crate::tensor::Tensor;

/// Returns `(low, clean)`, each `1 × 3 × h × w`.
pub fn synthetic_pair(h: usize, w: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = derived_rng(seed, &[7]);
    let mut params = [[0.0f64; 5]; 3];
    for p in params.iter_mut() {
        *p = [
            rng.gen_range(0.5..3.0),
            rng.gen_range(0.5..3.0),
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.15..0.35),
        ];
    }
    let exposure = rng.gen_range(0.08..0.2);
    let clean = Tensor::from_fn(&[1, 3, h, w], |i| {
        let c = i / (h * w);
        let (y, x) = ((i % (h * w)) / w, i % w);
        let [fy, fx, phase, offset, amp] = params[c];
        let u = y as f64 / h as f64;
        let v = x as f64 / w as f64;
        let wave = (std::f64::consts::TAU * (fy * u + fx * v) + phase).sin();
        let blob = (-((u - 0.5).powi(2) + (v - 0.5).powi(2)) * 6.0).exp();
        (offset + amp * wave + 0.15 * blob - 0.1 * u).clamp(0.0, 1.0)
    });
    let low = Tensor::from_fn(&[1, 3, h, w], |i| {
        let noise = rng.gen_range(-0.01..0.01);
        (exposure * clean.data()[i].powf(1.4) + noise).clamp(0.0, 1.0)
    });
    (low, clean)
}

/// Writes `count` numbered pairs into `<root>/<split>/{low,high}/`.
pub fn write_synthetic_split(
    root: &Path,
    split: &str,
    count: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<()> {
    let low_dir = root.join(split).join("low");
    let high_dir = root.join(split).join("high");
    std::fs::create_dir_all(&low_dir)?;
    std::fs::create_dir_all(&high_dir)?;
    for i in 0..count {
        let (low, clean) = synthetic_pair(h, w, seed.wrapping_add(i as u64));
        let name = format!("{}.png", i + 1);
        save_image(&low_dir.join(&name), &low)?;
        save_image(&high_dir.join(&name), &clean)?;
    }
    Ok(())
}
