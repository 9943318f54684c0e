//! Illumination emphasis weights derived from the low-light input.
//!
//! Pipeline: RGB → luma (`0.299 R + 0.587 G + 0.114 B`) → per-image min-max
//! normalization → `W = 1 + β (1 − L̃)` → bilinear resize to each decoder scale.
//! Weights are plain tensors; they never enter the autodiff graph as parameters.

use crate::error::{IamlError, Result};
use crate::tensor::Tensor;

pub const LUMA_COEFFS: [f64; 3] = [0.299, 0.587, 0.114];
pub const DEFAULT_BETA: f64 = 0.6;

/// Single-channel luminance, `batch × 1 × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct LuminanceMap(pub Tensor);

/// Per-pixel emphasis weights, `batch × 1 × H × W`, values in `[1, 1 + beta]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub data: Tensor,
    pub beta: f64,
}

pub fn luminance_map(image: &Tensor) -> Result<LuminanceMap> {
    if image.rank() != 4 {
        return Err(IamlError::ShapeMismatch(format!(
            "expected NCHW image, got {:?}",
            image.shape()
        )));
    }
    let (n, c, h, w) = image.dims4();
    if c != 3 {
        return Err(IamlError::ChannelCount(c));
    }
    let plane = h * w;
    let d = image.data();
    let mut out = vec![0.0; n * plane];
    for ni in 0..n {
        let base = ni * 3 * plane;
        for (p, o) in out[ni * plane..(ni + 1) * plane].iter_mut().enumerate() {
            *o = LUMA_COEFFS[0] * d[base + p]
                + LUMA_COEFFS[1] * d[base + plane + p]
                + LUMA_COEFFS[2] * d[base + 2 * plane + p];
        }
    }
    Ok(LuminanceMap(Tensor::new(vec![n, 1, h, w], out)?))
}

/// Min-max normalization over each image's spatial positions.
/// A flat image (max = min) maps to 0.5 everywhere.
pub fn normalize_luminance(lum: &LuminanceMap) -> LuminanceMap {
    let (_, _, h, w) = lum.0.dims4();
    let mut out = lum.0.clone();
    for plane in out.data_mut().chunks_mut(h * w) {
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if range > 0.0 {
            plane.iter_mut().for_each(|v| *v = (*v - lo) / range);
        } else {
            plane.fill(0.5);
        }
    }
    LuminanceMap(out)
}

pub fn emphasis_weights(normalized: &LuminanceMap, beta: f64) -> Result<WeightMap> {
    if beta < 0.0 || beta.is_nan() {
        return Err(IamlError::NegativeBeta(beta));
    }
    Ok(WeightMap {
        data: normalized.0.map(|l| 1.0 + beta * (1.0 - l)),
        beta,
    })
}

/// Full chain from a low-light RGB batch to emphasis weights at input resolution.
pub fn weights_for_image(low: &Tensor, beta: f64) -> Result<WeightMap> {
    let lum = luminance_map(low)?;
    emphasis_weights(&normalize_luminance(&lum), beta)
}

/// Bilinear resize with half-pixel centres (no corner alignment).
/// Every output is a convex combination of inputs, so the value range never grows.
pub fn resize_weights(weights: &WeightMap, target_h: usize, target_w: usize) -> WeightMap {
    WeightMap {
        data: resize_bilinear(&weights.data, target_h, target_w),
        beta: weights.beta,
    }
}

pub fn resize_bilinear(t: &Tensor, target_h: usize, target_w: usize) -> Tensor {
    assert!(
        target_h >= 1 && target_w >= 1,
        "resize target must be at least 1x1"
    );
    let (n, c, h, w) = t.dims4();
    if (h, w) == (target_h, target_w) {
        return t.clone();
    }
    let ys: Vec<_> = (0..target_h)
        .map(|o| source_coord(o, h, target_h))
        .collect();
    let xs: Vec<_> = (0..target_w)
        .map(|o| source_coord(o, w, target_w))
        .collect();
    let mut out = Vec::with_capacity(n * c * target_h * target_w);
    for plane in t.data().chunks(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![n, c, target_h, target_w], out).expect("resize shape")
}

fn source_coord(out_idx: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((out_idx as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
    (i0, i1, frac)
}
