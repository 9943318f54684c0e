//! Dense row-major `f64` tensors.
//!
//! Image and feature data use the `batch × channel × height × width` layout
//! throughout the crate. Everything is double precision so that finite
//! difference checks and oracle comparisons stay meaningful.

use serde::{Deserialize, Serialize};

use crate::error::{IamlError, Result};

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = IamlError;

    fn try_from(r: RawTensor) -> Result<Self> {
        Tensor::new(r.shape, r.data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(IamlError::ShapeMismatch(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(n, c, h, w)` of a rank-4 tensor. Panics on any other rank.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(
            self.shape.len(),
            4,
            "expected NCHW tensor, got {:?}",
            self.shape
        );
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn item(&self) -> f64 {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let (_, cc, h, w) = self.dims4();
        self.data[((n * cc + c) * h + y) * w + x]
    }

    pub fn set4(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let (_, cc, h, w) = self.dims4();
        self.data[((n * cc + c) * h + y) * w + x] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(IamlError::ShapeMismatch(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn ensure_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(IamlError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Spatial sub-window `[y0, y0+h) × [x0, x0+w)` of an NCHW tensor.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        let (n, c, hh, ww) = self.dims4();
        assert!(y0 + h <= hh && x0 + w <= ww, "crop window out of bounds");
        let mut data = Vec::with_capacity(n * c * h * w);
        for plane in self.data.chunks(hh * ww) {
            for y in y0..y0 + h {
                data.extend_from_slice(&plane[y * ww + x0..y * ww + x0 + w]);
            }
        }
        Self {
            shape: vec![n, c, h, w],
            data,
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let (_, _, h, w) = self.dims4();
        let mut out = self.clone();
        for plane in out.data.chunks_mut(h * w) {
            for row in plane.chunks_mut(w) {
                row.reverse();
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> Self {
        let (_, _, h, w) = self.dims4();
        let mut out = self.clone();
        for plane in out.data.chunks_mut(h * w) {
            for y in 0..h / 2 {
                let (top, bottom) = plane.split_at_mut((h - 1 - y) * w);
                top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
            }
        }
        out
    }

    /// Stack rank-4 tensors with identical `c × h × w` along the batch axis.
    pub fn concat_batch(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| IamlError::ShapeMismatch("empty batch".into()))?;
        let (_, c, h, w) = first.dims4();
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            let (tn, tc, th, tw) = t.dims4();
            if (tc, th, tw) != (c, h, w) {
                return Err(IamlError::ShapeMismatch(format!(
                    "batch item {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            shape: vec![n, c, h, w],
            data,
        })
    }

    /// Single sample `i` of a batch, kept rank-4.
    pub fn batch_item(&self, i: usize) -> Self {
        let (_, c, h, w) = self.dims4();
        let len = c * h * w;
        Self {
            shape: vec![1, c, h, w],
            data: self.data[i * len..(i + 1) * len].to_vec(),
        }
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |i| i as f64)
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn crop_selects_window() {
        let t = ramp(&[1, 1, 3, 4]);
        let c = t.crop(1, 2, 2, 2);
        assert_eq!(c.data(), &[6.0, 7.0, 10.0, 11.0]);
    }

    #[test]
    fn flips_are_involutions() {
        let t = ramp(&[2, 3, 5, 4]);
        assert_eq!(t.flip_horizontal().flip_horizontal(), t);
        assert_eq!(t.flip_vertical().flip_vertical(), t);
        assert_eq!(t.flip_vertical().at4(0, 0, 0, 1), t.at4(0, 0, 4, 1));
        assert_eq!(t.flip_horizontal().at4(1, 2, 3, 0), t.at4(1, 2, 3, 3));
    }

    #[test]
    fn concat_and_split_batch() {
        let a = ramp(&[1, 2, 2, 2]);
        let b = a.map(|v| -v);
        let ab = Tensor::concat_batch(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(ab.shape(), &[2, 2, 2, 2]);
        assert_eq!(ab.batch_item(1), b);
        assert_eq!(ab.batch_item(0), a);
    }
}
