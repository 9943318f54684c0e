//! Illumination-aware mirror loss between student and teacher decoder pyramids.
//!
//! Each level standardizes both feature maps per `(sample, channel)` group,
//! takes `|f̃_S − sg(f̃_T)|`, weights it by the resized emphasis map
//! (broadcast over channels) and averages over every element. The total is
//! the arithmetic mean over the selected levels.

use crate::error::{IamlError, Result};
use crate::graph::{Graph, Var};
use crate::luminance::{resize_weights, WeightMap};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-6;

const SPATIAL: [bool; 4] = [false, false, true, true];

/// Decoder feature maps, coarse to fine.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StandardizedFeatures(pub Tensor);

#[derive(Clone, Debug, PartialEq)]
pub struct MirrorConfig {
    pub eps: f64,
    /// 1-based decoder levels to include; empty selects every level.
    pub levels: Vec<usize>,
}

impl Default for MirrorConfig {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            levels: Vec::new(),
        }
    }
}

impl MirrorConfig {
    pub fn selected(&self, depth: usize) -> Result<Vec<usize>> {
        if self.levels.is_empty() {
            return Ok((0..depth).collect());
        }
        self.levels
            .iter()
            .map(|&l| {
                if l == 0 || l > depth {
                    Err(IamlError::InvalidConfig(format!(
                        "mirror level {l} outside 1..={depth}"
                    )))
                } else {
                    Ok(l - 1)
                }
            })
            .collect()
    }
}

/// `(f − mean) / (std + eps)` per `(sample, channel)` over spatial positions,
/// using the population standard deviation.
pub fn standardize(g: &mut Graph, f: Var, eps: f64) -> Var {
    let mean = g.mean_axes(f, SPATIAL);
    let centered = g.sub(f, mean);
    let sq = g.square(centered);
    let var = g.mean_axes(sq, SPATIAL);
    let std = g.sqrt(var);
    let denom = g.add_scalar(std, eps);
    g.div(centered, denom)
}

pub fn standardize_features(f: &Tensor, eps: f64) -> StandardizedFeatures {
    let mut g = Graph::new();
    let v = g.constant(f.clone());
    let s = standardize(&mut g, v, eps);
    StandardizedFeatures(g.value(s).clone())
}

fn check_level(fs: &Tensor, ft: &Tensor, w: &Tensor) -> Result<()> {
    if fs.shape() != ft.shape() || fs.rank() != 4 {
        return Err(IamlError::ShapeMismatch(format!(
            "student {:?} vs teacher {:?}",
            fs.shape(),
            ft.shape()
        )));
    }
    let (n, _, h, wd) = fs.dims4();
    if w.rank() != 4
        || w.shape()[1] != 1
        || w.shape()[2..] != [h, wd]
        || !(w.shape()[0] == n || w.shape()[0] == 1)
    {
        return Err(IamlError::ShapeMismatch(format!(
            "weights {:?} do not broadcast over features {:?}",
            w.shape(),
            fs.shape()
        )));
    }
    Ok(())
}

/// One level of the mirror loss. The teacher features are detached here, so the
/// caller may pass a live teacher node without leaking gradient into it.
pub fn iaml_level(g: &mut Graph, fs: Var, ft: Var, weights: &Tensor, eps: f64) -> Result<Var> {
    check_level(g.value(fs), g.value(ft), weights)?;
    let ft = g.detach(ft);
    let s = standardize(g, fs, eps);
    let t = standardize(g, ft, eps);
    let diff = g.sub(s, t);
    let abs = g.abs(diff);
    let w = g.constant(weights.clone());
    let weighted = g.mul(abs, w);
    Ok(g.mean_all(weighted))
}

fn check_depths(student: usize, teacher: usize) -> Result<()> {
    if student != teacher || student == 0 {
        return Err(IamlError::PyramidDepthMismatch { student, teacher });
    }
    Ok(())
}

/// Mirror loss over the selected levels, returning the mean and the per-level terms.
pub fn iaml_total(
    g: &mut Graph,
    student: &[Var],
    teacher: &[Var],
    weights: &WeightMap,
    config: &MirrorConfig,
) -> Result<(Var, Vec<Var>)> {
    check_depths(student.len(), teacher.len())?;
    let mut per_level = Vec::new();
    for i in config.selected(student.len())? {
        let (_, _, h, w) = g.value(student[i]).dims4();
        let wi = resize_weights(weights, h, w);
        per_level.push(iaml_level(g, student[i], teacher[i], &wi.data, config.eps)?);
    }
    Ok((mean_of(g, &per_level), per_level))
}

/// Unweighted variant (`W ≡ 1`) with identical level averaging.
pub fn standardized_l1(
    g: &mut Graph,
    student: &[Var],
    teacher: &[Var],
    config: &MirrorConfig,
) -> Result<(Var, Vec<Var>)> {
    check_depths(student.len(), teacher.len())?;
    let mut per_level = Vec::new();
    for i in config.selected(student.len())? {
        let (n, _, h, w) = g.value(student[i]).dims4();
        let ones = Tensor::full(&[n, 1, h, w], 1.0);
        per_level.push(iaml_level(g, student[i], teacher[i], &ones, config.eps)?);
    }
    Ok((mean_of(g, &per_level), per_level))
}

pub(crate) fn mean_of(g: &mut Graph, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.mul_scalar(acc, 1.0 / terms.len() as f64)
}

/// Value-only convenience wrapper around [`iaml_level`].
pub fn iaml_level_value(fs: &Tensor, ft: &Tensor, weights: &WeightMap, eps: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (s, t) = (g.constant(fs.clone()), g.constant(ft.clone()));
    let l = iaml_level(&mut g, s, t, &weights.data, eps)?;
    Ok(g.value(l).item())
}

/// Value-only convenience wrapper around [`iaml_total`].
pub fn iaml_total_value(
    student: &FeaturePyramid,
    teacher: &FeaturePyramid,
    weights: &WeightMap,
    config: &MirrorConfig,
) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let s: Vec<_> = student
        .levels
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect();
    let t: Vec<_> = teacher
        .levels
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect();
    let (total, levels) = iaml_total(&mut g, &s, &t, weights, config)?;
    Ok((
        g.value(total).item(),
        levels.iter().map(|&v| g.value(v).item()).collect(),
    ))
}
