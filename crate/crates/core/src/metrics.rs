//! Full-reference image quality metrics and evaluation reports.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derived_rng, load_image, LoadedPair, PairRecord, PairedDataset};
use crate::error::{IamlError, Result};
use crate::graph::Graph;
use crate::losses::{ssim_value, SsimParams};
use crate::tensor::Tensor;
use crate::train::TrainState;

/// Reported when the two images are identical.
pub const PSNR_CAP: f64 = 100.0;

/// PSNR in dB with peak 1, MSE pooled over all channels, inputs clamped to `[0, 1]`.
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64> {
    x.ensure_same_shape(y)?;
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a.clamp(0.0, 1.0) - b.clamp(0.0, 1.0)).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

/// Mean SSIM with the default window, on inputs clamped to `[0, 1]`.
pub fn ssim_metric(x: &Tensor, y: &Tensor) -> Result<f64> {
    ssim_value(
        &x.clamp(0.0, 1.0),
        &y.clamp(0.0, 1.0),
        &SsimParams::default(),
    )
}

/// A learned perceptual distance such as LPIPS. Lower is more similar.
pub trait PerceptualModel {
    fn name(&self) -> &str;
    fn distance(&self, x: &Tensor, y: &Tensor) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpipsLayer {
    /// `cout × cin × k × k`, odd `k`.
    pub weight: Tensor,
    pub bias: Vec<f64>,
    /// Max-pool by two after this layer.
    pub pool: bool,
}

/// LPIPS-style metric loaded from JSON: a stack of conv+ReLU layers, unit-normalized
/// channel activations and per-layer non-negative channel weights.
///
/// ```json
/// {"name": "...",
///  "layers": [{"weight": {"shape": [8, 3, 3, 3], "data": [...]}, "bias": [...], "pool": true}],
///  "linear": [[...]]}
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpipsLite {
    pub name: String,
    pub layers: Vec<LpipsLayer>,
    pub linear: Vec<Vec<f64>>,
}

impl LpipsLite {
    pub fn load(path: &Path) -> Result<Self> {
        let unavailable =
            |e: String| IamlError::ModelUnavailable(format!("{}: {e}", path.display()));
        let text = std::fs::read_to_string(path).map_err(|e| unavailable(e.to_string()))?;
        let model: LpipsLite =
            serde_json::from_str(&text).map_err(|e| unavailable(e.to_string()))?;
        model.validate().map_err(|e| unavailable(e.to_string()))?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| IamlError::ModelUnavailable(m);
        if self.layers.is_empty() || self.layers.len() != self.linear.len() {
            return Err(bad("need one linear head per layer".into()));
        }
        let mut cin = 3;
        for (i, l) in self.layers.iter().enumerate() {
            let s = l.weight.shape();
            if s.len() != 4 || s[1] != cin || s[2] != s[3] || s[2] % 2 == 0 {
                return Err(bad(format!("layer {i} has weight shape {s:?}")));
            }
            if l.bias.len() != s[0] || self.linear[i].len() != s[0] {
                return Err(bad(format!("layer {i} bias/linear length mismatch")));
            }
            if self.linear[i].iter().any(|&w| w < 0.0) {
                return Err(bad(format!("layer {i} has negative linear weights")));
            }
            cin = s[0];
        }
        Ok(())
    }

    /// Random weights, useful for smoke tests of the plumbing.
    pub fn random(seed: u64, channels: &[usize]) -> Self {
        let mut rng = derived_rng(seed, &[11]);
        let mut layers = Vec::new();
        let mut linear = Vec::new();
        let mut cin = 3;
        for &c in channels {
            let bound = (6.0 / (cin * 9) as f64).sqrt();
            layers.push(LpipsLayer {
                weight: Tensor::from_fn(&[c, cin, 3, 3], |_| rng.gen_range(-bound..bound)),
                bias: vec![0.0; c],
                pool: true,
            });
            linear.push((0..c).map(|_| rng.gen_range(0.0..1.0)).collect());
            cin = c;
        }
        Self {
            name: "lpips-lite".into(),
            layers,
            linear,
        }
    }

    fn features(&self, x: &Tensor) -> Vec<Tensor> {
        let mut g = Graph::new();
        let mut h = g.constant(x.map(|v| 2.0 * v.clamp(0.0, 1.0) - 1.0));
        let mut out = Vec::new();
        for l in &self.layers {
            let c = l.weight.shape()[0];
            let w = g.constant(l.weight.clone());
            let b = g.constant(Tensor::new(vec![1, c, 1, 1], l.bias.clone()).expect("validated"));
            let pad = l.weight.shape()[2] / 2;
            let conv = g.conv2d(h, w, Some(b), pad);
            h = g.relu(conv);
            out.push(unit_normalize(g.value(h)));
            let (_, _, hh, ww) = g.value(h).dims4();
            if l.pool && hh >= 2 && ww >= 2 {
                if hh % 2 != 0 || ww % 2 != 0 {
                    let cropped = g.value(h).crop(0, 0, hh & !1, ww & !1);
                    h = g.constant(cropped);
                }
                h = g.max_pool2(h);
            }
        }
        out
    }
}

fn unit_normalize(f: &Tensor) -> Tensor {
    let (n, c, h, w) = f.dims4();
    let mut out = f.clone();
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let norm = (0..c)
                    .map(|ch| f.at4(b, ch, y, x).powi(2))
                    .sum::<f64>()
                    .sqrt();
                for ch in 0..c {
                    out.set4(b, ch, y, x, f.at4(b, ch, y, x) / (norm + 1e-10));
                }
            }
        }
    }
    out
}

impl PerceptualModel for LpipsLite {
    fn name(&self) -> &str {
        &self.name
    }

    fn distance(&self, x: &Tensor, y: &Tensor) -> Result<f64> {
        x.ensure_same_shape(y)?;
        let fx = self.features(x);
        let fy = self.features(y);
        let mut total = 0.0;
        for (l, (a, b)) in fx.iter().zip(&fy).enumerate() {
            let (n, c, h, w) = a.dims4();
            let mut acc = 0.0;
            for bi in 0..n {
                for ch in 0..c {
                    let wl = self.linear[l][ch];
                    for yy in 0..h {
                        for xx in 0..w {
                            let d = a.at4(bi, ch, yy, xx) - b.at4(bi, ch, yy, xx);
                            acc += wl * d * d;
                        }
                    }
                }
            }
            total += acc / (n * h * w) as f64;
        }
        Ok(total)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub pair_id: String,
    pub psnr: f64,
    pub ssim: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub checkpoint_id: String,
    pub images: Vec<ImageScores>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_lpips: Option<f64>,
}

/// Column-aligned plain-text table.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (i, cell) in r.iter().enumerate() {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{c:<w$}", w = widths[i]))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = vec![line(headers.to_vec())];
    out.push(
        widths
            .iter()
            .map(|&w| "-".repeat(w))
            .collect::<Vec<_>>()
            .join("  "),
    );
    for r in rows {
        out.push(line(r.iter().map(String::as_str).collect()));
    }
    out.join("\n") + "\n"
}

fn csv_cell(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_csv(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = headers.join(",") + "\n";
    for r in rows {
        out += &r.iter().map(|c| csv_cell(c)).collect::<Vec<_>>().join(",");
        out.push('\n');
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

impl MetricsReport {
    pub fn new(dataset: &str, checkpoint_id: &str, images: Vec<ImageScores>) -> Self {
        let n = images.len().max(1) as f64;
        let mean_lpips = if !images.is_empty() && images.iter().all(|i| i.lpips.is_some()) {
            Some(images.iter().filter_map(|i| i.lpips).sum::<f64>() / n)
        } else {
            None
        };
        Self {
            dataset: dataset.to_string(),
            checkpoint_id: checkpoint_id.to_string(),
            mean_psnr: images.iter().map(|i| i.psnr).sum::<f64>() / n,
            mean_ssim: images.iter().map(|i| i.ssim).sum::<f64>() / n,
            mean_lpips,
            images,
        }
    }

    fn rows(&self) -> (Vec<&'static str>, Vec<Vec<String>>) {
        let mut rows: Vec<Vec<String>> = self
            .images
            .iter()
            .map(|i| {
                vec![
                    i.pair_id.clone(),
                    format!("{:.4}", i.ssim),
                    format!("{:.3}", i.psnr),
                    fmt_opt(i.lpips),
                ]
            })
            .collect();
        rows.push(vec![
            "mean".into(),
            format!("{:.4}", self.mean_ssim),
            format!("{:.3}", self.mean_psnr),
            fmt_opt(self.mean_lpips),
        ]);
        (vec!["image", "SSIM", "PSNR (dB)", "LPIPS"], rows)
    }

    pub fn to_table(&self) -> String {
        let (h, r) = self.rows();
        format!(
            "dataset: {}  checkpoint: {}\n{}",
            self.dataset,
            self.checkpoint_id,
            render_table(&h, &r)
        )
    }

    pub fn to_csv(&self) -> String {
        let (h, r) = self.rows();
        render_csv(&h, &r)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn score_pair(
    pair_id: &str,
    output: &Tensor,
    clean: &Tensor,
    lpips: Option<&dyn PerceptualModel>,
) -> Result<ImageScores> {
    Ok(ImageScores {
        pair_id: pair_id.to_string(),
        psnr: psnr(output, clean)?,
        ssim: ssim_metric(output, clean)?,
        lpips: lpips.map(|m| m.distance(output, clean)).transpose()?,
    })
}

/// Scores `enhancer(low)` against `clean` for every in-memory pair at full resolution.
pub fn evaluate_pairs(
    pairs: &[LoadedPair],
    mut enhancer: impl FnMut(&Tensor) -> Result<Tensor>,
    lpips: Option<&dyn PerceptualModel>,
) -> Result<Vec<ImageScores>> {
    pairs
        .iter()
        .map(|p| score_pair(&p.pair_id, &enhancer(&p.low)?, &p.clean, lpips))
        .collect()
}

/// Like [`evaluate_pairs`], decoding one pair at a time from disk.
pub fn evaluate_records(
    records: &[PairRecord],
    mut enhancer: impl FnMut(&Tensor) -> Result<Tensor>,
    lpips: Option<&dyn PerceptualModel>,
) -> Result<Vec<ImageScores>> {
    records
        .iter()
        .map(|r| {
            let low = load_image(&r.low_path)?;
            let clean = load_image(&r.clean_path)?;
            score_pair(&r.pair_id, &enhancer(&low)?, &clean, lpips)
        })
        .collect()
}

/// Student model on every pair of a split.
pub fn evaluate_dataset(
    state: &TrainState,
    records: &[PairRecord],
    dataset: &str,
    checkpoint_id: &str,
    lpips: Option<&dyn PerceptualModel>,
) -> Result<MetricsReport> {
    let images = evaluate_records(records, |x| state.enhance(x), lpips)?;
    Ok(MetricsReport::new(dataset, checkpoint_id, images))
}

/// Mean (PSNR, SSIM) of the student over an in-memory set.
pub fn mean_scores(state: &TrainState, set: &PairedDataset) -> Result<(f64, f64)> {
    let r = MetricsReport::new(
        "",
        "",
        evaluate_pairs(&set.pairs, |x| state.enhance(x), None)?,
    );
    Ok((r.mean_psnr, r.mean_ssim))
}
