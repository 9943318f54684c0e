//! Reconstruction losses, the ablation mirror variants and the total-loss combiner.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{IamlError, Result};
use crate::graph::{Graph, Var};
use crate::luminance::WeightMap;
use crate::mirror::{self, MirrorConfig};
use crate::tensor::Tensor;

/// Gaussian-window SSIM parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window_size: usize,
    pub gaussian_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window_size: 11,
            gaussian_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size.is_multiple_of(2) || self.window_size == 0 {
            return Err(IamlError::InvalidConfig(format!(
                "SSIM window must be odd, got {}",
                self.window_size
            )));
        }
        if self.gaussian_sigma <= 0.0 || self.gaussian_sigma.is_nan() {
            return Err(IamlError::InvalidConfig(format!(
                "SSIM sigma must be positive, got {}",
                self.gaussian_sigma
            )));
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian; the 2-D window is its outer product.
    pub fn kernel(&self) -> Vec<f64> {
        let half = (self.window_size / 2) as f64;
        let raw: Vec<f64> = (0..self.window_size)
            .map(|i| {
                let d = i as f64 - half;
                (-d * d / (2.0 * self.gaussian_sigma * self.gaussian_sigma)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

/// The five loss formulations compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTag {
    MseOnly,
    MseSsim,
    MseSsimCos,
    MseSsimStdl1,
    MseSsimIaml,
}

impl LossTag {
    pub const ALL: [LossTag; 5] = [
        LossTag::MseOnly,
        LossTag::MseSsim,
        LossTag::MseSsimCos,
        LossTag::MseSsimStdl1,
        LossTag::MseSsimIaml,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossTag::MseOnly => "mse_only",
            LossTag::MseSsim => "mse_ssim",
            LossTag::MseSsimCos => "mse_ssim_cos",
            LossTag::MseSsimStdl1 => "mse_ssim_stdl1",
            LossTag::MseSsimIaml => "mse_ssim_iaml",
        }
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            LossTag::MseOnly => "1) MSE only",
            LossTag::MseSsim => "2) MSE + SSIM",
            LossTag::MseSsimCos => "3) MSE + SSIM + Cos. Sim.",
            LossTag::MseSsimStdl1 => "4) MSE + SSIM + Std. l1",
            LossTag::MseSsimIaml => "5) MSE + SSIM + IAML",
        }
    }

    pub fn uses_ssim(self) -> bool {
        self != LossTag::MseOnly
    }

    /// Whether the teacher pyramid is consumed by this formulation.
    pub fn uses_mirror(self) -> bool {
        matches!(
            self,
            LossTag::MseSsimCos | LossTag::MseSsimStdl1 | LossTag::MseSsimIaml
        )
    }
}

impl fmt::Display for LossTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossTag {
    type Err = IamlError;

    fn from_str(s: &str) -> Result<Self> {
        LossTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| IamlError::UnknownConfigTag(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub tag: LossTag,
    pub lambda: f64,
    pub beta: f64,
    pub mirror: MirrorConfig,
    pub ssim: SsimParams,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tag: LossTag::MseSsimIaml,
            lambda: 0.8,
            beta: crate::luminance::DEFAULT_BETA,
            mirror: MirrorConfig::default(),
            ssim: SsimParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub ssim_loss: f64,
    pub mirror: f64,
    pub mirror_per_level: Vec<f64>,
    pub total: f64,
    pub config_tag: String,
}

impl LossBreakdown {
    /// Recombine the components under the formula for `config_tag`.
    pub fn recompose(&self, lambda: f64) -> Result<f64> {
        let tag: LossTag = self.config_tag.parse()?;
        Ok(match tag {
            LossTag::MseOnly => self.mse,
            LossTag::MseSsim => self.mse + self.ssim_loss,
            _ => self.mse + self.ssim_loss + lambda * self.mirror,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.mse.is_finite()
            && self.ssim_loss.is_finite()
            && self.mirror.is_finite()
            && self.total.is_finite()
            && self.mirror_per_level.iter().all(|v| v.is_finite())
    }
}

fn ensure_same(g: &Graph, a: Var, b: Var) -> Result<()> {
    g.value(a).ensure_same_shape(g.value(b))
}

pub fn mse(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    ensure_same(g, pred, target)?;
    let d = g.sub(pred, target);
    let sq = g.square(d);
    Ok(g.mean_all(sq))
}

/// Mean local SSIM over channels and valid window positions.
pub fn ssim_index(g: &mut Graph, x: Var, y: Var, params: &SsimParams) -> Result<Var> {
    ensure_same(g, x, y)?;
    params.validate()?;
    let (_, _, h, w) = g.value(x).dims4();
    if h < params.window_size || w < params.window_size {
        return Err(IamlError::ImageTooSmall {
            height: h,
            width: w,
            window: params.window_size,
        });
    }
    let k = params.kernel();
    let (c1, c2) = (params.c1(), params.c2());

    let mu_x = g.gaussian_valid(x, &k);
    let mu_y = g.gaussian_valid(y, &k);
    let xx = g.square(x);
    let yy = g.square(y);
    let xy = g.mul(x, y);
    let e_xx = g.gaussian_valid(xx, &k);
    let e_yy = g.gaussian_valid(yy, &k);
    let e_xy = g.gaussian_valid(xy, &k);
    let mu_xx = g.square(mu_x);
    let mu_yy = g.square(mu_y);
    let mu_xy = g.mul(mu_x, mu_y);
    let var_x = g.sub(e_xx, mu_xx);
    let var_y = g.sub(e_yy, mu_yy);
    let cov = g.sub(e_xy, mu_xy);

    let lum_num = g.mul_scalar(mu_xy, 2.0);
    let lum_num = g.add_scalar(lum_num, c1);
    let cs_num = g.mul_scalar(cov, 2.0);
    let cs_num = g.add_scalar(cs_num, c2);
    let lum_den = g.add(mu_xx, mu_yy);
    let lum_den = g.add_scalar(lum_den, c1);
    let cs_den = g.add(var_x, var_y);
    let cs_den = g.add_scalar(cs_den, c2);

    let num = g.mul(lum_num, cs_num);
    let den = g.mul(lum_den, cs_den);
    let map = g.div(num, den);
    Ok(g.mean_all(map))
}

pub fn ssim_loss(g: &mut Graph, x: Var, y: Var, params: &SsimParams) -> Result<Var> {
    let s = ssim_index(g, x, y, params)?;
    let neg = g.neg(s);
    Ok(g.add_scalar(neg, 1.0))
}

/// Value-only SSIM; the same code path as the training loss.
pub fn ssim_value(x: &Tensor, y: &Tensor, params: &SsimParams) -> Result<f64> {
    let mut g = Graph::new();
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    let s = ssim_index(&mut g, xv, yv, params)?;
    Ok(g.value(s).item())
}

pub fn mse_value(x: &Tensor, y: &Tensor) -> Result<f64> {
    x.ensure_same_shape(y)?;
    Ok(x.data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / x.len() as f64)
}

const COS_EPS: f64 = 1e-8;
const CHANNEL: [bool; 4] = [false, true, false, false];

/// `1 − mean cos(s, t)` over spatial positions, vectors taken across channels.
fn cosine_level(g: &mut Graph, fs: Var, ft: Var) -> Result<Var> {
    ensure_same(g, fs, ft)?;
    let ft = g.detach(ft);
    let c = g.value(fs).shape()[1] as f64;
    let st = g.mul(fs, ft);
    let dot = g.mean_axes(st, CHANNEL);
    let dot = g.mul_scalar(dot, c);
    let ss = g.square(fs);
    let ss = g.mean_axes(ss, CHANNEL);
    let ss = g.mul_scalar(ss, c);
    let ns = g.sqrt(ss);
    let tt = g.square(ft);
    let tt = g.mean_axes(tt, CHANNEL);
    let tt = g.mul_scalar(tt, c);
    let nt = g.sqrt(tt);
    let norms = g.mul(ns, nt);
    let norms = g.add_scalar(norms, COS_EPS);
    let cos = g.div(dot, norms);
    let mean_cos = g.mean_all(cos);
    let neg = g.neg(mean_cos);
    Ok(g.add_scalar(neg, 1.0))
}

pub fn cosine_mirror_loss(
    g: &mut Graph,
    student: &[Var],
    teacher: &[Var],
    config: &MirrorConfig,
) -> Result<(Var, Vec<Var>)> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(IamlError::PyramidDepthMismatch {
            student: student.len(),
            teacher: teacher.len(),
        });
    }
    let mut per_level = Vec::new();
    for i in config.selected(student.len())? {
        per_level.push(cosine_level(g, student[i], teacher[i])?);
    }
    Ok((mirror::mean_of(g, &per_level), per_level))
}

pub fn standardized_l1_loss(
    g: &mut Graph,
    student: &[Var],
    teacher: &[Var],
    config: &MirrorConfig,
) -> Result<(Var, Vec<Var>)> {
    mirror::standardized_l1(g, student, teacher, config)
}

/// Graph nodes of a total-loss evaluation.
#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub total: Var,
    pub mse: Var,
    pub ssim_loss: Option<Var>,
    pub mirror: Option<Var>,
    pub mirror_per_level: Vec<Var>,
    pub tag: LossTag,
}

impl TotalLoss {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let val = |v: Option<Var>| v.map(|v| g.value(v).item()).unwrap_or(0.0);
        LossBreakdown {
            mse: g.value(self.mse).item(),
            ssim_loss: val(self.ssim_loss),
            mirror: val(self.mirror),
            mirror_per_level: self
                .mirror_per_level
                .iter()
                .map(|&v| g.value(v).item())
                .collect(),
            total: g.value(self.total).item(),
            config_tag: self.tag.as_str().to_string(),
        }
    }
}

/// Builds the configured objective. The SSIM term is always evaluated for logging,
/// even when the formulation leaves it out of the total.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &mut Graph,
    pred: Var,
    target: Var,
    student: &[Var],
    teacher: &[Var],
    weights: &WeightMap,
    lambda: f64,
    config: &LossConfig,
) -> Result<TotalLoss> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(IamlError::InvalidConfig(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let tag = config.tag;
    let mse_v = mse(g, pred, target)?;
    let ssim_v = ssim_loss(g, pred, target, &config.ssim)?;
    let (mirror_v, per_level) = match tag {
        LossTag::MseOnly | LossTag::MseSsim => (None, Vec::new()),
        LossTag::MseSsimCos => {
            let (m, l) = cosine_mirror_loss(g, student, teacher, &config.mirror)?;
            (Some(m), l)
        }
        LossTag::MseSsimStdl1 => {
            let (m, l) = standardized_l1_loss(g, student, teacher, &config.mirror)?;
            (Some(m), l)
        }
        LossTag::MseSsimIaml => {
            let (m, l) = mirror::iaml_total(g, student, teacher, weights, &config.mirror)?;
            (Some(m), l)
        }
    };
    let total = match tag {
        LossTag::MseOnly => mse_v,
        LossTag::MseSsim => g.add(mse_v, ssim_v),
        _ => {
            let recon = g.add(mse_v, ssim_v);
            let scaled = g.mul_scalar(mirror_v.expect("mirror term"), lambda);
            g.add(recon, scaled)
        }
    };
    Ok(TotalLoss {
        total,
        mse: mse_v,
        ssim_loss: Some(ssim_v),
        mirror: mirror_v,
        mirror_per_level: per_level,
        tag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn tags_round_trip_and_reject_unknown() {
        for t in LossTag::ALL {
            assert_eq!(t.as_str().parse::<LossTag>().unwrap(), t);
        }
        assert!(matches!(
            "bogus".parse::<LossTag>(),
            Err(IamlError::UnknownConfigTag(_))
        ));
    }

    #[test]
    fn mse_examples() {
        let x = rand_image(&[1, 3, 4, 4], 1);
        assert_eq!(mse_value(&x, &x).unwrap(), 0.0);
        let y = x.map(|v| v + 0.1);
        assert!((mse_value(&x, &y).unwrap() - 0.01).abs() < 1e-12);
        let z = rand_image(&[1, 3, 2, 2], 2);
        assert!(mse_value(&x, &z).is_err());
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = SsimParams::default().kernel();
        assert_eq!(k.len(), 11);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..5 {
            assert!((k[i] - k[10 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn ssim_identity_and_constant_patches() {
        let p = SsimParams::default();
        let x = rand_image(&[2, 3, 16, 16], 3);
        assert!((ssim_value(&x, &x, &p).unwrap() - 1.0).abs() < 1e-12);
        let (a, b) = (0.3, 0.7);
        let xa = Tensor::full(&[1, 3, 12, 12], a);
        let xb = Tensor::full(&[1, 3, 12, 12], b);
        let expected = (2.0 * a * b + p.c1()) / (a * a + b * b + p.c1());
        assert!((ssim_value(&xa, &xb, &p).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn ssim_rejects_small_images_and_bad_params() {
        let x = Tensor::full(&[1, 3, 8, 16], 0.5);
        assert!(matches!(
            ssim_value(&x, &x, &SsimParams::default()),
            Err(IamlError::ImageTooSmall { .. })
        ));
        let even = SsimParams {
            window_size: 4,
            ..Default::default()
        };
        assert!(ssim_value(&x, &x, &even).is_err());
    }

    #[test]
    fn ssim_is_symmetric() {
        let p = SsimParams::default();
        let x = rand_image(&[1, 3, 16, 20], 4);
        let y = rand_image(&[1, 3, 16, 20], 5);
        let a = ssim_value(&x, &y, &p).unwrap();
        let b = ssim_value(&y, &x, &p).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(a < 0.5 && a > -1.0);
    }

    #[test]
    fn cosine_examples() {
        let mut g = Graph::new();
        let f = rand_image(&[1, 4, 3, 3], 6).map(|v| v + 0.1);
        let s = g.param(f.clone());
        let t = g.constant(f.clone());
        let neg = g.constant(f.map(|v| -v));
        let (same, _) = cosine_mirror_loss(&mut g, &[s], &[t], &MirrorConfig::default()).unwrap();
        let (anti, _) = cosine_mirror_loss(&mut g, &[s], &[neg], &MirrorConfig::default()).unwrap();
        assert!(g.value(same).item().abs() < 1e-7);
        assert!((g.value(anti).item() - 2.0).abs() < 1e-7);
    }

    #[test]
    fn total_loss_arithmetic() {
        let b = LossBreakdown {
            mse: 0.01,
            ssim_loss: 0.05,
            mirror: 0.1,
            mirror_per_level: vec![0.1],
            total: 0.14,
            config_tag: "mse_ssim_iaml".into(),
        };
        assert!((b.recompose(0.8).unwrap() - 0.14).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_reduces_to_reconstruction() {
        let pred = rand_image(&[1, 3, 16, 16], 7);
        let target = rand_image(&[1, 3, 16, 16], 8);
        let mut g = Graph::new();
        let p = g.param(pred);
        let t = g.constant(target);
        let fs = g.param(rand_image(&[1, 2, 8, 8], 9));
        let ft = g.constant(rand_image(&[1, 2, 8, 8], 10));
        let w = WeightMap {
            data: Tensor::full(&[1, 1, 16, 16], 1.2),
            beta: 0.6,
        };
        let cfg = LossConfig::default();
        let tl = total_loss(&mut g, p, t, &[fs], &[ft], &w, 0.0, &cfg).unwrap();
        let b = tl.breakdown(&g);
        assert_eq!(b.total, b.mse + b.ssim_loss);
        assert!(b.mirror > 0.0);
        assert!(total_loss(&mut g, p, t, &[fs], &[ft], &w, -1.0, &cfg).is_err());
    }
}
