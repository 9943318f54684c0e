//! Run configuration: a TOML file layered over built-in defaults, then
//! `key=value` overrides. Every key is checked against the known schema so
//! that typos and type errors name the offending key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::backbone::BackboneConfig;
use crate::error::{IamlError, Result};
use crate::losses::{LossConfig, LossTag, SsimParams};
use crate::mirror::MirrorConfig;
use crate::train::TrainConfig;

/// Fallback for `data.root` when the file leaves it empty.
pub const DATA_ROOT_ENV: &str = "IAML_DATA_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IamlSection {
    pub beta: f64,
    pub eps: f64,
    /// 1-based decoder levels; empty means all.
    pub levels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimSection {
    pub window: usize,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSection {
    pub config_tag: String,
    pub lambda: f64,
    pub iaml: IamlSection,
    pub ssim: SsimSection,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossConfig::default();
        Self {
            config_tag: d.tag.as_str().to_string(),
            lambda: d.lambda,
            iaml: IamlSection {
                beta: d.beta,
                eps: d.mirror.eps,
                levels: d.mirror.levels,
            },
            ssim: SsimSection {
                window: d.ssim.window_size,
                sigma: d.ssim.gaussian_sigma,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    /// Dataset root; empty falls back to `$IAML_DATA_ROOT`.
    pub root: String,
    pub dataset_name: String,
    pub train_split: String,
    pub test_split: String,
    /// Optional validation split evaluated after each epoch; empty disables it.
    pub val_split: String,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: String::new(),
            dataset_name: "LOL-v1".into(),
            train_split: "our485".into(),
            test_split: "eval15".into(),
            val_split: String::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    /// Path to an exported perceptual model; empty disables LPIPS.
    pub lpips_model: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputSection {
    pub run_dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            run_dir: "runs/iaml".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: BackboneConfig,
    pub train: TrainConfig,
    pub loss: LossSection,
    pub data: DataSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

fn flatten(prefix: &str, table: &Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Table {
    let mut root = Table::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut cur = &mut root;
        for p in &parts[..parts.len() - 1] {
            cur = cur
                .entry(p.to_string())
                .or_insert_with(|| Value::Table(Table::new()))
                .as_table_mut()
                .expect("schema keys never collide with leaves");
        }
        cur.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    root
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Array(_) => "array of integers",
        _ => "scalar",
    }
}

fn coerce(key: &str, default: &Value, given: Value) -> Result<Value> {
    let type_err = || IamlError::TypeError {
        key: key.to_string(),
        expected: type_name(default).to_string(),
    };
    let non_negative = |i: i64| {
        if i < 0 {
            Err(IamlError::RangeError {
                key: key.to_string(),
                reason: format!("must be non-negative, got {i}"),
            })
        } else {
            Ok(())
        }
    };
    match (default, given) {
        (Value::Float(_), Value::Float(f)) => Ok(Value::Float(f)),
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Integer(_), Value::Integer(i)) => {
            non_negative(i)?;
            Ok(Value::Integer(i))
        }
        (Value::String(_), Value::String(s)) => Ok(Value::String(s)),
        (Value::Boolean(_), Value::Boolean(b)) => Ok(Value::Boolean(b)),
        (Value::Array(_), Value::Array(items)) => {
            for it in &items {
                match it {
                    Value::Integer(i) => non_negative(*i)?,
                    _ => return Err(type_err()),
                }
            }
            Ok(Value::Array(items))
        }
        _ => Err(type_err()),
    }
}

/// Parses the right-hand side of a `key=value` override as a TOML value,
/// falling back to a bare string.
fn parse_override_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn parse_override(spec: &str) -> Result<(String, String)> {
    let (k, v) = spec.split_once('=').ok_or_else(|| {
        IamlError::ConfigSyntax(format!("override `{spec}` is not of the form key=value"))
    })?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn range(key: &str, reason: impl Into<String>) -> IamlError {
    IamlError::RangeError {
        key: key.to_string(),
        reason: reason.into(),
    }
}

impl RunConfig {
    /// Every configurable key, dotted, with its default value.
    pub fn schema() -> BTreeMap<String, Value> {
        let table = Table::try_from(RunConfig::default()).expect("defaults serialize");
        let mut out = BTreeMap::new();
        flatten("", &table, &mut out);
        out
    }

    /// Builds a config from TOML text plus overrides (applied last, in order).
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let user: Table = text
            .parse()
            .map_err(|e: toml::de::Error| IamlError::ConfigSyntax(e.to_string()))?;
        let mut given = BTreeMap::new();
        flatten("", &user, &mut given);
        let schema = Self::schema();
        let mut merged = schema.clone();
        let mut apply = |key: &str, v: Value| -> Result<()> {
            let default = schema
                .get(key)
                .ok_or_else(|| IamlError::UnknownKey(key.to_string()))?;
            merged.insert(key.to_string(), coerce(key, default, v)?);
            Ok(())
        };
        for (k, v) in given {
            apply(&k, v)?;
        }
        for (k, raw) in overrides {
            apply(k, parse_override_value(raw))?;
        }
        let cfg: RunConfig = unflatten(&merged)
            .try_into()
            .map_err(|e: toml::de::Error| IamlError::ConfigSyntax(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if !(1..=8).contains(&m.depth) {
            return Err(range("model.depth", "must be in 1..=8"));
        }
        if m.base_channels == 0 {
            return Err(range("model.base_channels", "must be >= 1"));
        }
        if m.cbam_reduction == 0 {
            return Err(range("model.cbam_reduction", "must be >= 1"));
        }
        if m.cbam_spatial_kernel.is_multiple_of(2) {
            return Err(range("model.cbam_spatial_kernel", "must be odd"));
        }
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(range("train.lr", "must be positive"));
        }
        for (key, b) in [
            ("train.adam_beta1", t.adam_beta1),
            ("train.adam_beta2", t.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(range(key, "must be in [0, 1)"));
            }
        }
        if !(t.adam_eps > 0.0) {
            return Err(range("train.adam_eps", "must be positive"));
        }
        if t.epochs == 0 {
            return Err(range("train.epochs", "must be >= 1"));
        }
        if t.batch_size == 0 {
            return Err(range("train.batch_size", "must be >= 1"));
        }
        if t.crop == 0 || !t.crop.is_multiple_of(m.divisor()) {
            return Err(range(
                "train.crop",
                format!("must be a positive multiple of {}", m.divisor()),
            ));
        }
        if t.crop < self.loss.ssim.window {
            return Err(range("train.crop", "must be at least the SSIM window"));
        }
        if !(0.0..=1.0).contains(&t.ema_mu) {
            return Err(range("train.ema_mu", "must be in [0, 1]"));
        }
        if !(t.grad_clip >= 0.0) {
            return Err(range("train.grad_clip", "must be non-negative"));
        }
        let l = &self.loss;
        l.config_tag.parse::<LossTag>()?;
        if !(l.lambda >= 0.0 && l.lambda.is_finite()) {
            return Err(range("loss.lambda", "must be non-negative"));
        }
        if !(l.iaml.beta >= 0.0 && l.iaml.beta.is_finite()) {
            return Err(range("loss.iaml.beta", "must be non-negative"));
        }
        if !(l.iaml.eps > 0.0) {
            return Err(range("loss.iaml.eps", "must be positive"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &lv in &l.iaml.levels {
            if lv == 0 || lv > m.depth {
                return Err(range(
                    "loss.iaml.levels",
                    format!("level {lv} outside 1..={}", m.depth),
                ));
            }
            if !seen.insert(lv) {
                return Err(range("loss.iaml.levels", format!("level {lv} repeated")));
            }
        }
        if l.ssim.window < 3 || l.ssim.window.is_multiple_of(2) {
            return Err(range("loss.ssim.window", "must be odd and >= 3"));
        }
        if !(l.ssim.sigma > 0.0) {
            return Err(range("loss.ssim.sigma", "must be positive"));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        Ok(LossConfig {
            tag: self.loss.config_tag.parse()?,
            lambda: self.loss.lambda,
            beta: self.loss.iaml.beta,
            mirror: MirrorConfig {
                eps: self.loss.iaml.eps,
                levels: self.loss.iaml.levels.clone(),
            },
            ssim: SsimParams {
                window_size: self.loss.ssim.window,
                gaussian_sigma: self.loss.ssim.sigma,
                ..SsimParams::default()
            },
        })
    }

    /// `data.root`, or `$IAML_DATA_ROOT` when that is empty.
    pub fn data_root(&self) -> Option<PathBuf> {
        if !self.data.root.is_empty() {
            return Some(PathBuf::from(&self.data.root));
        }
        std::env::var_os(DATA_ROOT_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
    }

    pub fn lpips_model(&self) -> Option<PathBuf> {
        (!self.eval.lpips_model.is_empty()).then(|| PathBuf::from(&self.eval.lpips_model))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(k: &str, v: &str) -> (String, String) {
        (k.to_string(), v.to_string())
    }

    #[test]
    fn empty_file_gives_documented_defaults() {
        let c = RunConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.loss.lambda, 0.8);
        assert_eq!(c.loss.iaml.beta, 0.6);
        assert_eq!(c.loss.config_tag, "mse_ssim_iaml");
        assert_eq!(c.train.lr, 2e-4);
        assert_eq!(c.train.epochs, 500);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.train.crop, 256);
        assert_eq!(c.train.ema_mu, 0.999);
    }

    #[test]
    fn override_beats_file() {
        let c =
            RunConfig::from_toml_str("[loss]\nlambda = 0.5\n", &[ov("loss.lambda", "0")]).unwrap();
        assert_eq!(c.loss.lambda, 0.0);
        let c = RunConfig::from_toml_str("[loss]\nlambda = 0.5\n", &[]).unwrap();
        assert_eq!(c.loss.lambda, 0.5);
    }

    #[test]
    fn unknown_key_named() {
        match RunConfig::from_toml_str("[loss]\nlambdaa = 1.0\n", &[]) {
            Err(IamlError::UnknownKey(k)) => assert_eq!(k, "loss.lambdaa"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn type_error_named() {
        match RunConfig::from_toml_str("", &[ov("train.epochs", "\"many\"")]) {
            Err(IamlError::TypeError { key, .. }) => assert_eq!(key, "train.epochs"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn range_errors_named() {
        for (k, v) in [
            ("loss.lambda", "-1"),
            ("loss.iaml.beta", "-0.1"),
            ("train.crop", "250"),
            ("loss.iaml.levels", "[0]"),
            ("train.batch_size", "0"),
        ] {
            match RunConfig::from_toml_str("", &[ov(k, v)]) {
                Err(IamlError::RangeError { key, .. }) => assert_eq!(key, k),
                other => panic!("{k}: {other:?}"),
            }
        }
    }

    #[test]
    fn unknown_tag_rejected() {
        assert!(matches!(
            RunConfig::from_toml_str("", &[ov("loss.config_tag", "bogus")]),
            Err(IamlError::UnknownConfigTag(_))
        ));
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::from_toml_str(
            "",
            &[ov("loss.iaml.levels", "[1, 3]"), ov("train.seed", "9")],
        )
        .unwrap();
        let back = RunConfig::from_toml_str(&c.to_toml_string(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.loss.iaml.levels, vec![1, 3]);
    }

    #[test]
    fn override_syntax() {
        assert_eq!(parse_override("a.b = 3").unwrap(), ov("a.b", "3"));
        assert!(parse_override("nokey").is_err());
    }
}
