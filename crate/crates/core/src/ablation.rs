//! Loss-formulation ablation: the five objectives trained from the same
//! initialization on the same sample order, then scored on one evaluation set.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::PairedDataset;
use crate::error::Result;
use crate::losses::LossTag;
use crate::metrics::{evaluate_pairs, render_csv, render_table, MetricsReport, PerceptualModel};
use crate::train::{init_state, train, RunDir, StepRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config_tag: String,
    pub label: String,
    pub ssim: f64,
    pub psnr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
    pub final_loss: f64,
    /// Digest of the per-step batch ids, to confirm every run saw the same data.
    pub order_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub steps: u64,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

fn order_digest(records: &[StepRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.step.to_le_bytes());
        for id in &r.batch {
            h.update(id.as_bytes());
            h.update([0]);
        }
    }
    h.finalize()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl AblationReport {
    pub fn row(&self, tag: LossTag) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.config_tag == tag.as_str())
    }

    fn cells(&self) -> (Vec<&'static str>, Vec<Vec<String>>) {
        let rows = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.label.clone(),
                    format!("{:.4}", r.ssim),
                    format!("{:.3}", r.psnr),
                    r.lpips
                        .map(|v| format!("{v:.4}"))
                        .unwrap_or_else(|| "-".into()),
                ]
            })
            .collect();
        (vec!["Configuration", "SSIM", "PSNR (dB)", "LPIPS"], rows)
    }

    pub fn to_table(&self) -> String {
        let (h, r) = self.cells();
        render_table(&h, &r)
    }

    pub fn to_csv(&self) -> String {
        let (h, r) = self.cells();
        render_csv(&h, &r)
    }
}

/// Trains one model per formulation with `base`'s seed, schedule and data, and
/// scores each on `eval_set`. Per-run logs go under `<run_dir>/ablation/<tag>/`.
pub fn run_ablation(
    base: &RunConfig,
    train_set: &PairedDataset,
    eval_set: &PairedDataset,
    lpips: Option<&dyn PerceptualModel>,
    run_dir: Option<&Path>,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for tag in LossTag::ALL {
        let mut cfg = base.clone();
        cfg.loss.config_tag = tag.as_str().to_string();
        let mut state = init_state(&cfg)?;
        let dir = match run_dir {
            Some(d) => Some(RunDir::create(d.join("ablation").join(tag.as_str()))?),
            None => None,
        };
        let records = train(&mut state, train_set, None, dir.as_ref())?;
        let scores = evaluate_pairs(&eval_set.pairs, |x| state.enhance(x), lpips)?;
        let report = MetricsReport::new("", tag.as_str(), scores);
        log::info!(
            "{}: SSIM {:.4}, PSNR {:.3} dB",
            tag.label(),
            report.mean_ssim,
            report.mean_psnr
        );
        rows.push(AblationRow {
            config_tag: tag.as_str().to_string(),
            label: tag.label().to_string(),
            ssim: report.mean_ssim,
            psnr: report.mean_psnr,
            lpips: report.mean_lpips,
            final_loss: records.last().map(|r| r.loss.total).unwrap_or(f64::NAN),
            order_digest: order_digest(&records),
        });
    }
    Ok(AblationReport {
        steps: base.train.max_steps,
        seed: base.train.seed,
        rows,
    })
}
