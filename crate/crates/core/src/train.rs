//! Teacher-student training.
//!
//! The student is a full U-Net trained on low-light inputs. The teacher shares
//! the student encoder by reference (read as constants) and keeps its own
//! decoder, which only ever changes through the EMA update. The teacher sees the
//! clean image and supplies the target pyramid for the mirror term.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::backbone::{UNet, WeightSet};
use crate::config::RunConfig;
use crate::data::{derived_rng, PairedDataset};
use crate::error::{IamlError, Result};
use crate::graph::{Graph, Var};
use crate::losses::{self, LossBreakdown};
use crate::luminance::weights_for_image;
use crate::mirror;
use crate::optim::{clip_global_norm, cosine_lr, Adam, AdamParams};
use crate::tensor::Tensor;

pub const ENCODER_PREFIX: &str = "student_encoder/";
pub const DECODER_PREFIX: &str = "student_decoder/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub crop: usize,
    pub ema_mu: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps; 0 means run every epoch.
    pub max_steps: u64,
    /// Checkpoint period in steps; 0 only writes the final checkpoint.
    pub checkpoint_every: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamParams::default();
        Self {
            lr: 2e-4,
            adam_beta1: a.beta1,
            adam_beta2: a.beta2,
            adam_eps: a.eps,
            epochs: 500,
            batch_size: 8,
            crop: 256,
            ema_mu: 0.999,
            seed: 0,
            max_steps: 0,
            checkpoint_every: 1000,
            grad_clip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: RunConfig,
    pub student_encoder: WeightSet,
    pub student_decoder: WeightSet,
    pub teacher_decoder: WeightSet,
    pub optimizer: Adam,
    pub step: u64,
    pub epoch: u64,
    /// Batches of the current epoch already consumed.
    pub batch_in_epoch: u64,
}

fn optimizer_for(params: AdamParams, enc: &WeightSet, dec: &WeightSet) -> Adam {
    Adam::new(
        params,
        enc.iter()
            .map(|(n, t)| (format!("{ENCODER_PREFIX}{n}"), t))
            .chain(dec.iter().map(|(n, t)| (format!("{DECODER_PREFIX}{n}"), t))),
    )
}

/// Fresh student from `train.seed`; the teacher decoder starts as an exact copy.
pub fn init_state(config: &RunConfig) -> Result<TrainState> {
    config.validate()?;
    let net = UNet::new(config.model.clone())?;
    let (enc, dec) = net.init_weights(&mut derived_rng(config.train.seed, &[2]));
    let optimizer = optimizer_for(config.train.adam(), &enc, &dec);
    Ok(TrainState {
        config: config.clone(),
        teacher_decoder: dec.clone(),
        student_encoder: enc,
        student_decoder: dec,
        optimizer,
        step: 0,
        epoch: 0,
        batch_in_epoch: 0,
    })
}

/// `teacher ← μ·teacher + (1 − μ)·student`, elementwise.
pub fn ema_update(teacher: &mut WeightSet, student: &WeightSet, mu: f64) -> Result<()> {
    if !teacher.same_layout(student) {
        return Err(IamlError::ShapeMismatch(
            "teacher and student decoders differ in layout".into(),
        ));
    }
    for (t, (_, s)) in teacher.tensors_mut().zip(student.iter()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = mu * *a + (1.0 - mu) * b;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepMode {
    Full,
    /// Student objective switched off. The loss is the λ-weighted mirror term
    /// against a detached student pyramid plus a probe that reads the teacher
    /// image and every teacher level directly. Any gradient reaching a student
    /// weight would have to come through the teacher path.
    TeacherPathOnly,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub loss: LossBreakdown,
    /// One gradient per optimizer parameter, before clipping.
    pub grads: Vec<Tensor>,
    pub lr: f64,
}

impl TrainState {
    pub fn net(&self) -> Result<UNet> {
        UNet::new(self.config.model.clone())
    }

    /// Learning rate for the current epoch.
    pub fn lr(&self) -> f64 {
        let t = &self.config.train;
        cosine_lr(t.lr, self.epoch, t.epochs)
    }

    /// Loss and student gradients for one batch, without touching the state.
    pub fn gradients(
        &self,
        low: &Tensor,
        clean: &Tensor,
        mode: StepMode,
    ) -> Result<(LossBreakdown, Vec<Tensor>)> {
        let net = self.net()?;
        let cfg = self.config.loss_config()?;
        low.ensure_same_shape(clean)?;
        let (_, _, h, w) = low.dims4();
        net.config.check_dims(h, w)?;

        let mut g = Graph::new();
        let enc = self.student_encoder.bind(&mut g, true);
        let dec = self.student_decoder.bind(&mut g, true);
        let x = g.constant(low.clone());
        let y = g.constant(clean.clone());
        let student = net.forward(&mut g, &enc, &dec, x)?;

        let needs_teacher = cfg.tag.uses_mirror() || mode == StepMode::TeacherPathOnly;
        let teacher = if needs_teacher {
            let shared = self.student_encoder.bind(&mut g, false);
            let tdec = self.teacher_decoder.bind(&mut g, false);
            let e = net.encode(&mut g, &shared, y)?;
            Some(net.decode(&mut g, &tdec, &e)?)
        } else {
            None
        };
        let teacher_pyr: Vec<Var> = teacher
            .as_ref()
            .map(|t| t.pyramid.clone())
            .unwrap_or_default();
        let weights = weights_for_image(low, cfg.beta)?;

        let (total, breakdown) = match mode {
            StepMode::Full => {
                let tl = losses::total_loss(
                    &mut g,
                    student.image,
                    y,
                    &student.pyramid,
                    &teacher_pyr,
                    &weights,
                    cfg.lambda,
                    &cfg,
                )?;
                (tl.total, tl.breakdown(&g))
            }
            StepMode::TeacherPathOnly => {
                let frozen: Vec<Var> = student.pyramid.iter().map(|&v| g.detach(v)).collect();
                let (m, per_level) =
                    mirror::iaml_total(&mut g, &frozen, &teacher_pyr, &weights, &cfg.mirror)?;
                let t = teacher.as_ref().expect("teacher built");
                let mut probe = losses::mse(&mut g, t.image, y)?;
                for &lv in &t.pyramid {
                    let mean = g.mean_all(lv);
                    probe = g.add(probe, mean);
                }
                let scaled = g.mul_scalar(m, cfg.lambda);
                let total = g.add(scaled, probe);
                let bd = LossBreakdown {
                    mse: 0.0,
                    ssim_loss: 0.0,
                    mirror: g.value(m).item(),
                    mirror_per_level: per_level.iter().map(|&v| g.value(v).item()).collect(),
                    total: g.value(total).item(),
                    config_tag: cfg.tag.as_str().to_string(),
                };
                (total, bd)
            }
        };
        if !breakdown.is_finite() {
            return Err(IamlError::NonFiniteLoss {
                step: self.step,
                detail: format!("{breakdown:?}"),
            });
        }
        let grads = g.backward(total);
        let collected = enc
            .vars()
            .iter()
            .chain(dec.vars())
            .map(|&v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
            })
            .collect();
        Ok((breakdown, collected))
    }

    /// Gradient step on the student, then the EMA update of the teacher decoder.
    pub fn step_with(
        &mut self,
        low: &Tensor,
        clean: &Tensor,
        mode: StepMode,
    ) -> Result<StepOutcome> {
        let (loss, grads) = self.gradients(low, clean, mode)?;
        let mut applied = grads.clone();
        if self.config.train.grad_clip > 0.0 {
            clip_global_norm(&mut applied, self.config.train.grad_clip);
        }
        let lr = self.lr();
        {
            let mut params: Vec<&mut Tensor> = self
                .student_encoder
                .tensors_mut()
                .chain(self.student_decoder.tensors_mut())
                .collect();
            self.optimizer.step(&mut params, &applied, lr)?;
        }
        ema_update(
            &mut self.teacher_decoder,
            &self.student_decoder,
            self.config.train.ema_mu,
        )?;
        self.step += 1;
        Ok(StepOutcome { loss, grads, lr })
    }

    pub fn train_step(&mut self, low: &Tensor, clean: &Tensor) -> Result<LossBreakdown> {
        Ok(self.step_with(low, clean, StepMode::Full)?.loss)
    }

    /// Student-only inference at any resolution. Inputs are reflect-padded to a
    /// multiple of the network stride and the output is cropped back.
    pub fn enhance(&self, image: &Tensor) -> Result<Tensor> {
        enhance(
            &self.net()?,
            &self.student_encoder,
            &self.student_decoder,
            image,
        )
    }
}

fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Pads the bottom and right edges by mirror reflection (edge pixel not repeated).
pub fn reflect_pad(t: &Tensor, new_h: usize, new_w: usize) -> Tensor {
    let (n, c, h, w) = t.dims4();
    let mut out = Tensor::zeros(&[n, c, new_h, new_w]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..new_h {
                let sy = reflect_index(y, h);
                for x in 0..new_w {
                    out.set4(b, ch, y, x, t.at4(b, ch, sy, reflect_index(x, w)));
                }
            }
        }
    }
    out
}

pub fn enhance(net: &UNet, enc: &WeightSet, dec: &WeightSet, image: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = image.dims4();
    if c != 3 {
        return Err(IamlError::ChannelCount(c));
    }
    let f = net.config.divisor();
    let (ph, pw) = (h.div_ceil(f) * f, w.div_ceil(f) * f);
    let input = if (ph, pw) == (h, w) {
        image.clone()
    } else {
        reflect_pad(image, ph, pw)
    };
    let (out, _) = net.forward_value(enc, dec, &input)?;
    Ok(if (ph, pw) == (h, w) {
        out
    } else {
        out.crop(0, 0, h, w)
    })
}

/// One line of `log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub batch: Vec<String>,
    pub loss: LossBreakdown,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub val_psnr: f64,
    pub val_ssim: f64,
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(root.join("checkpoints"))?;
        std::fs::create_dir_all(root.join("reports"))?;
        Ok(Self { root })
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join("log.jsonl")
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("step_{step:08}.ckpt"))
    }

    pub fn latest_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("latest.ckpt")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn write_config_echo(&self, config: &RunConfig) -> Result<()> {
        std::fs::write(self.root.join("config.echo"), config.to_toml_string())?;
        Ok(())
    }

    fn save(&self, state: &TrainState) -> Result<()> {
        let path = self.checkpoint_path(state.step);
        crate::checkpoint::save(state, &path)?;
        std::fs::copy(&path, self.latest_checkpoint())?;
        info!("checkpoint written: {}", path.display());
        Ok(())
    }
}

fn append_json<T: Serialize>(log: &mut Option<BufWriter<File>>, value: &T) -> Result<()> {
    if let Some(w) = log {
        serde_json::to_writer(&mut *w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    Ok(())
}

/// Runs epochs until `train.epochs` or `train.max_steps` is reached, resuming
/// from whatever counters `state` carries.
pub fn train(
    state: &mut TrainState,
    dataset: &PairedDataset,
    validation: Option<&PairedDataset>,
    run_dir: Option<&RunDir>,
) -> Result<Vec<StepRecord>> {
    if dataset.is_empty() {
        return Err(IamlError::InvalidConfig("training set is empty".into()));
    }
    let mut log = match run_dir {
        Some(d) => Some(BufWriter::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(d.log_path())?,
        )),
        None => None,
    };
    let tc = state.config.train.clone();
    let started = Instant::now();
    let mut records = Vec::new();
    let mut saved_at = None;
    let limit_hit = |s: &TrainState| tc.max_steps > 0 && s.step >= tc.max_steps;
    while state.epoch < tc.epochs && !limit_hit(state) {
        let order = dataset.epoch_order(tc.seed, state.epoch);
        let batches: Vec<&[usize]> = order.chunks(tc.batch_size).collect();
        while (state.batch_in_epoch as usize) < batches.len() {
            if limit_hit(state) {
                break;
            }
            let b = state.batch_in_epoch as usize;
            let mut lows = Vec::new();
            let mut cleans = Vec::new();
            let mut ids = Vec::new();
            for (k, &idx) in batches[b].iter().enumerate() {
                let position = (b * tc.batch_size + k) as u64;
                let (l, c) = dataset.augmented(idx, tc.crop, tc.seed, state.epoch, position)?;
                lows.push(l);
                cleans.push(c);
                ids.push(dataset.pairs[idx].pair_id.clone());
            }
            let low = Tensor::concat_batch(&lows)?;
            let clean = Tensor::concat_batch(&cleans)?;
            let out = state.step_with(&low, &clean, StepMode::Full)?;
            state.batch_in_epoch += 1;
            let rec = StepRecord {
                step: state.step,
                epoch: state.epoch,
                lr: out.lr,
                batch: ids,
                loss: out.loss,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            };
            append_json(&mut log, &rec)?;
            records.push(rec);
            if let Some(d) = run_dir {
                if tc.checkpoint_every > 0 && state.step.is_multiple_of(tc.checkpoint_every) {
                    d.save(state)?;
                    saved_at = Some(state.step);
                }
            }
        }
        if (state.batch_in_epoch as usize) >= batches.len() {
            if let Some(val) = validation {
                let (psnr, ssim) = crate::metrics::mean_scores(state, val)?;
                info!(
                    "epoch {}: val PSNR {psnr:.3} dB, SSIM {ssim:.4}",
                    state.epoch
                );
                append_json(
                    &mut log,
                    &EpochRecord {
                        epoch: state.epoch,
                        val_psnr: psnr,
                        val_ssim: ssim,
                    },
                )?;
            }
            state.epoch += 1;
            state.batch_in_epoch = 0;
        }
    }
    if let Some(d) = run_dir {
        if saved_at != Some(state.step) {
            d.save(state)?;
        }
    }
    Ok(records)
}

/// Reads `log.jsonl`, keeping step records and skipping epoch summaries.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v.get("step").is_some() {
            out.push(serde_json::from_value(v)?);
        }
    }
    Ok(out)
}
