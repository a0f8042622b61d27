//! Two-phase training: next-token pretraining of the backbone, then the
//! projector on the frozen backbone with a weighted CE + KD objective.

mod data;
mod loss;
mod optim;

use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cmtpp::ProjectorParams;
use crate::config::{ConfigIssue, Validate};
use crate::error::{Error, Result};
use crate::model::BackboneParams;
use crate::numerics::ops::{gemm, MatMut, MatRef};

pub use data::{detokenize, ingest_corpus, mtp_targets, split_holdout, tokenize, Batch, BYTE_VOCAB};
pub use loss::{ce_loss, kd_loss, MaskedMean};
pub use optim::{clip_grad_norm, lr_at, warmup_steps, AdamW};

/// Corpus must hold at least this many batches worth of tokens.
pub const MIN_CORPUS_BATCHES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub seq_len: usize,
    pub batch_size: usize,
    pub total_steps: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub lambda_kd: f64,
    pub temperature: f64,
    /// Projector offsets trained jointly.
    pub offsets: Vec<usize>,
    /// One weight per offset; empty means uniform.
    pub offset_weights: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            seq_len: 256,
            batch_size: 32,
            total_steps: 3000,
            peak_lr: 2.0e-4,
            warmup_ratio: 0.05,
            lambda_kd: 0.7,
            temperature: 2.0,
            offsets: vec![1],
            offset_weights: Vec::new(),
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    /// Defaults for pretraining a backbone from scratch, which tolerates a
    /// larger step than projector training.
    pub fn backbone_default() -> Self {
        TrainingConfig {
            peak_lr: 1.0e-3,
            ..TrainingConfig::default()
        }
    }

    /// Per-offset weights `lambda_k`, uniform when none are given.
    pub fn weights(&self) -> Vec<f64> {
        if self.offset_weights.is_empty() {
            vec![1.0 / self.offsets.len() as f64; self.offsets.len()]
        } else {
            self.offset_weights.clone()
        }
    }
}

impl Validate for TrainingConfig {
    fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut bad = |key: &str, msg: &str| out.push(ConfigIssue::new(key, msg));
        if self.seq_len < 2 {
            bad("seq_len", "must be at least 2");
        }
        if self.batch_size == 0 {
            bad("batch_size", "must be positive");
        }
        if self.total_steps == 0 {
            bad("total_steps", "must be positive");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            bad("peak_lr", "must be positive and finite");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            bad("warmup_ratio", "must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.lambda_kd) {
            bad("lambda_kd", "must be in [0, 1]");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            bad("temperature", "must be positive");
        }
        if self.offsets.is_empty() {
            bad("offsets", "must not be empty");
        } else if self.offsets.contains(&0) {
            bad("offsets", "offsets start at 1");
        } else {
            let mut sorted = self.offsets.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != self.offsets.len() {
                bad("offsets", "must be distinct");
            }
        }
        if !self.offset_weights.is_empty() {
            if self.offset_weights.len() != self.offsets.len() {
                bad("offset_weights", "needs one weight per offset");
            } else if self.offset_weights.iter().any(|w| !(*w >= 0.0)) {
                bad("offset_weights", "weights must be non-negative");
            } else if (self.offset_weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                bad("offset_weights", "weights must sum to 1");
            }
        }
        if !(0.0..1.0).contains(&self.beta1) {
            bad("beta1", "must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            bad("beta2", "must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            bad("weight_decay", "must be non-negative");
        }
        if !(self.grad_clip >= 0.0) {
            bad("grad_clip", "must be non-negative");
        }
        out
    }
}

/// Loss components for one offset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OffsetLoss {
    pub offset: usize,
    pub weight: f64,
    pub ce: f64,
    /// Already scaled by `T^2`.
    pub kd: f64,
    /// Non-ignored positions.
    pub count: usize,
}

/// Projector objective and its gradient. No backbone gradient exists.
pub struct LossReport {
    pub total: f64,
    pub offsets: Vec<OffsetLoss>,
    pub grads: ProjectorParams,
}

fn check_seq(batch: &Batch, backbone: &BackboneParams) -> Result<()> {
    if batch.seq_len > backbone.config.max_seq_len {
        return Err(Error::ContextOverflow {
            requested: batch.seq_len,
            limit: backbone.config.max_seq_len,
        });
    }
    Ok(())
}

/// `sum_k lambda_k ((1 - lambda_KD) CE_k + lambda_KD KD_k)` on one batch, with
/// the teacher for offset `k` at position `i` taken from position `i + k` of
/// the same backbone forward.
pub fn total_loss(
    batch: &Batch,
    backbone: &BackboneParams,
    projector: &ProjectorParams,
    cfg: &TrainingConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    for &k in &cfg.offsets {
        projector.check_offset(k)?;
    }
    check_seq(batch, backbone)?;
    let pass = backbone.forward_batch(&batch.tokens, batch.batch_size, batch.seq_len, false)?;
    let (d, v) = (backbone.d_model(), backbone.vocab_size());
    let (bsz, seq) = (batch.batch_size, batch.seq_len);
    let t = cfg.temperature;
    let mut grads = projector.zeros_like();
    let mut offsets = Vec::with_capacity(cfg.offsets.len());
    let mut total = 0.0;

    for (&k, &w) in cfg.offsets.iter().zip(&cfg.weights()) {
        // Student rows are positions i with i + 1 + k < seq.
        let per_row = seq.saturating_sub(1 + k);
        let n = bsz * per_row;
        if n == 0 {
            log::warn!("offset {k}: every position ignored at seq_len {seq}");
            offsets.push(OffsetLoss {
                offset: k,
                weight: w,
                ce: 0.0,
                kd: 0.0,
                count: 0,
            });
            continue;
        }
        let mut hs = Vec::with_capacity(n * d);
        let mut targets = Vec::with_capacity(n);
        let mut teacher_rows = Vec::with_capacity(n);
        for b in 0..bsz {
            for i in 0..per_row {
                let r = b * seq + i;
                hs.extend_from_slice(&pass.hidden[r * d..(r + 1) * d]);
                targets.push(batch.tokens[r + 1 + k]);
                teacher_rows.push(r + k);
            }
        }
        let proj = projector.forward_rows(&hs, n, k, true)?;
        let mut logits = vec![0.0; n * v];
        backbone.lm_logits_rows(&proj.output, n, &mut logits);

        let ce_scale = w * (1.0 - cfg.lambda_kd) / n as f64;
        let kd_scale = w * cfg.lambda_kd / n as f64;
        let mut dlogits = vec![0.0; n * v];
        let (mut ce_sum, mut kd_sum) = (0.0, 0.0);
        for r in 0..n {
            let row = &logits[r * v..(r + 1) * v];
            let grad = &mut dlogits[r * v..(r + 1) * v];
            ce_sum += loss::ce_row(row, targets[r], ce_scale, grad);
            let tr = teacher_rows[r];
            kd_sum += loss::kd_row(&pass.logits[tr * v..(tr + 1) * v], row, t, kd_scale, grad);
        }
        let ce = ce_sum / n as f64;
        let kd = t * t * kd_sum / n as f64;
        total += w * ((1.0 - cfg.lambda_kd) * ce + cfg.lambda_kd * kd);

        let mut dout = vec![0.0; n * d];
        gemm(
            1.0,
            MatRef::new(&dlogits, n, v),
            MatRef::new(backbone.lm_head.data(), d, v).t(),
            0.0,
            MatMut::new(&mut dout, n, d),
        );
        projector.backward_rows(&proj, &dout, &mut grads)?;
        offsets.push(OffsetLoss {
            offset: k,
            weight: w,
            ce,
            kd,
            count: n,
        });
    }
    Ok(LossReport {
        total,
        offsets,
        grads,
    })
}

/// Next-token cross-entropy of the backbone on one batch and its gradient.
pub fn backbone_loss(batch: &Batch, backbone: &BackboneParams) -> Result<(MaskedMean, BackboneParams)> {
    check_seq(batch, backbone)?;
    let pass = backbone.forward_batch(&batch.tokens, batch.batch_size, batch.seq_len, true)?;
    let v = backbone.vocab_size();
    let targets = batch.targets(0);
    let n = targets.iter().filter(|t| t.is_some()).count();
    let mut dlogits = vec![0.0; pass.logits.len()];
    let mut sum = 0.0;
    if n > 0 {
        let scale = 1.0 / n as f64;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                sum += loss::ce_row(
                    &pass.logits[r * v..(r + 1) * v],
                    t,
                    scale,
                    &mut dlogits[r * v..(r + 1) * v],
                );
            }
        }
    }
    let grads = backbone.backward(&pass, &dlogits)?;
    let value = if n > 0 { sum / n as f64 } else { 0.0 };
    Ok((MaskedMean { value, count: n }, grads))
}

/// One optimizer step's log line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    /// 1-based.
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    /// Per-offset CE, in the order of the offsets being trained.
    pub ce: Vec<f64>,
    /// Per-offset KD; empty for backbone pretraining.
    pub kd: Vec<f64>,
    pub grad_norm: f64,
}

pub struct TrainOutcome<P> {
    pub params: P,
    pub log: Vec<StepLog>,
    /// True when the observer ended training before `total_steps`.
    pub stopped_early: bool,
}

fn check_corpus(tokens: &[u32], cfg: &TrainingConfig) -> Result<()> {
    let required = MIN_CORPUS_BATCHES * cfg.batch_size * cfg.seq_len;
    if tokens.len() < required {
        return Err(Error::CorpusTooSmall {
            tokens: tokens.len(),
            required,
        });
    }
    Ok(())
}

fn check_loss(step: usize, value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step, value });
    }
    Ok(())
}

/// Pretrains `init` on next-token prediction. The observer sees every step
/// and may stop training early.
pub fn train_backbone<F>(
    init: BackboneParams,
    tokens: &[u32],
    cfg: &TrainingConfig,
    mut observer: F,
) -> Result<TrainOutcome<BackboneParams>>
where
    F: FnMut(&StepLog) -> ControlFlow<()>,
{
    cfg.validate()?;
    check_corpus(tokens, cfg)?;
    let mut params = init;
    let mut opt = AdamW::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.total_steps);
    for s in 0..cfg.total_steps {
        let step = s + 1;
        let batch = Batch::sample(tokens, cfg.batch_size, cfg.seq_len, &mut rng)?;
        let (loss, mut grads) = backbone_loss(&batch, &params)?;
        check_loss(step, loss.value)?;
        let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        let lr = lr_at(step, cfg);
        opt.step(&mut params, &grads, lr);
        let entry = StepLog {
            step,
            lr,
            total: loss.value,
            ce: vec![loss.value],
            kd: Vec::new(),
            grad_norm,
        };
        log_progress(&entry, cfg.total_steps);
        let flow = observer(&entry);
        log.push(entry);
        if flow.is_break() {
            return Ok(TrainOutcome {
                params,
                log,
                stopped_early: step < cfg.total_steps,
            });
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        stopped_early: false,
    })
}

/// Trains `init` against the frozen `backbone`, which is only ever borrowed
/// immutably.
pub fn train_projector<F>(
    init: ProjectorParams,
    backbone: &BackboneParams,
    tokens: &[u32],
    cfg: &TrainingConfig,
    mut observer: F,
) -> Result<TrainOutcome<ProjectorParams>>
where
    F: FnMut(&StepLog) -> ControlFlow<()>,
{
    cfg.validate()?;
    check_corpus(tokens, cfg)?;
    if init.d_model != backbone.d_model() {
        return Err(Error::ShapeMismatch {
            op: "train_projector",
            left: vec![init.d_model],
            right: vec![backbone.d_model()],
        });
    }
    let mut params = init;
    let mut opt = AdamW::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.total_steps);
    for s in 0..cfg.total_steps {
        let step = s + 1;
        let batch = Batch::sample(tokens, cfg.batch_size, cfg.seq_len, &mut rng)?;
        let mut report = total_loss(&batch, backbone, &params, cfg)?;
        check_loss(step, report.total)?;
        let grad_norm = clip_grad_norm(&mut report.grads, cfg.grad_clip);
        let lr = lr_at(step, cfg);
        opt.step(&mut params, &report.grads, lr);
        let entry = StepLog {
            step,
            lr,
            total: report.total,
            ce: report.offsets.iter().map(|o| o.ce).collect(),
            kd: report.offsets.iter().map(|o| o.kd).collect(),
            grad_norm,
        };
        log_progress(&entry, cfg.total_steps);
        let flow = observer(&entry);
        log.push(entry);
        if flow.is_break() {
            return Ok(TrainOutcome {
                params,
                log,
                stopped_early: step < cfg.total_steps,
            });
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        stopped_early: false,
    })
}

fn log_progress(entry: &StepLog, total: usize) {
    if entry.step % 100 == 0 || entry.step == 1 || entry.step == total {
        log::info!(
            "step {}/{} lr {:.3e} loss {:.5}",
            entry.step,
            total,
            entry.lr,
            entry.total
        );
    } else {
        log::debug!("step {} loss {:.5}", entry.step, entry.total);
    }
}

/// CSV with columns `step, lr, total, ce_k..., kd_k...`.
pub fn loss_csv(offsets: &[usize], log: &[StepLog]) -> String {
    let mut out = String::from("step,lr,total");
    let kd_cols = log.first().map_or(0, |l| l.kd.len());
    for k in offsets {
        let _ = write!(out, ",ce_{k}");
    }
    for k in offsets.iter().take(kd_cols) {
        let _ = write!(out, ",kd_{k}");
    }
    out.push('\n');
    for l in log {
        let _ = write!(out, "{},{:e},{}", l.step, l.lr, l.total);
        for x in l.ce.iter().chain(&l.kd) {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    }
    out
}

pub fn write_loss_csv(path: &Path, offsets: &[usize], log: &[StepLog]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, loss_csv(offsets, log)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
