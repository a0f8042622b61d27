//! Masked cross-entropy and temperature-softened distillation, plus the
//! per-row gradient kernels the training loop uses.

use crate::error::{Error, Result};
use crate::numerics::DenseArray;

/// A mean over non-ignored positions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskedMean {
    pub value: f64,
    pub count: usize,
}

impl MaskedMean {
    /// True when every position was ignored and `value` is the defined 0.
    pub fn all_ignored(&self) -> bool {
        self.count == 0
    }
}

fn rows_of(a: &DenseArray, op: &'static str) -> Result<(usize, usize)> {
    match *a.shape() {
        [r, v] => Ok((r, v)),
        _ => Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: vec![0, 0],
        }),
    }
}

/// Mean of `-logp[target]` over rows whose target is present.
pub fn ce_loss(student_logps: &DenseArray, targets: &[Option<u32>]) -> Result<MaskedMean> {
    let (rows, v) = rows_of(student_logps, "ce_loss")?;
    if rows != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "ce_loss",
            left: vec![rows, v],
            right: vec![targets.len()],
        });
    }
    let mut sum = 0.0;
    let mut count = 0;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            if t as usize >= v {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab_size: v,
                });
            }
            sum -= student_logps.row(r)[t as usize];
            count += 1;
        }
    }
    if count == 0 {
        log::warn!("ce_loss: every position ignored, loss defined as 0");
        return Ok(MaskedMean { value: 0.0, count });
    }
    Ok(MaskedMean {
        value: sum / count as f64,
        count,
    })
}

/// `T^2 * KL(softmax(teacher / T) || softmax(student / T))`, averaged over rows.
pub fn kd_loss(teacher_logits: &DenseArray, student_logits: &DenseArray, temperature: f64) -> Result<f64> {
    let (rows, v) = rows_of(teacher_logits, "kd_loss")?;
    if student_logits.shape() != [rows, v] {
        return Err(Error::ShapeMismatch {
            op: "kd_loss",
            left: teacher_logits.shape().to_vec(),
            right: student_logits.shape().to_vec(),
        });
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    if rows == 0 {
        return Ok(0.0);
    }
    let mut scratch = vec![0.0; v];
    let sum: f64 = (0..rows)
        .map(|r| {
            kd_row(
                teacher_logits.row(r),
                student_logits.row(r),
                temperature,
                0.0,
                &mut scratch,
            )
        })
        .sum();
    Ok(temperature * temperature * sum / rows as f64)
}

fn log_softmax_scaled(x: &[f64], inv_t: f64, out: &mut [f64]) {
    let m = x.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * inv_t));
    let z: f64 = x.iter().map(|&xi| (xi * inv_t - m).exp()).sum();
    let lse = m + z.ln();
    for (o, &xi) in out.iter_mut().zip(x) {
        *o = xi * inv_t - lse;
    }
}

/// Negative log-likelihood of `target` under `logits`; adds
/// `scale * (softmax(logits) - onehot)` into `grad`.
pub(crate) fn ce_row(logits: &[f64], target: u32, scale: f64, grad: &mut [f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&x| (x - m).exp()).sum();
    let lse = m + z.ln();
    if scale != 0.0 {
        for (g, &x) in grad.iter_mut().zip(logits) {
            *g += scale * (x - lse).exp();
        }
        grad[target as usize] -= scale;
    }
    lse - logits[target as usize]
}

/// `KL(p_T || q_T)` for one row (without the `T^2` factor); adds
/// `scale * T * (q_T - p_T)`, the gradient of `T^2 KL` w.r.t. the student
/// logits, into `grad`.
pub(crate) fn kd_row(teacher: &[f64], student: &[f64], t: f64, scale: f64, grad: &mut [f64]) -> f64 {
    let v = teacher.len();
    let mut lp = vec![0.0; v];
    let mut lq = vec![0.0; v];
    log_softmax_scaled(teacher, 1.0 / t, &mut lp);
    log_softmax_scaled(student, 1.0 / t, &mut lq);
    let mut kl = 0.0;
    for i in 0..v {
        let p = lp[i].exp();
        if p > 0.0 {
            kl += p * (lp[i] - lq[i]);
        }
        if scale != 0.0 {
            grad[i] += scale * t * (lq[i].exp() - p);
        }
    }
    kl
}
