use std::f64::consts::PI;

use crate::numerics::ParamTensors;

use super::TrainingConfig;

/// Number of linear warmup steps.
pub fn warmup_steps(cfg: &TrainingConfig) -> usize {
    (cfg.warmup_ratio * cfg.total_steps as f64).floor() as usize
}

/// Linear warmup from 0 to the peak, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainingConfig) -> f64 {
    let warm = warmup_steps(cfg);
    let step = step.min(cfg.total_steps);
    if step < warm {
        return cfg.peak_lr * step as f64 / warm as f64;
    }
    let span = cfg.total_steps - warm;
    if span == 0 {
        return cfg.peak_lr;
    }
    let progress = (step - warm) as f64 / span as f64;
    (cfg.peak_lr * 0.5 * (1.0 + (PI * progress).cos())).max(0.0)
}

/// Scales `grads` so their global L2 norm is at most `max_norm` (0 disables).
/// Returns the norm before clipping.
pub fn clip_grad_norm<P: ParamTensors>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads
        .named_tensors()
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for t in grads.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Adam with decoupled weight decay. Decay applies to matrices only, never
/// to gains or other vectors.
#[derive(Clone, Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &TrainingConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<P: ParamTensors>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let grads = grads.named_tensors();
        let params = params.tensors_mut();
        assert_eq!(params.len(), grads.len(), "parameter/gradient layout mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|(_, g)| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, (_, g))) in params.into_iter().zip(&grads).enumerate() {
            let decay = if p.shape().len() == 2 {
                1.0 - lr * self.weight_decay
            } else {
                1.0
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *x = *x * decay - lr * update;
            }
        }
    }
}
