use crate::error::{Error, Result};
use crate::numerics::ops::{dot, rmsnorm_rows, silu_scalar};

use super::{vecmat, BackboneParams};

/// Per-layer keys and values for one decode session. Append-only.
#[derive(Clone, Debug)]
pub struct KVCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    capacity: usize,
    d_model: usize,
}

impl KVCache {
    pub fn new(backbone: &BackboneParams) -> Self {
        let cfg = &backbone.config;
        KVCache {
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            len: 0,
            capacity: cfg.max_seq_len,
            d_model: cfg.d_model,
        }
    }

    /// Number of positions consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Bytes of cached keys and values at the current length.
    pub fn bytes(&self) -> usize {
        2 * self.keys.len() * self.len * self.d_model * std::mem::size_of::<f64>()
    }
}

/// Output of one incremental step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Post-final-norm hidden state of the consumed position.
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

impl BackboneParams {
    /// Consumes one token at position `cache.len()` and extends the cache.
    pub fn step(&self, token: u32, cache: &mut KVCache) -> Result<StepOutput> {
        let cfg = &self.config;
        if cache.keys.len() != cfg.n_layers || cache.d_model != cfg.d_model {
            return Err(Error::invalid("KV cache belongs to a different model"));
        }
        if cache.len >= cache.capacity {
            return Err(Error::ContextOverflow {
                requested: cache.len + 1,
                limit: cache.capacity,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                token,
                vocab_size: cfg.vocab_size,
            });
        }
        let (d, f, h) = (cfg.d_model, cfg.ffn_dim(), cfg.n_heads);
        let dh = cfg.head_dim();
        let pos = cache.len;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x: Vec<f64> = self
            .tok_embedding
            .row(token as usize)
            .iter()
            .zip(self.pos_embedding.row(pos))
            .map(|(a, b)| a + b)
            .collect();
        let mut normed = vec![0.0; d];
        let mut inv = [0.0];
        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        let mut attn = vec![0.0; d];
        let mut proj = vec![0.0; d];
        let mut gate = vec![0.0; f];
        let mut up = vec![0.0; f];
        let mut scores = vec![0.0; pos + 1];

        for (li, lp) in self.layers.iter().enumerate() {
            rmsnorm_rows(&x, lp.attn_norm.data(), cfg.norm_eps, &mut normed, &mut inv);
            vecmat(&normed, lp.wq.data(), &mut q);
            vecmat(&normed, lp.wk.data(), &mut k);
            vecmat(&normed, lp.wv.data(), &mut v);
            let keys = &mut cache.keys[li];
            let values = &mut cache.values[li];
            keys.extend_from_slice(&k);
            values.extend_from_slice(&v);

            for head in 0..h {
                let qh = &q[head * dh..(head + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = dot(qh, &keys[j * d + head * dh..j * d + (head + 1) * dh]) * scale;
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in &mut scores {
                    *s = (*s - m).exp();
                    z += *s;
                }
                let out = &mut attn[head * dh..(head + 1) * dh];
                out.iter_mut().for_each(|o| *o = 0.0);
                for (j, s) in scores.iter().enumerate() {
                    let w = s / z;
                    let vj = &values[j * d + head * dh..j * d + (head + 1) * dh];
                    for (o, vv) in out.iter_mut().zip(vj) {
                        *o += w * vv;
                    }
                }
            }
            vecmat(&attn, lp.wo.data(), &mut proj);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);

            rmsnorm_rows(&x, lp.ffn_norm.data(), cfg.norm_eps, &mut normed, &mut inv);
            vecmat(&normed, lp.w_gate.data(), &mut gate);
            vecmat(&normed, lp.w_up.data(), &mut up);
            for (g, u) in gate.iter_mut().zip(&up) {
                *g = silu_scalar(*g) * u;
            }
            vecmat(&gate, lp.w_down.data(), &mut proj);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
        }
        cache.len += 1;

        let mut hidden = vec![0.0; d];
        rmsnorm_rows(&x, self.final_norm.data(), cfg.norm_eps, &mut hidden, &mut inv);
        let logits = self.lm_logits(&hidden);
        Ok(StepOutput { hidden, logits })
    }
}
