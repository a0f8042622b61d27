//! Decoder-only backbone: pre-norm RMSNorm blocks with multi-head causal
//! attention, a SwiGLU feed-forward, learned positional embeddings and a
//! bias-free LM head.
//!
//! The hidden state exposed to callers is always the post-final-norm state,
//! i.e. exactly what the LM head consumes.

mod cache;
pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigIssue, Validate};
use crate::error::{Error, Result};
use crate::numerics::ops::{
    gemm, rmsnorm_rows, rmsnorm_rows_backward, silu_grad_scalar, silu_scalar, MatMut, MatRef,
};
use crate::numerics::{DenseArray, ParamTensors};

pub use cache::{KVCache, StepOutput};

/// Standard deviation of the normal weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub ffn_ratio: f64,
    pub norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 256,
            ffn_ratio: 2.75,
            norm_eps: 1e-6,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        (self.ffn_ratio * self.d_model as f64).round() as usize
    }
}

impl Validate for ModelConfig {
    fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        if self.vocab_size < 2 {
            out.push(ConfigIssue::new("vocab_size", "must be at least 2"));
        }
        if self.vocab_size > u32::MAX as usize {
            out.push(ConfigIssue::new("vocab_size", "must fit in u32 token ids"));
        }
        if self.d_model == 0 {
            out.push(ConfigIssue::new("d_model", "must be positive"));
        }
        if self.n_layers == 0 {
            out.push(ConfigIssue::new("n_layers", "must be positive"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            out.push(ConfigIssue::new(
                "n_heads",
                "d_model must be divisible by n_heads",
            ));
        }
        if self.max_seq_len < 8 {
            out.push(ConfigIssue::new("max_seq_len", "must be at least 8"));
        }
        if !(self.ffn_ratio > 0.0) || self.ffn_dim() == 0 {
            out.push(ConfigIssue::new("ffn_ratio", "must give a positive FFN width"));
        }
        if !(self.norm_eps > 0.0) {
            out.push(ConfigIssue::new("norm_eps", "must be positive"));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub attn_norm: DenseArray,
    pub wq: DenseArray,
    pub wk: DenseArray,
    pub wv: DenseArray,
    pub wo: DenseArray,
    pub ffn_norm: DenseArray,
    pub w_gate: DenseArray,
    pub w_up: DenseArray,
    pub w_down: DenseArray,
}

/// The frozen expert.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: ModelConfig,
    pub tok_embedding: DenseArray,
    pub pos_embedding: DenseArray,
    pub layers: Vec<BlockParams>,
    pub final_norm: DenseArray,
    /// `d_model x vocab_size`, no bias.
    pub lm_head: DenseArray,
}

impl ParamTensors for BackboneParams {
    fn named_tensors(&self) -> Vec<(String, &DenseArray)> {
        let mut out = vec![
            ("tok_embedding".to_string(), &self.tok_embedding),
            ("pos_embedding".to_string(), &self.pos_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("attn_norm", &l.attn_norm),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("ffn_norm", &l.ffn_norm),
                ("w_gate", &l.w_gate),
                ("w_up", &l.w_up),
                ("w_down", &l.w_down),
            ] {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut DenseArray> {
        let mut out = vec![&mut self.tok_embedding, &mut self.pos_embedding];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w_gate,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }
}

/// Activations of one block kept for the backward pass.
struct LayerActs {
    x_in: Vec<f64>,
    n1: Vec<f64>,
    inv1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `batch x heads x seq x seq`, zero above the diagonal.
    probs: Vec<f64>,
    attn: Vec<f64>,
    x_mid: Vec<f64>,
    n2: Vec<f64>,
    inv2: Vec<f64>,
    gate: Vec<f64>,
    up: Vec<f64>,
    act: Vec<f64>,
}

/// Result of a batched forward pass.
pub struct ForwardPass {
    pub batch: usize,
    pub seq: usize,
    tokens: Vec<u32>,
    layers: Vec<LayerActs>,
    x_final: Vec<f64>,
    inv_final: Vec<f64>,
    /// `(batch * seq) x d_model`, post-final-norm.
    pub hidden: Vec<f64>,
    /// `(batch * seq) x vocab_size`.
    pub logits: Vec<f64>,
}

impl BackboneParams {
    /// Random initialization, deterministic in `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, f, l) = (
            config.vocab_size,
            config.d_model,
            config.ffn_dim(),
            config.max_seq_len,
        );
        let tok_embedding = DenseArray::randn(&[v, d], INIT_STD, &mut rng);
        let pos_embedding = DenseArray::randn(&[l, d], INIT_STD, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| BlockParams {
                attn_norm: DenseArray::filled(&[d], 1.0),
                wq: DenseArray::randn(&[d, d], INIT_STD, &mut rng),
                wk: DenseArray::randn(&[d, d], INIT_STD, &mut rng),
                wv: DenseArray::randn(&[d, d], INIT_STD, &mut rng),
                wo: DenseArray::randn(&[d, d], INIT_STD, &mut rng),
                ffn_norm: DenseArray::filled(&[d], 1.0),
                w_gate: DenseArray::randn(&[d, f], INIT_STD, &mut rng),
                w_up: DenseArray::randn(&[d, f], INIT_STD, &mut rng),
                w_down: DenseArray::randn(&[f, d], INIT_STD, &mut rng),
            })
            .collect();
        Ok(BackboneParams {
            config: config.clone(),
            tok_embedding,
            pos_embedding,
            layers,
            final_norm: DenseArray::filled(&[d], 1.0),
            lm_head: DenseArray::randn(&[d, v], INIT_STD, &mut rng),
        })
    }

    /// All-zero arrays with the same layout, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_();
        z
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// `hidden * W_LM` for a batch of rows.
    pub fn lm_logits_rows(&self, hidden: &[f64], rows: usize, out: &mut [f64]) {
        let (d, v) = (self.d_model(), self.vocab_size());
        gemm(
            1.0,
            MatRef::new(hidden, rows, d),
            MatRef::new(self.lm_head.data(), d, v),
            0.0,
            MatMut::new(out, rows, v),
        );
    }

    /// Logits for a single hidden state.
    pub fn lm_logits(&self, hidden: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab_size()];
        vecmat(hidden, self.lm_head.data(), &mut out);
        out
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        let v = self.vocab_size();
        match tokens.iter().find(|&&t| t as usize >= v) {
            Some(&token) => Err(Error::TokenOutOfRange {
                token,
                vocab_size: v,
            }),
            None => Ok(()),
        }
    }

    /// Full-sequence forward of one sequence. Returns `(hidden T x d, logits T x V)`.
    pub fn forward(&self, tokens: &[u32]) -> Result<(DenseArray, DenseArray)> {
        let t = tokens.len();
        let pass = self.forward_batch(tokens, 1, t, false)?;
        Ok((
            DenseArray::from_vec(&[t, self.d_model()], pass.hidden)?,
            DenseArray::from_vec(&[t, self.vocab_size()], pass.logits)?,
        ))
    }

    /// Forward over `batch` sequences of length `seq` laid out back to back.
    /// With `keep_activations` the result can be fed to [`Self::backward`].
    pub fn forward_batch(
        &self,
        tokens: &[u32],
        batch: usize,
        seq: usize,
        keep_activations: bool,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        if tokens.len() != batch * seq {
            return Err(Error::ShapeMismatch {
                op: "forward_batch",
                left: vec![tokens.len()],
                right: vec![batch, seq],
            });
        }
        if seq > cfg.max_seq_len {
            return Err(Error::ContextOverflow {
                requested: seq,
                limit: cfg.max_seq_len,
            });
        }
        if seq == 0 {
            return Err(Error::invalid("forward on an empty sequence"));
        }
        self.check_tokens(tokens)?;

        let (d, f, h, v) = (cfg.d_model, cfg.ffn_dim(), cfg.n_heads, cfg.vocab_size);
        let dh = cfg.head_dim();
        let n = batch * seq;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = vec![0.0; n * d];
        for (i, row) in x.chunks_exact_mut(d).enumerate() {
            let tok = self.tok_embedding.row(tokens[i] as usize);
            let pos = self.pos_embedding.row(i % seq);
            for ((o, a), b) in row.iter_mut().zip(tok).zip(pos) {
                *o = a + b;
            }
        }

        let mut layers = Vec::with_capacity(if keep_activations { cfg.n_layers } else { 0 });
        for lp in &self.layers {
            let x_in = x.clone();
            let mut n1 = vec![0.0; n * d];
            let mut inv1 = vec![0.0; n];
            rmsnorm_rows(&x, lp.attn_norm.data(), cfg.norm_eps, &mut n1, &mut inv1);
            let q = project(&n1, n, d, &lp.wq, d);
            let k = project(&n1, n, d, &lp.wk, d);
            let vv = project(&n1, n, d, &lp.wv, d);

            let mut probs = vec![0.0; batch * h * seq * seq];
            let mut attn = vec![0.0; n * d];
            for b in 0..batch {
                for head in 0..h {
                    let off = b * seq * d + head * dh;
                    let p = &mut probs[(b * h + head) * seq * seq..][..seq * seq];
                    gemm(
                        scale,
                        MatRef::strided(&q[off..], seq, dh, d, 1),
                        MatRef::strided(&k[off..], seq, dh, d, 1).t(),
                        0.0,
                        MatMut::new(p, seq, seq),
                    );
                    causal_softmax_rows(p, seq);
                    gemm(
                        1.0,
                        MatRef::new(p, seq, seq),
                        MatRef::strided(&vv[off..], seq, dh, d, 1),
                        0.0,
                        MatMut::strided(&mut attn[off..], seq, dh, d, 1),
                    );
                }
            }
            // x += attn * Wo
            gemm(
                1.0,
                MatRef::new(&attn, n, d),
                MatRef::new(lp.wo.data(), d, d),
                1.0,
                MatMut::new(&mut x, n, d),
            );
            let x_mid = x.clone();
            let mut n2 = vec![0.0; n * d];
            let mut inv2 = vec![0.0; n];
            rmsnorm_rows(&x, lp.ffn_norm.data(), cfg.norm_eps, &mut n2, &mut inv2);
            let gate = project(&n2, n, d, &lp.w_gate, f);
            let up = project(&n2, n, d, &lp.w_up, f);
            let act: Vec<f64> = gate
                .iter()
                .zip(&up)
                .map(|(&g, &u)| silu_scalar(g) * u)
                .collect();
            gemm(
                1.0,
                MatRef::new(&act, n, f),
                MatRef::new(lp.w_down.data(), f, d),
                1.0,
                MatMut::new(&mut x, n, d),
            );
            if keep_activations {
                layers.push(LayerActs {
                    x_in,
                    n1,
                    inv1,
                    q,
                    k,
                    v: vv,
                    probs,
                    attn,
                    x_mid,
                    n2,
                    inv2,
                    gate,
                    up,
                    act,
                });
            }
        }

        let mut hidden = vec![0.0; n * d];
        let mut inv_final = vec![0.0; n];
        rmsnorm_rows(
            &x,
            self.final_norm.data(),
            cfg.norm_eps,
            &mut hidden,
            &mut inv_final,
        );
        let mut logits = vec![0.0; n * v];
        self.lm_logits_rows(&hidden, n, &mut logits);

        Ok(ForwardPass {
            batch,
            seq,
            tokens: tokens.to_vec(),
            layers,
            x_final: x,
            inv_final,
            hidden,
            logits,
        })
    }

    /// Gradients of a scalar loss w.r.t. every parameter, given the loss
    /// gradient w.r.t. the logits of a pass run with `keep_activations`.
    pub fn backward(&self, pass: &ForwardPass, dlogits: &[f64]) -> Result<BackboneParams> {
        let cfg = &self.config;
        let (d, f, h, v) = (cfg.d_model, cfg.ffn_dim(), cfg.n_heads, cfg.vocab_size);
        let dh = cfg.head_dim();
        let (batch, seq) = (pass.batch, pass.seq);
        let n = batch * seq;
        let scale = 1.0 / (dh as f64).sqrt();
        if pass.layers.len() != cfg.n_layers {
            return Err(Error::invalid(
                "backward needs a forward pass run with keep_activations",
            ));
        }
        if dlogits.len() != n * v {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: vec![dlogits.len()],
                right: vec![n, v],
            });
        }
        let mut g = self.zeros_like();

        // LM head and final norm.
        gemm(
            1.0,
            MatRef::new(&pass.hidden, n, d).t(),
            MatRef::new(dlogits, n, v),
            0.0,
            MatMut::new(g.lm_head.data_mut(), d, v),
        );
        let mut dhidden = vec![0.0; n * d];
        gemm(
            1.0,
            MatRef::new(dlogits, n, v),
            MatRef::new(self.lm_head.data(), d, v).t(),
            0.0,
            MatMut::new(&mut dhidden, n, d),
        );
        let mut dx = vec![0.0; n * d];
        rmsnorm_rows_backward(
            &pass.x_final,
            self.final_norm.data(),
            &pass.inv_final,
            &dhidden,
            &mut dx,
            g.final_norm.data_mut(),
        );

        let mut dp = vec![0.0; seq * seq];
        for (li, (lp, acts)) in self.layers.iter().zip(&pass.layers).enumerate().rev() {
            let gl = &mut g.layers[li];

            // Feed-forward: x_out = x_mid + act * Wd.
            gemm(
                1.0,
                MatRef::new(&acts.act, n, f).t(),
                MatRef::new(&dx, n, d),
                0.0,
                MatMut::new(gl.w_down.data_mut(), f, d),
            );
            let mut dact = vec![0.0; n * f];
            gemm(
                1.0,
                MatRef::new(&dx, n, d),
                MatRef::new(lp.w_down.data(), f, d).t(),
                0.0,
                MatMut::new(&mut dact, n, f),
            );
            let mut dgate = vec![0.0; n * f];
            let mut dup = vec![0.0; n * f];
            for i in 0..n * f {
                let (gv, uv, da) = (acts.gate[i], acts.up[i], dact[i]);
                dgate[i] = da * uv * silu_grad_scalar(gv);
                dup[i] = da * silu_scalar(gv);
            }
            gemm(
                1.0,
                MatRef::new(&acts.n2, n, d).t(),
                MatRef::new(&dgate, n, f),
                0.0,
                MatMut::new(gl.w_gate.data_mut(), d, f),
            );
            gemm(
                1.0,
                MatRef::new(&acts.n2, n, d).t(),
                MatRef::new(&dup, n, f),
                0.0,
                MatMut::new(gl.w_up.data_mut(), d, f),
            );
            let mut dn2 = vec![0.0; n * d];
            gemm(
                1.0,
                MatRef::new(&dgate, n, f),
                MatRef::new(lp.w_gate.data(), d, f).t(),
                0.0,
                MatMut::new(&mut dn2, n, d),
            );
            gemm(
                1.0,
                MatRef::new(&dup, n, f),
                MatRef::new(lp.w_up.data(), d, f).t(),
                1.0,
                MatMut::new(&mut dn2, n, d),
            );
            // dx already holds the residual path; add the norm path.
            rmsnorm_rows_backward(
                &acts.x_mid,
                lp.ffn_norm.data(),
                &acts.inv2,
                &dn2,
                &mut dx,
                gl.ffn_norm.data_mut(),
            );

            // Attention: x_mid = x_in + attn * Wo.
            gemm(
                1.0,
                MatRef::new(&acts.attn, n, d).t(),
                MatRef::new(&dx, n, d),
                0.0,
                MatMut::new(gl.wo.data_mut(), d, d),
            );
            let mut dattn = vec![0.0; n * d];
            gemm(
                1.0,
                MatRef::new(&dx, n, d),
                MatRef::new(lp.wo.data(), d, d).t(),
                0.0,
                MatMut::new(&mut dattn, n, d),
            );
            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            for b in 0..batch {
                for head in 0..h {
                    let off = b * seq * d + head * dh;
                    let p = &acts.probs[(b * h + head) * seq * seq..][..seq * seq];
                    let d_o = MatRef::strided(&dattn[off..], seq, dh, d, 1);
                    // dP = dO V^T
                    gemm(
                        1.0,
                        d_o,
                        MatRef::strided(&acts.v[off..], seq, dh, d, 1).t(),
                        0.0,
                        MatMut::new(&mut dp, seq, seq),
                    );
                    // dV = P^T dO
                    gemm(
                        1.0,
                        MatRef::new(p, seq, seq).t(),
                        d_o,
                        0.0,
                        MatMut::strided(&mut dv[off..], seq, dh, d, 1),
                    );
                    // dS = P * (dP - rowsum(dP * P)), then the score scale.
                    for i in 0..seq {
                        let pr = &p[i * seq..(i + 1) * seq];
                        let dr = &mut dp[i * seq..(i + 1) * seq];
                        let dotp: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                        for j in 0..seq {
                            dr[j] = if j <= i { pr[j] * (dr[j] - dotp) * scale } else { 0.0 };
                        }
                    }
                    gemm(
                        1.0,
                        MatRef::new(&dp, seq, seq),
                        MatRef::strided(&acts.k[off..], seq, dh, d, 1),
                        0.0,
                        MatMut::strided(&mut dq[off..], seq, dh, d, 1),
                    );
                    gemm(
                        1.0,
                        MatRef::new(&dp, seq, seq).t(),
                        MatRef::strided(&acts.q[off..], seq, dh, d, 1),
                        0.0,
                        MatMut::strided(&mut dk[off..], seq, dh, d, 1),
                    );
                }
            }
            let mut dn1 = vec![0.0; n * d];
            for (dproj, w, gw) in [
                (&dq, &lp.wq, &mut gl.wq),
                (&dk, &lp.wk, &mut gl.wk),
                (&dv, &lp.wv, &mut gl.wv),
            ] {
                gemm(
                    1.0,
                    MatRef::new(&acts.n1, n, d).t(),
                    MatRef::new(dproj, n, d),
                    0.0,
                    MatMut::new(gw.data_mut(), d, d),
                );
                gemm(
                    1.0,
                    MatRef::new(dproj, n, d),
                    MatRef::new(w.data(), d, d).t(),
                    1.0,
                    MatMut::new(&mut dn1, n, d),
                );
            }
            rmsnorm_rows_backward(
                &acts.x_in,
                lp.attn_norm.data(),
                &acts.inv1,
                &dn1,
                &mut dx,
                gl.attn_norm.data_mut(),
            );
        }

        for (i, row) in dx.chunks_exact(d).enumerate() {
            let tok = pass.tokens[i] as usize;
            for (a, b) in g.tok_embedding.row_mut(tok).iter_mut().zip(row) {
                *a += b;
            }
            for (a, b) in g.pos_embedding.row_mut(i % seq).iter_mut().zip(row) {
                *a += b;
            }
        }
        Ok(g)
    }
}

/// `x (rows x d_in) * w (d_in x d_out)` into a fresh buffer.
fn project(x: &[f64], rows: usize, d_in: usize, w: &DenseArray, d_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * d_out];
    gemm(
        1.0,
        MatRef::new(x, rows, d_in),
        MatRef::new(w.data(), d_in, d_out),
        0.0,
        MatMut::new(&mut out, rows, d_out),
    );
    out
}

/// Row-vector times row-major matrix: `out = x * w`.
pub(crate) fn vecmat(x: &[f64], w: &[f64], out: &mut [f64]) {
    let n = out.len();
    out.iter_mut().for_each(|o| *o = 0.0);
    for (xi, row) in x.iter().zip(w.chunks_exact(n)) {
        for (o, wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
}

/// Softmax over `j <= i` for each row `i` of a square score matrix; entries
/// above the diagonal become exactly zero.
fn causal_softmax_rows(p: &mut [f64], seq: usize) {
    for i in 0..seq {
        let row = &mut p[i * seq..(i + 1) * seq];
        let m = row[..=i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in &mut row[..=i] {
            *x = (*x - m).exp();
            s += *x;
        }
        for x in &mut row[..=i] {
            *x /= s;
        }
        row[i + 1..].iter_mut().for_each(|x| *x = 0.0);
    }
}
