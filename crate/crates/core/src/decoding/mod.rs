//! Greedy, two-model contrastive, and temporally guided decoding.
//!
//! Positions are 0-based. The token at position `t` is chosen from the expert
//! state `h_{t-1}` and, for each offset `k`, the amateur built from the stale
//! state `h_{t-1-k}`. Prefill consumes prompt tokens `0..P-1`; each decode step
//! then consumes exactly one token, so decode-phase backbone steps equal the
//! number of emitted tokens.

mod ring;
mod trace;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cmtpp::ProjectorParams;
use crate::config::{ConfigIssue, Validate};
use crate::error::{Error, Result};
use crate::model::{BackboneParams, KVCache};
use crate::numerics::{argmax, weighted_logsumexp, LogProbVector, ParamTensors};

pub use ring::HiddenRing;
pub use trace::{DecodeOutput, DecodeTrace, StepRecord};

/// Expert log-probs kept per trace record.
pub const TRACE_TOP_N: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sampling {
    #[default]
    Argmax,
    Categorical { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub offsets: Vec<usize>,
    /// One weight per offset, summing to 1.
    pub weights: Vec<f64>,
    pub alpha: f64,
    pub tau: f64,
    pub max_new_tokens: usize,
    pub sampling: Sampling,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            offsets: vec![1],
            weights: vec![1.0],
            alpha: 0.2,
            tau: 0.1,
            max_new_tokens: 128,
            sampling: Sampling::Argmax,
        }
    }
}

impl GuidanceConfig {
    /// Largest offset, which is also the ring capacity.
    pub fn k_max(&self) -> usize {
        self.offsets.iter().copied().max().unwrap_or(0)
    }
}

impl Validate for GuidanceConfig {
    fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        if self.offsets.is_empty() {
            out.push(ConfigIssue::new("offsets", "must not be empty"));
        } else if self.offsets.contains(&0) {
            out.push(ConfigIssue::new("offsets", "offsets start at 1"));
        } else {
            let mut s = self.offsets.clone();
            s.sort_unstable();
            s.dedup();
            if s.len() != self.offsets.len() {
                out.push(ConfigIssue::new("offsets", "must be distinct"));
            }
        }
        if self.weights.len() != self.offsets.len() {
            out.push(ConfigIssue::new("weights", "needs one weight per offset"));
        } else if self.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            out.push(ConfigIssue::new("weights", "weights must be non-negative"));
        } else if (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            out.push(ConfigIssue::new("weights", "weights must sum to 1"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            out.push(ConfigIssue::new("alpha", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            out.push(ConfigIssue::new("tau", "must be in [0, 1]"));
        }
        out
    }
}

/// Log-space mixture of per-offset amateurs.
pub fn aggregate_amateur(per_offset: &[LogProbVector], logweights: &[f64]) -> Result<LogProbVector> {
    weighted_logsumexp(per_offset, logweights)
}

/// `logp_exp + alpha * (logp_exp - logp_amt)`.
///
/// A token the expert rules out stays at `-inf`; a token only the amateur
/// rules out goes to `+inf` when `alpha > 0`.
pub fn guided_scores(logp_exp: &[f64], logp_amt: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if logp_exp.len() != logp_amt.len() {
        return Err(Error::ShapeMismatch {
            op: "guided_scores",
            left: vec![logp_exp.len()],
            right: vec![logp_amt.len()],
        });
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha must be non-negative, got {alpha}")));
    }
    if alpha == 0.0 {
        return Ok(logp_exp.to_vec());
    }
    Ok(logp_exp
        .iter()
        .zip(logp_amt)
        .map(|(&e, &a)| {
            if e == f64::NEG_INFINITY {
                e
            } else {
                e + alpha * (e - a)
            }
        })
        .collect())
}

/// Sets to `-inf` every score whose token has expert probability below
/// `tau * max P_exp`. Returns the masked scores and the number masked.
///
/// The rule is evaluated in log space, `logp_i - max logp < ln tau`, so the
/// expert argmax always survives and `tau = 0` masks nothing.
pub fn apc_mask(scores: &[f64], logp_exp: &[f64], tau: f64) -> Result<(Vec<f64>, usize)> {
    if scores.len() != logp_exp.len() {
        return Err(Error::ShapeMismatch {
            op: "apc_mask",
            left: vec![scores.len()],
            right: vec![logp_exp.len()],
        });
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("tau must be in [0, 1], got {tau}")));
    }
    let max = logp_exp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cut = tau.ln();
    let mut masked = 0;
    let out = scores
        .iter()
        .zip(logp_exp)
        .map(|(&s, &l)| {
            if l - max < cut {
                masked += 1;
                f64::NEG_INFINITY
            } else {
                s
            }
        })
        .collect();
    Ok((out, masked))
}

/// Picks a token from masked scores: argmax (lowest id on ties) or a draw
/// from `softmax(scores)`, which never lands on a `-inf` entry.
pub fn select_token(scores: &[f64], sampling: Sampling, rng: &mut ChaCha8Rng) -> Result<u32> {
    match sampling {
        Sampling::Argmax => Ok(argmax(scores) as u32),
        Sampling::Categorical { .. } => {
            if let Some(i) = scores.iter().position(|&s| s == f64::INFINITY) {
                return Ok(i as u32);
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(Error::invalid("every token is masked"));
            }
            let weights: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let dist = WeightedIndex::new(&weights)
                .map_err(|e| Error::invalid(format!("sampling weights: {e}")))?;
            Ok(dist.sample(rng) as u32)
        }
    }
}

fn rng_for(sampling: Sampling) -> ChaCha8Rng {
    match sampling {
        Sampling::Argmax => ChaCha8Rng::seed_from_u64(0),
        Sampling::Categorical { seed } => ChaCha8Rng::seed_from_u64(seed),
    }
}

fn top_n(logp: &[f64], n: usize) -> Vec<(u32, f64)> {
    let mut idx: Vec<usize> = (0..logp.len()).collect();
    idx.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]).then(a.cmp(&b)));
    idx.into_iter().take(n).map(|i| (i as u32, logp[i])).collect()
}

fn check_prompt(prompt: &[u32], max_new: usize, backbone: &BackboneParams) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::invalid("prompt must hold at least one token"));
    }
    let limit = backbone.config.max_seq_len;
    if prompt.len() + max_new > limit {
        return Err(Error::ContextOverflow {
            requested: prompt.len() + max_new,
            limit,
        });
    }
    if let Some(&token) = prompt.iter().find(|&&t| t as usize >= backbone.vocab_size()) {
        return Err(Error::TokenOutOfRange {
            token,
            vocab_size: backbone.vocab_size(),
        });
    }
    Ok(())
}

/// The expert state of one decode step.
struct StepContext<'a> {
    /// Position of the expert state, `t - 1`.
    position: usize,
    hidden: &'a [f64],
}

struct LoopSettings<'a> {
    method: &'a str,
    max_new: usize,
    alpha: f64,
    tau: f64,
    sampling: Sampling,
}

struct Contrast {
    amateur: Option<LogProbVector>,
    per_offset: Vec<(usize, LogProbVector)>,
}

/// Shared decode loop. `contrast` runs once per emitted token after the expert
/// step and adds any backbone steps of its own to the counter it is handed.
fn decode_loop<F>(
    settings: LoopSettings<'_>,
    prompt: &[u32],
    backbone: &BackboneParams,
    mut on_prefill: impl FnMut(usize, u32, &[f64]) -> Result<()>,
    mut contrast: F,
) -> Result<(DecodeOutput, KVCache)>
where
    F: FnMut(&StepContext<'_>, u32, &mut usize) -> Result<Contrast>,
{
    let LoopSettings {
        method,
        max_new,
        alpha,
        tau,
        sampling,
    } = settings;
    check_prompt(prompt, max_new, backbone)?;
    let mut cache = KVCache::new(backbone);
    let mut tokens = prompt.to_vec();
    let p = prompt.len();
    let mut trace = DecodeTrace {
        method: method.to_string(),
        prompt_len: p,
        ..DecodeTrace::default()
    };
    for (pos, &tok) in prompt[..p - 1].iter().enumerate() {
        let out = backbone.step(tok, &mut cache)?;
        trace.prefill_backbone_steps += 1;
        on_prefill(pos, tok, &out.hidden)?;
    }
    let mut rng = rng_for(sampling);
    let mut ops_backbone = 0;
    let mut ops_projector = 0;
    let start = Instant::now();
    for step in 0..max_new {
        let position = tokens.len() - 1;
        let last = tokens[position];
        let out = backbone.step(last, &mut cache)?;
        ops_backbone += 1;
        let logp_exp = LogProbVector::from_logits(&out.logits)?;
        let ctx = StepContext {
            position,
            hidden: &out.hidden,
        };
        let c = contrast(&ctx, last, &mut ops_backbone)?;
        ops_projector += c.per_offset.len();
        let exp = logp_exp.values();
        let scores = match &c.amateur {
            Some(amt) => guided_scores(exp, amt.values(), alpha)?,
            None => exp.to_vec(),
        };
        let (masked, masked_count) = apc_mask(&scores, exp, tau)?;
        let chosen = select_token(&masked, sampling, &mut rng)?;
        trace.records.push(StepRecord {
            step,
            chosen_id: chosen,
            logp_exp_chosen: exp[chosen as usize],
            logp_amt_chosen_per_k: c
                .per_offset
                .iter()
                .map(|(k, l)| (*k, l.values()[chosen as usize]))
                .collect::<BTreeMap<_, _>>(),
            masked_count,
            entropy_exp: logp_exp.entropy(),
            ops_backbone,
            ops_projector,
            score_chosen: masked[chosen as usize],
            expert_top: top_n(exp, TRACE_TOP_N),
        });
        tokens.push(chosen);
    }
    trace.decode_nanos = start.elapsed().as_nanos();
    trace.backbone_steps = ops_backbone;
    trace.projector_calls = ops_projector;
    trace.persistent_bytes = backbone.param_bytes() + cache.bytes();
    Ok((DecodeOutput { tokens, trace }, cache))
}

/// Expert-only argmax decoding.
pub fn greedy_decode(prompt: &[u32], backbone: &BackboneParams, max_new: usize) -> Result<DecodeOutput> {
    let settings = LoopSettings {
        method: "greedy",
        max_new,
        alpha: 0.0,
        tau: 0.0,
        sampling: Sampling::Argmax,
    };
    let (out, _) = decode_loop(
        settings,
        prompt,
        backbone,
        |_, _, _| Ok(()),
        |_, _, _| {
            Ok(Contrast {
                amateur: None,
                per_offset: Vec::new(),
            })
        },
    )?;
    Ok(out)
}

/// Temporal guidance: the amateur for step `t` mixes the projector's offset-`k`
/// predictions from the cached states `h_{t-1-k}`. Offsets whose state does not
/// exist yet are dropped and the remaining weights renormalized; with none
/// left the step is pure expert.
pub fn tegu_decode(
    prompt: &[u32],
    backbone: &BackboneParams,
    projector: &ProjectorParams,
    cfg: &GuidanceConfig,
) -> Result<DecodeOutput> {
    cfg.validate()?;
    for &k in &cfg.offsets {
        projector.check_offset(k)?;
    }
    if projector.d_model != backbone.d_model() {
        return Err(Error::ShapeMismatch {
            op: "tegu_decode",
            left: vec![projector.d_model],
            right: vec![backbone.d_model()],
        });
    }
    let k_max = cfg.k_max();
    let ring = std::cell::RefCell::new(HiddenRing::new(k_max, backbone.d_model()));
    let settings = LoopSettings {
        method: "tegu",
        max_new: cfg.max_new_tokens,
        alpha: cfg.alpha,
        tau: cfg.tau,
        sampling: cfg.sampling,
    };
    let (mut out, cache) = decode_loop(
        settings,
        prompt,
        backbone,
        |pos, _, h| ring.borrow_mut().push(pos, h.to_vec()).map(|_| ()),
        |ctx, _, _| {
            let mut ring = ring.borrow_mut();
            let mut per_offset = Vec::with_capacity(cfg.offsets.len());
            let mut weights = Vec::with_capacity(cfg.offsets.len());
            for (&k, &w) in cfg.offsets.iter().zip(&cfg.weights) {
                let Some(stale_pos) = ctx.position.checked_sub(k) else {
                    continue;
                };
                let Some(h) = ring.get(stale_pos) else {
                    continue;
                };
                per_offset.push((k, projector.amateur_logprobs_at(h, k, backbone)?));
                weights.push(w);
            }
            let total: f64 = weights.iter().sum();
            let amateur = if per_offset.is_empty() || total <= 0.0 {
                None
            } else {
                let logw: Vec<f64> = weights.iter().map(|w| (w / total).ln()).collect();
                let comps: Vec<LogProbVector> = per_offset.iter().map(|(_, l)| l.clone()).collect();
                Some(aggregate_amateur(&comps, &logw)?)
            };
            let evicted = ring.push(ctx.position, ctx.hidden.to_vec())?;
            debug_assert!(evicted.is_none_or(|e| e + k_max == ctx.position));
            Ok(Contrast { amateur, per_offset })
        },
    )?;
    let ring = ring.into_inner();
    debug_assert!(ring.len() <= k_max);
    out.trace.ring_capacity = ring.capacity();
    out.trace.persistent_bytes = backbone.param_bytes() + cache.bytes() + projector.param_bytes() + ring.bytes();
    Ok(out)
}

/// Two-model contrastive decoding with a separate amateur backbone. Uses the
/// alpha, tau, token budget and sampling of `cfg`; offsets are not used.
pub fn cd_decode(
    prompt: &[u32],
    expert: &BackboneParams,
    amateur: &BackboneParams,
    cfg: &GuidanceConfig,
) -> Result<DecodeOutput> {
    if expert.vocab_size() != amateur.vocab_size() {
        return Err(Error::ShapeMismatch {
            op: "cd_decode vocabulary",
            left: vec![expert.vocab_size()],
            right: vec![amateur.vocab_size()],
        });
    }
    check_prompt(prompt, cfg.max_new_tokens, amateur)?;
    let amateur_cache = std::cell::RefCell::new(KVCache::new(amateur));
    let settings = LoopSettings {
        method: "cd",
        max_new: cfg.max_new_tokens,
        alpha: cfg.alpha,
        tau: cfg.tau,
        sampling: cfg.sampling,
    };
    let (mut out, cache) = decode_loop(
        settings,
        prompt,
        expert,
        |_, tok, _| amateur.step(tok, &mut amateur_cache.borrow_mut()).map(|_| ()),
        |_, last, ops| {
            let step = amateur.step(last, &mut amateur_cache.borrow_mut())?;
            *ops += 1;
            Ok(Contrast {
                amateur: Some(LogProbVector::from_logits(&step.logits)?),
                per_offset: Vec::new(),
            })
        },
    )?;
    out.trace.prefill_backbone_steps *= 2;
    out.trace.persistent_bytes = expert.param_bytes()
        + cache.bytes()
        + amateur.param_bytes()
        + amateur_cache.borrow().bytes();
    Ok(out)
}
