//! Entropy of the expert versus each offset's amateur, n-gram diversity, and
//! per-method efficiency accounting.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::cmtpp::ProjectorParams;
use crate::decoding::DecodeTrace;
use crate::error::{Error, Result};
use crate::model::BackboneParams;

/// Histogram resolution over `[0, ln V]`.
pub const ENTROPY_BINS: usize = 50;
/// Shortest slice `entropy_sweep` accepts.
pub const MIN_EVAL_TOKENS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OffsetEntropy {
    /// 0 is the expert's next-token distribution.
    pub offset: usize,
    pub count: usize,
    pub mean: f64,
    pub std_err: f64,
    pub histogram: Vec<u64>,
    /// Per-position entropies in visiting order.
    #[serde(skip)]
    pub samples: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntropyReport {
    pub vocab_size: usize,
    /// `ENTROPY_BINS + 1` edges in nats.
    pub bin_edges: Vec<f64>,
    pub offsets: Vec<OffsetEntropy>,
}

/// Running mean and variance.
#[derive(Default)]
struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn std_err(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        (self.m2 / (self.n - 1) as f64 / self.n as f64).sqrt()
    }
}

fn entropy_of_logits(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
    let lse = m + z.ln();
    -logits
        .iter()
        .map(|&x| {
            let l = x - lse;
            l.exp() * l
        })
        .sum::<f64>()
}

/// Teacher-forced entropies over `eval_tokens`, processed in consecutive
/// windows of the backbone's context length. A position `t` is counted when
/// every stale state `h_{t-1-k}` lies inside its window, so all offsets see the
/// same positions.
pub fn entropy_sweep(
    eval_tokens: &[u32],
    backbone: &BackboneParams,
    projector: &ProjectorParams,
    offsets: &[usize],
) -> Result<EntropyReport> {
    if eval_tokens.len() < MIN_EVAL_TOKENS {
        return Err(Error::CorpusTooSmall {
            tokens: eval_tokens.len(),
            required: MIN_EVAL_TOKENS,
        });
    }
    for &k in offsets {
        projector.check_offset(k)?;
    }
    let (d, v) = (backbone.d_model(), backbone.vocab_size());
    let k_max = offsets.iter().copied().max().unwrap_or(0);
    let window = backbone.config.max_seq_len;
    if window < k_max + 2 {
        return Err(Error::invalid(format!(
            "context {window} too short for offset {k_max}"
        )));
    }
    let h_max = (v as f64).ln();
    let width = h_max / ENTROPY_BINS as f64;
    let all: Vec<usize> = std::iter::once(0).chain(offsets.iter().copied()).collect();
    let mut stats: Vec<Welford> = all.iter().map(|_| Welford::default()).collect();
    let mut samples: Vec<Vec<f64>> = vec![Vec::new(); all.len()];
    let mut hist = vec![vec![0u64; ENTROPY_BINS]; all.len()];

    let mut record = |slot: usize, h: f64| {
        let h = h.clamp(0.0, h_max);
        stats[slot].push(h);
        samples[slot].push(h);
        let bin = ((h / width) as usize).min(ENTROPY_BINS - 1);
        hist[slot][bin] += 1;
    };

    for chunk in eval_tokens.chunks(window) {
        let t_len = chunk.len();
        // Expert state index j = t - 1 for t in k_max + 1 .. t_len.
        if t_len < k_max + 2 {
            continue;
        }
        let (hidden, logits) = backbone.forward(chunk)?;
        let first = k_max;
        let rows = t_len - 1 - first;
        for j in first..t_len - 1 {
            record(0, entropy_of_logits(logits.row(j)));
        }
        for (slot, &k) in all.iter().enumerate().skip(1) {
            let stale = &hidden.data()[(first - k) * d..(t_len - 1 - k) * d];
            let pass = projector.forward_rows(stale, rows, k, false)?;
            let mut amt = vec![0.0; rows * v];
            backbone.lm_logits_rows(&pass.output, rows, &mut amt);
            for r in 0..rows {
                record(slot, entropy_of_logits(&amt[r * v..(r + 1) * v]));
            }
        }
    }
    if stats[0].n == 0 {
        return Err(Error::invalid("no position had every stale state available"));
    }
    let offsets = all
        .iter()
        .enumerate()
        .map(|(slot, &k)| OffsetEntropy {
            offset: k,
            count: stats[slot].n,
            mean: stats[slot].mean,
            std_err: stats[slot].std_err(),
            histogram: hist[slot].clone(),
            samples: std::mem::take(&mut samples[slot]),
        })
        .collect();
    Ok(EntropyReport {
        vocab_size: v,
        bin_edges: (0..=ENTROPY_BINS).map(|i| i as f64 * width).collect(),
        offsets,
    })
}

impl EntropyReport {
    pub fn offset(&self, k: usize) -> Option<&OffsetEntropy> {
        self.offsets.iter().find(|o| o.offset == k)
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("offset,count,mean,std_err\n");
        for o in &self.offsets {
            let _ = writeln!(out, "{},{},{},{}", o.offset, o.count, o.mean, o.std_err);
        }
        out
    }

    /// Two columns: bin centre in nats, count.
    pub fn histogram_csv(&self, k: usize) -> Option<String> {
        let o = self.offset(k)?;
        let mut out = String::from("entropy,count\n");
        for (i, c) in o.histogram.iter().enumerate() {
            let centre = 0.5 * (self.bin_edges[i] + self.bin_edges[i + 1]);
            let _ = writeln!(out, "{centre},{c}");
        }
        Some(out)
    }

    /// Writes `<stem>.json`, `<stem>.csv` and `<stem>_hist_k<k>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: String, body: String| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        put(format!("{stem}.json"), serde_json::to_string_pretty(self)?)?;
        put(format!("{stem}.csv"), self.summary_csv())?;
        for o in &self.offsets {
            put(
                format!("{stem}_hist_k{}.csv", o.offset),
                self.histogram_csv(o.offset).unwrap_or_default(),
            )?;
        }
        Ok(())
    }
}

fn check_len(tokens: &[u32], n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("n-gram order must be at least 1"));
    }
    if tokens.len() < n {
        return Err(Error::invalid(format!(
            "{n}-gram metrics need at least {n} tokens, got {}",
            tokens.len()
        )));
    }
    Ok(())
}

/// Unique n-grams over total n-grams.
pub fn distinct_n(tokens: &[u32], n: usize) -> Result<f64> {
    check_len(tokens, n)?;
    let grams: HashSet<&[u32]> = tokens.windows(n).collect();
    Ok(grams.len() as f64 / (tokens.len() - n + 1) as f64)
}

/// `1 - distinct_n`.
pub fn rep_n(tokens: &[u32], n: usize) -> Result<f64> {
    Ok(1.0 - distinct_n(tokens, n)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiversityReport {
    pub distinct_1: f64,
    pub distinct_2: f64,
    pub rep_4: f64,
    pub tokens: usize,
}

impl DiversityReport {
    /// Corpus-level metrics over the concatenation of all continuations.
    pub fn from_continuations<S: AsRef<[u32]>>(continuations: &[S]) -> Result<Self> {
        let all: Vec<u32> = continuations
            .iter()
            .flat_map(|c| c.as_ref().iter().copied())
            .collect();
        Ok(DiversityReport {
            distinct_1: distinct_n(&all, 1)?,
            distinct_2: distinct_n(&all, 2)?,
            rep_4: rep_n(&all, 4)?,
            tokens: all.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EfficiencyRow {
    pub method: String,
    pub backbone_forwards_per_token: f64,
    pub projector_forwards_per_token: f64,
    /// Largest persistent model and cache state over the runs.
    pub persistent_bytes: usize,
    pub ms_per_token: f64,
    pub tokens: usize,
}

/// One row per method. Every method must cover the same prompts with the
/// same token budget, run by run.
pub fn efficiency_report(methods: &[(String, Vec<DecodeTrace>)]) -> Result<Vec<EfficiencyRow>> {
    let Some((_, reference)) = methods.first() else {
        return Ok(Vec::new());
    };
    let budget: Vec<(usize, usize)> = reference
        .iter()
        .map(|t| (t.prompt_len, t.generated()))
        .collect();
    methods
        .iter()
        .map(|(name, traces)| {
            let b: Vec<(usize, usize)> = traces.iter().map(|t| (t.prompt_len, t.generated())).collect();
            if b != budget {
                return Err(Error::invalid(format!(
                    "method {name}: prompts or token budgets differ from {}",
                    methods[0].0
                )));
            }
            let tokens: usize = traces.iter().map(|t| t.generated()).sum();
            if tokens == 0 {
                return Err(Error::invalid(format!("method {name}: no generated tokens")));
            }
            let per = |x: usize| x as f64 / tokens as f64;
            Ok(EfficiencyRow {
                method: name.clone(),
                backbone_forwards_per_token: per(traces.iter().map(|t| t.backbone_steps).sum()),
                projector_forwards_per_token: per(traces.iter().map(|t| t.projector_calls).sum()),
                persistent_bytes: traces.iter().map(|t| t.persistent_bytes).max().unwrap_or(0),
                ms_per_token: traces.iter().map(|t| t.decode_nanos).sum::<u128>() as f64
                    / 1e6
                    / tokens as f64,
                tokens,
            })
        })
        .collect()
}

pub fn efficiency_csv(rows: &[EfficiencyRow]) -> String {
    let mut out = String::from(
        "method,backbone_forwards_per_token,projector_forwards_per_token,persistent_bytes,ms_per_token,tokens\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.method,
            r.backbone_forwards_per_token,
            r.projector_forwards_per_token,
            r.persistent_bytes,
            r.ms_per_token,
            r.tokens
        );
    }
    out
}
