use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// One emitted token. Only the exported fields go to JSON lines.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub chosen_id: u32,
    pub logp_exp_chosen: f64,
    /// Amateur log-prob of the chosen token per contributing offset.
    pub logp_amt_chosen_per_k: BTreeMap<usize, f64>,
    pub masked_count: usize,
    pub entropy_exp: f64,
    /// Cumulative over the decode phase.
    pub ops_backbone: usize,
    pub ops_projector: usize,
    #[serde(skip)]
    pub score_chosen: f64,
    /// Highest expert log-probs, best first.
    #[serde(skip)]
    pub expert_top: Vec<(u32, f64)>,
}

/// Everything measured during one decode call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeTrace {
    pub method: String,
    pub prompt_len: usize,
    pub records: Vec<StepRecord>,
    /// Backbone steps spent consuming the prompt before the first emission.
    pub prefill_backbone_steps: usize,
    /// Backbone steps after prefill, summed over all models used.
    pub backbone_steps: usize,
    pub projector_calls: usize,
    pub decode_nanos: u128,
    /// Parameters, KV caches and hidden ring at the end of decoding.
    pub persistent_bytes: usize,
    pub ring_capacity: usize,
}

impl DecodeTrace {
    pub fn generated(&self) -> usize {
        self.records.len()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }
}

/// Full token sequence (prompt first) plus the trace.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub tokens: Vec<u32>,
    pub trace: DecodeTrace,
}

impl DecodeOutput {
    pub fn prompt(&self) -> &[u32] {
        &self.tokens[..self.trace.prompt_len]
    }

    pub fn continuation(&self) -> &[u32] {
        &self.tokens[self.trace.prompt_len..]
    }
}
