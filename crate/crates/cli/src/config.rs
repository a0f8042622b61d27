//! The single JSON run configuration, dotted-key overrides, and validation.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use tegu_core::cmtpp::ProjectorConfig;
use tegu_core::config::{ConfigIssue, Validate};
use tegu_core::decoding::GuidanceConfig;
use tegu_core::model::ModelConfig;
use tegu_core::training::{TrainingConfig, BYTE_VOCAB};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Trailing share of the corpus held out for evaluation.
    pub holdout_fraction: f64,
    /// Prompts drawn from the held-out slice by the evaluation commands.
    pub num_prompts: usize,
    pub prompt_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            holdout_fraction: 0.05,
            num_prompts: 50,
            prompt_len: 32,
        }
    }
}

impl Validate for DataConfig {
    fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            out.push(ConfigIssue::new("holdout_fraction", "must be in (0, 1)"));
        }
        if self.num_prompts == 0 {
            out.push(ConfigIssue::new("num_prompts", "must be positive"));
        }
        if self.prompt_len == 0 {
            out.push(ConfigIssue::new("prompt_len", "must be positive"));
        }
        out
    }
}

/// Fully resolved configuration of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub backbone_training: TrainingConfig,
    pub projector_training: TrainingConfig,
    pub projector: ProjectorConfig,
    pub guidance: GuidanceConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            backbone_training: TrainingConfig::backbone_default(),
            projector_training: TrainingConfig::default(),
            projector: ProjectorConfig::default(),
            guidance: GuidanceConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut section = |name: &str, issues: Vec<ConfigIssue>| {
            out.extend(issues.into_iter().map(|i| i.prefixed(name)));
        };
        section("model", self.model.issues());
        section("backbone_training", self.backbone_training.issues());
        section("projector_training", self.projector_training.issues());
        section("projector", self.projector.issues());
        section("guidance", self.guidance.issues());
        section("data", self.data.issues());

        if self.model.vocab_size < BYTE_VOCAB {
            out.push(ConfigIssue::new(
                "model.vocab_size",
                format!("must cover the {BYTE_VOCAB} byte tokens"),
            ));
        }
        for name in ["backbone_training", "projector_training"] {
            let t = if name == "backbone_training" {
                &self.backbone_training
            } else {
                &self.projector_training
            };
            if t.seq_len > self.model.max_seq_len {
                out.push(ConfigIssue::new(
                    format!("{name}.seq_len"),
                    format!("exceeds model.max_seq_len {}", self.model.max_seq_len),
                ));
            }
        }
        let k_max = self.projector.k_max;
        if self.projector_training.offsets.iter().any(|&k| k > k_max) {
            out.push(ConfigIssue::new(
                "projector_training.offsets",
                format!("offsets must not exceed projector.k_max {k_max}"),
            ));
        }
        if self.guidance.offsets.iter().any(|&k| k > k_max) {
            out.push(ConfigIssue::new(
                "guidance.offsets",
                format!("offsets must not exceed projector.k_max {k_max}"),
            ));
        }
        if self.data.prompt_len + self.guidance.max_new_tokens > self.model.max_seq_len {
            out.push(ConfigIssue::new(
                "guidance.max_new_tokens",
                format!(
                    "data.prompt_len + max_new_tokens exceeds model.max_seq_len {}",
                    self.model.max_seq_len
                ),
            ));
        }
        out
    }
}

const SECTIONS: [&str; 6] = [
    "model",
    "backbone_training",
    "projector_training",
    "projector",
    "guidance",
    "data",
];

fn defaults_document() -> Value {
    serde_json::to_value(RunConfig::default()).expect("defaults serialize")
}

/// Recursively overlays `patch` onto `base`; objects merge, everything else
/// replaces.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, p) => *slot = p.clone(),
    }
}

/// Parses the value half of `key=value`: JSON when it parses, a plain string
/// otherwise.
pub fn parse_override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets a dotted key. Only keys that exist in the schema may be touched.
pub fn apply_override(doc: &mut Value, key: &str, value: Value) -> Result<(), ConfigIssue> {
    let schema = defaults_document();
    let parts: Vec<&str> = key.split('.').collect();
    let mut probe = &schema;
    for p in &parts {
        probe = probe
            .get(p)
            .ok_or_else(|| ConfigIssue::new(key, "unknown configuration key"))?;
    }
    let mut slot = doc;
    for p in &parts[..parts.len() - 1] {
        if !slot.get(*p).is_some_and(Value::is_object) {
            slot.as_object_mut()
                .ok_or_else(|| ConfigIssue::new(key, "parent is not an object"))?
                .insert(p.to_string(), Value::Object(Map::new()));
        }
        slot = slot.get_mut(*p).expect("inserted above");
    }
    slot.as_object_mut()
        .ok_or_else(|| ConfigIssue::new(key, "parent is not an object"))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Fills defaults into `document`, applies `overrides` in order, and checks
/// every invariant. All problems are reported together.
pub fn validate_config(
    document: &Value,
    overrides: &[(String, Value)],
) -> Result<RunConfig, Vec<ConfigIssue>> {
    let mut issues = Vec::new();
    let Some(obj) = document.as_object() else {
        return Err(vec![ConfigIssue::new("", "configuration must be a JSON object")]);
    };
    let mut doc = defaults_document();
    for (k, v) in obj {
        if !SECTIONS.contains(&k.as_str()) {
            issues.push(ConfigIssue::new(k.clone(), "unknown section"));
            continue;
        }
        let mut section = doc[k.as_str()].clone();
        merge(&mut section, v);
        doc[k.as_str()] = section;
    }
    for (k, v) in overrides {
        if let Err(e) = apply_override(&mut doc, k, v.clone()) {
            issues.push(e);
        }
    }

    // Deserialize section by section so every malformed section is reported.
    let mut parse = |name: &str| -> Option<Value> {
        let v = doc[name].clone();
        let ok = match name {
            "model" => serde_json::from_value::<ModelConfig>(v.clone()).map(|_| ()),
            "backbone_training" | "projector_training" => {
                serde_json::from_value::<TrainingConfig>(v.clone()).map(|_| ())
            }
            "projector" => serde_json::from_value::<ProjectorConfig>(v.clone()).map(|_| ()),
            "guidance" => serde_json::from_value::<GuidanceConfig>(v.clone()).map(|_| ()),
            _ => serde_json::from_value::<DataConfig>(v.clone()).map(|_| ()),
        };
        match ok {
            Ok(()) => Some(v),
            Err(e) => {
                issues.push(ConfigIssue::new(name, e.to_string()));
                None
            }
        }
    };
    let parsed: Vec<Option<Value>> = SECTIONS.iter().map(|s| parse(s)).collect();
    if parsed.iter().any(Option::is_none) || !issues.is_empty() {
        return Err(issues);
    }
    let config: RunConfig = serde_json::from_value(doc).map_err(|e| vec![ConfigIssue::new("", e.to_string())])?;
    let found = config.issues();
    if found.is_empty() {
        Ok(config)
    } else {
        Err(found)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn empty_document_is_the_default() {
        let c = validate_config(&json!({}), &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.guidance.alpha, 0.2);
        assert_eq!(c.guidance.tau, 0.1);
        assert_eq!(c.guidance.offsets, vec![1]);
        assert_eq!(c.guidance.weights, vec![1.0]);
        assert_eq!(c.projector_training.lambda_kd, 0.7);
        assert_eq!(c.projector_training.temperature, 2.0);
    }

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let doc = serde_json::to_value(&c).unwrap();
        assert_eq!(validate_config(&doc, &[]).unwrap(), c);
    }

    #[test]
    fn all_issues_reported_together() {
        let doc = json!({
            "guidance": {"offsets": [1, 2], "weights": [0.5, 0.6], "tau": 2.0},
            "projector_training": {"lambda_kd": -1.0}
        });
        let issues = validate_config(&doc, &[]).unwrap_err();
        let text: Vec<String> = issues.iter().map(|i| i.to_string()).collect();
        assert!(text.contains(&"guidance.weights: weights must sum to 1".to_string()));
        assert!(text.contains(&"guidance.tau: must be in [0, 1]".to_string()));
        assert!(text.iter().any(|t| t.starts_with("projector_training.lambda_kd")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let issues = validate_config(&json!({"guidance": {"alpah": 0.3}}), &[]).unwrap_err();
        assert_eq!(issues[0].key, "guidance");
        assert!(issues[0].message.contains("alpah"));
        let issues = validate_config(&json!({"extra": {}}), &[]).unwrap_err();
        assert_eq!(issues[0].key, "extra");
        let issues =
            validate_config(&json!({}), &[("guidance.beta".into(), json!(1))]).unwrap_err();
        assert_eq!(issues[0].message, "unknown configuration key");
    }

    #[test]
    fn overrides_win_over_the_document() {
        let doc = json!({"guidance": {"alpha": 0.4}});
        let c = validate_config(
            &doc,
            &[
                ("guidance.alpha".into(), parse_override_value("0.3")),
                ("guidance.sampling.mode".into(), parse_override_value("argmax")),
            ],
        )
        .unwrap();
        assert_eq!(c.guidance.alpha, 0.3);
        assert_eq!(parse_override_value("abc"), json!("abc"));
        assert_eq!(parse_override_value("[1,2]"), json!([1, 2]));
    }

    #[test]
    fn cross_section_limits() {
        let issues = validate_config(&json!({"guidance": {"offsets": [4], "weights": [1.0]}}), &[])
            .unwrap_err();
        assert_eq!(issues[0].key, "guidance.offsets");
        let issues = validate_config(&json!({"model": {"vocab_size": 100}}), &[]).unwrap_err();
        assert!(issues.iter().any(|i| i.key == "model.vocab_size"));
    }
}
