use std::fmt::Write as _;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use tegu_core::cmtpp::{init_projector, load_projector, save_projector, ProjectorParams};
use tegu_core::decoding::{cd_decode, greedy_decode, tegu_decode, DecodeOutput, DecodeTrace, GuidanceConfig};
use tegu_core::metrics::{efficiency_csv, efficiency_report, entropy_sweep, DiversityReport, EfficiencyRow};
use tegu_core::model::checkpoint::{load_backbone, save_backbone};
use tegu_core::model::BackboneParams;
use tegu_core::numerics::ParamTensors;
use tegu_core::training::{
    detokenize, ingest_corpus, split_holdout, tokenize, train_backbone, train_projector, write_loss_csv,
};

use crate::config::RunConfig;
use crate::{CliError, Command, ModelArgs, Mode, PromptArgs};

type Result<T> = std::result::Result<T, CliError>;

pub(crate) struct Layout {
    pub root: PathBuf,
    pub checkpoints: PathBuf,
    pub traces: PathBuf,
    pub reports: PathBuf,
}

impl Layout {
    pub fn create(root: &Path) -> Result<Self> {
        let layout = Layout {
            root: root.to_path_buf(),
            checkpoints: root.join("checkpoints"),
            traces: root.join("traces"),
            reports: root.join("reports"),
        };
        for dir in [&layout.root, &layout.checkpoints, &layout.traces, &layout.reports] {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        Ok(layout)
    }

    pub fn write_snapshot(&self, command: &str, config: &RunConfig) -> Result<()> {
        let body = json!({"command": command, "config": config});
        write_file(
            &self.root.join("config.snapshot.json"),
            &serde_json::to_string_pretty(&body).expect("config serializes"),
        )
    }

    fn checkpoint(&self, name: &str) -> PathBuf {
        self.checkpoints.join(format!("{name}.tegu"))
    }
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, body).map_err(|e| CliError::io(path, e))
}

fn say(out: &mut dyn Write, quiet: bool, text: &str) -> Result<()> {
    if !quiet {
        writeln!(out, "{text}").map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    }
    Ok(())
}

/// Runs `command`; returns the `--json` summary. Human output goes to `out`
/// unless `json` is set.
pub(crate) fn dispatch(
    command: &Command,
    config: &RunConfig,
    layout: &Layout,
    out: &mut dyn Write,
    json: bool,
) -> Result<Value> {
    match command {
        Command::TrainBackbone { corpus, name } => cmd_train_backbone(corpus, name, config, layout, out, json),
        Command::TrainProjector { corpus, models } => cmd_train_projector(corpus, models, config, layout, out, json),
        Command::Generate {
            mode,
            prompt,
            prompt_file,
            models,
            ..
        } => {
            let text = match (prompt, prompt_file) {
                (Some(p), _) => p.clone(),
                (None, Some(f)) => {
                    let raw = std::fs::read_to_string(f).map_err(|e| CliError::io(f, e))?;
                    raw.strip_suffix('\n').unwrap_or(&raw).to_string()
                }
                (None, None) => return Err(CliError::Message("a prompt is required".into())),
            };
            cmd_generate(*mode, &text, models, config, layout, out, json)
        }
        Command::EvalEntropy { corpus, offsets, models } => {
            let offsets = offsets.clone().unwrap_or_else(|| config.projector_training.offsets.clone());
            cmd_eval_entropy(corpus, &offsets, models, config, layout, out, json)
        }
        Command::EvalRepetition {
            mode, prompts, models, ..
        } => cmd_compare(&[*mode], "repetition", prompts, models, config, layout, out, json),
        Command::Compare {
            modes, prompts, models, ..
        } => cmd_compare(modes, "compare", prompts, models, config, layout, out, json),
        Command::SweepAlpha {
            values, prompts, models, ..
        } => cmd_sweep(values, prompts, models, config, layout, out, json),
    }
}

fn training_tokens(corpus: &Path, config: &RunConfig) -> Result<Vec<u32>> {
    let tokens = ingest_corpus(corpus)?;
    let (train, _) = split_holdout(&tokens, config.data.holdout_fraction)?;
    Ok(train.to_vec())
}

fn heldout_tokens(corpus: &Path, config: &RunConfig) -> Result<Vec<u32>> {
    let tokens = ingest_corpus(corpus)?;
    let (_, held) = split_holdout(&tokens, config.data.holdout_fraction)?;
    Ok(held.to_vec())
}

fn cmd_train_backbone(
    corpus: &Path,
    name: &str,
    config: &RunConfig,
    layout: &Layout,
    out: &mut dyn Write,
    json: bool,
) -> Result<Value> {
    let tokens = training_tokens(corpus, config)?;
    let init = BackboneParams::init(&config.model)?;
    let trained = train_backbone(init, &tokens, &config.backbone_training, |_| ControlFlow::Continue(()))?;
    let path = layout.checkpoint(name);
    save_backbone(&trained.params, &path)?;
    let csv = layout.reports.join(format!("{name}_loss.csv"));
    write_loss_csv(&csv, &[1], &trained.log)?;
    let last = trained.log.last().map_or(f64::NAN, |l| l.total);
    say(
        out,
        json,
        &format!(
            "trained {name}: {} steps, final loss {last:.4}, saved to {}",
            trained.log.len(),
            path.display()
        ),
    )?;
    Ok(json!({
        "command": "train-backbone",
        "checkpoint": path,
        "steps": trained.log.len(),
        "final_loss": last,
        "params": trained.params.num_params(),
        "fingerprint": trained.params.fingerprint(),
    }))
}

struct Models {
    backbone: BackboneParams,
    projector: Option<ProjectorParams>,
    amateur: Option<BackboneParams>,
}

fn resolve(path: &Option<PathBuf>, layout: &Layout, name: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| layout.checkpoint(name))
}

fn load_models(args: &ModelArgs, layout: &Layout, modes: &[Mode]) -> Result<Models> {
    let backbone = load_backbone(&resolve(&args.backbone, layout, "backbone"))?;
    let projector = if modes.contains(&Mode::Tegu) {
        Some(load_projector(&resolve(&args.projector, layout, "projector"))?)
    } else {
        None
    };
    let amateur = if modes.contains(&Mode::Cd) {
        let path = resolve(&args.amateur, layout, "amateur");
        if !path.exists() {
            return Err(CliError::Message(format!(
                "amateur checkpoint {} not found; train one with `train-backbone --name amateur --set model.n_layers=2`",
                path.display()
            )));
        }
        Some(load_backbone(&path)?)
    } else {
        None
    };
    Ok(Models {
        backbone,
        projector,
        amateur,
    })
}

fn cmd_train_projector(
    corpus: &Path,
    models: &ModelArgs,
    config: &RunConfig,
    layout: &Layout,
    out: &mut dyn Write,
    json: bool,
) -> Result<Value> {
    let tokens = training_tokens(corpus, config)?;
    let backbone = load_backbone(&resolve(&models.backbone, layout, "backbone"))?;
    let before = backbone.fingerprint();
    let init = init_projector(&config.projector, backbone.d_model())?;
    let cfg = &config.projector_training;
    let trained = train_projector(init, &backbone, &tokens, cfg, |_| ControlFlow::Continue(()))?;
    let after = backbone.fingerprint();
    if before != after {
        return Err(CliError::Message("backbone changed during projector training".into()));
    }
    let path = resolve(&models.projector, layout, "projector");
    save_projector(&trained.params, &path)?;
    write_loss_csv(&layout.reports.join("projector_loss.csv"), &cfg.offsets, &trained.log)?;
    let last = trained.log.last();
    let ce: Vec<f64> = last.map(|l| l.ce.clone()).unwrap_or_default();
    let mut line = format!("trained projector: {} steps", trained.log.len());
    for (k, c) in cfg.offsets.iter().zip(&ce) {
        let _ = write!(line, ", ce[k={k}] {c:.4}");
    }
    let _ = write!(line, ", saved to {}", path.display());
    say(out, json, &line)?;
    Ok(json!({
        "command": "train-projector",
        "checkpoint": path,
        "steps": trained.log.len(),
        "offsets": cfg.offsets,
        "final_ce": ce,
        "final_loss": last.map_or(f64::NAN, |l| l.total),
        "params": trained.params.num_params(),
        "backbone_fingerprint": after,
    }))
}

fn decode(mode: Mode, prompt: &[u32], models: &Models, cfg: &GuidanceConfig) -> Result<DecodeOutput> {
    let out = match mode {
        Mode::Greedy => greedy_decode(prompt, &models.backbone, cfg.max_new_tokens)?,
        Mode::Tegu => tegu_decode(
            prompt,
            &models.backbone,
            models.projector.as_ref().expect("loaded for tegu"),
            cfg,
        )?,
        Mode::Cd => cd_decode(
            prompt,
            &models.backbone,
            models.amateur.as_ref().expect("loaded for cd"),
            cfg,
        )?,
    };
    Ok(out)
}

fn text_of(tokens: &[u32]) -> Result<String> {
    Ok(String::from_utf8_lossy(&detokenize(tokens)?).into_owned())
}

fn cmd_generate(
    mode: Mode,
    prompt: &str,
    models: &ModelArgs,
    config: &RunConfig,
    layout: &Layout,
    out: &mut dyn Write,
    json: bool,
) -> Result<Value> {
    let loaded = load_models(models, layout, &[mode])?;
    let tokens = tokenize(prompt.as_bytes());
    let result = decode(mode, &tokens, &loaded, &config.guidance)?;
    let trace_path = layout.traces.join(format!("generate_{}.jsonl", mode.as_str()));
    result.trace.write_jsonl(&trace_path)?;
    let text = text_of(result.continuation())?;
    say(out, json, &text)?;
    Ok(json!({
        "command": "generate",
        "mode": mode.as_str(),
        "prompt_tokens": result.trace.prompt_len,
        "continuation": text,
        "tokens": result.continuation(),
        "trace": trace_path,
        "backbone_steps": result.trace.backbone_steps,
        "projector_calls": result.trace.projector_calls,
        "persistent_bytes": result.trace.persistent_bytes,
    }))
}

fn cmd_eval_entropy(
    corpus: &Path,
    offsets: &[usize],
    models: &ModelArgs,
    config: &RunConfig,
    layout: &Layout,
    out: &mut dyn Write,
    json: bool,
) -> Result<Value> {
    let held = heldout_tokens(corpus, config)?;
    let loaded = load_models(models, layout, &[Mode::Tegu])?;
    let projector = loaded.projector.as_ref().expect("loaded");
    let report = entropy_sweep(&held, &loaded.backbone, projector, offsets)?;
    report.write(&layout.reports, "entropy")?;
    let mut text = String::from("offset  count     mean  std_err\n");
    for o in &report.offsets {
        let label = if o.offset == 0 { "ntp".to_string() } else { format!("k={}", o.offset) };
        let _ = writeln!(text, "{label:>6} {:>6} {:>8.4} {:>8.4}", o.count, o.mean, o.std_err);
    }
    say(out, json, text.trim_end())?;
    let rows: Vec<Value> = report
        .offsets
        .iter()
        .map(|o| json!({"offset": o.offset, "count": o.count, "mean": o.mean, "std_err": o.std_err}))
        .collect();
    Ok(json!({"command": "eval-entropy", "offsets": rows, "report": layout.reports.join("entropy.json")}))
}

fn load_prompts(args: &PromptArgs, config: &RunConfig) -> Result<Vec<Vec<u32>>> {
    if let Some(path) = &args.prompts_file {
        let raw = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let prompts: Vec<Vec<u32>> = raw
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| tokenize(l.as_bytes()))
            .collect();
        if prompts.is_empty() {
            return Err(CliError::Message(format!("{}: no prompts", path.display())));
        }
        return Ok(prompts);
    }
    let corpus = args.corpus.as_ref().expect("clap requires a prompt source");
    let held = heldout_tokens(corpus, config)?;
    holdout_prompts(&held, config.data.num_prompts, config.data.prompt_len)
}

/// `n` windows of `len` tokens, evenly spaced over `held`.
pub(crate) fn holdout_prompts(held: &[u32], n: usize, len: usize) -> Result<Vec<Vec<u32>>> {
    if held.len() < len || n == 0 || len == 0 {
        return Err(CliError::Message(format!(
            "held-out slice of {} tokens cannot supply prompts of {len} tokens",
            held.len()
        )));
    }
    let span = held.len() - len;
    Ok((0..n)
        .map(|i| {
            let start = if n == 1 { 0 } else { i * span / (n - 1) };
            held[start..start + len].to_vec()
        })
        .collect())
}

struct ModeRun {
    continuations: Vec<Vec<u32>>,
    traces: Vec<DecodeTrace>,
}

fn run_mode(mode: Mode, prompts: &[Vec<u32>], models: &Models, cfg: &GuidanceConfig) -> Result<ModeRun> {
    let mut run = ModeRun {
        continuations: Vec::with_capacity(prompts.len()),
        traces: Vec::with_capacity(prompts.len()),
    };
    for (i, p) in prompts.iter().enumerate() {
        let o = decode(mode, p, models, cfg)?;
        log::debug!("{} prompt {i}: {} tokens", mode.as_str(), o.trace.generated());
        run.continuations.push(o.continuation().to_vec());
        run.traces.push(o.trace);
    }
    Ok(run)
}

fn write_traces(dir: &Path, traces: &[DecodeTrace]) -> Result<()> {
    for (i, t) in traces.iter().enumerate() {
        t.write_jsonl(&dir.join(format!("prompt_{i:03}.jsonl")))?;
    }
    Ok(())
}

fn diversity_csv(rows: &[(String, DiversityReport)]) -> String {
    let mut out = String::from("method,distinct_1,distinct_2,rep_4,tokens\n");
    for (m, d) in rows {
        let _ = writeln!(out, "{m},{},{},{},{}", d.distinct_1, d.distinct_2, d.rep_4, d.tokens);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn cmd_compare(
    modes: &[Mode],
    stem: &str,
    prompt_args: &PromptArgs,
    models: &ModelArgs,
    config: &RunConfig,
    layout: &Layout,
    out: &mut dyn Write,
    json: bool,
) -> Result<Value> {
    let prompts = load_prompts(prompt_args, config)?;
    let loaded = load_models(models, layout, modes)?;
    let mut diversity = Vec::new();
    let mut timed = Vec::new();
    for &mode in modes {
        let run = run_mode(mode, &prompts, &loaded, &config.guidance)?;
        write_traces(&layout.traces.join(format!("{stem}_{}", mode.as_str())), &run.traces)?;
        diversity.push((mode.as_str().to_string(), DiversityReport::from_continuations(&run.continuations)?));
        timed.push((mode.as_str().to_string(), run.traces));
    }
    let efficiency = efficiency_report(&timed)?;
    write_file(&layout.reports.join(format!("{stem}_diversity.csv")), &diversity_csv(&diversity))?;
    write_file(&layout.reports.join(format!("{stem}_efficiency.csv")), &efficiency_csv(&efficiency))?;
    let rows: Vec<Value> = diversity
        .iter()
        .zip(&efficiency)
        .map(|((m, d), e)| json!({"method": m, "diversity": d, "efficiency": e}))
        .collect();
    let summary = json!({
        "command": if stem == "compare" { "compare" } else { "eval-repetition" },
        "prompts": prompts.len(),
        "alpha": config.guidance.alpha,
        "tau": config.guidance.tau,
        "methods": rows,
    });
    write_file(
        &layout.reports.join(format!("{stem}.json")),
        &serde_json::to_string_pretty(&summary).expect("serializable"),
    )?;
    say(out, json, &table(&diversity, &efficiency))?;
    Ok(summary)
}

fn table(diversity: &[(String, DiversityReport)], efficiency: &[EfficiencyRow]) -> String {
    let mut t = String::from("method  distinct-1  distinct-2   rep-4  fwd/tok  proj/tok  bytes       ms/tok\n");
    for ((m, d), e) in diversity.iter().zip(efficiency) {
        let _ = writeln!(
            t,
            "{m:<7} {:>10.4} {:>11.4} {:>7.4} {:>8.2} {:>9.2}  {:<11} {:.3}",
            d.distinct_1,
            d.distinct_2,
            d.rep_4,
            e.backbone_forwards_per_token,
            e.projector_forwards_per_token,
            e.persistent_bytes,
            e.ms_per_token
        );
    }
    t.trim_end().to_string()
}

fn cmd_sweep(
    values: &[f64],
    prompt_args: &PromptArgs,
    models: &ModelArgs,
    config: &RunConfig,
    layout: &Layout,
    out: &mut dyn Write,
    json: bool,
) -> Result<Value> {
    let prompts = load_prompts(prompt_args, config)?;
    let loaded = load_models(models, layout, &[Mode::Greedy, Mode::Tegu])?;
    let greedy = run_mode(Mode::Greedy, &prompts, &loaded, &config.guidance)?;
    let base = DiversityReport::from_continuations(&greedy.continuations)?;
    let mut rows = vec![json!({"method": "greedy", "alpha": null, "diversity": base})];
    let mut csv = String::from("method,alpha,distinct_1,distinct_2,rep_4,tokens\n");
    let mut text = String::from("method  alpha  distinct-2   rep-4\n");
    let _ = writeln!(csv, "greedy,,{},{},{},{}", base.distinct_1, base.distinct_2, base.rep_4, base.tokens);
    let _ = writeln!(text, "greedy      - {:>11.4} {:>7.4}", base.distinct_2, base.rep_4);
    for &alpha in values {
        let cfg = GuidanceConfig {
            alpha,
            ..config.guidance.clone()
        };
        if let Err(e) = tegu_core::config::Validate::validate(&cfg) {
            return Err(CliError::Validation(vec![tegu_core::config::ConfigIssue::new(
                "values",
                format!("alpha {alpha}: {e}"),
            )]));
        }
        let run = run_mode(Mode::Tegu, &prompts, &loaded, &cfg)?;
        write_traces(&layout.traces.join(format!("sweep_alpha_{alpha}")), &run.traces)?;
        let d = DiversityReport::from_continuations(&run.continuations)?;
        let _ = writeln!(csv, "tegu,{alpha},{},{},{},{}", d.distinct_1, d.distinct_2, d.rep_4, d.tokens);
        let _ = writeln!(text, "tegu   {alpha:>5} {:>11.4} {:>7.4}", d.distinct_2, d.rep_4);
        rows.push(json!({"method": "tegu", "alpha": alpha, "diversity": d}));
    }
    write_file(&layout.reports.join("sweep_alpha.csv"), &csv)?;
    let summary = json!({"command": "sweep-alpha", "prompts": prompts.len(), "rows": rows});
    write_file(
        &layout.reports.join("sweep_alpha.json"),
        &serde_json::to_string_pretty(&summary).expect("serializable"),
    )?;
    say(out, json, text.trim_end())?;
    Ok(summary)
}
