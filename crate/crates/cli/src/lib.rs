//! `tegu`: train a backbone and projector, decode, evaluate and sweep.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
//! configuration. Every failure also prints one JSON line to stderr.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use thiserror::Error;

use tegu_core::config::ConfigIssue;

pub use config::{validate_config, RunConfig};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "tegu", version, about = "Train, decode and evaluate temporally guided language models")]
pub struct Cli {
    /// JSON configuration file; missing keys take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Dotted-key override, e.g. `--set guidance.alpha=0.3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Root of checkpoints/, traces/, reports/ and config.snapshot.json.
    #[arg(long, global = true, default_value = "tegu-out", value_name = "DIR")]
    pub outdir: PathBuf,

    /// Seeds every random source in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    /// Machine-readable summary on stdout.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain a backbone on next-token prediction.
    TrainBackbone {
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint name under checkpoints/; use `amateur` for the small
        /// model of two-model contrastive decoding.
        #[arg(long, default_value = "backbone")]
        name: String,
    },
    /// Train the projector against a frozen backbone.
    TrainProjector {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        models: ModelArgs,
    },
    /// Decode one prompt and print the continuation.
    Generate {
        #[arg(long, value_enum, default_value_t = Mode::Tegu)]
        mode: Mode,
        #[arg(long, conflicts_with = "prompt_file", required_unless_present = "prompt_file")]
        prompt: Option<String>,
        #[arg(long, value_name = "FILE")]
        prompt_file: Option<PathBuf>,
        #[command(flatten)]
        guidance: GuidanceArgs,
        #[command(flatten)]
        models: ModelArgs,
    },
    /// Teacher-forced entropy of the next-token and offset distributions on
    /// the held-out slice.
    EvalEntropy {
        #[arg(long)]
        corpus: PathBuf,
        /// Offsets to measure; defaults to the trained offsets.
        #[arg(long, value_delimiter = ',')]
        offsets: Option<Vec<usize>>,
        #[command(flatten)]
        models: ModelArgs,
    },
    /// Distinct-n and Rep-4 of one decoding mode over many prompts.
    EvalRepetition {
        #[arg(long, value_enum, default_value_t = Mode::Tegu)]
        mode: Mode,
        #[command(flatten)]
        prompts: PromptArgs,
        #[command(flatten)]
        guidance: GuidanceArgs,
        #[command(flatten)]
        models: ModelArgs,
    },
    /// Diversity and cost of several modes on the same prompts.
    Compare {
        #[arg(long, value_enum, value_delimiter = ',', default_value = "greedy,cd,tegu")]
        modes: Vec<Mode>,
        #[command(flatten)]
        prompts: PromptArgs,
        #[command(flatten)]
        guidance: GuidanceArgs,
        #[command(flatten)]
        models: ModelArgs,
    },
    /// Guided decoding across a grid of guidance strengths, with greedy as
    /// the reference row.
    SweepAlpha {
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5")]
        values: Vec<f64>,
        #[command(flatten)]
        prompts: PromptArgs,
        #[command(flatten)]
        guidance: GuidanceArgs,
        #[command(flatten)]
        models: ModelArgs,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TrainBackbone { .. } => "train-backbone",
            Command::TrainProjector { .. } => "train-projector",
            Command::Generate { .. } => "generate",
            Command::EvalEntropy { .. } => "eval-entropy",
            Command::EvalRepetition { .. } => "eval-repetition",
            Command::Compare { .. } => "compare",
            Command::SweepAlpha { .. } => "sweep-alpha",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Greedy,
    Cd,
    Tegu,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Greedy => "greedy",
            Mode::Cd => "cd",
            Mode::Tegu => "tegu",
        }
    }
}

/// Guidance flags; each one overrides the matching `guidance.*` key.
#[derive(Debug, Default, Args)]
pub struct GuidanceArgs {
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    /// Without `--weights` the offsets are weighted uniformly.
    #[arg(long, value_delimiter = ',')]
    pub offsets: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub weights: Option<Vec<f64>>,
    #[arg(long)]
    pub max_new: Option<usize>,
}

impl GuidanceArgs {
    fn overrides(&self) -> Vec<(String, Value)> {
        let mut out = Vec::new();
        if let Some(a) = self.alpha {
            out.push(("guidance.alpha".into(), json!(a)));
        }
        if let Some(t) = self.tau {
            out.push(("guidance.tau".into(), json!(t)));
        }
        if let Some(o) = &self.offsets {
            out.push(("guidance.offsets".into(), json!(o)));
            if self.weights.is_none() && !o.is_empty() {
                let w = vec![1.0 / o.len() as f64; o.len()];
                out.push(("guidance.weights".into(), json!(w)));
            }
        }
        if let Some(w) = &self.weights {
            out.push(("guidance.weights".into(), json!(w)));
        }
        if let Some(n) = self.max_new {
            out.push(("guidance.max_new_tokens".into(), json!(n)));
        }
        out
    }
}

/// Checkpoint locations; defaults live under `outdir/checkpoints`.
#[derive(Debug, Default, Args)]
pub struct ModelArgs {
    #[arg(long, value_name = "FILE")]
    pub backbone: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub projector: Option<PathBuf>,
    /// Amateur backbone for `cd`.
    #[arg(long, value_name = "FILE")]
    pub amateur: Option<PathBuf>,
}

/// Prompts come from a file (one per line) or from evenly spaced windows of
/// the held-out tail of a corpus.
#[derive(Debug, Default, Args)]
pub struct PromptArgs {
    #[arg(long, required_unless_present = "prompts_file")]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub prompts_file: Option<PathBuf>,
    #[arg(long)]
    pub num_prompts: Option<usize>,
    #[arg(long)]
    pub prompt_len: Option<usize>,
}

impl PromptArgs {
    fn overrides(&self) -> Vec<(String, Value)> {
        let mut out = Vec::new();
        if let Some(n) = self.num_prompts {
            out.push(("data.num_prompts".into(), json!(n)));
        }
        if let Some(n) = self.prompt_len {
            out.push(("data.prompt_len".into(), json!(n)));
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration")]
    Validation(Vec<ConfigIssue>),
    #[error(transparent)]
    Core(#[from] tegu_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Message(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            _ => EXIT_RUNTIME,
        }
    }

    /// The single machine-parsable line printed on failure.
    pub fn to_json_line(&self) -> String {
        let v = match self {
            CliError::Validation(issues) => json!({"error": "validation", "issues": issues}),
            other => json!({"error": "runtime", "message": other.to_string()}),
        };
        v.to_string()
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Parses `argv` (program name first) and runs it against the process
/// stdout and stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with_output(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with_output<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let _ = write!(err, "{}", e.render());
            let line = json!({"error": "usage", "message": e.kind().to_string()});
            let _ = writeln!(err, "{line}");
            return EXIT_USAGE;
        }
    };
    init_logging(cli.verbose);
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            if let CliError::Validation(issues) = &e {
                for i in issues {
                    let _ = writeln!(err, "invalid configuration: {i}");
                }
            } else {
                let _ = writeln!(err, "error: {e}");
            }
            let _ = writeln!(err, "{}", e.to_json_line());
            e.exit_code()
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    // A second call in the same process keeps the first logger.
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp_millis()
        .try_init();
}

/// Configuration file, then `--set`, then explicit flags; `--seed` last.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let document = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            serde_json::from_str::<Value>(&text).map_err(|e| {
                CliError::Validation(vec![ConfigIssue::new("", format!("{}: {e}", path.display()))])
            })?
        }
        None => json!({}),
    };
    let mut overrides = Vec::new();
    let mut issues = Vec::new();
    for raw in &cli.overrides {
        match raw.split_once('=') {
            Some((k, v)) if !k.is_empty() => {
                overrides.push((k.trim().to_string(), config::parse_override_value(v)))
            }
            _ => issues.push(ConfigIssue::new(raw.clone(), "override must be KEY=VALUE")),
        }
    }
    if !issues.is_empty() {
        return Err(CliError::Validation(issues));
    }
    overrides.extend(flag_overrides(&cli.command));
    let mut config = validate_config(&document, &overrides).map_err(CliError::Validation)?;
    if let Some(seed) = cli.seed {
        config.model.seed = seed;
        config.backbone_training.seed = seed;
        config.projector_training.seed = seed;
        config.projector.seed = seed;
        if let tegu_core::decoding::Sampling::Categorical { seed: s } = &mut config.guidance.sampling {
            *s = seed;
        }
    }
    Ok(config)
}

fn flag_overrides(command: &Command) -> Vec<(String, Value)> {
    match command {
        Command::TrainBackbone { .. } | Command::TrainProjector { .. } => Vec::new(),
        Command::EvalEntropy { .. } => Vec::new(),
        Command::Generate { guidance, .. } => guidance.overrides(),
        Command::EvalRepetition {
            guidance, prompts, ..
        }
        | Command::Compare {
            guidance, prompts, ..
        }
        | Command::SweepAlpha {
            guidance, prompts, ..
        } => {
            let mut o = prompts.overrides();
            o.extend(guidance.overrides());
            o
        }
    }
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let config = resolve_config(cli)?;
    let layout = commands::Layout::create(&cli.outdir)?;
    layout.write_snapshot(cli.command.name(), &config)?;
    let summary = commands::dispatch(&cli.command, &config, &layout, out, cli.json)?;
    if cli.json {
        writeln!(out, "{summary}").map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    }
    Ok(())
}
