//! Run configuration: JSON on disk, dotted-path overrides on the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use ratplus_core::patterns::{PatternAssignment, SparsePatternSpec};
use ratplus_lm::corpus::{synth_task_generate, Corpus, TaskKind};
use ratplus_lm::model::{default_ffn_dim, ModelConfig};
use ratplus_lm::train::{AdaptSpec, TrainMode, TrainSpec};
use ratplus_core::RopeParams;

use crate::CliError;

pub const OUT_ENV: &str = "RATPLUS_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// UTF-8 text file for `CHAR_LM`; synthetic text when absent.
    #[serde(default)]
    pub path: Option<PathBuf>,
    pub task: TaskKind,
    pub size: usize,
    /// Training fraction; the first half of the remainder is held out.
    pub split: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub lr: f64,
    pub tokens_budget: usize,
    pub batch: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub repeats: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Falls back to `$RATPLUS_OUT`, then `runs`.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainSpec,
    pub adapt: AdaptConfig,
    /// Inference pattern for adapt, decode-demo and bench.
    pub pattern: SparsePatternSpec,
    pub eval_specs: Vec<SparsePatternSpec>,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut sparse = SparsePatternSpec::dilated(8).with_sinks(0);
        sparse.active_length = 8;
        let model_dim = 32;
        RunConfig {
            seed: 1,
            output_dir: None,
            corpus: CorpusConfig { path: None, task: TaskKind::CharLm, size: 60_000, split: 0.9 },
            model: ModelConfig {
                vocab: 23,
                model_dim,
                layers: 2,
                heads: 2,
                head_dim: 16,
                ffn_dim: default_ffn_dim(model_dim),
                rope: RopeParams::new(16),
                pattern_assignment: PatternAssignment::uniform(2, SparsePatternSpec::dense()),
                context_length: 256,
                init_std: 0.02,
                tied_head: false,
            },
            train: TrainSpec {
                mode: TrainMode::Joint,
                dense_spec: SparsePatternSpec::dense(),
                sparse_spec: sparse,
                peak_lr: 3e-3,
                final_lr: 3e-4,
                warmup_fraction: 0.05,
                batch: 4,
                steps: 300,
                seed: 7,
                share_batch: true,
                weight_decay: 0.1,
                grad_clip: 1.0,
            },
            adapt: AdaptConfig { lr: 1e-4, tokens_budget: 81_920, batch: 16, weight_decay: 0.0, grad_clip: 1.0 },
            pattern: SparsePatternSpec::dilated(4).with_sinks(0),
            eval_specs: [1, 2, 4, 8].iter().map(|&d| SparsePatternSpec::dilated(d).with_sinks(0)).collect(),
            bench: BenchConfig { lengths: vec![1024, 4096], repeats: 5, model_dim: 64, heads: 4, head_dim: 16 },
        }
    }
}

/// Parses `a.b.c=value`. The value is read as JSON when it parses, else as a string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value), CliError> {
    let s = s.trim_start_matches("--");
    let (path, raw) =
        s.split_once('=').ok_or_else(|| CliError::Validation(format!("override '{s}' is not of the form key.path=value")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(CliError::Validation(format!("override '{s}' has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path.split('.').map(String::from).collect(), value))
}

/// Sets `path` inside `root`, creating objects where the path runs through
/// null or missing keys. Unknown keys are caught later by deserialization.
pub fn apply_override(root: &mut Value, path: &[String], value: Value) -> Result<(), CliError> {
    let mut cur = root;
    for (i, key) in path.iter().enumerate() {
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        let obj = match cur {
            Value::Object(m) => m,
            Value::Array(a) => {
                let idx: usize = key.parse().map_err(|_| {
                    CliError::Validation(format!("override path {}: '{key}' is not a list index", path.join(".")))
                })?;
                let len = a.len();
                cur = a.get_mut(idx).ok_or_else(|| {
                    CliError::Validation(format!("override path {}: index {idx} out of range ({len})", path.join(".")))
                })?;
                if i + 1 == path.len() {
                    *cur = value;
                    return Ok(());
                }
                continue;
            }
            _ => {
                return Err(CliError::Validation(format!(
                    "override path {}: '{}' is not an object",
                    path.join("."),
                    path[..i].join(".")
                )))
            }
        };
        if i + 1 == path.len() {
            obj.insert(key.clone(), value);
            return Ok(());
        }
        cur = obj.entry(key.clone()).or_insert(Value::Null);
    }
    Ok(())
}

fn validation(e: ratplus_core::Error) -> CliError {
    CliError::Validation(e.to_string())
}

impl RunConfig {
    /// Reads `path` (or the defaults), applies overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(RunConfig::default()).expect("default config serializes"),
        };
        for o in overrides {
            let (p, v) = parse_override(o)?;
            apply_override(&mut value, &p, v)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.eval_specs.is_empty() {
            return Err(CliError::Validation("eval_specs must be nonempty".into()));
        }
        for s in self.eval_specs.iter().chain([&self.pattern]) {
            s.validate().map_err(validation)?;
        }
        self.model.validate().map_err(validation)?;
        self.train.validate().map_err(validation)?;
        if let Some(p) = &self.corpus.path {
            if !p.exists() {
                return Err(CliError::Validation(format!("corpus.path {} does not exist", p.display())));
            }
            if self.corpus.task != TaskKind::CharLm {
                return Err(CliError::Validation("corpus.path requires task CHAR_LM".into()));
            }
        }
        if !(self.corpus.split > 0.0 && self.corpus.split < 1.0) {
            return Err(CliError::Validation("corpus.split must lie in (0, 1)".into()));
        }
        if self.bench.repeats < 3 {
            return Err(CliError::Validation("bench.repeats must be >= 3".into()));
        }
        if self.adapt.batch == 0 {
            return Err(CliError::Validation("adapt.batch must be positive".into()));
        }
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// SHA-256 of the canonical JSON (keys sorted).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&serde_json::to_value(self).expect("config serializes")).expect("json");
        Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn adapt_spec(&self) -> AdaptSpec {
        AdaptSpec {
            target_spec: self.pattern,
            lr: self.adapt.lr,
            tokens_budget: self.adapt.tokens_budget,
            batch: self.adapt.batch,
            seed: self.seed,
            weight_decay: self.adapt.weight_decay,
            grad_clip: self.adapt.grad_clip,
        }
    }

    /// `(train, held_out)`; checks the model vocabulary covers the corpus.
    pub fn load_corpus(&self) -> Result<(Corpus, Corpus), CliError> {
        let text = match &self.corpus.path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?),
            None => None,
        };
        let corpus =
            synth_task_generate(self.corpus.task, self.corpus.size, self.seed, text.as_deref()).map_err(validation)?;
        if corpus.vocab() > self.model.vocab {
            return Err(CliError::Validation(format!(
                "model.vocab {} is smaller than the corpus vocabulary {}",
                self.model.vocab,
                corpus.vocab()
            )));
        }
        let (train, rest) = corpus.split(self.corpus.split).map_err(validation)?;
        let (held, _) = rest.split(0.5).map_err(validation)?;
        Ok((train, held))
    }
}
