//! Subcommand bodies. Each writes its artifacts under the output directory
//! together with the effective config and a `.meta.json` sidecar carrying
//! the config hash and seed.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ratplus_core::patterns::PatternAssignment;
use ratplus_core::Rng;
use ratplus_cost::{bench_operator, emit_csv, emit_markdown, CostReport, CostRow, Dims};
use ratplus_lm::checkpoint::{load_checkpoint, save_checkpoint};
use ratplus_lm::decode::{sample_token, Decoder};
use ratplus_lm::model::Model;
use ratplus_lm::train::{adapt, eval_nll, train_joint, write_loss_csv};

use crate::equiv::{run_suite, Check, Fault};
use crate::{CliError, RunConfig};

pub struct Artifacts {
    pub dir: PathBuf,
    command: &'static str,
    hash: String,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub artifact: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Artifacts {
    /// Creates the output directory and writes `<command>.config.json`.
    pub fn open(cfg: &RunConfig, command: &'static str) -> Result<Self, CliError> {
        let dir = cfg.output_dir();
        fs::create_dir_all(&dir)?;
        let json = serde_json::to_string_pretty(cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(dir.join(format!("{command}.config.json")), json + "\n")?;
        Ok(Artifacts { dir, command, hash: cfg.hash(), seed: cfg.seed })
    }

    /// Path for `name`, with its sidecar written.
    pub fn path(&self, name: &str) -> Result<PathBuf, CliError> {
        let meta = ArtifactMeta {
            artifact: name.to_string(),
            command: self.command.to_string(),
            config_hash: self.hash.clone(),
            seed: self.seed,
        };
        let json = serde_json::to_string_pretty(&meta).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(self.dir.join(format!("{name}.meta.json")), json + "\n")?;
        Ok(self.dir.join(name))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn cmd_equiv(seed: u64, sizes: &[usize], fault: Option<Fault>, out: &mut dyn Write) -> Result<Vec<Check>, CliError> {
    let checks = run_suite(seed, sizes, fault)?;
    for c in &checks {
        writeln!(out, "{c}")?;
    }
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{} / {} (max_err {:.3e})", c.module, c.case, c.max_err))
        .collect();
    if failed.is_empty() {
        writeln!(out, "all {} checks passed", checks.len())?;
        Ok(checks)
    } else {
        Err(CliError::Oracle(failed.join("; ")))
    }
}

pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<PathBuf, CliError> {
    let (train, held) = cfg.load_corpus()?;
    let art = Artifacts::open(cfg, "train")?;
    let mut model = Model::init(cfg.model.clone(), cfg.seed)?;
    writeln!(out, "training {} parameters for {} steps ({:?})", model.parameter_count(), cfg.train.steps, cfg.train.mode)?;
    let records = train_joint(&mut model, &train, &cfg.train)?;
    write_loss_csv(&records, create(&art.path("train_loss.csv")?)?)?;
    let ckpt = art.path("checkpoint.rmx")?;
    save_checkpoint(&model, &ckpt)?;
    let nll = eval_nll(&model, &held, &cfg.train.dense_spec)?;
    writeln!(out, "held-out dense ppl {:.4}; checkpoint {}", nll.exp(), ckpt.display())?;
    Ok(ckpt)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptSummary {
    pub nll_before: f64,
    pub nll_after: f64,
}

pub fn cmd_adapt(cfg: &RunConfig, checkpoint: &Path, out: &mut dyn Write) -> Result<AdaptSummary, CliError> {
    let (train, held) = cfg.load_corpus()?;
    let mut model = load_checkpoint(checkpoint)?;
    let art = Artifacts::open(cfg, "adapt")?;
    let spec = cfg.adapt_spec();
    let nll_before = eval_nll(&model, &held, &spec.target_spec)?;
    let records = adapt(&mut model, &train, &spec)?;
    let nll_after = eval_nll(&model, &held, &spec.target_spec)?;
    write_loss_csv(&records, create(&art.path("adapt_loss.csv")?)?)?;
    save_checkpoint(&model, &art.path("adapted.rmx")?)?;
    writeln!(
        out,
        "adapted to {} over {} steps: held-out ppl {:.4} -> {:.4}",
        spec.target_spec.label(),
        records.len(),
        nll_before.exp(),
        nll_after.exp()
    )?;
    Ok(AdaptSummary { nll_before, nll_after })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PplRow {
    pub pattern: String,
    pub dilation: usize,
    pub nll: f64,
    pub ppl: f64,
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: &mut dyn Write) -> Result<Vec<PplRow>, CliError> {
    let (_, held) = cfg.load_corpus()?;
    let model = load_checkpoint(checkpoint)?;
    let art = Artifacts::open(cfg, "eval")?;
    let mut rows = Vec::with_capacity(cfg.eval_specs.len());
    for spec in &cfg.eval_specs {
        let nll = eval_nll(&model, &held, spec)?;
        rows.push(PplRow { pattern: spec.label(), dilation: spec.dilation, nll, ppl: nll.exp() });
    }
    let mut w = csv::Writer::from_writer(create(&art.path("ppl.csv")?)?);
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush()?;
    let base = rows[0].ppl;
    writeln!(out, "| pattern | nll | ppl | ppl / first |\n|---|---:|---:|---:|")?;
    for r in &rows {
        writeln!(out, "| {} | {:.4} | {:.4} | {:.3} |", r.pattern, r.nll, r.ppl, r.ppl / base)?;
    }
    Ok(rows)
}

fn dims(cfg: &RunConfig) -> Dims {
    Dims { model_dim: cfg.bench.model_dim, heads: cfg.bench.heads, head_dim: cfg.bench.head_dim }
}

fn write_report(art: &Artifacts, name: &str, report: &CostReport, out: &mut dyn Write) -> Result<(), CliError> {
    emit_csv(&report.rows, create(&art.path(&format!("{name}.csv"))?)?)?;
    let md = emit_markdown(report)?;
    fs::write(art.path(&format!("{name}.md"))?, &md)?;
    write!(out, "{md}")?;
    Ok(())
}

pub fn cmd_cost(cfg: &RunConfig, out: &mut dyn Write) -> Result<CostReport, CliError> {
    let art = Artifacts::open(cfg, "cost")?;
    let mut rows = Vec::new();
    for &t in &cfg.bench.lengths {
        for spec in &cfg.eval_specs {
            rows.push(CostRow::analytic(spec, t, dims(cfg))?);
        }
    }
    let report = CostReport::new(rows, cfg.seed, "analytic");
    write_report(&art, "cost", &report, out)?;
    Ok(report)
}

pub fn cmd_bench(cfg: &RunConfig, out: &mut dyn Write) -> Result<CostReport, CliError> {
    let art = Artifacts::open(cfg, "bench")?;
    let mut rows = Vec::new();
    for &t in &cfg.bench.lengths {
        for spec in &cfg.eval_specs {
            let stats = bench_operator(spec, t, dims(cfg), cfg.bench.repeats, cfg.seed)?;
            for w in &stats.warnings {
                eprintln!("warning: {} T={t}: {w}", spec.label());
            }
            let mut row = CostRow::analytic(spec, t, dims(cfg))?;
            row.measured_ns = Some(stats.decode_median());
            rows.push(row);
        }
    }
    let note = format!(
        "decode-step median of {} runs, {} threads available",
        cfg.bench.repeats,
        std::thread::available_parallelism().map_or(1, |n| n.get())
    );
    let report = CostReport::new(rows, cfg.seed, note);
    write_report(&art, "bench", &report, out)?;
    Ok(report)
}

/// Feeds a held-out prompt through per-layer caches under `cfg.pattern`,
/// then generates `tokens` more, logging cache size per step.
pub fn cmd_decode_demo(
    cfg: &RunConfig,
    checkpoint: &Path,
    prompt_len: usize,
    tokens: usize,
    temperature: f64,
    out: &mut dyn Write,
) -> Result<Vec<usize>, CliError> {
    let (_, held) = cfg.load_corpus()?;
    let model = load_checkpoint(checkpoint)?;
    let assignment = PatternAssignment::uniform(model.config.layers, cfg.pattern);
    let mut dec = Decoder::new(&model, &assignment)?;
    let prompt = &held.tokens[..prompt_len.clamp(1, held.len())];
    writeln!(out, "pattern {}  prompt {:?}", cfg.pattern.label(), held.tokenizer.decode(prompt))?;
    let mut logits = Vec::new();
    for &tok in prompt {
        logits = dec.step(tok)?;
    }
    let mut rng = Rng::new(cfg.seed);
    let mut generated = Vec::with_capacity(tokens);
    for _ in 0..tokens {
        let tok = sample_token(&logits, temperature, &mut rng)?;
        generated.push(tok);
        let fp = dec.footprint();
        writeln!(
            out,
            "t={:>5}  token={:<8} cache_entries={:>5}  bytes={:>8}  dense_entries={:>5}",
            dec.position(),
            format!("{:?}", held.tokenizer.decode(&[tok])),
            fp.entries,
            fp.bytes,
            dec.position() + 1
        )?;
        logits = dec.step(tok)?;
    }
    writeln!(out, "generated {:?}", held.tokenizer.decode(&generated))?;
    Ok(generated)
}
