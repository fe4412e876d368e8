//! Optimiser, LR schedule, joint dense/sparse training, adaptation and
//! evaluation.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use ratplus_core::patterns::{PatternAssignment, SparsePatternSpec};
use ratplus_core::{Array, Error, Result, Rng};

use crate::corpus::Corpus;
use crate::model::{forward_lm_with, sequence_loss_and_grads, sequence_nll, Model};

/// Decoupled-weight-decay Adam. Decay applies to matrices only.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Array>,
    v: Vec<Array>,
    step: u64,
}

impl AdamW {
    pub fn new(model: &Model, weight_decay: f64) -> Self {
        let zeros: Vec<Array> = model.tensors().iter().map(|(_, a)| a.zeros_like()).collect();
        AdamW { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay, m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, model: &mut Model, grads: &Model, lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let gts = grads.tensors();
        for (i, (_, p)) in model.tensors_mut().into_iter().enumerate() {
            let decay = if p.shape().len() == 2 { self.weight_decay } else { 0.0 };
            let g = gts[i].1.data();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let upd = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *w -= lr * (upd + decay * *w);
            }
        }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Model, max_norm: f64) -> f64 {
    let norm = grads.tensors().iter().map(|(_, a)| a.sum_sq()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.tensors_mut().into_iter().for_each(|(_, a)| a.scale(s));
    }
    norm
}

/// Linear warmup to `peak`, then cosine decay to `final_lr` at `total`.
pub fn cosine_lr(step: usize, total: usize, peak: f64, final_lr: f64, warmup_fraction: f64) -> f64 {
    let warm = (total as f64 * warmup_fraction).round() as usize;
    if step < warm {
        return peak * (step + 1) as f64 / warm as f64;
    }
    let span = total.saturating_sub(warm).max(1);
    let progress = ((step - warm) as f64 / span as f64).min(1.0);
    final_lr + 0.5 * (peak - final_lr) * (1.0 + (PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrainMode {
    /// Two optimiser steps per batch: sparse pattern, then dense.
    Joint,
    DenseOnly,
    /// One step on `0.5·L_sparse + 0.5·L_dense`.
    SummedLoss,
}

fn default_true() -> bool {
    true
}

fn default_weight_decay() -> f64 {
    0.1
}

fn default_grad_clip() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub mode: TrainMode,
    pub dense_spec: SparsePatternSpec,
    pub sparse_spec: SparsePatternSpec,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_fraction: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    /// Whether the two joint passes reuse one batch of tokens.
    #[serde(default = "default_true")]
    pub share_batch: bool,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        let op = "TrainSpec";
        self.dense_spec.validate()?;
        self.sparse_spec.validate()?;
        if self.mode != TrainMode::DenseOnly && self.sparse_spec.dilation != self.sparse_spec.active_length {
            return Err(Error::invalid(
                op,
                format!(
                    "sparse dilation {} must equal active_length {}",
                    self.sparse_spec.dilation, self.sparse_spec.active_length
                ),
            ));
        }
        if self.batch == 0 {
            return Err(Error::invalid(op, "batch must be positive"));
        }
        if !(self.peak_lr >= 0.0 && self.final_lr >= 0.0) {
            return Err(Error::invalid(op, "learning rates must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::invalid(op, "warmup_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub pattern: String,
}

pub fn write_loss_csv<W: Write>(records: &[LossRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        wr.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

/// Mean loss and mean gradients over a batch of sequences.
pub fn batch_loss_and_grads(model: &Model, batch: &[Vec<usize>], assignment: &PatternAssignment) -> Result<(f64, Model)> {
    let mut total = model.zeros_like();
    let mut loss = 0.0;
    for seq in batch {
        let (l, g) = sequence_loss_and_grads(model, seq, assignment)?;
        loss += l;
        for ((_, t), (_, a)) in total.tensors_mut().into_iter().zip(g.tensors()) {
            t.add_scaled(a, 1.0)?;
        }
    }
    let n = batch.len() as f64;
    total.tensors_mut().into_iter().for_each(|(_, a)| a.scale(1.0 / n));
    Ok((loss / n, total))
}

fn check_loss(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, loss })
    }
}

fn pattern_name(kind: &str, spec: &SparsePatternSpec) -> String {
    format!("{kind}:{}", spec.label())
}

/// Trains in place and returns one loss record per optimiser step (two per
/// batch in joint mode).
pub fn train_joint(model: &mut Model, corpus: &Corpus, spec: &TrainSpec) -> Result<Vec<LossRecord>> {
    spec.validate()?;
    if corpus.vocab() > model.config.vocab {
        return Err(Error::invalid("train", "corpus vocabulary exceeds the model's"));
    }
    let layers = model.config.layers;
    let dense = PatternAssignment::uniform(layers, spec.dense_spec);
    let sparse = PatternAssignment::uniform(layers, spec.sparse_spec);
    let (dense_name, sparse_name) = (pattern_name("dense", &spec.dense_spec), pattern_name("sparse", &spec.sparse_spec));
    let window = model.config.context_length + 1;
    let mut rng = Rng::new(spec.seed);
    let mut opt = AdamW::new(model, spec.weight_decay);
    let mut trace = Vec::new();
    for step in 0..spec.steps {
        let lr = cosine_lr(step, spec.steps, spec.peak_lr, spec.final_lr, spec.warmup_fraction);
        let batch = corpus.sample_windows(window, spec.batch, &mut rng)?;
        match spec.mode {
            TrainMode::DenseOnly => {
                let (loss, mut g) = batch_loss_and_grads(model, &batch, &dense)?;
                check_loss(step, loss)?;
                clip_grad_norm(&mut g, spec.grad_clip);
                opt.update(model, &g, lr);
                trace.push(LossRecord { step, loss, lr, pattern: dense_name.clone() });
            }
            TrainMode::Joint => {
                let (loss, mut g) = batch_loss_and_grads(model, &batch, &sparse)?;
                check_loss(step, loss)?;
                clip_grad_norm(&mut g, spec.grad_clip);
                opt.update(model, &g, lr);
                trace.push(LossRecord { step, loss, lr, pattern: sparse_name.clone() });
                let batch = if spec.share_batch { batch } else { corpus.sample_windows(window, spec.batch, &mut rng)? };
                let (loss, mut g) = batch_loss_and_grads(model, &batch, &dense)?;
                check_loss(step, loss)?;
                clip_grad_norm(&mut g, spec.grad_clip);
                opt.update(model, &g, lr);
                trace.push(LossRecord { step, loss, lr, pattern: dense_name.clone() });
            }
            TrainMode::SummedLoss => {
                let (ls, mut g) = batch_loss_and_grads(model, &batch, &sparse)?;
                let (ld, gd) = batch_loss_and_grads(model, &batch, &dense)?;
                let loss = 0.5 * ls + 0.5 * ld;
                check_loss(step, loss)?;
                for ((_, a), (_, b)) in g.tensors_mut().into_iter().zip(gd.tensors()) {
                    a.scale(0.5);
                    a.add_scaled(b, 0.5)?;
                }
                clip_grad_norm(&mut g, spec.grad_clip);
                opt.update(model, &g, lr);
                trace.push(LossRecord { step, loss, lr, pattern: format!("0.5*{sparse_name}+0.5*{dense_name}") });
            }
        }
    }
    Ok(trace)
}

fn default_adapt_batch() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSpec {
    pub target_spec: SparsePatternSpec,
    pub lr: f64,
    pub tokens_budget: usize,
    #[serde(default = "default_adapt_batch")]
    pub batch: usize,
    pub seed: u64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
}

impl AdaptSpec {
    /// Optimiser steps the budget pays for.
    pub fn steps(&self, context_length: usize) -> usize {
        self.tokens_budget / (self.batch.max(1) * context_length)
    }
}

pub fn adapt(model: &mut Model, corpus: &Corpus, spec: &AdaptSpec) -> Result<Vec<LossRecord>> {
    adapt_with(model, corpus, spec, |_, _| Ok(()))
}

/// Constant-LR fine-tune under `target_spec`, no warmup. `hook(step, model)`
/// runs before each step and once more after the last.
pub fn adapt_with<F>(model: &mut Model, corpus: &Corpus, spec: &AdaptSpec, mut hook: F) -> Result<Vec<LossRecord>>
where
    F: FnMut(usize, &Model) -> Result<()>,
{
    spec.target_spec.validate()?;
    if spec.batch == 0 || !(spec.lr >= 0.0) {
        return Err(Error::invalid("adapt", "batch must be positive and lr non-negative"));
    }
    let target = PatternAssignment::uniform(model.config.layers, spec.target_spec);
    let name = pattern_name("adapt", &spec.target_spec);
    let steps = spec.steps(model.config.context_length);
    let window = model.config.context_length + 1;
    let mut rng = Rng::new(spec.seed);
    let mut opt = AdamW::new(model, spec.weight_decay);
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        hook(step, model)?;
        let batch = corpus.sample_windows(window, spec.batch, &mut rng)?;
        let (loss, mut g) = batch_loss_and_grads(model, &batch, &target)?;
        check_loss(step, loss)?;
        clip_grad_norm(&mut g, spec.grad_clip);
        opt.update(model, &g, spec.lr);
        trace.push(LossRecord { step, loss, lr: spec.lr, pattern: name.clone() });
    }
    hook(steps, model)?;
    Ok(trace)
}

/// Non-overlapping evaluation windows: every token after the first is
/// predicted exactly once.
fn eval_windows(corpus: &Corpus, context: usize) -> Vec<&[usize]> {
    let mut out = Vec::new();
    let mut s = 0;
    while s + 1 < corpus.tokens.len() {
        let e = (s + context + 1).min(corpus.tokens.len());
        out.push(&corpus.tokens[s..e]);
        s = e - 1;
    }
    out
}

/// Mean next-token NLL under a uniform pattern.
pub fn eval_nll(model: &Model, corpus: &Corpus, spec: &SparsePatternSpec) -> Result<f64> {
    eval_nll_batched(model, corpus, spec, usize::MAX)
}

/// Same as [`eval_nll`], accumulated in groups of `batch` windows.
pub fn eval_nll_batched(model: &Model, corpus: &Corpus, spec: &SparsePatternSpec, batch: usize) -> Result<f64> {
    let windows = eval_windows(corpus, model.config.context_length);
    if windows.is_empty() {
        return Err(Error::Empty { op: "eval_ppl" });
    }
    let assignment = PatternAssignment::uniform(model.config.layers, *spec);
    let (mut total, mut count) = (0.0, 0usize);
    for group in windows.chunks(batch.max(1)) {
        let mut part = 0.0;
        for w in group {
            let (s, n) = sequence_nll(model, w, &assignment)?;
            part += s;
            count += n;
        }
        total += part;
    }
    Ok(total / count as f64)
}

pub fn eval_ppl(model: &Model, corpus: &Corpus, spec: &SparsePatternSpec) -> Result<f64> {
    Ok(eval_nll(model, corpus, spec)?.exp())
}

/// Fraction of retrieval probes whose argmax prediction is the answer.
/// Each probe is run on its own document, truncated to the context length.
pub fn needle_accuracy(model: &Model, corpus: &Corpus, spec: &SparsePatternSpec) -> Result<f64> {
    if corpus.probes.is_empty() {
        return Err(Error::Empty { op: "needle_accuracy" });
    }
    let assignment = PatternAssignment::uniform(model.config.layers, *spec);
    let ctx = model.config.context_length;
    let mut hits = 0usize;
    for p in &corpus.probes {
        let start = p.doc_start.max((p.query_pos + 1).saturating_sub(ctx));
        let (logits, _) = forward_lm_with(model, &corpus.tokens[start..=p.query_pos], &assignment)?;
        let row = logits.row(logits.rows() - 1);
        let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        hits += usize::from(best == p.answer);
    }
    Ok(hits as f64 / corpus.probes.len() as f64)
}
