//! Sparse attention patterns: which key positions a query at `t` reads.
//!
//! A dilated pattern with dilation `D` reads one block-summary position per
//! completed block (`D-1, 2D-1, …`), the query position itself, an optional
//! band of the last `W` positions and the first `sinks` positions. Top-k
//! block patterns read whole blocks chosen by a key-statistics score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, Array};
use crate::recurrence::RecurrenceWindow;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BlockScoring {
    /// Upper bound from per-channel key min/max.
    Quest,
    /// Dot product with the mean-pooled key.
    Moba,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopKSpec {
    pub block_size: usize,
    pub k: usize,
    pub scoring: BlockScoring,
}

fn default_active_length() -> usize {
    8
}

/// One attention pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsePatternSpec {
    pub dilation: usize,
    #[serde(default)]
    pub window: usize,
    #[serde(default)]
    pub sinks: usize,
    #[serde(default)]
    pub recurrence_window: RecurrenceWindow,
    #[serde(default = "default_active_length")]
    pub active_length: usize,
    #[serde(default)]
    pub topk: Option<TopKSpec>,
    #[serde(default)]
    pub combine: bool,
}

impl Default for SparsePatternSpec {
    fn default() -> Self {
        SparsePatternSpec::dense()
    }
}

impl SparsePatternSpec {
    pub fn dense() -> Self {
        SparsePatternSpec {
            dilation: 1,
            window: 0,
            sinks: 0,
            recurrence_window: RecurrenceWindow::Full,
            active_length: default_active_length(),
            topk: None,
            combine: false,
        }
    }

    /// Dilated pattern with the usual four sink tokens.
    pub fn dilated(dilation: usize) -> Self {
        SparsePatternSpec { dilation, sinks: if dilation > 1 { 4 } else { 0 }, ..Self::dense() }
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window;
        self
    }

    pub fn with_sinks(mut self, sinks: usize) -> Self {
        self.sinks = sinks;
        self
    }

    /// Also caps `active_length` at a finite window.
    pub fn with_recurrence(mut self, window: RecurrenceWindow) -> Self {
        self.recurrence_window = window;
        if let RecurrenceWindow::Finite(l) = window {
            self.active_length = self.active_length.min(l);
        }
        self
    }

    pub fn with_topk(mut self, topk: TopKSpec, combine: bool) -> Self {
        self.topk = Some(topk);
        self.combine = combine;
        self
    }

    pub fn is_dense(&self) -> bool {
        self.dilation == 1 && self.topk.is_none()
    }

    pub fn validate(&self) -> Result<()> {
        let op = "SparsePatternSpec";
        if self.dilation == 0 {
            return Err(Error::invalid(op, "dilation must be >= 1"));
        }
        if self.active_length == 0 {
            return Err(Error::invalid(op, "active_length must be >= 1"));
        }
        if let RecurrenceWindow::Finite(l) = self.recurrence_window {
            if l == 0 {
                return Err(Error::invalid(op, "recurrence_window must be >= 1"));
            }
            if self.active_length > l {
                return Err(Error::invalid(
                    op,
                    format!("active_length {} exceeds recurrence_window {l}", self.active_length),
                ));
            }
        }
        match self.topk {
            Some(tk) => {
                if tk.k < 2 {
                    return Err(Error::invalid(op, format!("topk.k must be >= 2, got {}", tk.k)));
                }
                if tk.block_size == 0 {
                    return Err(Error::invalid(op, "topk.block_size must be >= 1"));
                }
                if self.combine && tk.block_size != self.dilation {
                    return Err(Error::invalid(
                        op,
                        "combine requires topk.block_size == dilation",
                    ));
                }
            }
            None if self.combine => {
                return Err(Error::invalid(op, "combine requires a topk section"));
            }
            None => {}
        }
        Ok(())
    }

    /// Short human label, e.g. `D=16,W=256,S=4`.
    pub fn label(&self) -> String {
        let mut s = format!("D={}", self.dilation);
        if self.window > 0 {
            s.push_str(&format!(",W={}", self.window));
        }
        if self.sinks > 0 {
            s.push_str(&format!(",S={}", self.sinks));
        }
        if let RecurrenceWindow::Finite(l) = self.recurrence_window {
            s.push_str(&format!(",L={l}"));
        }
        if let Some(tk) = self.topk {
            let sc = match tk.scoring {
                BlockScoring::Quest => "quest",
                BlockScoring::Moba => "moba",
            };
            s.push_str(&format!(",top{}x{}:{sc}", tk.k, tk.block_size));
            if self.combine {
                s.push_str("|dil");
            }
        }
        s
    }
}

/// Why a key position is in a query's attended set. Ordered by precedence:
/// when a position qualifies under several roles the greatest one is kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Slot {
    Sink,
    BlockSummary,
    TopkBlock,
    Local,
    SelfToken,
}

/// Attended key positions of one query, sorted ascending, unique.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttendedSet {
    pub query: usize,
    pub entries: Vec<(usize, Slot)>,
}

impl AttendedSet {
    /// Sorts candidate `(position, slot)` pairs and keeps the highest-precedence
    /// slot for each position.
    fn from_candidates(query: usize, mut c: Vec<(usize, Slot)>) -> Self {
        c.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
        c.dedup_by_key(|e| e.0);
        AttendedSet { query, entries: c }
    }

    pub fn positions(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn block_start(t: usize, dilation: usize) -> usize {
    t / dilation * dilation
}

fn base_entries(t: usize, spec: &SparsePatternSpec) -> Vec<(usize, Slot)> {
    let mut c = Vec::new();
    c.extend((0..spec.sinks.min(t)).map(|p| (p, Slot::Sink)));
    c.extend((t.saturating_sub(spec.window)..t).map(|p| (p, Slot::Local)));
    c.push((t, Slot::SelfToken));
    c
}

fn push_summaries(c: &mut Vec<(usize, Slot)>, t: usize, d: usize) {
    c.extend((d - 1..block_start(t, d)).step_by(d).map(|p| (p, Slot::BlockSummary)));
}

/// Attended set of the dilated (+ local + sink) pattern; ignores any topk
/// section.
pub fn dilated_indices(t: usize, spec: &SparsePatternSpec) -> AttendedSet {
    let mut c = base_entries(t, spec);
    push_summaries(&mut c, t, spec.dilation.max(1));
    AttendedSet::from_candidates(t, c)
}

/// Number of block ends `jD-1` (`j >= 1`) inside `[lo, hi)`.
fn block_ends_in(lo: usize, hi: usize, d: usize) -> usize {
    if hi <= lo {
        0
    } else {
        hi / d - lo / d
    }
}

/// Stored entries a cache needs to serve a query at `t`, plus one slot for
/// the running recurrence state (which supplies the self term), so for
/// patterns without top-k this equals the attended-set size. Patterns with a
/// top-k section keep every position.
pub fn expected_cache_entries(t: usize, spec: &SparsePatternSpec) -> usize {
    if spec.topk.is_some() {
        return t + 1;
    }
    let d = spec.dilation.max(1);
    let sink_end = spec.sinks.min(t);
    let local_start = t.saturating_sub(spec.window);
    let local = t - local_start;
    if sink_end >= local_start {
        return t + 1;
    }
    let bs = block_start(t, d);
    let summaries = bs / d
        - block_ends_in(0, sink_end.min(bs), d)
        - block_ends_in(local_start, bs, d);
    sink_end + local + summaries + 1
}

fn check_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("{} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// `Σ_i max(q_i·min_i, q_i·max_i)`: an upper bound on `q·k` for any key in
/// the block.
pub fn quest_block_score(q: &[f64], block_min: &[f64], block_max: &[f64]) -> Result<f64> {
    check_len("quest_block_score", q, block_min)?;
    check_len("quest_block_score", q, block_max)?;
    Ok(q.iter()
        .zip(block_min.iter().zip(block_max))
        .map(|(qi, (lo, hi))| f64::max(qi * lo, qi * hi))
        .sum())
}

pub fn moba_block_score(q: &[f64], block_mean: &[f64]) -> Result<f64> {
    check_len("moba_block_score", q, block_mean)?;
    Ok(dot(q, block_mean))
}

/// Scores key rows `[lo, hi)` of `keys` against `q`.
pub fn block_score(q: &[f64], keys: &Array, lo: usize, hi: usize, scoring: BlockScoring) -> Result<f64> {
    let hd = keys.cols();
    if hi <= lo || hi > keys.rows() {
        return Err(Error::invalid("block_score", format!("block [{lo},{hi}) of {} keys", keys.rows())));
    }
    match scoring {
        BlockScoring::Quest => {
            let mut mn = keys.row(lo).to_vec();
            let mut mx = mn.clone();
            for r in lo + 1..hi {
                for (c, &v) in keys.row(r).iter().enumerate() {
                    mn[c] = mn[c].min(v);
                    mx[c] = mx[c].max(v);
                }
            }
            quest_block_score(q, &mn, &mx)
        }
        BlockScoring::Moba => {
            let mut mean = vec![0.0; hd];
            for r in lo..hi {
                for (m, v) in mean.iter_mut().zip(keys.row(r)) {
                    *m += v;
                }
            }
            let n = (hi - lo) as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            moba_block_score(q, &mean)
        }
    }
}

/// Picks blocks given precomputed scores (`scores[b]` for every causal
/// block; entries for the first and last block are ignored). The first and
/// the last block are always chosen; the rest by descending score, ties to
/// the lower block id. Result is sorted.
pub fn select_from_scores(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::invalid("select_topk_blocks", format!("K must be >= 2, got {k}")));
    }
    let n = scores.len();
    if n <= k {
        return Ok((0..n).collect());
    }
    let mut middle: Vec<usize> = (1..n - 1).collect();
    middle.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = middle.into_iter().take(k - 2).collect();
    chosen.push(0);
    chosen.push(n - 1);
    chosen.sort_unstable();
    Ok(chosen)
}

/// Top-k block selection for query `q` at position `t` over `keys`
/// (rows `0..=t` are used).
pub fn select_topk_blocks(t: usize, q: &[f64], keys: &Array, topk: &TopKSpec) -> Result<Vec<usize>> {
    if topk.k < 2 {
        return Err(Error::invalid("select_topk_blocks", format!("K must be >= 2, got {}", topk.k)));
    }
    if topk.block_size == 0 {
        return Err(Error::invalid("select_topk_blocks", "block_size must be >= 1"));
    }
    if keys.rows() <= t {
        return Err(Error::shape("select_topk_blocks", format!("{} keys for position {t}", keys.rows())));
    }
    let bs = topk.block_size;
    let n = t / bs + 1;
    if n <= topk.k {
        return Ok((0..n).collect());
    }
    let mut scores = vec![0.0; n];
    for (b, s) in scores.iter_mut().enumerate().take(n - 1).skip(1) {
        *s = block_score(q, keys, b * bs, (b + 1) * bs, topk.scoring)?;
    }
    select_from_scores(&scores, topk.k)
}

/// Top-k attended set: every position of the selected blocks at full
/// resolution plus sinks, local band and self. With `spec.combine`, each
/// unselected completed block also contributes its summary position.
pub fn topk_indices(t: usize, spec: &SparsePatternSpec, selected: &[usize]) -> Result<AttendedSet> {
    let Some(tk) = spec.topk else {
        return Err(Error::invalid("topk_indices", "spec has no topk section"));
    };
    if tk.k < 2 {
        return Err(Error::invalid("topk_indices", format!("K must be >= 2, got {}", tk.k)));
    }
    let mut c = base_entries(t, spec);
    let bs = tk.block_size;
    for &b in selected {
        c.extend((b * bs..((b + 1) * bs).min(t + 1)).map(|p| (p, Slot::TopkBlock)));
    }
    if spec.combine {
        push_summaries(&mut c, t, spec.dilation);
    }
    Ok(AttendedSet::from_candidates(t, c))
}

/// Dilated + top-k union (requires `combine`).
pub fn combined_indices(t: usize, spec: &SparsePatternSpec, selected: &[usize]) -> Result<AttendedSet> {
    if !spec.combine {
        return Err(Error::invalid("combined_indices", "spec.combine is false"));
    }
    topk_indices(t, spec, selected)
}

/// Attended set for any pattern. `q` and `keys` are only consulted for
/// top-k selection.
pub fn attended_set(t: usize, spec: &SparsePatternSpec, q: &[f64], keys: &Array) -> Result<AttendedSet> {
    match &spec.topk {
        None => Ok(dilated_indices(t, spec)),
        Some(tk) => {
            let selected = select_topk_blocks(t, q, keys, tk)?;
            topk_indices(t, spec, &selected)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadOverride {
    pub layer: usize,
    pub head: usize,
    pub spec: SparsePatternSpec,
}

/// Per-layer patterns with optional per-head overrides.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternAssignment {
    pub per_layer: Vec<SparsePatternSpec>,
    #[serde(default)]
    pub per_head: Vec<HeadOverride>,
}

impl PatternAssignment {
    pub fn uniform(layers: usize, spec: SparsePatternSpec) -> Self {
        PatternAssignment { per_layer: vec![spec; layers], per_head: Vec::new() }
    }

    pub fn resolve(&self, layer: usize, head: usize) -> &SparsePatternSpec {
        self.per_head
            .iter()
            .rev()
            .find(|o| o.layer == layer && o.head == head)
            .map(|o| &o.spec)
            .unwrap_or(&self.per_layer[layer])
    }

    /// Specs for every head of one layer.
    pub fn layer_specs(&self, layer: usize, heads: usize) -> Vec<SparsePatternSpec> {
        (0..heads).map(|h| *self.resolve(layer, h)).collect()
    }

    pub fn validate(&self, layers: usize, heads: usize) -> Result<()> {
        if self.per_layer.len() != layers {
            return Err(Error::invalid(
                "PatternAssignment",
                format!("{} per-layer specs for {layers} layers", self.per_layer.len()),
            ));
        }
        for o in &self.per_head {
            if o.layer >= layers || o.head >= heads {
                return Err(Error::invalid(
                    "PatternAssignment",
                    format!("override for (layer {}, head {}) out of range", o.layer, o.head),
                ));
            }
        }
        for s in self.per_layer.iter().chain(self.per_head.iter().map(|o| &o.spec)) {
            s.validate()?;
        }
        Ok(())
    }
}
