//! Per-token FLOPs of the temporal-mixing operator, 2 FLOPs per multiply-add.

use serde::{Deserialize, Serialize};

use ratplus_core::patterns::{dilated_indices, topk_indices, BlockScoring, SparsePatternSpec};
use ratplus_core::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    /// Keys one head reads for the query.
    pub attended: usize,
    /// Scores plus value accumulation over all heads.
    pub attention: f64,
    /// Top-k block scoring over all heads.
    pub scoring: f64,
    /// The constant-cost gated state update for keys and values.
    pub recurrence: f64,
    pub total: f64,
}

/// Blocks picked by a canonical top-k selection: first, current, and the
/// most recent complete blocks. Every valid selection attends the same
/// number of keys, so counts do not depend on the query.
fn canonical_selection(t: usize, block_size: usize, k: usize) -> Vec<usize> {
    let current = t / block_size;
    if current < k {
        return (0..=current).collect();
    }
    let mut sel = vec![0];
    sel.extend(current + 2 - k..current);
    sel.push(current);
    sel
}

/// Keys one head reads at position `t`.
pub fn attended_count(t: usize, spec: &SparsePatternSpec) -> Result<usize> {
    spec.validate()?;
    Ok(match spec.topk {
        None => dilated_indices(t, spec).len(),
        Some(tk) => topk_indices(t, spec, &canonical_selection(t, tk.block_size, tk.k))?.len(),
    })
}

pub fn flops_per_token(spec: &SparsePatternSpec, t: usize, dims: Dims) -> Result<FlopsBreakdown> {
    if dims.heads == 0 || dims.head_dim == 0 {
        return Err(Error::invalid("flops_per_token", "heads and head_dim must be positive"));
    }
    let attended = attended_count(t, spec)?;
    let (h, hd) = (dims.heads as f64, dims.head_dim as f64);
    // 2·hd per score, 2·hd per value accumulate
    let attention = h * attended as f64 * 4.0 * hd;
    let scoring = match spec.topk {
        None => 0.0,
        Some(tk) => {
            let complete = (t / tk.block_size) as f64;
            let per_block = match tk.scoring {
                BlockScoring::Quest => 4.0 * hd,
                BlockScoring::Moba => 2.0 * hd,
            };
            h * complete * per_block
        }
    };
    // h = g·h + (1-g)·x: three FLOPs plus one for (1-g), on two streams
    let recurrence = h * hd * 2.0 * 4.0;
    Ok(FlopsBreakdown { attended, attention, scoring, recurrence, total: attention + scoring + recurrence })
}
