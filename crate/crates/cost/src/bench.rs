//! Wall-clock timing of prefill and of one decode step.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use ratplus_core::attention::{ForwardOptions, MixingParams};
use ratplus_core::kv_cache::{decode_step, prefill};
use ratplus_core::patterns::SparsePatternSpec;
use ratplus_core::{Array, Error, Result, Rng, RopeParams};

use crate::flops::Dims;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchStats {
    pub prefill_ns: Vec<u64>,
    /// Decode of the token at position `T`, after a `T`-token prefill.
    pub decode_ns: Vec<u64>,
    pub warnings: Vec<String>,
}

fn median(v: &[u64]) -> u64 {
    let mut s = v.to_vec();
    s.sort_unstable();
    s[s.len() / 2]
}

impl BenchStats {
    pub fn prefill_median(&self) -> u64 {
        median(&self.prefill_ns)
    }

    pub fn prefill_min(&self) -> u64 {
        *self.prefill_ns.iter().min().expect("nonempty samples")
    }

    pub fn decode_median(&self) -> u64 {
        median(&self.decode_ns)
    }

    pub fn decode_min(&self) -> u64 {
        *self.decode_ns.iter().min().expect("nonempty samples")
    }
}

/// Samples shorter than this cannot be resolved to three significant digits.
const MIN_RESOLVABLE_NS: u64 = 1_000;

/// Times `repeats` prefills of `t_len` tokens and `repeats` decode steps at
/// position `t_len`, after one untimed warmup of each. Weights and inputs
/// come from `seed`.
pub fn bench_operator(
    spec: &SparsePatternSpec,
    t_len: usize,
    dims: Dims,
    repeats: usize,
    seed: u64,
) -> Result<BenchStats> {
    if repeats < 3 {
        return Err(Error::invalid("bench_operator", format!("repeats must be >= 3, got {repeats}")));
    }
    if t_len == 0 {
        return Err(Error::invalid("bench_operator", "T must be positive"));
    }
    let mut rng = Rng::new(seed);
    let params = MixingParams::init(dims.model_dim, dims.heads, dims.head_dim, 0.02, &mut rng);
    let x = Array::randn(&[t_len + 1, dims.model_dim], 1.0, &mut rng);
    let prefix = Array::new(&[t_len, dims.model_dim], x.data()[..t_len * dims.model_dim].to_vec())?;
    let specs = vec![*spec; dims.heads];
    let rope = RopeParams::new(dims.head_dim);
    let opts = ForwardOptions::default();

    let (_, cache) = prefill(&prefix, &params, &specs, &rope, opts)?;
    let mut prefill_ns = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let out = prefill(&prefix, &params, &specs, &rope, opts)?;
        prefill_ns.push(start.elapsed().as_nanos() as u64);
        std::hint::black_box(out);
    }

    let mut warm = cache.clone();
    decode_step(&mut warm, t_len, x.row(t_len), &params)?;
    let mut decode_ns = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let mut c = cache.clone();
        let start = Instant::now();
        let y = decode_step(&mut c, t_len, x.row(t_len), &params)?;
        decode_ns.push(start.elapsed().as_nanos() as u64);
        std::hint::black_box(y);
    }

    let mut warnings = Vec::new();
    for (name, v) in [("prefill", &prefill_ns), ("decode", &decode_ns)] {
        if v.iter().any(|&ns| ns < MIN_RESOLVABLE_NS) {
            warnings.push(format!("{name}: samples below {MIN_RESOLVABLE_NS} ns; timer resolution insufficient"));
        }
    }
    Ok(BenchStats { prefill_ns, decode_ns, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIMS: Dims = Dims { model_dim: 16, heads: 2, head_dim: 8 };

    #[test]
    fn sample_counts_and_validation() {
        let s = bench_operator(&SparsePatternSpec::dilated(4), 32, DIMS, 3, 1).unwrap();
        assert_eq!(s.prefill_ns.len(), 3);
        assert_eq!(s.decode_ns.len(), 3);
        assert!(s.decode_min() <= s.decode_median());
        assert!(bench_operator(&SparsePatternSpec::dense(), 32, DIMS, 2, 1).is_err());
    }

    #[test]
    fn prefill_time_grows_with_length() {
        let spec = SparsePatternSpec::dense();
        let times: Vec<u64> =
            [16, 256, 2048].iter().map(|&t| bench_operator(&spec, t, DIMS, 3, 2).unwrap().prefill_min()).collect();
        assert!(times.windows(2).all(|w| w[0] <= w[1]), "{times:?}");
    }
}
