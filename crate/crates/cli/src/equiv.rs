//! Oracle suite behind `ratplus equiv`: every fast path against its
//! brute-force reference.

use std::fmt;

use ratplus_core::attention::{
    attend_online, attend_oracle, attention_scale, segments_of, temporal_mixing_forward, MixingParams,
};
use ratplus_core::kv_cache::{cache_footprint, decode_step, DilatedKVCache};
use ratplus_core::numerics::dot;
use ratplus_core::patterns::{
    attended_set, block_start, dilated_indices, expected_cache_entries, quest_block_score, BlockScoring,
    PatternAssignment, SparsePatternSpec, TopKSpec,
};
use ratplus_core::recurrence::{scan_overlapped, scan_parallel, scan_sequential};
use ratplus_core::{Array, Result, Rng, RopeParams};
use ratplus_lm::gradcheck::check_gradients;
use ratplus_lm::model::{Model, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Perturbs the parallel scan output before comparison.
    Scan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub module: &'static str,
    pub case: String,
    pub max_err: f64,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_err <= self.tol
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{status} {:<16} {:<40} max_err={:.3e} tol={:.0e}", self.module, self.case, self.max_err, self.tol)
    }
}

/// Random pattern with `D ≤ max_d`, `W ≤ max_w`, sinks in {0, 4} and an
/// optional top-k section.
pub fn random_spec(rng: &mut Rng, max_d: usize, max_w: usize, allow_topk: bool) -> SparsePatternSpec {
    let d = 1 + rng.below(max_d);
    let mut spec = SparsePatternSpec::dilated(d).with_window(rng.below(max_w + 1)).with_sinks(if rng.bernoulli(0.5) { 4 } else { 0 });
    if allow_topk && rng.bernoulli(0.5) {
        let scoring = if rng.bernoulli(0.5) { BlockScoring::Quest } else { BlockScoring::Moba };
        let combine = d > 1 && rng.bernoulli(0.5);
        let block_size = if combine { d } else { 2 + rng.below(7) };
        spec = spec.with_topk(TopKSpec { block_size, k: 2 + rng.below(3), scoring }, combine);
    }
    spec
}

/// Membership straight from the pattern definition.
pub fn brute_force_positions(t: usize, spec: &SparsePatternSpec) -> Vec<usize> {
    let d = spec.dilation;
    (0..=t)
        .filter(|&s| {
            s == t
                || s < spec.sinks
                || (s + spec.window >= t && s < t)
                || (s < block_start(t, d) && (s + 1) % d == 0)
        })
        .collect()
}

fn gates(t: usize, d: usize, rng: &mut Rng) -> (Array, Array) {
    let x = Array::randn(&[t, d], 1.0, rng);
    let mut g = Array::zeros(&[t, d]);
    g.data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(0.05, 0.999));
    (x, g)
}

fn recurrence_checks(sizes: &[usize], rng: &mut Rng, fault: Option<Fault>) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for &t in sizes {
        let mut par_err: f64 = 0.0;
        let mut win_err: f64 = 0.0;
        for _ in 0..20 {
            let (x, g) = gates(t, 6, rng);
            let init: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let seq = scan_sequential(&x, &g, &init)?;
            let mut par = scan_parallel(&x, &g, &init)?;
            if fault == Some(Fault::Scan) {
                par.data_mut()[0] += 1e-6;
            }
            par_err = par_err.max(par.max_abs_diff(&seq));
            let zero = scan_sequential(&x, &g, &[0.0; 6])?;
            win_err = win_err.max(scan_overlapped(&x, &g, t)?.max_abs_diff(&zero));
        }
        out.push(Check { module: "recurrence", case: format!("parallel vs sequential T={t}"), max_err: par_err, tol: 1e-12 });
        out.push(Check { module: "recurrence", case: format!("window L=T vs full T={t}"), max_err: win_err, tol: 1e-12 });
    }
    Ok(out)
}

fn pattern_checks(sizes: &[usize], rng: &mut Rng) -> Vec<Check> {
    sizes
        .iter()
        .map(|&t_len| {
            let mut mismatches = 0usize;
            for _ in 0..20 {
                let spec = random_spec(rng, 8, 5, false);
                for t in 0..t_len.min(300) {
                    if dilated_indices(t, &spec).positions() != brute_force_positions(t, &spec) {
                        mismatches += 1;
                    }
                }
            }
            Check { module: "sparse_patterns", case: format!("index set vs definition T={t_len}"), max_err: mismatches as f64, tol: 0.0 }
        })
        .collect()
}

fn attention_checks(sizes: &[usize], rng: &mut Rng) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for &t_len in sizes {
        let t_len = t_len.min(64);
        let hd = 8;
        let mut err: f64 = 0.0;
        for _ in 0..25 {
            let spec = random_spec(rng, 8, 5, true);
            let keys = Array::randn(&[t_len, hd], 1.0, rng);
            let values = Array::randn(&[t_len, hd], 1.0, rng);
            for t in 0..t_len {
                let q: Vec<f64> = (0..hd).map(|_| rng.normal()).collect();
                let set = attended_set(t, &spec, &q, &keys)?;
                let scale = attention_scale(hd);
                let a = attend_oracle(&q, &keys, &values, &set, scale)?;
                let b = attend_online(&q, &keys, &values, &segments_of(&set), scale)?;
                err = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(err, f64::max);
            }
        }
        out.push(Check { module: "attention", case: format!("online vs oracle T={t_len}"), max_err: err, tol: 1e-12 });
    }
    Ok(out)
}

fn decode_checks(sizes: &[usize], rng: &mut Rng) -> Result<Vec<Check>> {
    let (d, heads, hd) = (8, 2, 4);
    let rope = RopeParams::new(hd);
    let mut out = Vec::new();
    for &t_len in sizes {
        let t_len = t_len.min(257);
        let mut err: f64 = 0.0;
        let mut count_err = 0usize;
        for _ in 0..3 {
            let spec = random_spec(rng, 8, 5, true);
            let specs = vec![spec; heads];
            let params = MixingParams::init(d, heads, hd, 0.3, rng);
            let x = Array::randn(&[t_len, d], 1.0, rng);
            let (want, _) = temporal_mixing_forward(&x, &params, &specs, &rope)?;
            let mut cache = DilatedKVCache::new(specs.clone(), heads, hd, rope)?;
            for t in 0..t_len {
                let y = decode_step(&mut cache, t, x.row(t), &params)?;
                err = y.iter().zip(want.row(t)).map(|(a, b)| (a - b).abs()).fold(err, f64::max);
                if cache_footprint(&cache).entries != expected_cache_entries(t + 1, &spec) {
                    count_err += 1;
                }
            }
        }
        out.push(Check { module: "kv_cache", case: format!("decode vs prefill T={t_len}"), max_err: err, tol: 1e-10 });
        out.push(Check { module: "kv_cache", case: format!("entry count T={t_len}"), max_err: count_err as f64, tol: 0.0 });
    }
    Ok(out)
}

fn gradient_checks(sizes: &[usize], seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for &t_len in sizes {
        let n = t_len.min(12) + 1;
        let model = Model::init(ModelConfig::small(13, 8, 2, 2, n), seed)?;
        let seq: Vec<usize> = (0..n).map(|i| (i * 5 + 1) % 13).collect();
        for spec in [SparsePatternSpec::dense(), SparsePatternSpec::dilated(4).with_window(2).with_sinks(1)] {
            let assign = PatternAssignment::uniform(2, spec);
            let samples = check_gradients(&model, &seq, &assign, 2 * model.tensors().len(), 1e-5, seed)?;
            let worst = samples
                .iter()
                .filter(|s| (s.analytic - s.numeric).abs() >= 1e-9)
                .map(|s| s.rel_error())
                .fold(0.0, f64::max);
            out.push(Check {
                module: "model_training",
                case: format!("finite differences {} T={}", spec.label(), n - 1),
                max_err: worst,
                tol: 1e-4,
            });
        }
    }
    Ok(out)
}

fn quest_check(rng: &mut Rng) -> Result<Check> {
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (hd, n) = (1 + rng.below(16), 1 + rng.below(16));
        let keys = Array::randn(&[n, hd], 1.0 + rng.uniform() * 3.0, rng);
        let q: Vec<f64> = (0..hd).map(|_| rng.normal() * 2.0).collect();
        let mut lo = vec![f64::INFINITY; hd];
        let mut hi = vec![f64::NEG_INFINITY; hd];
        for r in 0..n {
            for (c, &v) in keys.row(r).iter().enumerate() {
                lo[c] = lo[c].min(v);
                hi[c] = hi[c].max(v);
            }
        }
        let bound = quest_block_score(&q, &lo, &hi)?;
        let best = (0..n).map(|r| dot(&q, keys.row(r))).fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max(best - bound);
    }
    Ok(Check { module: "sparse_patterns", case: "quest bound >= max dot, 1000 trials".into(), max_err: worst, tol: 0.0 })
}

/// Runs every oracle over `sizes` and returns one line per check.
pub fn run_suite(seed: u64, sizes: &[usize], fault: Option<Fault>) -> Result<Vec<Check>> {
    let mut rng = Rng::new(seed);
    let mut out = recurrence_checks(sizes, &mut rng.fork(), fault)?;
    out.extend(pattern_checks(sizes, &mut rng.fork()));
    out.extend(attention_checks(sizes, &mut rng.fork())?);
    out.extend(decode_checks(sizes, &mut rng.fork())?);
    out.extend(gradient_checks(sizes, seed)?);
    out.push(quest_check(&mut rng.fork())?);
    Ok(out)
}
