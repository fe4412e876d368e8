//! Gated sparse attention: one temporal-mixing block.
//!
//! Pipeline per block: bias-free q/k/v projections, the gated recurrence over
//! k and v, RoPE on q and the gated keys, pattern-driven attention merged with
//! online softmax, then the sigmoid output gate and the output projection.

use crate::error::{Error, Result};
use crate::numerics::{dot, matmul, matmul_nt, matmul_tn, sigmoid, Array, Rng, RopeParams};
use crate::patterns::{attended_set, AttendedSet, Slot, SparsePatternSpec};
use crate::recurrence::{gates_from_input, scan_windowed, scan_windowed_backward, GateParams};

/// Contiguous group of attended positions sharing one slot label.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub slot: Slot,
    pub positions: Vec<usize>,
}

/// Splits an attended set into one segment per slot label.
pub fn segments_of(set: &AttendedSet) -> Vec<Segment> {
    let order = [Slot::Sink, Slot::BlockSummary, Slot::TopkBlock, Slot::Local, Slot::SelfToken];
    order
        .iter()
        .filter_map(|&slot| {
            let positions: Vec<usize> =
                set.entries.iter().filter(|e| e.1 == slot).map(|e| e.0).collect();
            (!positions.is_empty()).then_some(Segment { slot, positions })
        })
        .collect()
}

/// Running softmax state of a (partial) segment: max logit, denominator and
/// unnormalised numerator.
#[derive(Clone, Debug)]
struct Partial {
    m: f64,
    s: f64,
    num: Vec<f64>,
}

impl Partial {
    fn empty(dim: usize) -> Self {
        Partial { m: f64::NEG_INFINITY, s: 0.0, num: vec![0.0; dim] }
    }

    fn merge(self, other: Partial) -> Partial {
        if other.s == 0.0 {
            return self;
        }
        if self.s == 0.0 {
            return other;
        }
        let m = self.m.max(other.m);
        let (a, b) = ((self.m - m).exp(), (other.m - m).exp());
        let num = self.num.iter().zip(&other.num).map(|(x, y)| a * x + b * y).collect();
        Partial { m, s: a * self.s + b * other.s, num }
    }
}

fn segment_partial(q: &[f64], keys: &Array, values: &Array, positions: &[usize], scale: f64, logits: &mut Vec<f64>) -> Partial {
    let start = logits.len();
    logits.extend(positions.iter().map(|&p| scale * dot(q, keys.row(p))));
    let seg = &logits[start..];
    let m = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut part = Partial { m, s: 0.0, num: vec![0.0; values.cols()] };
    for (&p, &l) in positions.iter().zip(seg) {
        let w = (l - m).exp();
        part.s += w;
        for (n, v) in part.num.iter_mut().zip(values.row(p)) {
            *n += w * v;
        }
    }
    part
}

fn check_set(op: &'static str, positions: &[usize], keys: &Array, values: &Array) -> Result<()> {
    if keys.shape() != values.shape() {
        return Err(Error::shape(op, format!("keys {:?} vs values {:?}", keys.shape(), values.shape())));
    }
    if positions.is_empty() {
        return Err(Error::Empty { op });
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= keys.rows()) {
        return Err(Error::invalid(op, format!("position {p} beyond {} keys", keys.rows())));
    }
    Ok(())
}

/// Reference path: materialise every logit, one softmax, weighted sum.
pub fn attend_oracle(q: &[f64], keys: &Array, values: &Array, set: &AttendedSet, scale: f64) -> Result<Vec<f64>> {
    let positions = set.positions();
    check_set("attend_oracle", &positions, keys, values)?;
    let logits: Vec<f64> = positions.iter().map(|&p| scale * dot(q, keys.row(p))).collect();
    let probs = crate::numerics::softmax_stable(&logits)?;
    Ok(weighted_sum(&positions, &probs, values))
}

fn weighted_sum(positions: &[usize], probs: &[f64], values: &Array) -> Vec<f64> {
    let mut out = vec![0.0; values.cols()];
    for (&p, w) in positions.iter().zip(probs) {
        for (o, v) in out.iter_mut().zip(values.row(p)) {
            *o += w * v;
        }
    }
    out
}

/// Softmax statistics of one query, kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct QueryStats {
    pub positions: Vec<usize>,
    pub logits: Vec<f64>,
    pub max: f64,
    pub denom: f64,
}

impl QueryStats {
    pub fn prob(&self, i: usize) -> f64 {
        (self.logits[i] - self.max).exp() / self.denom
    }
}

fn attend_segments(q: &[f64], keys: &Array, values: &Array, segments: &[Segment], scale: f64) -> Result<(Vec<f64>, QueryStats)> {
    let positions: Vec<usize> = segments.iter().flat_map(|s| s.positions.iter().copied()).collect();
    check_set("attend_online", &positions, keys, values)?;
    let mut sorted = positions.clone();
    sorted.sort_unstable();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::OverlappingSegments(w[0]));
    }
    if segments.len() == 1 {
        // same arithmetic as the oracle
        let logits: Vec<f64> = positions.iter().map(|&p| scale * dot(q, keys.row(p))).collect();
        let probs = crate::numerics::softmax_stable(&logits)?;
        let out = weighted_sum(&positions, &probs, values);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom = logits.iter().map(|l| (l - max).exp()).sum();
        return Ok((out, QueryStats { positions, logits, max, denom }));
    }
    let mut logits = Vec::with_capacity(positions.len());
    let mut acc = Partial::empty(values.cols());
    for seg in segments {
        acc = acc.merge(segment_partial(q, keys, values, &seg.positions, scale, &mut logits));
    }
    let out: Vec<f64> = acc.num.iter().map(|n| n / acc.s).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "attend_online" });
    }
    Ok((out, QueryStats { positions, logits, max: acc.m, denom: acc.s }))
}

/// Streaming path: per-segment `(max, denom, numerator)` merged pairwise.
pub fn attend_online(q: &[f64], keys: &Array, values: &Array, segments: &[Segment], scale: f64) -> Result<Vec<f64>> {
    attend_segments(q, keys, values, segments, scale).map(|r| r.0)
}

/// Output gate and output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGateParams {
    pub w_og: Array,
    pub w_out: Array,
}

/// Weights of one temporal-mixing block. No biases anywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingParams {
    pub w_q: Array,
    pub w_k: Array,
    pub w_v: Array,
    pub gate: GateParams,
    pub output: OutputGateParams,
    pub heads: usize,
    pub head_dim: usize,
}

impl MixingParams {
    pub fn init(model_dim: usize, heads: usize, head_dim: usize, std: f64, rng: &mut Rng) -> Self {
        let gd = heads * head_dim;
        MixingParams {
            w_q: Array::randn(&[model_dim, gd], std, rng),
            w_k: Array::randn(&[model_dim, gd], std, rng),
            w_v: Array::randn(&[model_dim, gd], std, rng),
            gate: GateParams { w_gate: Array::randn(&[model_dim, gd], std, rng), heads },
            output: OutputGateParams {
                w_og: Array::randn(&[model_dim, gd], std, rng),
                w_out: Array::randn(&[gd, model_dim], std, rng),
            },
            heads,
            head_dim,
        }
    }

    pub fn zeros_like(&self) -> Self {
        MixingParams {
            w_q: self.w_q.zeros_like(),
            w_k: self.w_k.zeros_like(),
            w_v: self.w_v.zeros_like(),
            gate: GateParams { w_gate: self.gate.w_gate.zeros_like(), heads: self.heads },
            output: OutputGateParams {
                w_og: self.output.w_og.zeros_like(),
                w_out: self.output.w_out.zeros_like(),
            },
            heads: self.heads,
            head_dim: self.head_dim,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn gate_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Named weight tensors in a fixed order.
    pub fn tensors(&self) -> [(&'static str, &Array); 6] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_gate", &self.gate.w_gate),
            ("w_og", &self.output.w_og),
            ("w_out", &self.output.w_out),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Array); 6] {
        [
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_gate", &mut self.gate.w_gate),
            ("w_og", &mut self.output.w_og),
            ("w_out", &mut self.output.w_out),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let (d, gd) = (self.model_dim(), self.gate_dim());
        let want_in = [d, gd];
        for (name, a) in self.tensors() {
            let want: &[usize] = if name == "w_out" { &[gd, d] } else { &want_in };
            if a.shape() != want {
                return Err(Error::shape("MixingParams", format!("{name}: {:?}, want {want:?}", a.shape())));
            }
        }
        if self.gate.heads != self.heads {
            return Err(Error::shape("MixingParams", "gate heads disagree"));
        }
        Ok(())
    }
}

/// Test/diagnostic knobs that pin gate values instead of computing them.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ForwardOptions {
    /// Replaces every recurrence gate with this constant.
    pub recurrence_gate: Option<f64>,
    /// Replaces every output-gate value with this constant.
    pub output_gate: Option<f64>,
}

/// Forward intermediates of one block (needed by backward and prefill).
#[derive(Clone, Debug)]
pub struct MixingRecord {
    pub x: Array,
    pub q: Array,
    pub k: Array,
    pub v: Array,
    pub g: Array,
    pub k_tilde: Array,
    pub v_tilde: Array,
    pub q_rot: Array,
    pub k_rot: Array,
    pub attn: Array,
    pub og: Array,
    /// `stats[head][t]`.
    pub stats: Vec<Vec<QueryStats>>,
    pub specs: Vec<SparsePatternSpec>,
    pub rope: RopeParams,
    pub options: ForwardOptions,
}

pub(crate) fn take_cols(a: &Array, lo: usize, width: usize) -> Array {
    let t = a.rows();
    let mut out = Array::zeros(&[t, width]);
    for r in 0..t {
        out.row_mut(r).copy_from_slice(&a.row(r)[lo..lo + width]);
    }
    out
}

pub(crate) fn put_cols(dst: &mut Array, src: &Array, lo: usize) {
    let w = src.cols();
    for r in 0..src.rows() {
        dst.row_mut(r)[lo..lo + w].copy_from_slice(src.row(r));
    }
}

pub fn attention_scale(head_dim: usize) -> f64 {
    1.0 / (head_dim as f64).sqrt()
}

fn check_specs(specs: &[SparsePatternSpec], heads: usize) -> Result<()> {
    if specs.len() != heads {
        return Err(Error::SpecMismatch(format!("{} specs for {heads} heads", specs.len())));
    }
    specs.iter().try_for_each(SparsePatternSpec::validate)
}

pub fn temporal_mixing_forward(
    x: &Array,
    params: &MixingParams,
    specs: &[SparsePatternSpec],
    rope: &RopeParams,
) -> Result<(Array, MixingRecord)> {
    temporal_mixing_forward_with(x, params, specs, rope, ForwardOptions::default())
}

/// Full block forward over `x[T × model_dim]`; `specs` holds one pattern per
/// head.
pub fn temporal_mixing_forward_with(
    x: &Array,
    params: &MixingParams,
    specs: &[SparsePatternSpec],
    rope: &RopeParams,
    options: ForwardOptions,
) -> Result<(Array, MixingRecord)> {
    params.validate()?;
    check_specs(specs, params.heads)?;
    if x.shape().len() != 2 || x.cols() != params.model_dim() {
        return Err(Error::shape("temporal_mixing_forward", format!("x {:?}", x.shape())));
    }
    let (t_len, hd, gd) = (x.rows(), params.head_dim, params.gate_dim());
    if rope.enabled && rope.head_dim != hd {
        return Err(Error::shape("temporal_mixing_forward", "rope head_dim differs from block head_dim"));
    }
    let q = matmul(x, &params.w_q)?;
    let k = matmul(x, &params.w_k)?;
    let v = matmul(x, &params.w_v)?;
    let g = match options.recurrence_gate {
        Some(c) => Array::filled(&[t_len, gd], c),
        None => gates_from_input(x, &params.gate)?.reshape(&[t_len, gd])?,
    };

    let mut k_tilde = Array::zeros(&[t_len, gd]);
    let mut v_tilde = Array::zeros(&[t_len, gd]);
    for (h, spec) in specs.iter().enumerate() {
        let gh = take_cols(&g, h * hd, hd);
        let kt = scan_windowed(&take_cols(&k, h * hd, hd), &gh, spec.recurrence_window)?;
        let vt = scan_windowed(&take_cols(&v, h * hd, hd), &gh, spec.recurrence_window)?;
        put_cols(&mut k_tilde, &kt, h * hd);
        put_cols(&mut v_tilde, &vt, h * hd);
    }

    let mut q_rot = q.clone();
    let mut k_rot = k_tilde.clone();
    for t in 0..t_len {
        for h in 0..params.heads {
            rope.rotate(&mut q_rot.row_mut(t)[h * hd..(h + 1) * hd], t, false);
            rope.rotate(&mut k_rot.row_mut(t)[h * hd..(h + 1) * hd], t, false);
        }
    }

    let scale = attention_scale(hd);
    let mut attn = Array::zeros(&[t_len, gd]);
    let mut stats = Vec::with_capacity(params.heads);
    for (h, spec) in specs.iter().enumerate() {
        let qh = take_cols(&q_rot, h * hd, hd);
        let kh = take_cols(&k_rot, h * hd, hd);
        let vh = take_cols(&v_tilde, h * hd, hd);
        let mut head_stats = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let set = attended_set(t, spec, qh.row(t), &kh)?;
            let (o, st) = attend_segments(qh.row(t), &kh, &vh, &segments_of(&set), scale)?;
            attn.row_mut(t)[h * hd..(h + 1) * hd].copy_from_slice(&o);
            head_stats.push(st);
        }
        stats.push(head_stats);
    }

    let og = match options.output_gate {
        Some(c) => Array::filled(&[t_len, gd], c),
        None => {
            let mut z = matmul(x, &params.output.w_og)?;
            z.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
            z
        }
    };
    let mut gated = attn.clone();
    gated.data_mut().iter_mut().zip(og.data()).for_each(|(a, o)| *a *= o);
    let y = matmul(&gated, &params.output.w_out)?;

    let record = MixingRecord {
        x: x.clone(),
        q,
        k,
        v,
        g,
        k_tilde,
        v_tilde,
        q_rot,
        k_rot,
        attn,
        og,
        stats,
        specs: specs.to_vec(),
        rope: *rope,
        options,
    };
    Ok((y, record))
}

/// Reverse pass of [`temporal_mixing_forward_with`]. Returns parameter
/// gradients (same layout as `params`) and the input gradient. Top-k block
/// selection is treated as a constant.
pub fn temporal_mixing_backward(
    grad_out: &Array,
    record: &MixingRecord,
    params: &MixingParams,
    specs: &[SparsePatternSpec],
) -> Result<(MixingParams, Array)> {
    if specs != record.specs.as_slice() {
        return Err(Error::SpecMismatch("backward specs differ from the recorded forward".into()));
    }
    if record.stats.len() != params.heads {
        return Err(Error::MissingRecord("attention statistics".into()));
    }
    let x = &record.x;
    let (t_len, hd, gd) = (x.rows(), params.head_dim, params.gate_dim());
    if grad_out.shape() != [t_len, params.model_dim()] {
        return Err(Error::shape("temporal_mixing_backward", format!("grad {:?}", grad_out.shape())));
    }
    let mut grads = params.zeros_like();

    let mut gated = record.attn.clone();
    gated.data_mut().iter_mut().zip(record.og.data()).for_each(|(a, o)| *a *= o);
    grads.output.w_out = matmul_tn(&gated, grad_out)?;
    let d_gated = matmul_nt(grad_out, &params.output.w_out)?;

    let mut d_attn = d_gated.clone();
    d_attn.data_mut().iter_mut().zip(record.og.data()).for_each(|(d, o)| *d *= o);
    let mut dx = Array::zeros(&[t_len, params.model_dim()]);
    if record.options.output_gate.is_none() {
        let mut dz = d_gated;
        for ((d, a), o) in dz.data_mut().iter_mut().zip(record.attn.data()).zip(record.og.data()) {
            *d *= a * o * (1.0 - o);
        }
        grads.output.w_og = matmul_tn(x, &dz)?;
        dx.add_scaled(&matmul_nt(&dz, &params.output.w_og)?, 1.0)?;
    }

    let scale = attention_scale(hd);
    let mut dq_rot = Array::zeros(&[t_len, gd]);
    let mut dk_rot = Array::zeros(&[t_len, gd]);
    let mut dv_tilde = Array::zeros(&[t_len, gd]);
    for h in 0..params.heads {
        let cols = h * hd..(h + 1) * hd;
        for t in 0..t_len {
            let st = &record.stats[h][t];
            let dout = &d_attn.row(t)[cols.clone()];
            let q = &record.q_rot.row(t)[cols.clone()];
            let probs: Vec<f64> = (0..st.positions.len()).map(|i| st.prob(i)).collect();
            let dps: Vec<f64> = st
                .positions
                .iter()
                .map(|&p| dot(dout, &record.v_tilde.row(p)[cols.clone()]))
                .collect();
            let mean: f64 = probs.iter().zip(&dps).map(|(p, d)| p * d).sum();
            for (i, &p) in st.positions.iter().enumerate() {
                let dl = probs[i] * (dps[i] - mean) * scale;
                for c in 0..hd {
                    dq_rot.row_mut(t)[h * hd + c] += dl * record.k_rot.row(p)[h * hd + c];
                    dk_rot.row_mut(p)[h * hd + c] += dl * q[c];
                    dv_tilde.row_mut(p)[h * hd + c] += probs[i] * dout[c];
                }
            }
        }
    }

    // RoPE is orthogonal: its adjoint is the inverse rotation.
    for t in 0..t_len {
        for h in 0..params.heads {
            record.rope.rotate(&mut dq_rot.row_mut(t)[h * hd..(h + 1) * hd], t, true);
            record.rope.rotate(&mut dk_rot.row_mut(t)[h * hd..(h + 1) * hd], t, true);
        }
    }
    let dq = dq_rot;
    let dk_tilde = dk_rot;

    let mut dk = Array::zeros(&[t_len, gd]);
    let mut dv = Array::zeros(&[t_len, gd]);
    let mut dg = Array::zeros(&[t_len, gd]);
    for (h, spec) in specs.iter().enumerate() {
        let lo = h * hd;
        let gh = take_cols(&record.g, lo, hd);
        let (dkh, dgk) = scan_windowed_backward(
            &take_cols(&dk_tilde, lo, hd),
            &take_cols(&record.k, lo, hd),
            &gh,
            &take_cols(&record.k_tilde, lo, hd),
            spec.recurrence_window,
        )?;
        let (dvh, dgv) = scan_windowed_backward(
            &take_cols(&dv_tilde, lo, hd),
            &take_cols(&record.v, lo, hd),
            &gh,
            &take_cols(&record.v_tilde, lo, hd),
            spec.recurrence_window,
        )?;
        let mut dgh = dgk;
        dgh.add_scaled(&dgv, 1.0)?;
        put_cols(&mut dk, &dkh, lo);
        put_cols(&mut dv, &dvh, lo);
        put_cols(&mut dg, &dgh, lo);
    }

    if record.options.recurrence_gate.is_none() {
        let mut dz = dg;
        for (d, g) in dz.data_mut().iter_mut().zip(record.g.data()) {
            *d *= g * (1.0 - g);
        }
        grads.gate.w_gate = matmul_tn(x, &dz)?;
        dx.add_scaled(&matmul_nt(&dz, &params.gate.w_gate)?, 1.0)?;
    }
    grads.w_q = matmul_tn(x, &dq)?;
    grads.w_k = matmul_tn(x, &dk)?;
    grads.w_v = matmul_tn(x, &dv)?;
    dx.add_scaled(&matmul_nt(&dq, &params.w_q)?, 1.0)?;
    dx.add_scaled(&matmul_nt(&dk, &params.w_k)?, 1.0)?;
    dx.add_scaled(&matmul_nt(&dv, &params.w_v)?, 1.0)?;
    dx.check_finite("temporal_mixing_backward")?;
    Ok((grads, dx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, softmax_stable};
    use crate::patterns::{dilated_indices, BlockScoring, TopKSpec};
    use crate::recurrence::RecurrenceWindow;

    /// Textbook causal attention: full `T×T` score matrix, masked softmax.
    fn dense_causal_oracle(q: &Array, k: &Array, v: &Array, scale: f64) -> Array {
        let t = q.rows();
        let mut out = Array::zeros(&[t, v.cols()]);
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| if j <= i { scale * dot(q.row(i), k.row(j)) } else { f64::NEG_INFINITY })
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..=i {
                for c in 0..v.cols() {
                    out.row_mut(i)[c] += e[j] / z * v.row(j)[c];
                }
            }
        }
        out
    }

    #[test]
    fn oracle_examples() {
        let mut rng = Rng::new(1);
        let k = Array::randn(&[6, 4], 1.0, &mut rng);
        let v = Array::randn(&[6, 4], 1.0, &mut rng);
        let q: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let only_self = AttendedSet { query: 3, entries: vec![(3, Slot::SelfToken)] };
        assert_eq!(attend_oracle(&q, &k, &v, &only_self, 0.5).unwrap(), v.row(3));

        let same = Array::from_rows(&vec![vec![0.3, -0.1, 0.2, 0.5]; 6]).unwrap();
        let set = dilated_indices(5, &SparsePatternSpec::dense());
        let out = attend_oracle(&q, &same, &v, &set, 0.5).unwrap();
        for c in 0..4 {
            let mean: f64 = (0..6).map(|r| v.row(r)[c]).sum::<f64>() / 6.0;
            assert!((out[c] - mean).abs() < 1e-14);
        }
        let empty = AttendedSet { query: 0, entries: vec![] };
        assert!(matches!(attend_oracle(&q, &k, &v, &empty, 0.5), Err(Error::Empty { .. })));
    }

    #[test]
    fn online_split_matches_direct_softmax() {
        // keys chosen so the logits are exactly [1, 2, 3]
        let k = Array::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let v = Array::from_rows(&[vec![10.0], vec![-4.0], vec![0.5]]).unwrap();
        let segs = vec![
            Segment { slot: Slot::BlockSummary, positions: vec![0, 1] },
            Segment { slot: Slot::SelfToken, positions: vec![2] },
        ];
        let got = attend_online(&[1.0], &k, &v, &segs, 1.0).unwrap();
        let p = softmax_stable(&[1.0, 2.0, 3.0]).unwrap();
        let want = 10.0 * p[0] - 4.0 * p[1] + 0.5 * p[2];
        assert!((got[0] - want).abs() <= 1e-14);

        let one = vec![Segment { slot: Slot::BlockSummary, positions: vec![0, 1, 2] }];
        let set = AttendedSet {
            query: 2,
            entries: vec![(0, Slot::BlockSummary), (1, Slot::BlockSummary), (2, Slot::BlockSummary)],
        };
        assert_eq!(
            attend_online(&[1.0], &k, &v, &one, 1.0).unwrap(),
            attend_oracle(&[1.0], &k, &v, &set, 1.0).unwrap()
        );

        let overlapping = vec![
            Segment { slot: Slot::Sink, positions: vec![0, 1] },
            Segment { slot: Slot::SelfToken, positions: vec![1, 2] },
        ];
        assert!(matches!(
            attend_online(&[1.0], &k, &v, &overlapping, 1.0),
            Err(Error::OverlappingSegments(1))
        ));
    }

    #[test]
    fn online_matches_oracle_random_patterns() {
        for seed in 0..100 {
            let mut rng = Rng::new(seed);
            let t_len = 1 + rng.below(64);
            let k = Array::randn(&[t_len, 8], 1.5, &mut rng);
            let v = Array::randn(&[t_len, 8], 1.0, &mut rng);
            let mut spec = SparsePatternSpec::dense();
            spec.dilation = [1, 2, 4, 8][rng.below(4)];
            spec.window = [0, 2, 5][rng.below(3)];
            spec.sinks = [0, 4][rng.below(2)];
            if rng.bernoulli(0.5) {
                let scoring = if rng.bernoulli(0.5) { BlockScoring::Quest } else { BlockScoring::Moba };
                let tk = TopKSpec { block_size: spec.dilation.max(2), k: 2 + rng.below(3), scoring };
                let combine = rng.bernoulli(0.5) && spec.dilation > 1;
                spec = spec.with_topk(tk, combine);
            }
            for t in 0..t_len {
                let q: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
                let set = attended_set(t, &spec, &q, &k).unwrap();
                let a = attend_oracle(&q, &k, &v, &set, 0.35).unwrap();
                let b = attend_online(&q, &k, &v, &segments_of(&set), 0.35).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    assert!((x - y).abs() <= 1e-12, "seed {seed} t {t}");
                }
            }
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = Rng::new(3);
        let k = Array::randn(&[30, 4], 2.0, &mut rng);
        let v = Array::randn(&[30, 4], 1.0, &mut rng);
        let spec = SparsePatternSpec::dilated(4).with_window(3);
        for t in 0..30 {
            let q: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let set = attended_set(t, &spec, &q, &k).unwrap();
            let (_, st) = attend_segments(&q, &k, &v, &segments_of(&set), 0.5).unwrap();
            let total: f64 = (0..st.positions.len()).map(|i| st.prob(i)).sum();
            assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    fn small_block(seed: u64, model_dim: usize, heads: usize, hd: usize) -> MixingParams {
        let mut rng = Rng::new(seed);
        MixingParams::init(model_dim, heads, hd, 0.4, &mut rng)
    }

    #[test]
    fn dense_block_equals_vanilla_attention() {
        let (d, heads, hd, t) = (12, 2, 4, 10);
        let params = small_block(5, d, heads, hd);
        let mut rng = Rng::new(6);
        let x = Array::randn(&[t, d], 1.0, &mut rng);
        let rope = RopeParams::new(hd);
        let specs = vec![SparsePatternSpec::dense(); heads];
        let opts = ForwardOptions { recurrence_gate: Some(0.0), output_gate: Some(1.0) };
        let (y, _) = temporal_mixing_forward_with(&x, &params, &specs, &rope, opts).unwrap();

        // plain softmax attention block: projections, RoPE, causal attention, output projection
        let q = matmul(&x, &params.w_q).unwrap();
        let k = matmul(&x, &params.w_k).unwrap();
        let v = matmul(&x, &params.w_v).unwrap();
        let mut o = Array::zeros(&[t, heads * hd]);
        for h in 0..heads {
            let pos: Vec<usize> = (0..t).collect();
            let qh = crate::numerics::rope_apply(&take_cols(&q, h * hd, hd), &pos, &rope).unwrap();
            let kh = crate::numerics::rope_apply(&take_cols(&k, h * hd, hd), &pos, &rope).unwrap();
            let oh = dense_causal_oracle(&qh, &kh, &take_cols(&v, h * hd, hd), attention_scale(hd));
            put_cols(&mut o, &oh, h * hd);
        }
        let want = matmul(&o, &params.output.w_out).unwrap();
        assert!(y.max_abs_diff(&want) <= 1e-10);
    }

    #[test]
    fn dense_backward_matches_matrix_form() {
        let (d, heads, hd, t) = (10, 2, 4, 9);
        let params = small_block(21, d, heads, hd);
        let mut rng = Rng::new(22);
        let x = Array::randn(&[t, d], 1.0, &mut rng);
        let rope = RopeParams::new(hd);
        let specs = vec![SparsePatternSpec::dense(); heads];
        let opts = ForwardOptions { recurrence_gate: Some(0.0), output_gate: Some(1.0) };
        let (_, rec) = temporal_mixing_forward_with(&x, &params, &specs, &rope, opts).unwrap();
        let ones = Array::filled(&[t, d], 1.0);
        let (grads, dx) = temporal_mixing_backward(&ones, &rec, &params, &specs).unwrap();

        // matrix-form attention backward: dS = P ⊙ (dP − rowsum(dP ⊙ P))
        let scale = attention_scale(hd);
        let pos: Vec<usize> = (0..t).collect();
        let q = matmul(&x, &params.w_q).unwrap();
        let k = matmul(&x, &params.w_k).unwrap();
        let v = matmul(&x, &params.w_v).unwrap();
        let d_o = matmul_nt(&ones, &params.output.w_out).unwrap();
        let (mut dq, mut dk, mut dv) = (q.zeros_like(), k.zeros_like(), v.zeros_like());
        let mut o = Array::zeros(&[t, heads * hd]);
        for h in 0..heads {
            let qh = crate::numerics::rope_apply(&take_cols(&q, h * hd, hd), &pos, &rope).unwrap();
            let kh = crate::numerics::rope_apply(&take_cols(&k, h * hd, hd), &pos, &rope).unwrap();
            let vh = take_cols(&v, h * hd, hd);
            let mut s = matmul_nt(&qh, &kh).unwrap();
            s.scale(scale);
            let mut p = Array::zeros(&[t, t]);
            for i in 0..t {
                let probs = softmax_stable(&s.row(i)[..=i]).unwrap();
                p.row_mut(i)[..=i].copy_from_slice(&probs);
            }
            let doh = take_cols(&d_o, h * hd, hd);
            put_cols(&mut o, &matmul(&p, &vh).unwrap(), h * hd);
            let dp = matmul_nt(&doh, &vh).unwrap();
            let mut ds = Array::zeros(&[t, t]);
            for i in 0..t {
                let c: f64 = (0..t).map(|j| dp.row(i)[j] * p.row(i)[j]).sum();
                for j in 0..t {
                    ds.row_mut(i)[j] = p.row(i)[j] * (dp.row(i)[j] - c) * scale;
                }
            }
            let mut dqh = matmul(&ds, &kh).unwrap();
            let mut dkh = matmul_tn(&ds, &qh).unwrap();
            for r in 0..t {
                rope.rotate(dqh.row_mut(r), r, true);
                rope.rotate(dkh.row_mut(r), r, true);
            }
            put_cols(&mut dq, &dqh, h * hd);
            put_cols(&mut dk, &dkh, h * hd);
            put_cols(&mut dv, &matmul_tn(&p, &doh).unwrap(), h * hd);
        }
        let checks = [
            (&grads.w_q, matmul_tn(&x, &dq).unwrap()),
            (&grads.w_k, matmul_tn(&x, &dk).unwrap()),
            (&grads.w_v, matmul_tn(&x, &dv).unwrap()),
            (&grads.output.w_out, matmul_tn(&o, &ones).unwrap()),
        ];
        for (got, want) in checks {
            assert!(got.max_abs_diff(&want) <= 1e-8);
        }
        let mut want_dx = matmul_nt(&dq, &params.w_q).unwrap();
        want_dx.add_scaled(&matmul_nt(&dk, &params.w_k).unwrap(), 1.0).unwrap();
        want_dx.add_scaled(&matmul_nt(&dv, &params.w_v).unwrap(), 1.0).unwrap();
        assert!(dx.max_abs_diff(&want_dx) <= 1e-8);
    }

    #[test]
    fn dense_spec_equals_dense_attention_over_gated_kv() {
        let (d, heads, hd, t) = (8, 2, 4, 17);
        let params = small_block(8, d, heads, hd);
        let mut rng = Rng::new(9);
        let x = Array::randn(&[t, d], 1.0, &mut rng);
        let rope = RopeParams::new(hd);
        let specs = vec![SparsePatternSpec::dense(); heads];
        let (_, rec) = temporal_mixing_forward(&x, &params, &specs, &rope).unwrap();
        for h in 0..heads {
            let want = dense_causal_oracle(
                &take_cols(&rec.q_rot, h * hd, hd),
                &take_cols(&rec.k_rot, h * hd, hd),
                &take_cols(&rec.v_tilde, h * hd, hd),
                attention_scale(hd),
            );
            assert!(take_cols(&rec.attn, h * hd, hd).max_abs_diff(&want) <= 1e-12);
        }
    }

    #[test]
    fn trivial_forward_cases() {
        let (d, heads, hd) = (6, 2, 2);
        let mut params = small_block(1, d, heads, hd);
        let mut rng = Rng::new(2);
        let x = Array::randn(&[1, d], 1.0, &mut rng);
        let rope = RopeParams::new(hd);
        let specs = vec![SparsePatternSpec::dilated(4); heads];
        let (y, rec) = temporal_mixing_forward(&x, &params, &specs, &rope).unwrap();
        // T=1: attention returns the single gated value
        assert!(rec.attn.max_abs_diff(&rec.v_tilde) <= 1e-15);
        let mut routed = rec.v_tilde.clone();
        routed.data_mut().iter_mut().zip(rec.og.data()).for_each(|(a, o)| *a *= o);
        assert!(y.max_abs_diff(&matmul(&routed, &params.output.w_out).unwrap()) <= 1e-15);

        params.output.w_out = params.output.w_out.zeros_like();
        let x = Array::randn(&[9, d], 1.0, &mut rng);
        let (y, _) = temporal_mixing_forward(&x, &params, &specs, &rope).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let too_few = vec![SparsePatternSpec::dense()];
        assert!(matches!(
            temporal_mixing_forward(&x, &params, &too_few, &rope),
            Err(Error::SpecMismatch(_))
        ));
    }

    fn rel_err(a: &Array, b: &Array) -> f64 {
        let den = a.data().iter().chain(b.data()).fold(0.0f64, |m, v| m.max(v.abs()));
        a.max_abs_diff(b) / den.max(1e-12)
    }

    fn check_block_gradients(specs: Vec<SparsePatternSpec>, seed: u64) {
        let (d, heads, hd, t) = (16, 2, 8, 12);
        let params = small_block(seed, d, heads, hd);
        let mut rng = Rng::new(seed + 1000);
        let x = Array::randn(&[t, d], 1.0, &mut rng);
        let w = Array::randn(&[t, d], 1.0, &mut rng);
        let rope = RopeParams::new(hd);
        let loss = |p: &MixingParams, x: &Array| -> f64 {
            let (y, _) = temporal_mixing_forward(x, p, &specs, &rope).unwrap();
            dot(y.data(), w.data())
        };
        let (_, rec) = temporal_mixing_forward(&x, &params, &specs, &rope).unwrap();
        let (grads, dx) = temporal_mixing_backward(&w, &rec, &params, &specs).unwrap();
        let fdx = finite_diff_grad(|xx| loss(&params, xx), &x, 1e-5).unwrap();
        assert!(rel_err(&dx, &fdx) <= 1e-4, "dx {}", rel_err(&dx, &fdx));
        for (i, (name, g)) in grads.tensors().into_iter().enumerate() {
            let fd = finite_diff_grad(
                |a| {
                    let mut p = params.clone();
                    *p.tensors_mut()[i].1 = a.clone();
                    loss(&p, &x)
                },
                params.tensors()[i].1,
                1e-5,
            )
            .unwrap();
            let e = rel_err(g, &fd);
            assert!(e <= 1e-4, "{name}: {e}");
        }
    }

    #[test]
    fn backward_matches_finite_differences_dense() {
        check_block_gradients(vec![SparsePatternSpec::dense(); 2], 11);
    }

    #[test]
    fn backward_matches_finite_differences_dilated() {
        let s = SparsePatternSpec::dilated(4).with_window(2);
        check_block_gradients(vec![s, SparsePatternSpec::dilated(4)], 12);
    }

    #[test]
    fn backward_matches_finite_differences_mixed_heads_finite_window() {
        let a = SparsePatternSpec::dense().with_recurrence(RecurrenceWindow::Finite(3)).with_sinks(0);
        let mut a = a;
        a.active_length = 3;
        check_block_gradients(vec![a, SparsePatternSpec::dilated(2)], 13);
    }

    #[test]
    fn backward_zero_grad_and_spec_mismatch() {
        let (d, heads, hd, t) = (8, 2, 4, 7);
        let params = small_block(4, d, heads, hd);
        let mut rng = Rng::new(4);
        let x = Array::randn(&[t, d], 1.0, &mut rng);
        let specs = vec![SparsePatternSpec::dilated(2); heads];
        let rope = RopeParams::new(hd);
        let (_, rec) = temporal_mixing_forward(&x, &params, &specs, &rope).unwrap();
        let (g, dx) = temporal_mixing_backward(&Array::zeros(&[t, d]), &rec, &params, &specs).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(g.tensors().iter().all(|(_, a)| a.data().iter().all(|&v| v == 0.0)));
        let other = vec![SparsePatternSpec::dense(); heads];
        assert!(matches!(
            temporal_mixing_backward(&Array::zeros(&[t, d]), &rec, &params, &other),
            Err(Error::SpecMismatch(_))
        ));
    }
}
