//! Input-gated linear recurrence over attention keys and values:
//!
//! ```text
//! h_l = g_l ⊙ h_{l-1} + (1 - g_l) ⊙ x_l
//! ```
//!
//! The same gate tensor drives the key and value streams. Four evaluation
//! forms are provided: a sequential loop, a balanced-tree associative scan,
//! a fixed-length overlapped window, and a single decode step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, sigmoid, Array};

/// Bias-free gate projection `model_dim -> heads·head_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub w_gate: Array,
    pub heads: usize,
}

/// Length of the recurrence window each token sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RecurrenceWindow {
    /// One scan over the whole sequence.
    #[default]
    Full,
    /// Each token sees only the last `n` tokens (itself included).
    Finite(usize),
}

impl RecurrenceWindow {
    pub fn covers(&self, len: usize) -> bool {
        match self {
            RecurrenceWindow::Full => true,
            RecurrenceWindow::Finite(n) => *n >= len,
        }
    }
}

// Serialized as the string "FULL" or a positive integer.
impl Serialize for RecurrenceWindow {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            RecurrenceWindow::Full => s.serialize_str("FULL"),
            RecurrenceWindow::Finite(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for RecurrenceWindow {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(0) => Err(serde::de::Error::custom("recurrence_window must be >= 1")),
            Raw::Int(n) => Ok(RecurrenceWindow::Finite(n as usize)),
            Raw::Str(s) if s.eq_ignore_ascii_case("full") => Ok(RecurrenceWindow::Full),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "recurrence_window must be \"FULL\" or a positive integer, got {s:?}"
            ))),
        }
    }
}

const GATE_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// `sigmoid(x · w_gate)`, returned as `[T × heads × head_dim]`. Saturated
/// gates are nudged one ulp inside (0, 1) so the state never freezes.
pub fn gates_from_input(x: &Array, params: &GateParams) -> Result<Array> {
    let gate_dim = params.w_gate.shape().get(1).copied().unwrap_or(0);
    if params.heads == 0 || gate_dim % params.heads != 0 {
        return Err(Error::shape(
            "gates_from_input",
            format!("gate_dim {gate_dim} not divisible by {} heads", params.heads),
        ));
    }
    let mut z = matmul(x, &params.w_gate)?;
    z.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v).clamp(f64::MIN_POSITIVE, GATE_MAX));
    let t = z.rows();
    z.reshape(&[t, params.heads, gate_dim / params.heads])
}

fn check_pair(op: &'static str, x: &Array, g: &Array) -> Result<(usize, usize)> {
    if x.shape() != g.shape() {
        return Err(Error::shape(op, format!("x {:?} vs g {:?}", x.shape(), g.shape())));
    }
    x.check_finite(op)?;
    g.check_finite(op)?;
    Ok((x.rows(), x.cols()))
}

/// Reference left-to-right evaluation with initial state `init`.
pub fn scan_sequential(x: &Array, g: &Array, init: &[f64]) -> Result<Array> {
    let (t, d) = check_pair("scan_sequential", x, g)?;
    if init.len() != d {
        return Err(Error::shape("scan_sequential", format!("init has {} channels, want {d}", init.len())));
    }
    let mut out = x.zeros_like();
    let mut h = init.to_vec();
    for l in 0..t {
        let (xr, gr) = (x.row(l), g.row(l));
        for c in 0..d {
            h[c] = gr[c] * h[c] + (1.0 - gr[c]) * xr[c];
        }
        out.row_mut(l).copy_from_slice(&h);
    }
    Ok(out)
}

/// Associative-scan evaluation. Each step is the affine map
/// `h ↦ a·h + b` with `a = g_l`, `b = (1-g_l)·x_l`; prefixes of these maps
/// are formed on a balanced binary tree with fixed pairing, then applied
/// to `init`.
pub fn scan_parallel(x: &Array, g: &Array, init: &[f64]) -> Result<Array> {
    let (t, d) = check_pair("scan_parallel", x, g)?;
    if init.len() != d {
        return Err(Error::shape("scan_parallel", format!("init has {} channels, want {d}", init.len())));
    }
    if t == 0 {
        return Ok(x.clone());
    }
    let a = g.data().to_vec();
    let b: Vec<f64> = x.data().iter().zip(g.data()).map(|(xv, gv)| (1.0 - gv) * xv).collect();
    let (pa, pb) = tree_scan(a, b, t, d);
    let mut out = x.zeros_like();
    for l in 0..t {
        let row = out.row_mut(l);
        for c in 0..d {
            row[c] = pa[l * d + c] * init[c] + pb[l * d + c];
        }
    }
    Ok(out)
}

/// Inclusive prefix composition of `n` affine maps of width `d`.
/// `(a2,b2) ∘ (a1,b1) = (a2·a1, a2·b1 + b2)`.
fn tree_scan(a: Vec<f64>, b: Vec<f64>, n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    if n == 1 {
        return (a, b);
    }
    let half = n / 2;
    let mut ra = vec![0.0; half * d];
    let mut rb = vec![0.0; half * d];
    for i in 0..half {
        let (e1, e2) = (2 * i * d, (2 * i + 1) * d);
        for c in 0..d {
            ra[i * d + c] = a[e2 + c] * a[e1 + c];
            rb[i * d + c] = a[e2 + c] * b[e1 + c] + b[e2 + c];
        }
    }
    let (sa, sb) = tree_scan(ra, rb, half, d);
    let mut oa = vec![0.0; n * d];
    let mut ob = vec![0.0; n * d];
    for i in 0..n {
        let o = i * d;
        if i == 0 {
            oa[..d].copy_from_slice(&a[..d]);
            ob[..d].copy_from_slice(&b[..d]);
        } else if i % 2 == 1 {
            let s = (i - 1) / 2 * d;
            oa[o..o + d].copy_from_slice(&sa[s..s + d]);
            ob[o..o + d].copy_from_slice(&sb[s..s + d]);
        } else {
            let s = (i / 2 - 1) * d;
            for c in 0..d {
                oa[o + c] = a[o + c] * sa[s + c];
                ob[o + c] = a[o + c] * sb[s + c] + b[o + c];
            }
        }
    }
    (oa, ob)
}

/// Each output row `t` is the zero-initialised scan restricted to the window
/// `[max(0, t-L+1), t]`.
pub fn scan_overlapped(x: &Array, g: &Array, window: usize) -> Result<Array> {
    let (t, d) = check_pair("scan_overlapped", x, g)?;
    if window < 1 {
        return Err(Error::invalid("scan_overlapped", "window must be >= 1"));
    }
    if window >= t {
        return scan_sequential(x, g, &vec![0.0; d]);
    }
    let mut out = x.zeros_like();
    let mut h = vec![0.0; d];
    for l in 0..t {
        h.iter_mut().for_each(|v| *v = 0.0);
        for s in (l + 1).saturating_sub(window)..=l {
            let (xr, gr) = (x.row(s), g.row(s));
            for c in 0..d {
                h[c] = gr[c] * h[c] + (1.0 - gr[c]) * xr[c];
            }
        }
        out.row_mut(l).copy_from_slice(&h);
    }
    Ok(out)
}

/// Dispatches to the full or overlapped form with zero initial state.
pub fn scan_windowed(x: &Array, g: &Array, window: RecurrenceWindow) -> Result<Array> {
    match window {
        RecurrenceWindow::Full => scan_parallel(x, g, &vec![0.0; x.cols()]),
        RecurrenceWindow::Finite(n) => scan_overlapped(x, g, n),
    }
}

/// Everything the reverse pass of a full scan needs.
#[derive(Clone, Debug)]
pub struct ScanRecord {
    pub x: Array,
    pub g: Array,
    pub init: Vec<f64>,
    pub out: Array,
}

impl ScanRecord {
    pub fn forward(x: &Array, g: &Array, init: &[f64]) -> Result<Self> {
        let out = scan_sequential(x, g, init)?;
        Ok(ScanRecord { x: x.clone(), g: g.clone(), init: init.to_vec(), out })
    }
}

#[derive(Clone, Debug)]
pub struct ScanGrads {
    pub dx: Array,
    pub dg: Array,
    pub dinit: Vec<f64>,
}

/// Adjoint of the full scan.
pub fn scan_backward(grad_out: &Array, record: &ScanRecord) -> Result<ScanGrads> {
    let ScanRecord { x, g, init, out } = record;
    if out.shape() != x.shape() || out.is_empty() && !x.is_empty() {
        return Err(Error::MissingRecord("scan outputs not recorded".into()));
    }
    if grad_out.shape() != x.shape() {
        return Err(Error::shape(
            "scan_backward",
            format!("grad {:?} vs forward {:?}", grad_out.shape(), x.shape()),
        ));
    }
    let (t, d) = (x.rows(), x.cols());
    let mut dx = x.zeros_like();
    let mut dg = x.zeros_like();
    let mut carry = vec![0.0; d];
    for l in (0..t).rev() {
        let (xr, gr, go) = (x.row(l), g.row(l), grad_out.row(l));
        let prev = if l == 0 { init.as_slice() } else { out.row(l - 1) };
        for c in 0..d {
            let lam = go[c] + carry[c];
            dx.row_mut(l)[c] = (1.0 - gr[c]) * lam;
            dg.row_mut(l)[c] = lam * (prev[c] - xr[c]);
            carry[c] = gr[c] * lam;
        }
    }
    Ok(ScanGrads { dx, dg, dinit: carry })
}

/// Adjoint of [`scan_windowed`] with zero initial state. Returns `(dx, dg)`.
pub fn scan_windowed_backward(
    grad_out: &Array,
    x: &Array,
    g: &Array,
    out: &Array,
    window: RecurrenceWindow,
) -> Result<(Array, Array)> {
    let (t, d) = check_pair("scan_windowed_backward", x, g)?;
    if grad_out.shape() != x.shape() {
        return Err(Error::shape("scan_windowed_backward", "gradient shape"));
    }
    if !matches!(window, RecurrenceWindow::Finite(n) if n < t) {
        let rec = ScanRecord { x: x.clone(), g: g.clone(), init: vec![0.0; d], out: out.clone() };
        let gr = scan_backward(grad_out, &rec)?;
        return Ok((gr.dx, gr.dg));
    }
    let RecurrenceWindow::Finite(len) = window else { unreachable!() };
    let mut dx = x.zeros_like();
    let mut dg = x.zeros_like();
    let mut states = vec![0.0; (len + 1) * d];
    let mut lam = vec![0.0; d];
    for l in 0..t {
        let start = (l + 1).saturating_sub(len);
        // states[j] is the window-local state after absorbing start+j-1
        states[..d].iter_mut().for_each(|v| *v = 0.0);
        for (j, s) in (start..=l).enumerate() {
            let (xr, gr) = (x.row(s), g.row(s));
            for c in 0..d {
                states[(j + 1) * d + c] = gr[c] * states[j * d + c] + (1.0 - gr[c]) * xr[c];
            }
        }
        lam.copy_from_slice(grad_out.row(l));
        for (j, s) in (start..l + 1).enumerate().rev() {
            let (xr, gr) = (x.row(s), g.row(s));
            for c in 0..d {
                dx.row_mut(s)[c] += (1.0 - gr[c]) * lam[c];
                dg.row_mut(s)[c] += lam[c] * (states[j * d + c] - xr[c]);
                lam[c] *= gr[c];
            }
        }
    }
    Ok((dx, dg))
}

/// Running decode-time recurrence state for all heads of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrenceState {
    pub k_state: Array,
    pub v_state: Array,
    /// Position of the last absorbed token; `None` before the first one.
    pub step: Option<usize>,
}

impl RecurrenceState {
    pub fn zeros(heads: usize, head_dim: usize) -> Self {
        RecurrenceState {
            k_state: Array::zeros(&[heads, head_dim]),
            v_state: Array::zeros(&[heads, head_dim]),
            step: None,
        }
    }

    pub fn next_position(&self) -> usize {
        self.step.map_or(0, |s| s + 1)
    }
}

/// Absorbs the token at position `t` into the state.
pub fn state_step(
    state: RecurrenceState,
    k_t: &[f64],
    v_t: &[f64],
    g_t: &[f64],
    t: usize,
) -> Result<RecurrenceState> {
    let mut s = state;
    state_step_in_place(&mut s, k_t, v_t, g_t, t)?;
    Ok(s)
}

pub fn state_step_in_place(
    state: &mut RecurrenceState,
    k_t: &[f64],
    v_t: &[f64],
    g_t: &[f64],
    t: usize,
) -> Result<()> {
    let expected = state.next_position();
    if t != expected {
        return Err(Error::OutOfOrder { expected, got: t });
    }
    let n = state.k_state.len();
    if k_t.len() != n || v_t.len() != n || g_t.len() != n {
        return Err(Error::shape("state_step", format!("state has {n} channels")));
    }
    if k_t.iter().chain(v_t).chain(g_t).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "state_step" });
    }
    let ks = state.k_state.data_mut();
    for c in 0..n {
        ks[c] = g_t[c] * ks[c] + (1.0 - g_t[c]) * k_t[c];
    }
    let vs = state.v_state.data_mut();
    for c in 0..n {
        vs[c] = g_t[c] * vs[c] + (1.0 - g_t[c]) * v_t[c];
    }
    state.step = Some(t);
    Ok(())
}
