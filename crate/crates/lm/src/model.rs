//! Decoder LM: token embedding, `layers × (RMSNorm → mixing block → residual,
//! RMSNorm → SwiGLU → residual)`, final RMSNorm and LM head. No biases.

use serde::{Deserialize, Serialize};

use ratplus_core::attention::{temporal_mixing_backward, temporal_mixing_forward, MixingParams, MixingRecord};
use ratplus_core::numerics::{matmul, matmul_nt, matmul_tn, rms_norm, rms_norm_backward, silu, silu_grad, RMS_EPS};
use ratplus_core::patterns::PatternAssignment;
use ratplus_core::{Array, Error, Result, Rng, RopeParams};

fn default_init_std() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub rope: RopeParams,
    pub pattern_assignment: PatternAssignment,
    pub context_length: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub tied_head: bool,
}

/// SwiGLU width for a given model width: `8/3 · d`, rounded.
pub fn default_ffn_dim(model_dim: usize) -> usize {
    (8 * model_dim + 1) / 3
}

impl ModelConfig {
    /// Uniform dense assignment, RoPE on, untied head.
    pub fn small(vocab: usize, model_dim: usize, layers: usize, heads: usize, context_length: usize) -> Self {
        let head_dim = model_dim / heads.max(1);
        ModelConfig {
            vocab,
            model_dim,
            layers,
            heads,
            head_dim,
            ffn_dim: default_ffn_dim(model_dim),
            rope: RopeParams::new(head_dim),
            pattern_assignment: PatternAssignment::uniform(layers, Default::default()),
            context_length,
            init_std: default_init_std(),
            tied_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let op = "ModelConfig";
        for (name, v) in [
            ("vocab", self.vocab),
            ("model_dim", self.model_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("context_length", self.context_length),
        ] {
            if v == 0 {
                return Err(Error::invalid(op, format!("{name} must be positive")));
            }
        }
        if self.rope.head_dim != self.head_dim {
            return Err(Error::invalid(op, "rope.head_dim must equal head_dim"));
        }
        if self.rope.enabled {
            self.rope.validate()?;
        }
        if !(self.init_std > 0.0) {
            return Err(Error::invalid(op, "init_std must be positive"));
        }
        self.pattern_assignment.validate(self.layers, self.heads)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub norm1: Array,
    pub mixing: MixingParams,
    pub norm2: Array,
    pub ffn_gate: Array,
    pub ffn_up: Array,
    pub ffn_down: Array,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Array,
    pub layers: Vec<LayerParams>,
    pub norm_f: Array,
    /// `None` when the head is tied to the embedding.
    pub head: Option<Array>,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let (d, f, std) = (config.model_dim, config.ffn_dim, config.init_std);
        let embed = Array::randn(&[config.vocab, d], std, &mut rng);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                norm1: Array::filled(&[d], 1.0),
                mixing: MixingParams::init(d, config.heads, config.head_dim, std, &mut rng),
                norm2: Array::filled(&[d], 1.0),
                ffn_gate: Array::randn(&[d, f], std, &mut rng),
                ffn_up: Array::randn(&[d, f], std, &mut rng),
                ffn_down: Array::randn(&[f, d], std, &mut rng),
            })
            .collect();
        let head = (!config.tied_head).then(|| Array::randn(&[d, config.vocab], std, &mut rng));
        Ok(Model { norm_f: Array::filled(&[d], 1.0), embed, layers, head, config })
    }

    /// Same structure, every tensor zero (gradient / moment buffers).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|(_, a)| a.data_mut().fill(0.0));
        z
    }

    pub fn tensors(&self) -> Vec<(String, &Array)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.norm1"), &l.norm1));
            for (n, a) in l.mixing.tensors() {
                out.push((format!("layers.{i}.mix.{n}"), a));
            }
            out.push((format!("layers.{i}.norm2"), &l.norm2));
            out.push((format!("layers.{i}.ffn_gate"), &l.ffn_gate));
            out.push((format!("layers.{i}.ffn_up"), &l.ffn_up));
            out.push((format!("layers.{i}.ffn_down"), &l.ffn_down));
        }
        out.push(("norm_f".to_string(), &self.norm_f));
        if let Some(h) = &self.head {
            out.push(("head".to_string(), h));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.norm1"), &mut l.norm1));
            for (n, a) in l.mixing.tensors_mut() {
                out.push((format!("layers.{i}.mix.{n}"), a));
            }
            out.push((format!("layers.{i}.norm2"), &mut l.norm2));
            out.push((format!("layers.{i}.ffn_gate"), &mut l.ffn_gate));
            out.push((format!("layers.{i}.ffn_up"), &mut l.ffn_up));
            out.push((format!("layers.{i}.ffn_down"), &mut l.ffn_down));
        }
        out.push(("norm_f".to_string(), &mut self.norm_f));
        if let Some(h) = &mut self.head {
            out.push(("head".to_string(), h));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, a)| a.len()).sum()
    }
}

fn norm_rows(x: &Array, w: &Array) -> Result<Array> {
    let mut out = x.zeros_like();
    for r in 0..x.rows() {
        out.row_mut(r).copy_from_slice(&rms_norm(x.row(r), w.data(), RMS_EPS)?);
    }
    Ok(out)
}

/// Returns `dx` and accumulates into `dw`.
fn norm_rows_backward(x: &Array, w: &Array, dy: &Array, dw: &mut Array) -> Array {
    let mut dx = x.zeros_like();
    for r in 0..x.rows() {
        rms_norm_backward(x.row(r), w.data(), RMS_EPS, dy.row(r), dx.row_mut(r), dw.data_mut());
    }
    dx
}

#[derive(Clone, Debug)]
struct LayerRecord {
    x_in: Array,
    mix: MixingRecord,
    h: Array,
    n2: Array,
    a: Array,
    b: Array,
    act: Array,
}

/// Forward intermediates for [`backward_lm`].
#[derive(Clone, Debug)]
pub struct LmRecord {
    tokens: Vec<usize>,
    layers: Vec<LayerRecord>,
    x_final: Array,
    nf: Array,
    assignment: PatternAssignment,
}

fn check_tokens(model: &Model, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Empty { op: "forward_lm" });
    }
    if tokens.len() > model.config.context_length {
        return Err(Error::invalid(
            "forward_lm",
            format!("{} tokens exceed context length {}", tokens.len(), model.config.context_length),
        ));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= model.config.vocab) {
        return Err(Error::invalid("forward_lm", format!("token id {t} out of range (vocab {})", model.config.vocab)));
    }
    Ok(())
}

/// Next-token logits `[T × vocab]` under the model's own pattern assignment.
pub fn forward_lm(model: &Model, tokens: &[usize]) -> Result<Array> {
    forward_lm_with(model, tokens, &model.config.pattern_assignment).map(|r| r.0)
}

pub fn forward_lm_with(model: &Model, tokens: &[usize], assignment: &PatternAssignment) -> Result<(Array, LmRecord)> {
    check_tokens(model, tokens)?;
    let cfg = &model.config;
    assignment.validate(cfg.layers, cfg.heads)?;
    let d = cfg.model_dim;
    let mut x = Array::zeros(&[tokens.len(), d]);
    for (r, &tok) in tokens.iter().enumerate() {
        x.row_mut(r).copy_from_slice(model.embed.row(tok));
    }
    let mut records = Vec::with_capacity(cfg.layers);
    for (li, layer) in model.layers.iter().enumerate() {
        let specs = assignment.layer_specs(li, cfg.heads);
        let n1 = norm_rows(&x, &layer.norm1)?;
        let (mix_out, mix) = temporal_mixing_forward(&n1, &layer.mixing, &specs, &cfg.rope)?;
        let mut h = x.clone();
        h.add_scaled(&mix_out, 1.0)?;
        let n2 = norm_rows(&h, &layer.norm2)?;
        let a = matmul(&n2, &layer.ffn_gate)?;
        let b = matmul(&n2, &layer.ffn_up)?;
        let mut act = a.clone();
        act.data_mut().iter_mut().zip(b.data()).for_each(|(s, bv)| *s = silu(*s) * bv);
        let mut out = h.clone();
        out.add_scaled(&matmul(&act, &layer.ffn_down)?, 1.0)?;
        records.push(LayerRecord { x_in: x, mix, h, n2, a, b, act });
        x = out;
    }
    let nf = norm_rows(&x, &model.norm_f)?;
    let logits = match &model.head {
        Some(w) => matmul(&nf, w)?,
        None => matmul_nt(&nf, &model.embed)?,
    };
    logits.check_finite("forward_lm")?;
    let record = LmRecord { tokens: tokens.to_vec(), layers: records, x_final: x, nf, assignment: assignment.clone() };
    Ok((logits, record))
}

/// Gradients of a scalar loss given `dlogits`, in the layout of `model`.
pub fn backward_lm(model: &Model, record: &LmRecord, dlogits: &Array) -> Result<Model> {
    let cfg = &model.config;
    if dlogits.shape() != [record.tokens.len(), cfg.vocab] {
        return Err(Error::shape("backward_lm", format!("dlogits {:?}", dlogits.shape())));
    }
    let mut g = model.zeros_like();
    let dnf = match &model.head {
        Some(w) => {
            g.head = Some(matmul_tn(&record.nf, dlogits)?);
            matmul_nt(dlogits, w)?
        }
        None => {
            g.embed.add_scaled(&matmul_tn(dlogits, &record.nf)?, 1.0)?;
            matmul(dlogits, &model.embed)?
        }
    };
    let mut dx = norm_rows_backward(&record.x_final, &model.norm_f, &dnf, &mut g.norm_f);
    for (li, (layer, rec)) in model.layers.iter().zip(&record.layers).enumerate().rev() {
        let gl = &mut g.layers[li];
        gl.ffn_down = matmul_tn(&rec.act, &dx)?;
        let dact = matmul_nt(&dx, &layer.ffn_down)?;
        let mut da = dact.clone();
        let mut db = dact;
        for i in 0..da.len() {
            let (av, bv) = (rec.a.data()[i], rec.b.data()[i]);
            da.data_mut()[i] *= bv * silu_grad(av);
            db.data_mut()[i] *= silu(av);
        }
        gl.ffn_gate = matmul_tn(&rec.n2, &da)?;
        gl.ffn_up = matmul_tn(&rec.n2, &db)?;
        let mut dn2 = matmul_nt(&da, &layer.ffn_gate)?;
        dn2.add_scaled(&matmul_nt(&db, &layer.ffn_up)?, 1.0)?;
        let mut dh = dx;
        dh.add_scaled(&norm_rows_backward(&rec.h, &layer.norm2, &dn2, &mut gl.norm2), 1.0)?;

        let specs = record.assignment.layer_specs(li, cfg.heads);
        let (gm, dn1) = temporal_mixing_backward(&dh, &rec.mix, &layer.mixing, &specs)?;
        gl.mixing = gm;
        let mut dxi = dh;
        dxi.add_scaled(&norm_rows_backward(&rec.x_in, &layer.norm1, &dn1, &mut gl.norm1), 1.0)?;
        dx = dxi;
    }
    for (r, &tok) in record.tokens.iter().enumerate() {
        for (e, v) in g.embed.row_mut(tok).iter_mut().zip(dx.row(r)) {
            *e += v;
        }
    }
    Ok(g)
}

/// Mean next-token cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Array, targets: &[usize]) -> Result<(f64, Array)> {
    if logits.rows() != targets.len() || targets.is_empty() {
        return Err(Error::shape("cross_entropy", format!("{} rows, {} targets", logits.rows(), targets.len())));
    }
    let n = targets.len() as f64;
    let mut grad = logits.zeros_like();
    let mut loss = 0.0;
    for (r, &y) in targets.iter().enumerate() {
        let row = logits.row(r);
        if y >= row.len() {
            return Err(Error::invalid("cross_entropy", format!("target {y} out of range")));
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += m + z.ln() - row[y];
        for (gv, v) in grad.row_mut(r).iter_mut().zip(row) {
            *gv = (v - m).exp() / z / n;
        }
        grad.row_mut(r)[y] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

/// Loss and parameter gradients for one sequence: predicts `seq[1..]` from
/// `seq[..len-1]`.
pub fn sequence_loss_and_grads(model: &Model, seq: &[usize], assignment: &PatternAssignment) -> Result<(f64, Model)> {
    if seq.len() < 2 {
        return Err(Error::invalid("sequence_loss", "need at least two tokens"));
    }
    let (inputs, targets) = (&seq[..seq.len() - 1], &seq[1..]);
    let (logits, rec) = forward_lm_with(model, inputs, assignment)?;
    let (loss, dlogits) = cross_entropy(&logits, targets)?;
    Ok((loss, backward_lm(model, &rec, &dlogits)?))
}

/// Sum of next-token NLL over `seq[1..]` and the number of predictions.
pub fn sequence_nll(model: &Model, seq: &[usize], assignment: &PatternAssignment) -> Result<(f64, usize)> {
    let (inputs, targets) = (&seq[..seq.len() - 1], &seq[1..]);
    let (logits, _) = forward_lm_with(model, inputs, assignment)?;
    let (mean, _) = cross_entropy(&logits, targets)?;
    Ok((mean * targets.len() as f64, targets.len()))
}
