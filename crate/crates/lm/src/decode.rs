//! Token-by-token generation through per-layer dilated KV caches.

use ratplus_core::kv_cache::{cache_footprint, decode_step, DilatedKVCache, Footprint};
use ratplus_core::numerics::{matmul, rms_norm, silu, softmax_stable, RMS_EPS};
use ratplus_core::patterns::PatternAssignment;
use ratplus_core::{Array, Error, Result, Rng};

use crate::model::Model;

pub struct Decoder<'a> {
    model: &'a Model,
    caches: Vec<DilatedKVCache>,
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(model: &'a Model, assignment: &PatternAssignment) -> Result<Self> {
        let cfg = &model.config;
        assignment.validate(cfg.layers, cfg.heads)?;
        let caches = (0..cfg.layers)
            .map(|li| DilatedKVCache::new(assignment.layer_specs(li, cfg.heads), cfg.heads, cfg.head_dim, cfg.rope))
            .collect::<Result<_>>()?;
        Ok(Decoder { model, caches, pos: 0 })
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Largest per-layer footprint.
    pub fn footprint(&self) -> Footprint {
        self.caches.iter().map(cache_footprint).max_by_key(|f| f.entries).expect("at least one layer")
    }

    /// Feeds one token and returns next-token logits.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        let m = self.model;
        if token >= m.config.vocab {
            return Err(Error::invalid("decode", format!("token id {token} out of range (vocab {})", m.config.vocab)));
        }
        let mut x = m.embed.row(token).to_vec();
        for (layer, cache) in m.layers.iter().zip(&mut self.caches) {
            let n1 = rms_norm(&x, layer.norm1.data(), RMS_EPS)?;
            let mix = decode_step(cache, self.pos, &n1, &layer.mixing)?;
            x.iter_mut().zip(&mix).for_each(|(a, b)| *a += b);
            let n2 = Array::new(&[1, x.len()], rms_norm(&x, layer.norm2.data(), RMS_EPS)?)?;
            let a = matmul(&n2, &layer.ffn_gate)?;
            let b = matmul(&n2, &layer.ffn_up)?;
            let act: Vec<f64> = a.data().iter().zip(b.data()).map(|(a, b)| silu(*a) * b).collect();
            let ffn = matmul(&Array::new(&[1, act.len()], act)?, &layer.ffn_down)?;
            x.iter_mut().zip(ffn.data()).for_each(|(a, b)| *a += b);
        }
        let nf = Array::new(&[1, x.len()], rms_norm(&x, m.norm_f.data(), RMS_EPS)?)?;
        let logits = match &m.head {
            Some(w) => matmul(&nf, w)?.into_data(),
            None => m.embed.data().chunks(x.len()).map(|e| e.iter().zip(nf.data()).map(|(a, b)| a * b).sum()).collect(),
        };
        self.pos += 1;
        Ok(logits)
    }
}

/// Greedy when `temperature` is 0, else samples from the tempered softmax.
pub fn sample_token(logits: &[f64], temperature: f64, rng: &mut Rng) -> Result<usize> {
    if temperature <= 0.0 {
        return logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .ok_or(Error::Empty { op: "sample_token" });
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let p = softmax_stable(&scaled)?;
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(p.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_lm_with, ModelConfig};
    use ratplus_core::patterns::SparsePatternSpec;

    #[test]
    fn stepping_matches_full_forward() {
        let mut cfg = ModelConfig::small(17, 16, 2, 2, 40);
        cfg.tied_head = true;
        for (tied, spec) in [(false, SparsePatternSpec::dense()), (true, SparsePatternSpec::dilated(4).with_window(2))] {
            cfg.tied_head = tied;
            let model = Model::init(cfg.clone(), 4).unwrap();
            let assign = PatternAssignment::uniform(2, spec);
            let tokens: Vec<usize> = (0..40).map(|i| (i * 7 + 3) % 17).collect();
            let (full, _) = forward_lm_with(&model, &tokens, &assign).unwrap();
            let mut dec = Decoder::new(&model, &assign).unwrap();
            for (t, &tok) in tokens.iter().enumerate() {
                let logits = dec.step(tok).unwrap();
                let err = logits.iter().zip(full.row(t)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err <= 1e-10, "t={t} err={err}");
            }
            assert_eq!(dec.footprint().entries, ratplus_core::patterns::expected_cache_entries(40, &spec));
        }
    }

    #[test]
    fn greedy_and_sampled() {
        let mut rng = Rng::new(1);
        assert_eq!(sample_token(&[0.1, 3.0, -1.0], 0.0, &mut rng).unwrap(), 1);
        let picks: Vec<usize> = (0..200).map(|_| sample_token(&[0.0, 0.0], 1.0, &mut rng).unwrap()).collect();
        assert!(picks.contains(&0) && picks.contains(&1));
    }
}
