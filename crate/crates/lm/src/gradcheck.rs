//! Central finite-difference audit of [`sequence_loss_and_grads`].

use ratplus_core::patterns::PatternAssignment;
use ratplus_core::{Result, Rng};

use crate::model::{cross_entropy, forward_lm_with, sequence_loss_and_grads, Model};

#[derive(Clone, Debug, PartialEq)]
pub struct GradSample {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }

    /// Passes on relative error, or on absolute error below `abs_floor` when
    /// both values are at rounding-noise level.
    pub fn passes(&self, rel_tol: f64, abs_floor: f64) -> bool {
        self.rel_error() <= rel_tol || (self.analytic - self.numeric).abs() < abs_floor
    }
}

/// Checks `coords` coordinates spread round-robin over every tensor, so each
/// tensor gets at least one when `coords` ≥ the tensor count.
pub fn check_gradients(
    model: &Model,
    seq: &[usize],
    assignment: &PatternAssignment,
    coords: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<GradSample>> {
    let (_, grads) = sequence_loss_and_grads(model, seq, assignment)?;
    let (inputs, targets) = (&seq[..seq.len() - 1], &seq[1..]);
    let loss = |m: &Model| -> Result<f64> {
        let (l, _) = forward_lm_with(m, inputs, assignment)?;
        Ok(cross_entropy(&l, targets)?.0)
    };
    let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
    let mut rng = Rng::new(seed);
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(coords);
    for c in 0..coords {
        let ti = c % names.len();
        let len = model.tensors()[ti].1.len();
        let index = rng.below(len);
        let orig = model.tensors()[ti].1.data()[index];
        probe.tensors_mut()[ti].1.data_mut()[index] = orig + h;
        let fp = loss(&probe)?;
        probe.tensors_mut()[ti].1.data_mut()[index] = orig - h;
        let fm = loss(&probe)?;
        probe.tensors_mut()[ti].1.data_mut()[index] = orig;
        out.push(GradSample {
            tensor: names[ti].clone(),
            index,
            analytic: grads.tensors()[ti].1.data()[index],
            numeric: (fp - fm) / (2.0 * h),
        });
    }
    Ok(out)
}
