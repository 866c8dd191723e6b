//! Finite-difference gradient checking.

use super::{Tape, Tensor, TensorError, Var};

pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-6;

/// Central finite differences of the scalar `f` at every entry of
/// `inputs[which]`, against the tape gradient. Returns the worst
/// `|a - n| / max(|a|, |n|, FLOOR)`.
pub fn max_rel_error<F, E>(inputs: &[Tensor], which: usize, f: F) -> Result<f64, E>
where
    F: for<'a> Fn(&'a Tape, &[Var<'a>]) -> Result<Var<'a>, E>,
    E: From<TensorError>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic = vars[which].grad().unwrap_or_else(|| Tensor::zeros(inputs[which].shape()));

    let eval = |perturbed: &Tensor| -> Result<f64, E> {
        let tape = Tape::new();
        let vars: Vec<_> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| tape.constant(if i == which { perturbed.clone() } else { t.clone() }))
            .collect();
        let out = f(&tape, &vars)?;
        Ok(out.item().expect("scalar loss"))
    };
    let mut worst = 0.0f64;
    for i in 0..inputs[which].len() {
        let mut plus = inputs[which].clone();
        plus.data_mut()[i] += STEP;
        let mut minus = inputs[which].clone();
        minus.data_mut()[i] -= STEP;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * STEP);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}
