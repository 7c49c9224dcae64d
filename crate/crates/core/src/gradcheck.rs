//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of a scalar function with central finite
/// differences and returns the worst relative error
/// `|analytic − numeric| / max(|analytic|, |numeric|, floor)` over every
/// entry of every parameter, where `floor` is 1e-3 of the largest analytic
/// magnitude (at least 1e-8) so entries that are nearly zero do not divide
/// by rounding noise.
///
/// `f` receives a fresh tape and one leaf per parameter (all marked as
/// requiring gradients) and must return a scalar.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p)).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::Autodiff("checked function must return a scalar".into()));
        }
        Ok(tape.scalar_value(out))
    };

    let mut base: Vec<Tensor> = params.iter().map(|p| p.clone().with_requires_grad(true)).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = base.iter().map(|p| tape.leaf(p)).collect();
    let out = f(&mut tape, &vars)?;
    let reference = tape.value(out).first().copied().unwrap_or(f64::NAN);
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| tape.grad_or_zero(*v)).collect();

    let again = eval(&base)?;
    if again.to_bits() != reference.to_bits() {
        return Err(Error::Invalid(format!(
            "function is not deterministic: {reference} then {again} at identical parameters"
        )));
    }

    let scale = analytic.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (1e-3 * scale).max(1e-8);
    let mut worst: f64 = 0.0;
    for pi in 0..base.len() {
        for j in 0..base[pi].numel() {
            let orig = base[pi].data[j];
            base[pi].data[j] = orig + step;
            let plus = eval(&base)?;
            base[pi].data[j] = orig - step;
            let minus = eval(&base)?;
            base[pi].data[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi][j];
            let err = (a - numeric).abs() / floor.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
