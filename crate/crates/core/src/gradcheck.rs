//! Central finite-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// Compares tape gradients of a scalar function against central
/// differences. Returns `max |analytic − numeric| / max(1, |numeric|)`
/// over every coordinate of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    finite_diff_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), eps)
}

/// Multi-input variant of [`finite_diff_check`]; perturbs every coordinate of
/// every input.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(contract(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let loss = f(&tape, &vars)?;
        check_value(&loss)?;
        tape.backward(loss)?;
        vars.iter()
            .zip(xs)
            .map(|(v, x)| v.grad().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect::<Vec<_>>()
    };
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&tape, &vars)?;
        check_value(&out)
    };
    let mut worst: f64 = 0.0;
    let mut inputs = xs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            inputs[k].data_mut()[i] = orig + eps;
            let up = eval(&inputs)?;
            inputs[k].data_mut()[i] = orig - eps;
            let down = eval(&inputs)?;
            inputs[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn check_value(v: &Var<'_>) -> Result<f64> {
    let t = v.value();
    if t.len() != 1 {
        return Err(contract("finite_diff_check: function must be scalar"));
    }
    if !t.item().is_finite() {
        return Err(Error::NonFinite {
            op: "finite_diff_check",
        });
    }
    Ok(t.item())
}
