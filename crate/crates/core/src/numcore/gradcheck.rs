//! Central-difference gradient checking at 64-bit precision.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference estimate of `d f / d x` for every element of `x`.
pub fn numeric_grad(
    x: &Tensor<f64>,
    h: f64,
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
) -> Result<Tensor<f64>> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// Tensor-wise relative error: largest element deviation over the larger
/// infinity norm of the two gradients.
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    let scale = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic.max_abs_diff(numeric);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Checks the tape gradients of a scalar function of `inputs` against central
/// differences and returns the worst per-input relative error.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    Ok(check_gradients_each(inputs, h, f)?
        .into_iter()
        .fold(0.0, f64::max))
}

/// Like [`check_gradients`] but reports the relative error of every input.
pub fn check_gradients_each<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value().item();
        Ok(v)
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut errors = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut all = inputs.to_vec();
        let numeric = numeric_grad(input, h, |probe| {
            all[i] = probe.clone();
            eval(&all)
        })?;
        let err = relative_error(&analytic, &numeric);
        if !err.is_finite() {
            return Err(Error::NonFinite(format!("gradient check of input {i}")));
        }
        errors.push(err);
    }
    Ok(errors)
}
