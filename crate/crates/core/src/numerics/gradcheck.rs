//! Central-difference gradient oracle.

use super::params::{GradMap, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Step for [`grad_check_model`].
pub const MODEL_STEP: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences and returns the maximum relative error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(xv)?;
    let analytic = tape.backward(loss)?.get_or_zeros(xv);

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(t);
        Ok(f(v)?.value().item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Per-parameter report of a whole-model gradient check.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub path: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Flat index, analytic and numeric gradient at the worst entry.
    pub worst: (usize, f64, f64),
}

/// Gradient check of a model loss with respect to every parameter scalar.
///
/// Uses the fourth-order central stencil, so `h` can be much larger than for
/// [`grad_check`] (see [`MODEL_STEP`]) which keeps roundoff away from tiny
/// gradient entries.
///
/// `analytic` returns the loss value and gradients for all parameters;
/// `value` evaluates the loss alone.
pub fn grad_check_model<A, V>(
    params: &ParamStore<f64>,
    analytic: A,
    value: V,
    h: f64,
) -> Result<Vec<ParamCheck>>
where
    A: Fn(&ParamStore<f64>) -> Result<GradMap<f64>>,
    V: Fn(&ParamStore<f64>) -> Result<f64> + Sync,
{
    use rayon::prelude::*;

    let grads = analytic(params)?;
    let mut report = Vec::new();
    for (path, tensor) in params.iter() {
        let g = grads
            .get(path)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tensor.shape()));
        let pairs: Vec<(f64, f64)> = (0..tensor.len())
            .into_par_iter()
            .map(|i| -> Result<(f64, f64)> {
                let shifted = |delta: f64| -> Result<f64> {
                    let mut p = params.clone();
                    p.get_mut(path)?.data_mut()[i] += delta;
                    value(&p)
                };
                let near = shifted(h)? - shifted(-h)?;
                let far = shifted(2.0 * h)? - shifted(-2.0 * h)?;
                let numeric = (8.0 * near - far) / (12.0 * h);
                Ok((g.data()[i], numeric))
            })
            .collect::<Result<_>>()?;
        let mut worst = (0, 0.0, 0.0);
        let mut max_rel_error = 0.0;
        for (i, &(a, n)) in pairs.iter().enumerate() {
            let e = relative_error(a, n);
            if e > max_rel_error {
                max_rel_error = e;
                worst = (i, a, n);
            }
        }
        report.push(ParamCheck {
            path: path.clone(),
            max_rel_error,
            checked: pairs.len(),
            worst,
        });
    }
    Ok(report)
}
