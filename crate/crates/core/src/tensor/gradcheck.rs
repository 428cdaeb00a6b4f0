//! Central finite-difference gradient checking.
//!
//! The checker only calls the forward function; it never looks at the
//! backward closures, so it is an independent oracle for them.

use super::{no_grad, Tensor};
use crate::error::Result;

/// Outcome of a gradient check: per-input relative errors.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub rel_errors: Vec<f64>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(0.0, f64::max)
    }
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖)`, falling back to the absolute error
/// when both gradients are (numerically) zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Compares autodiff gradients of the scalar `f(inputs)` with central
/// differences of step `h` for every element of every input.
pub fn check<F>(inputs: &[(Vec<usize>, Vec<f64>)], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let params: Vec<Tensor> = inputs
        .iter()
        .map(|(s, d)| Tensor::param(s, d.clone()))
        .collect::<Result<_>>()?;
    let loss = f(&params)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let eval = |vals: &[Vec<f64>]| -> Result<f64> {
        no_grad(|| {
            let ts: Vec<Tensor> = inputs
                .iter()
                .zip(vals)
                .map(|((s, _), d)| Tensor::new(s, d.clone()))
                .collect::<Result<_>>()?;
            Ok(f(&ts)?.item())
        })
    };

    let mut vals: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let mut rel_errors = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut numeric = vec![0.0; vals[k].len()];
        for i in 0..vals[k].len() {
            let orig = vals[k][i];
            vals[k][i] = orig + h;
            let fp = eval(&vals)?;
            vals[k][i] = orig - h;
            let fm = eval(&vals)?;
            vals[k][i] = orig;
            numeric[i] = (fp - fm) / (2.0 * h);
        }
        rel_errors.push(relative_error(&analytic[k], &numeric));
    }
    Ok(GradReport { rel_errors })
}
