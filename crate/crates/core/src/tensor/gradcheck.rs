use super::tape::{GradientTape, Var};
use super::value::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Maximum relative error between the gradient of `f` at `x` from the tape
/// and the central difference `(f(x+h) - f(x-h)) / 2h` per element.
///
/// `f` receives a fresh tape and the leaf holding `x`, and must return a
/// scalar. It must be deterministic.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut GradientTape, Var) -> Result<Var>,
{
    finite_diff_check_with(f, x, step).map(|r| r.max_relative_error)
}

pub fn finite_diff_check_with<F>(f: F, x: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut GradientTape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let mut tape = GradientTape::new();
    let leaf = tape.param(x.clone());
    let loss = f(&mut tape, leaf)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get(leaf).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut tape = GradientTape::new();
        let leaf = tape.constant(probe.clone());
        let out = f(&mut tape, leaf)?;
        tape.value(out).item()
    };

    let mut report = GradCheckReport { max_relative_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        let err = relative_error(a, numeric);
        if err > report.max_relative_error {
            report = GradCheckReport { max_relative_error: err, worst_index: i, analytic: a, numeric };
        }
    }
    Ok(report)
}
