//! Central-difference gradient checking in 64-bit precision.

pub mod suite;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Outcome of one [`grad_check`] run.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over all checked elements.
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst element.
    pub worst: (usize, usize),
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: (f64, f64),
    pub checked: usize,
    /// Elements whose every probe step crossed a ReLU or max-pool kink.
    pub skipped: usize,
    /// Set when any loss value or gradient was NaN or infinite.
    pub non_finite: bool,
}

impl GradCheckReport {
    /// Below `tolerance`, all finite, and at most 1% of elements skipped.
    pub fn passes(&self, tolerance: f64) -> bool {
        !self.non_finite && self.checked > 0 && self.skipped * 100 <= self.checked && self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Step shrink factor and number of retries when a probe crosses a kink.
const SHRINK: f64 = 10.0;
const RETRIES: usize = 3;

fn eval_loss<F>(inputs: &[Tensor<f64>], f: &F) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok((g.value(loss).item()?, g.kink_signature()))
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences, perturbing every element of every input.
///
/// `f` receives one graph leaf per input tensor and must return a scalar node.
/// When a probe changes a ReLU sign or max-pool argmax the step is reduced;
/// elements that straddle a kink at every step are counted as skipped.
pub fn grad_check<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::arg(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let base = g.kink_signature();
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| t.zeros_like()))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        worst_values: (0.0, 0.0),
        checked: 0,
        skipped: 0,
        non_finite: !g.value(loss).all_finite() || analytic.iter().any(|a| !a.all_finite()),
    };
    let mut probe = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = probe[i].data()[j];
            let mut h = eps;
            let mut numeric = None;
            for _ in 0..=RETRIES {
                probe[i].data_mut()[j] = orig + h;
                let (plus, sp) = eval_loss(&probe, &f)?;
                probe[i].data_mut()[j] = orig - h;
                let (minus, sm) = eval_loss(&probe, &f)?;
                if sp == base && sm == base {
                    numeric = Some((plus - minus) / (2.0 * h));
                    break;
                }
                h /= SHRINK;
            }
            probe[i].data_mut()[j] = orig;
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            if !numeric.is_finite() {
                report.non_finite = true;
                continue;
            }
            let err = relative_error(grad.data()[j], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
                report.worst_values = (grad.data()[j], numeric);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let ok = grad_check(std::slice::from_ref(&x), DEFAULT_EPS, |g, v| Ok(g.sum(v[0]))).unwrap();
        assert!(ok.passes(1e-10));
        assert_eq!(ok.checked, 3);
    }

    #[test]
    fn flags_non_finite() {
        let x = Tensor::new(&[1, 2], vec![f64::NAN, 1.0]).unwrap();
        let r = grad_check(&[x], DEFAULT_EPS, |g, v| Ok(g.sum(v[0]))).unwrap();
        assert!(r.non_finite);
        assert!(!r.passes(1.0));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
