//! Central finite differences, used as the independent oracle for
//! [`Graph::backward`](crate::autodiff::Graph::backward).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Estimates `∂f/∂pᵢ ≈ (f(p + εeᵢ) − f(p − εeᵢ)) / 2ε` for every coordinate.
pub fn finite_difference<F>(mut f: F, params: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::config(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = params.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Tensor::new(params.shape().to_vec(), out)
}

/// Largest coordinate-wise `|a − b| / max(|a|, |b|, floor)`.
///
/// `floor` keeps coordinates whose true gradient is ~0 from dominating
/// through cancellation noise in the difference quotient.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "compared vectors differ in length");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let p = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let g = finite_difference(|t| Ok(t.data().iter().map(|v| v * v).sum()), &p, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function() {
        let p = Tensor::vector(vec![0.3, -4.0, 9.0]).unwrap();
        let g = finite_difference(|_| Ok(7.5), &p, 1e-5).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn rejects_non_positive_step() {
        let p = Tensor::vector(vec![1.0]).unwrap();
        assert!(finite_difference(|_| Ok(0.0), &p, 0.0).is_err());
        assert!(finite_difference(|_| Ok(0.0), &p, f64::NAN).is_err());
    }

    #[test]
    fn propagates_function_errors() {
        let p = Tensor::vector(vec![1.0]).unwrap();
        let r = finite_difference(|_| Err(Error::Numeric("boom".into())), &p, 1e-3);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
