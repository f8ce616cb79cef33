use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Denominator floor, as a fraction of the largest analytic gradient entry.
/// Coordinates far below the gradient's own scale are judged against that
/// scale instead of their own near-zero magnitude.
const SCALE_FLOOR: f64 = 1e-3;

/// Compare an analytic gradient against central finite differences.
///
/// Perturbs each coordinate of `params` by `±h`, evaluates `f`, and returns
/// the worst relative error `|a − n| / max(|a|, |n|, 1e-3·max|a|)`.
pub fn finite_diff_check<F>(
    mut f: F,
    analytic: &Tensor<f64>,
    params: &Tensor<f64>,
    h: f64,
) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Domain(format!("finite-difference step {h} must be positive")));
    }
    if analytic.shape() != params.shape() {
        return Err(Error::shape(format!(
            "gradient shape {:?} vs parameter shape {:?}",
            analytic.shape(),
            params.shape()
        )));
    }
    let floor = (SCALE_FLOOR * analytic.max_abs()).max(f64::MIN_POSITIVE);
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for i in 0..params.numel() {
        let x0 = params.data()[i];
        probe.data_mut()[i] = x0 + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = x0 - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::non_finite(format!("finite difference at coordinate {i}")));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let w = Tensor::from_f64(&[1], &[3.0]).unwrap();
        let g = Tensor::from_f64(&[1], &[6.0]).unwrap();
        let err = finite_diff_check(|x| Ok(x.data()[0] * x.data()[0]), &g, &w, 1e-3).unwrap();
        assert!(err < 1e-9);
    }

    #[test]
    fn constant_function() {
        let w = Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::zeros(&[3]).unwrap();
        let err = finite_diff_check(|_| Ok(4.0), &g, &w, 1e-3).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_and_bad_step_are_errors() {
        let w = Tensor::from_f64(&[1], &[0.0]).unwrap();
        let g = Tensor::zeros(&[1]).unwrap();
        assert!(matches!(
            finite_diff_check(|_| Ok(f64::NAN), &g, &w, 1e-3),
            Err(Error::NonFinite { .. })
        ));
        assert!(finite_diff_check(|_| Ok(0.0), &g, &w, 0.0).is_err());
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let w = Tensor::from_f64(&[1], &[3.0]).unwrap();
        let g = Tensor::from_f64(&[1], &[5.0]).unwrap();
        let err = finite_diff_check(|x| Ok(x.data()[0].powi(2)), &g, &w, 1e-3).unwrap();
        assert!(err > 0.1);
    }
}
