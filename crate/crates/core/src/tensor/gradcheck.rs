use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Central-difference derivative of `f` along coordinate `i` of `x`.
pub fn central_difference<T, F>(f: &F, x: &Tensor<T>, i: usize, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<T>,
{
    let mut probe = x.clone();
    let orig = probe.data()[i];
    probe.data_mut()[i] = orig + T::from_f64(eps);
    let plus = f(&probe)?.as_f64();
    probe.data_mut()[i] = orig - T::from_f64(eps);
    let minus = f(&probe)?.as_f64();
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite function value while probing coordinate {i}"
        )));
    }
    Ok((plus - minus) / (2.0 * eps))
}

/// Max over all coordinates of `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, analytic: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<T>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, analytic, eps, &coords)
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_coords<T, F>(
    f: F,
    x: &Tensor<T>,
    analytic: &Tensor<T>,
    eps: f64,
    coords: &[usize],
) -> Result<f64>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<T>,
{
    if !(eps > 0.0) {
        return Err(Error::config(format!("eps must be positive, got {eps}")));
    }
    if x.shape() != analytic.shape() {
        return Err(Error::dim(format!(
            "gradient shape {:?} does not match input {:?}",
            analytic.shape(),
            x.shape()
        )));
    }
    let mut worst = 0.0f64;
    for &i in coords {
        let numeric = central_difference(&f, x, i, eps)?;
        let a = analytic.data()[i].as_f64();
        worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}
