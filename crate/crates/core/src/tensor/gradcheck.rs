use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function of several matrices.
///
/// Each entry is `(f(θ + h e) - f(θ - h e)) / 2h`. The parameters are
/// perturbed in place on a private copy and restored before moving on.
pub fn finite_diff_grad<F>(mut f: F, params: &[Matrix], h: f64) -> Result<Vec<Matrix>>
where
    F: FnMut(&[Matrix]) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut theta = params.to_vec();
    let mut grads: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();

    for pi in 0..theta.len() {
        for e in 0..theta[pi].len() {
            let orig = theta[pi].data()[e];
            theta[pi].data_mut()[e] = orig + h;
            let plus = eval(&mut f, &theta)?;
            theta[pi].data_mut()[e] = orig - h;
            let minus = eval(&mut f, &theta)?;
            theta[pi].data_mut()[e] = orig;
            grads[pi].data_mut()[e] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grads)
}

fn eval<F>(f: &mut F, theta: &[Matrix]) -> Result<f64>
where
    F: FnMut(&[Matrix]) -> Result<f64>,
{
    let v = f(theta)?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Norm-wise relative error `‖a - b‖ / max(‖a‖, ‖b‖)`; zero when both are
/// below `1e-12` in norm.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff = a.sub(b).expect("relative_error shape mismatch").frobenius_norm();
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}
