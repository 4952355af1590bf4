use ndarray::{Array2, ArrayView2};

use crate::nn::Real;
use crate::{Error, Result};

fn check<T: Real>(s: &ArrayView2<T>, temperature: f64) -> Result<()> {
    if s.nrows() != s.ncols() || s.nrows() == 0 {
        return Err(Error::Shape(format!(
            "score matrix must be square and non-empty, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("score matrix has non-finite entries".into()));
    }
    Ok(())
}

/// In-batch loss: mean over rows of `-log softmax(s_i / tau)[i]`.
pub fn batch_loss<T: Real>(s: ArrayView2<T>, temperature: f64) -> Result<T> {
    batch_loss_grad(s, temperature).map(|(l, _)| l)
}

/// Loss and its gradient with respect to every score,
/// `(softmax_ij - [i == j]) / (B * tau)`.
pub fn batch_loss_grad<T: Real>(s: ArrayView2<T>, temperature: f64) -> Result<(T, Array2<T>)> {
    check(&s, temperature)?;
    let b = s.nrows();
    let inv_tau = T::c(1.0 / temperature);
    let inv_b = T::c(1.0 / b as f64);
    let mut grad = Array2::zeros((b, b));
    let mut total = T::zero();
    for i in 0..b {
        let row = s.row(i);
        let m = row.fold(T::neg_infinity(), |a, &v| a.max(v * inv_tau));
        let mut sum = T::zero();
        for &v in row {
            sum += (v * inv_tau - m).exp();
        }
        let lse = m + sum.ln();
        total += lse - row[i] * inv_tau;
        for (j, &v) in row.iter().enumerate() {
            let p = (v * inv_tau - lse).exp();
            let delta = if i == j { T::one() } else { T::zero() };
            grad[[i, j]] = (p - delta) * inv_b * inv_tau;
        }
    }
    Ok((total * inv_b, grad))
}
