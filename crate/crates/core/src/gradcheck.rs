//! Finite-difference validation of reverse-mode gradients.

use crate::tensor::{Tensor, TensorError};

/// Compare the reverse-mode gradient of `f` at `x` against central
/// finite differences `(f(x+h) - f(x-h)) / 2h`, elementwise, and return
/// the worst error.
///
/// The error for one element is `|analytic - numeric| / max(1, |analytic|,
/// |numeric|)`: relative for large gradients, absolute near zero, so the
/// check is meaningful across scales.
pub fn grad_check(
    f: &dyn Fn(&Tensor) -> Result<Tensor, TensorError>,
    x: &Tensor,
    h: f64,
) -> Result<f64, TensorError> {
    let n = x.numel();
    grad_check_sampled(f, x, h, &(0..n).collect::<Vec<_>>())
}

/// [`grad_check`] restricted to the listed elements of `x`; used when
/// perturbing every element would be needlessly slow.
pub fn grad_check_sampled(
    f: &dyn Fn(&Tensor) -> Result<Tensor, TensorError>,
    x: &Tensor,
    h: f64,
    elements: &[usize],
) -> Result<f64, TensorError> {
    if h <= 0.0 {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("step size must be positive, got {h}"),
        });
    }
    // Leaves accumulate across backward calls; start from a clean slate.
    x.zero_grad();
    let loss = f(x)?;
    if loss.numel() != 1 {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: "f must return a scalar".into(),
        });
    }
    loss.backward()?;
    let analytic = x.grad().ok_or(TensorError::Invalid {
        op: "grad_check",
        msg: "x received no gradient; is it a param feeding f?".into(),
    })?;

    let mut worst: f64 = 0.0;
    for &i in elements {
        let orig = x.data()[i];
        x.mutate_data(|d| d[i] = orig + h);
        let up = f(x)?.item();
        x.mutate_data(|d| d[i] = orig - h);
        let down = f(x)?.item();
        x.mutate_data(|d| d[i] = orig);
        if !up.is_finite() || !down.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        let numeric = (up - down) / (2.0 * h);
        let denom = 1.0f64.max(analytic[i].abs()).max(numeric.abs());
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
