use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn check<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    a.check_same_shape(b)?;
    if a.is_empty() {
        return Err(Error::Empty("loss over an empty tensor".into()));
    }
    Ok(())
}

/// Mean squared error over every element.
pub fn mse<T: Real>(target: &Tensor<T>, pred: &Tensor<T>) -> Result<T> {
    check(target, pred)?;
    let n = T::lit(target.len() as f64);
    Ok(target
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<T>()
        / n)
}

/// Gradient of [`mse`] with respect to `pred`.
pub fn mse_grad<T: Real>(target: &Tensor<T>, pred: &Tensor<T>) -> Result<Tensor<T>> {
    check(target, pred)?;
    let s = T::lit(2.0 / target.len() as f64);
    pred.zip_map(target, |p, t| s * (p - t))
}

/// Mean absolute error over every element.
pub fn mae<T: Real>(target: &Tensor<T>, pred: &Tensor<T>) -> Result<T> {
    check(target, pred)?;
    let n = T::lit(target.len() as f64);
    Ok(target
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&a, &b)| (a - b).abs())
        .sum::<T>()
        / n)
}

/// Differences this small count as ties in [`mae_grad`].
pub const MAE_TIE: f64 = 1e-6;

/// Gradient of [`mae`] with respect to `pred`. The subgradient is 0 for differences
/// within [`MAE_TIE`], so rounding noise at an exact fit does not produce full-size
/// sign gradients.
pub fn mae_grad<T: Real>(target: &Tensor<T>, pred: &Tensor<T>) -> Result<Tensor<T>> {
    check(target, pred)?;
    let s = T::lit(1.0 / target.len() as f64);
    let tie = T::lit(MAE_TIE);
    pred.zip_map(target, |p, t| {
        let d = p - t;
        if d > tie {
            s
        } else if d < -tie {
            -s
        } else {
            T::zero()
        }
    })
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, the derivative of [`softplus`].
pub fn softplus_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
