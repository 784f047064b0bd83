//! Pointwise kernels and their derivatives.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Tanh-approximation GELU constant, fixed for reproducibility.
pub const GELU_C: f64 = 0.7978845608;
const GELU_CUBIC: f64 = 0.044715;

pub fn check_same_dims(a: &Tensor4, b: &Tensor4, op: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "{op}: extents {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub fn binary(a: &Tensor4, b: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Tensor4 {
    let mut out = Tensor4::zeros(a.dims());
    for ((o, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *o = f(x, y);
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu(0.0), 0.0);
        // Direct evaluation of the documented tanh form.
        let expected = 0.5 * (1.0 + (GELU_C * (1.0 + GELU_CUBIC)).tanh());
        assert!((gelu(1.0) - expected).abs() < 1e-15);
        assert!((gelu(1.0) - 0.8412).abs() < 1e-4);
    }

    #[test]
    fn sigmoid_symmetry() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3.0) + sigmoid(-3.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softplus_stable_tails() {
        assert!(softplus(100.0).is_finite());
        assert!(softplus(-100.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
