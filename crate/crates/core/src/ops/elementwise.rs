//! ReLU and the residual skip addition.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

/// `max(x, 0)`; NaN passes through so divergence still reaches the loss.
pub fn relu<T: Real>(input: &Tensor4<T>) -> Tensor4<T> {
    input.map(|v| if v > T::zero() || v.is_nan() { v } else { T::zero() })
}

/// Passes `upstream` where the forward input (or output) was positive.
///
/// The subgradient at exactly zero is taken as 0.
pub fn relu_backward<T: Real>(forward: &Tensor4<T>, upstream: &Tensor4<T>) -> Result<Tensor4<T>> {
    if forward.shape() != upstream.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("forward {} vs upstream {}", forward.shape(), upstream.shape()),
        ));
    }
    let mut out = upstream.clone();
    out.clear_grad();
    for (g, &x) in out.data_mut().iter_mut().zip(forward.data()) {
        if x <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(out)
}

pub fn add<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("{} + {}", a.shape(), b.shape()),
        ));
    }
    let mut out = a.clone();
    out.clear_grad();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    Ok(out)
}

/// Both operands of an addition receive the upstream gradient unchanged.
pub fn add_backward<T: Real>(upstream: &Tensor4<T>) -> (Tensor4<T>, Tensor4<T>) {
    (upstream.clone(), upstream.clone())
}
