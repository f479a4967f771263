//! Pointwise activations. Backward passes take the forward *output*, which
//! has the same sign as the pre-activation for every slope used here.

use crate::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu<T: Real>(x: &mut Tensor<T>) {
    let s = T::lit(LEAKY_SLOPE);
    x.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v *= s;
        }
    });
}

pub fn leaky_relu_backward<T: Real>(y: &Tensor<T>, dy: &mut Tensor<T>) {
    let s = T::lit(LEAKY_SLOPE);
    dy.data_mut().iter_mut().zip(y.data()).for_each(|(d, &v)| {
        if v <= T::zero() {
            *d *= s;
        }
    });
}

pub fn relu<T: Real>(x: &mut Tensor<T>) {
    x.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero();
        }
    });
}

pub fn relu_backward<T: Real>(y: &Tensor<T>, dy: &mut Tensor<T>) {
    dy.data_mut().iter_mut().zip(y.data()).for_each(|(d, &v)| {
        if v <= T::zero() {
            *d = T::zero();
        }
    });
}

/// Clamps to `[0, 1]`.
pub fn clamp_unit<T: Real>(x: &mut Tensor<T>) {
    x.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.max(T::zero()).min(T::one()));
}

/// Gradient of the unit clamp given the *pre-clamp* input.
pub fn clamp_unit_backward<T: Real>(pre: &Tensor<T>, dy: &mut Tensor<T>) {
    dy.data_mut().iter_mut().zip(pre.data()).for_each(|(d, &v)| {
        if v < T::zero() || v > T::one() {
            *d = T::zero();
        }
    });
}
