use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

/// Backward through the sigmoid given its *output* `y`.
pub fn sigmoid_backward<T: Real>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    zip_same(output, grad_out, |y, g| g * y * (T::one() - y))
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

pub fn relu_inplace<T: Real>(t: &mut Tensor<T>) {
    for v in t.data_mut() {
        *v = if *v > T::zero() { *v } else { T::zero() };
    }
}

/// Backward through ReLU; `activation` may be either the input or the output.
pub fn relu_backward<T: Real>(activation: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    zip_same(activation, grad_out, |a, g| if a > T::zero() { g } else { T::zero() })
}

fn zip_same<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}
