use super::tensor::{gemm, Real, Tensor, View};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

fn dims<T: Real>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize, usize)> {
    input.expect_rank(2, "dense input")?;
    weights.expect_rank(2, "dense weights")?;
    let (b, n) = (input.shape()[0], input.shape()[1]);
    let m = weights.shape()[0];
    if weights.shape()[1] != n {
        return Err(Error::Shape(format!("dense: input width {n} vs weights {:?}", weights.shape())));
    }
    Ok((b, n, m))
}

/// Affine map `B×N -> B×M`: `y = x · Wᵀ + b` with `W` stored `M×N`.
pub fn dense<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, n, m) = dims(input, weights)?;
    if bias.len() != m {
        return Err(Error::Shape(format!("dense: bias has {} entries for {m} outputs", bias.len())));
    }
    let mut out = Tensor::from_fn(vec![b, m], |i| bias.data()[i % m]);
    gemm(
        b,
        n,
        m,
        T::one(),
        input.data(),
        View::rows(0, n),
        weights.data(),
        View::rows(0, n).t(),
        T::one(),
        out.data_mut(),
        View::rows(0, m),
    );
    Ok(out)
}

pub fn dense_backward<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, grad_out: &Tensor<T>) -> Result<DenseGrads<T>> {
    let (b, n, m) = dims(input, weights)?;
    if grad_out.shape() != [b, m] {
        return Err(Error::Shape(format!("dense: grad_out {:?}, expected [{b}, {m}]", grad_out.shape())));
    }
    let mut dx = Tensor::zeros(vec![b, n]);
    gemm(
        b,
        m,
        n,
        T::one(),
        grad_out.data(),
        View::rows(0, m),
        weights.data(),
        View::rows(0, n),
        T::zero(),
        dx.data_mut(),
        View::rows(0, n),
    );
    let mut dw = Tensor::zeros(vec![m, n]);
    gemm(
        m,
        b,
        n,
        T::one(),
        grad_out.data(),
        View::rows(0, m).t(),
        input.data(),
        View::rows(0, n),
        T::zero(),
        dw.data_mut(),
        View::rows(0, n),
    );
    let mut db = Tensor::zeros(vec![m]);
    for row in grad_out.data().chunks(m) {
        for (d, &g) in db.data_mut().iter_mut().zip(row) {
            *d += g;
        }
    }
    Ok(DenseGrads { input: dx, weights: dw, bias: db })
}
