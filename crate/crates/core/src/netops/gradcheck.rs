//! Finite-difference certification of analytic gradients.

use super::activation::{relu, relu_backward, sigmoid, sigmoid_backward};
use super::conv::{conv2d, conv2d_backward, conv3d, conv3d_backward};
use super::dense::{dense, dense_backward};
use super::pool::{maxpool, maxpool_backward, upsample, upsample_backward};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// A differentiable operation on double-precision arguments. The first
/// argument is the data input; the rest are parameters.
pub trait DiffOp {
    fn name(&self) -> String;
    fn arity(&self) -> usize;
    fn forward(&self, args: &[Tensor<f64>]) -> Result<Tensor<f64>>;
    /// Gradient with respect to every argument, in argument order.
    fn backward(&self, args: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>>;
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub coordinates_checked: usize,
}

/// Above this many coordinates a random subsample is checked instead.
const FULL_CHECK_LIMIT: usize = 2000;
const SUBSAMPLE: usize = 256;

/// Compares the analytic gradient of `L = Σ r·op(args)` (fixed random `r`)
/// with central differences at step `h`. Relative error uses the
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(op: &dyn DiffOp, point: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport> {
    if point.len() != op.arity() {
        return Err(Error::Invalid(format!("{} takes {} arguments, got {}", op.name(), op.arity(), point.len())));
    }
    if point.iter().any(|t| !t.all_finite()) {
        return Err(Error::numerical("grad_check", "non-finite input point"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let y = op.forward(point)?;
    if !y.all_finite() {
        return Err(Error::numerical("grad_check", format!("{} produced non-finite output", op.name())));
    }
    let proj = Tensor::from_fn(y.shape().to_vec(), |_| rng.random_range(-1.0..1.0));
    let objective = |args: &[Tensor<f64>]| -> Result<f64> {
        let out = op.forward(args)?;
        let v: f64 = out.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum();
        if !v.is_finite() {
            return Err(Error::numerical("grad_check", format!("{} objective not finite", op.name())));
        }
        Ok(v)
    };
    let analytic = op.backward(point, &proj)?;
    if analytic.len() != point.len() || analytic.iter().zip(point).any(|(g, p)| g.shape() != p.shape()) {
        return Err(Error::Shape(format!("{}: gradient shapes do not match arguments", op.name())));
    }
    if analytic.iter().any(|g| !g.all_finite()) {
        return Err(Error::numerical("grad_check", format!("{} produced non-finite gradient", op.name())));
    }

    let sizes: Vec<usize> = point.iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let coords: Vec<usize> = if total <= FULL_CHECK_LIMIT {
        (0..total).collect()
    } else {
        let mut v = sample(&mut rng, total, SUBSAMPLE).into_vec();
        v.sort_unstable();
        v
    };

    let mut args = point.to_vec();
    let mut max_rel: f64 = 0.0;
    for &flat in &coords {
        let (mut a, mut i) = (0, flat);
        while i >= sizes[a] {
            i -= sizes[a];
            a += 1;
        }
        let x0 = args[a].data()[i];
        args[a].data_mut()[i] = x0 + h;
        let fp = objective(&args)?;
        args[a].data_mut()[i] = x0 - h;
        let fm = objective(&args)?;
        args[a].data_mut()[i] = x0;
        let numeric = (fp - fm) / (2.0 * h);
        let an = analytic[a].data()[i];
        let rel = (an - numeric).abs() / an.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport {
        op: op.name(),
        max_rel_error: max_rel,
        tolerance: tol,
        pass: max_rel < tol,
        coordinates_checked: coords.len(),
    })
}

pub struct Conv2dOp;
pub struct Conv3dOp;
pub struct DenseOp;
pub struct SigmoidOp;
pub struct ReluOp;
pub struct MaxPoolOp(pub Vec<usize>);
pub struct UpsampleOp(pub Vec<usize>);

impl DiffOp for Conv2dOp {
    fn name(&self) -> String {
        "conv2d".into()
    }
    fn arity(&self) -> usize {
        3
    }
    fn forward(&self, a: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        conv2d(&a[0], &a[1], &a[2])
    }
    fn backward(&self, a: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let r = conv2d_backward(&a[0], &a[1], g)?;
        Ok(vec![r.input.unwrap(), r.kernels, r.bias])
    }
}

impl DiffOp for Conv3dOp {
    fn name(&self) -> String {
        "conv3d".into()
    }
    fn arity(&self) -> usize {
        3
    }
    fn forward(&self, a: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        conv3d(&a[0], &a[1], &a[2])
    }
    fn backward(&self, a: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let r = conv3d_backward(&a[0], &a[1], g)?;
        Ok(vec![r.input.unwrap(), r.kernels, r.bias])
    }
}

impl DiffOp for DenseOp {
    fn name(&self) -> String {
        "dense".into()
    }
    fn arity(&self) -> usize {
        3
    }
    fn forward(&self, a: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        dense(&a[0], &a[1], &a[2])
    }
    fn backward(&self, a: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let r = dense_backward(&a[0], &a[1], g)?;
        Ok(vec![r.input, r.weights, r.bias])
    }
}

impl DiffOp for SigmoidOp {
    fn name(&self) -> String {
        "sigmoid".into()
    }
    fn arity(&self) -> usize {
        1
    }
    fn forward(&self, a: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(sigmoid(&a[0]))
    }
    fn backward(&self, a: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        Ok(vec![sigmoid_backward(&sigmoid(&a[0]), g)?])
    }
}

impl DiffOp for ReluOp {
    fn name(&self) -> String {
        "relu".into()
    }
    fn arity(&self) -> usize {
        1
    }
    fn forward(&self, a: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(relu(&a[0]))
    }
    fn backward(&self, a: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        Ok(vec![relu_backward(&a[0], g)?])
    }
}

impl DiffOp for MaxPoolOp {
    fn name(&self) -> String {
        "maxpool".into()
    }
    fn arity(&self) -> usize {
        1
    }
    fn forward(&self, a: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        maxpool(&a[0], &self.0)
    }
    fn backward(&self, a: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        Ok(vec![maxpool_backward(&a[0], &self.0, g)?])
    }
}

impl DiffOp for UpsampleOp {
    fn name(&self) -> String {
        "upsample".into()
    }
    fn arity(&self) -> usize {
        1
    }
    fn forward(&self, a: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        upsample(&a[0], &self.0)
    }
    fn backward(&self, _a: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        Ok(vec![upsample_backward(g, &self.0)?])
    }
}

/// `second(first(x, p1..), q1..)`. Arguments are `[x, p.., q..]`.
pub struct Compose<A, B>(pub A, pub B);

impl<A: DiffOp, B: DiffOp> DiffOp for Compose<A, B> {
    fn name(&self) -> String {
        format!("{}∘{}", self.1.name(), self.0.name())
    }
    fn arity(&self) -> usize {
        self.0.arity() + self.1.arity() - 1
    }
    fn forward(&self, a: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        let n = self.0.arity();
        let mid = self.0.forward(&a[..n])?;
        let mut rest = vec![mid];
        rest.extend_from_slice(&a[n..]);
        self.1.forward(&rest)
    }
    fn backward(&self, a: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let n = self.0.arity();
        let mid = self.0.forward(&a[..n])?;
        let mut rest = vec![mid];
        rest.extend_from_slice(&a[n..]);
        let mut g2 = self.1.backward(&rest, g)?;
        let tail = g2.split_off(1);
        let mut out = self.0.backward(&a[..n], &g2[0])?;
        out.extend(tail);
        Ok(out)
    }
}

/// Wraps an op and scales one analytic gradient coordinate, for testing
/// that the checker catches broken backward passes.
pub struct Corrupted<A> {
    pub inner: A,
    pub arg: usize,
    pub index: usize,
    pub factor: f64,
}

impl<A: DiffOp> DiffOp for Corrupted<A> {
    fn name(&self) -> String {
        format!("corrupted {}", self.inner.name())
    }
    fn arity(&self) -> usize {
        self.inner.arity()
    }
    fn forward(&self, a: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        self.inner.forward(a)
    }
    fn backward(&self, a: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let mut out = self.inner.backward(a, g)?;
        out[self.arg].data_mut()[self.index] *= self.factor;
        Ok(out)
    }
}
