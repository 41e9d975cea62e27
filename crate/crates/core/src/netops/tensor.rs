use crate::error::{Error, Result};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

/// Floating-point element type. Training runs in `f32`; gradient
/// certification runs the same code in `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + AddAssign + MulAssign + Sum + Send + Sync + 'static
{
    /// `C = alpha * A * B + beta * C` over strided views.
    ///
    /// # Safety
    /// Every index reachable through the dimensions and strides must be in
    /// bounds of the corresponding pointer's allocation.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided view into a slice: `(offset, row stride, column stride)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn rows(off: usize, cols: usize) -> Self {
        View { off, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        View { off: self.off, rs: self.cs, cs: self.rs }
    }

    fn max_index(self, r: usize, c: usize) -> usize {
        if r == 0 || c == 0 {
            self.off
        } else {
            self.off + (r - 1) * self.rs + (c - 1) * self.cs
        }
    }
}

/// Bounds-checked `C[m×n] = alpha * A[m×k] * B[k×n] + beta * C`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    va: View,
    b: &[T],
    vb: View,
    beta: T,
    c: &mut [T],
    vc: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || va.max_index(m, k) < a.len(), "gemm: A out of bounds");
    assert!(k == 0 || vb.max_index(k, n) < b.len(), "gemm: B out of bounds");
    assert!(vc.max_index(m, n) < c.len(), "gemm: C out of bounds");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(va.off),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr().add(vb.off),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr().add(vc.off),
            vc.rs as isize,
            vc.cs as isize,
        )
    }
}

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("{} values for tensor shape {:?}", data.len(), shape)));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); n] }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {:?}", self.shape, shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (*a - *b).abs().to_f64_lossy()).fold(0.0, f64::max)
    }

    pub(crate) fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::Shape(format!("{what} must have rank {rank}, got {:?}", self.shape)));
        }
        Ok(())
    }
}

/// Concatenate two `B×C×…` tensors along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() < 2 || a.shape()[0] != b.shape()[0] || a.shape()[2..] != b.shape()[2..] {
        return Err(Error::Shape(format!("cannot concat {:?} and {:?}", a.shape(), b.shape())));
    }
    let batch = a.shape()[0];
    let (sa, sb) = (a.len() / batch, b.len() / batch);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..batch {
        data.extend_from_slice(&a.data()[i * sa..(i + 1) * sa]);
        data.extend_from_slice(&b.data()[i * sb..(i + 1) * sb]);
    }
    let mut shape = a.shape().to_vec();
    shape[1] += b.shape()[1];
    Tensor::new(shape, data)
}

/// Inverse of [`concat_channels`] for gradients.
pub fn split_channels<T: Real>(g: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let shape = g.shape();
    if shape.len() < 2 || first > shape[1] {
        return Err(Error::Shape(format!("cannot split {shape:?} at channel {first}")));
    }
    let batch = shape[0];
    let spatial: usize = shape[2..].iter().product();
    let per = shape[1] * spatial;
    let (na, nb) = (first * spatial, (shape[1] - first) * spatial);
    let mut a = Vec::with_capacity(batch * na);
    let mut b = Vec::with_capacity(batch * nb);
    for i in 0..batch {
        let s = &g.data()[i * per..(i + 1) * per];
        a.extend_from_slice(&s[..na]);
        b.extend_from_slice(&s[na..]);
    }
    let mut sa = shape.to_vec();
    sa[1] = first;
    let mut sb = shape.to_vec();
    sb[1] = shape[1] - first;
    Ok((Tensor::new(sa, a)?, Tensor::new(sb, b)?))
}
