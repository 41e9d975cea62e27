//! Max pooling and nearest-neighbour upsampling over the trailing spatial
//! axes of `B×C×…` tensors (2 or 3 spatial axes).

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Splits a `B×C×spatial` shape into `(B*C, [d, h, w])`, padding 2D with d=1.
fn split_shape(shape: &[usize], per_axis: &[usize], what: &str) -> Result<(usize, [usize; 3], [usize; 3])> {
    let nsp = shape
        .len()
        .checked_sub(2)
        .filter(|n| *n == 2 || *n == 3)
        .ok_or_else(|| Error::Shape(format!("{what} needs a B×C×H×W or B×C×D×H×W tensor, got {shape:?}")))?;
    if per_axis.len() != nsp {
        return Err(Error::Shape(format!("{what}: {} factors for {nsp} spatial axes", per_axis.len())));
    }
    let mut sp = [1; 3];
    let mut f = [1; 3];
    sp[3 - nsp..].copy_from_slice(&shape[2..]);
    f[3 - nsp..].copy_from_slice(per_axis);
    Ok((shape[0] * shape[1], sp, f))
}

fn with_spatial(shape: &[usize], sp: [usize; 3]) -> Vec<usize> {
    let nsp = shape.len() - 2;
    let mut out = shape[..2].to_vec();
    out.extend_from_slice(&sp[3 - nsp..]);
    out
}

/// Input flat index (within one channel plane) of each window maximum.
fn argmax<T: Real>(input: &Tensor<T>, window: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let (outer, sp, w) = split_shape(input.shape(), window, "maxpool")?;
    if w.contains(&0) {
        return Err(Error::Invalid("pooling window must be positive".into()));
    }
    if (0..3).any(|a| sp[a] % w[a] != 0) {
        return Err(Error::Shape(format!(
            "spatial dims {:?} not divisible by pooling window {:?}",
            &input.shape()[2..],
            window
        )));
    }
    let os = [sp[0] / w[0], sp[1] / w[1], sp[2] / w[2]];
    let plane = sp[0] * sp[1] * sp[2];
    let x = input.data();
    let mut idx = Vec::with_capacity(outer * os[0] * os[1] * os[2]);
    for c in 0..outer {
        let base = c * plane;
        for oz in 0..os[0] {
            for oy in 0..os[1] {
                for ox in 0..os[2] {
                    let mut best = usize::MAX;
                    for dz in 0..w[0] {
                        for dy in 0..w[1] {
                            let row = base + ((oz * w[0] + dz) * sp[1] + oy * w[1] + dy) * sp[2] + ox * w[2];
                            for i in row..row + w[2] {
                                if best == usize::MAX || x[i] > x[best] {
                                    best = i;
                                }
                            }
                        }
                    }
                    idx.push(best);
                }
            }
        }
    }
    Ok((idx, with_spatial(input.shape(), os)))
}

/// Non-overlapping max pooling; spatial dims must be divisible by `window`.
pub fn maxpool<T: Real>(input: &Tensor<T>, window: &[usize]) -> Result<Tensor<T>> {
    let (idx, shape) = argmax(input, window)?;
    Tensor::new(shape, idx.iter().map(|&i| input.data()[i]).collect())
}

/// Routes each output gradient to the (first) maximal input of its window.
pub fn maxpool_backward<T: Real>(input: &Tensor<T>, window: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (idx, shape) = argmax(input, window)?;
    if grad_out.shape() != shape.as_slice() {
        return Err(Error::Shape(format!("grad_out {:?}, expected {:?}", grad_out.shape(), shape)));
    }
    let mut dx = Tensor::zeros(input.shape().to_vec());
    for (&i, &g) in idx.iter().zip(grad_out.data()) {
        dx.data_mut()[i] += g;
    }
    Ok(dx)
}

/// Stride-1 max pooling with dilated windows, no padding:
/// `out[i] = max_t in[i + t * dilation]`. Evaluates a strided pooling at
/// every offset at once.
pub fn maxpool_dense<T: Real>(input: &Tensor<T>, window: &[usize], dilation: &[usize]) -> Result<Tensor<T>> {
    let (outer, sp, w) = split_shape(input.shape(), window, "maxpool_dense")?;
    let (_, _, d) = split_shape(input.shape(), dilation, "maxpool_dense")?;
    let mut os = [0; 3];
    for a in 0..3 {
        let span = d[a] * (w[a].max(1) - 1);
        if w[a] == 0 || d[a] == 0 || sp[a] <= span {
            return Err(Error::Shape(format!(
                "window {window:?} dilation {dilation:?} too large for {:?}",
                &input.shape()[2..]
            )));
        }
        os[a] = sp[a] - span;
    }
    let plane = sp[0] * sp[1] * sp[2];
    let x = input.data();
    let mut out = Vec::with_capacity(outer * os[0] * os[1] * os[2]);
    let mut row = vec![T::zero(); os[2]];
    for c in 0..outer {
        let base = c * plane;
        for oz in 0..os[0] {
            for oy in 0..os[1] {
                row.iter_mut().for_each(|r| *r = T::neg_infinity());
                for tz in 0..w[0] {
                    for ty in 0..w[1] {
                        let src = base + ((oz + tz * d[0]) * sp[1] + oy + ty * d[1]) * sp[2];
                        for tx in 0..w[2] {
                            let s = &x[src + tx * d[2]..src + tx * d[2] + os[2]];
                            for (r, &v) in row.iter_mut().zip(s) {
                                if v > *r {
                                    *r = v;
                                }
                            }
                        }
                    }
                }
                out.extend_from_slice(&row);
            }
        }
    }
    Tensor::new(with_spatial(input.shape(), os), out)
}

/// Nearest-neighbour upsampling by integer factors.
pub fn upsample<T: Real>(input: &Tensor<T>, factor: &[usize]) -> Result<Tensor<T>> {
    let (outer, sp, f) = split_shape(input.shape(), factor, "upsample")?;
    if f.iter().any(|&k| k < 1) {
        return Err(Error::Invalid(format!("upsample factor must be >= 1, got {factor:?}")));
    }
    let os = [sp[0] * f[0], sp[1] * f[1], sp[2] * f[2]];
    let plane = sp[0] * sp[1] * sp[2];
    let x = input.data();
    let mut out = Vec::with_capacity(outer * os[0] * os[1] * os[2]);
    let mut row = Vec::with_capacity(os[2]);
    for c in 0..outer {
        for oz in 0..os[0] {
            for oy in 0..os[1] {
                let src = c * plane + ((oz / f[0]) * sp[1] + oy / f[1]) * sp[2];
                row.clear();
                for &v in &x[src..src + sp[2]] {
                    row.extend(std::iter::repeat_n(v, f[2]));
                }
                out.extend_from_slice(&row);
            }
        }
    }
    Tensor::new(with_spatial(input.shape(), os), out)
}

/// Adjoint of [`upsample`]: sums each replicated block.
pub fn upsample_backward<T: Real>(grad_out: &Tensor<T>, factor: &[usize]) -> Result<Tensor<T>> {
    let (outer, os, f) = split_shape(grad_out.shape(), factor, "upsample_backward")?;
    if f.iter().any(|&k| k < 1) || (0..3).any(|a| os[a] % f[a] != 0) {
        return Err(Error::Shape(format!("gradient {:?} not a {factor:?} upsampling", grad_out.shape())));
    }
    let sp = [os[0] / f[0], os[1] / f[1], os[2] / f[2]];
    let (iplane, oplane) = (sp[0] * sp[1] * sp[2], os[0] * os[1] * os[2]);
    let mut dx = vec![T::zero(); outer * iplane];
    let g = grad_out.data();
    for c in 0..outer {
        for oz in 0..os[0] {
            for oy in 0..os[1] {
                let dst = c * iplane + ((oz / f[0]) * sp[1] + oy / f[1]) * sp[2];
                let src = c * oplane + (oz * os[1] + oy) * os[2];
                for (ox, &v) in g[src..src + os[2]].iter().enumerate() {
                    dx[dst + ox / f[2]] += v;
                }
            }
        }
    }
    Tensor::new(with_spatial(grad_out.shape(), sp), dx)
}
