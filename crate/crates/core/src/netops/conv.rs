//! Stride-1 cross-correlation over 2D and 3D grids.
//!
//! The input is zero-padded once; every kernel tap is then a constant flat
//! offset into the padded grid, so each tap is a single strided GEMM with no
//! per-tap copies. Outputs are produced on the padded grid's flat index
//! space and the real positions are picked out afterwards.

use super::tensor::{gemm, Real, Tensor, View};
use crate::error::{Error, Result};

/// Symmetric zero padding and dilation per spatial axis (Z, Y, X).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
}

impl ConvGeometry {
    /// Output extent equals input extent (odd kernels).
    pub fn same(kernel: [usize; 3]) -> Self {
        ConvGeometry { padding: kernel.map(|k| k / 2), dilation: [1; 3] }
    }

    pub fn valid() -> Self {
        ConvGeometry { padding: [0; 3], dilation: [1; 3] }
    }

    pub fn dilated(mut self, dilation: [usize; 3]) -> Self {
        self.dilation = dilation;
        self
    }
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
struct Plan {
    batch: usize,
    cin: usize,
    cout: usize,
    ins: [usize; 3],
    outs: [usize; 3],
    ks: [usize; 3],
    geom: ConvGeometry,
}

impl Plan {
    fn new<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>, geom: ConvGeometry) -> Result<Self> {
        input.expect_rank(5, "conv input")?;
        kernels.expect_rank(5, "conv kernels")?;
        let (is, ks) = (input.shape(), kernels.shape());
        if is[1] != ks[1] {
            return Err(Error::Shape(format!(
                "channel mismatch: input has {} channels, kernels expect {}",
                is[1], ks[1]
            )));
        }
        if geom.dilation.contains(&0) {
            return Err(Error::Invalid("dilation must be positive".into()));
        }
        let mut outs = [0; 3];
        for a in 0..3 {
            let span = geom.dilation[a] * (ks[2 + a] - 1);
            let padded = is[2 + a] + 2 * geom.padding[a];
            if ks[2 + a] == 0 || padded <= span {
                return Err(Error::Shape(format!(
                    "kernel {:?} does not fit input {:?} with {:?}",
                    &ks[2..],
                    &is[2..],
                    geom
                )));
            }
            outs[a] = padded - span;
        }
        Ok(Plan {
            batch: is[0],
            cin: is[1],
            cout: ks[0],
            ins: [is[2], is[3], is[4]],
            outs,
            ks: [ks[2], ks[3], ks[4]],
            geom,
        })
    }

    fn nin(&self) -> usize {
        self.ins.iter().product()
    }

    fn nout(&self) -> usize {
        self.outs.iter().product()
    }

    fn kvol(&self) -> usize {
        self.ks.iter().product()
    }

    /// Extents of the zero-padded input grid.
    fn padded(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.ins[a] + 2 * self.geom.padding[a])
    }

    fn npad(&self) -> usize {
        self.padded().iter().product()
    }

    /// Outputs are computed at flat positions of the padded grid; this is the
    /// length of the flat span that contains every real output position.
    fn span(&self) -> usize {
        let [_, ph, pw] = self.padded();
        ((self.outs[0] - 1) * ph + self.outs[1] - 1) * pw + self.outs[2]
    }

    /// Flat offset of tap `o` in the padded grid.
    fn tap_offset(&self, o: usize) -> usize {
        let [_, ph, pw] = self.padded();
        let (ks, d) = (self.ks, self.geom.dilation);
        let t = [o / (ks[1] * ks[2]), (o / ks[2]) % ks[1], o % ks[2]];
        (t[0] * d[0] * ph + t[1] * d[1]) * pw + t[2] * d[2]
    }

    /// Copy one sample's `C×D×H×W` input into a zero-padded `C×Dp×Hp×Wp` grid.
    fn pad_input<T: Real>(&self, x: &[T], out: &mut [T]) {
        let [pd, ph, pw] = self.padded();
        let [d, h, w] = self.ins;
        let p = self.geom.padding;
        out.iter_mut().for_each(|v| *v = T::zero());
        for c in 0..self.cin {
            for z in 0..d {
                for y in 0..h {
                    let src = ((c * d + z) * h + y) * w;
                    let dst = ((c * pd + z + p[0]) * ph + y + p[1]) * pw + p[2];
                    out[dst..dst + w].copy_from_slice(&x[src..src + w]);
                }
            }
        }
    }

    /// Inverse of [`Plan::pad_input`], accumulating the interior.
    fn unpad_add<T: Real>(&self, padded: &[T], dx: &mut [T]) {
        let [pd, ph, pw] = self.padded();
        let [d, h, w] = self.ins;
        let p = self.geom.padding;
        for c in 0..self.cin {
            for z in 0..d {
                for y in 0..h {
                    let dst = ((c * d + z) * h + y) * w;
                    let src = ((c * pd + z + p[0]) * ph + y + p[1]) * pw + p[2];
                    for (a, &b) in dx[dst..dst + w].iter_mut().zip(&padded[src..src + w]) {
                        *a += b;
                    }
                }
            }
        }
    }

    /// Map between dense `K×Do×Ho×Wo` rows and the flat padded-grid span.
    fn for_each_out_row(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [_, ph, pw] = self.padded();
        let [od, oh, ow] = self.outs;
        for z in 0..od {
            for y in 0..oh {
                f((z * oh + y) * ow, (z * ph + y) * pw, ow);
            }
        }
    }
}

fn check_bias<T: Real>(bias: &Tensor<T>, cout: usize) -> Result<()> {
    if bias.len() != cout {
        return Err(Error::Shape(format!("bias has {} entries for {cout} kernels", bias.len())));
    }
    Ok(())
}

/// General 3D convolution on `B×C×D×H×W` input with `K×C×kd×kh×kw` kernels.
pub fn conv3d_with<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let p = Plan::new(input, kernels, geom)?;
    check_bias(bias, p.cout)?;
    let (nin, nout, kvol, npad, span) = (p.nin(), p.nout(), p.kvol(), p.npad(), p.span());
    let mut out = Tensor::zeros(vec![p.batch, p.cout, p.outs[0], p.outs[1], p.outs[2]]);
    let mut padded = vec![T::zero(); p.cin * npad];
    let mut flat = vec![T::zero(); p.cout * span];
    let w = kernels.data();
    for b in 0..p.batch {
        let x = &input.data()[b * p.cin * nin..(b + 1) * p.cin * nin];
        p.pad_input(x, &mut padded);
        for (k, row) in flat.chunks_mut(span).enumerate() {
            row.iter_mut().for_each(|v| *v = bias.data()[k]);
        }
        for o in 0..kvol {
            // Y (K×L) += W_tap (K×C) · P[:, δ..δ+L]
            gemm(
                p.cout,
                p.cin,
                span,
                T::one(),
                w,
                View { off: o, rs: p.cin * kvol, cs: kvol },
                &padded,
                View { off: p.tap_offset(o), rs: npad, cs: 1 },
                T::one(),
                &mut flat,
                View::rows(0, span),
            );
        }
        let y = &mut out.data_mut()[b * p.cout * nout..(b + 1) * p.cout * nout];
        for k in 0..p.cout {
            let (yk, fk) = (&mut y[k * nout..(k + 1) * nout], &flat[k * span..(k + 1) * span]);
            p.for_each_out_row(|dst, src, len| yk[dst..dst + len].copy_from_slice(&fk[src..src + len]));
        }
    }
    Ok(out)
}

/// Gradients of [`conv3d_with`] given the upstream gradient.
pub fn conv3d_backward_with<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: ConvGeometry,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let p = Plan::new(input, kernels, geom)?;
    let expect = [p.batch, p.cout, p.outs[0], p.outs[1], p.outs[2]];
    if grad_out.shape() != expect {
        return Err(Error::Shape(format!("grad_out {:?}, expected {:?}", grad_out.shape(), expect)));
    }
    let (nin, nout, kvol, npad, span) = (p.nin(), p.nout(), p.kvol(), p.npad(), p.span());
    let mut dw = Tensor::zeros(kernels.shape().to_vec());
    let mut db = Tensor::zeros(vec![p.cout]);
    let mut dx = need_input_grad.then(|| Tensor::zeros(input.shape().to_vec()));
    let mut padded = vec![T::zero(); p.cin * npad];
    let mut dpadded = if need_input_grad { vec![T::zero(); p.cin * npad] } else { Vec::new() };
    // garbage positions of the flat span stay zero so they contribute nothing
    let mut flat = vec![T::zero(); p.cout * span];
    let w = kernels.data();
    for b in 0..p.batch {
        let x = &input.data()[b * p.cin * nin..(b + 1) * p.cin * nin];
        let dy = &grad_out.data()[b * p.cout * nout..(b + 1) * p.cout * nout];
        p.pad_input(x, &mut padded);
        for k in 0..p.cout {
            let (dk, fk) = (&dy[k * nout..(k + 1) * nout], &mut flat[k * span..(k + 1) * span]);
            p.for_each_out_row(|src, dst, len| fk[dst..dst + len].copy_from_slice(&dk[src..src + len]));
            db.data_mut()[k] += dk.iter().copied().sum::<T>();
        }
        if need_input_grad {
            dpadded.iter_mut().for_each(|v| *v = T::zero());
        }
        for o in 0..kvol {
            let delta = p.tap_offset(o);
            // dW_tap (K×C) += dY (K×L) · P[:, δ..δ+L]^T
            gemm(
                p.cout,
                span,
                p.cin,
                T::one(),
                &flat,
                View::rows(0, span),
                &padded,
                View { off: delta, rs: npad, cs: 1 }.t(),
                T::one(),
                dw.data_mut(),
                View { off: o, rs: p.cin * kvol, cs: kvol },
            );
            if need_input_grad {
                // dP[:, δ..δ+L] (C×L) += W_tap^T (C×K) · dY (K×L)
                gemm(
                    p.cin,
                    p.cout,
                    span,
                    T::one(),
                    w,
                    View { off: o, rs: p.cin * kvol, cs: kvol }.t(),
                    &flat,
                    View::rows(0, span),
                    T::one(),
                    &mut dpadded,
                    View { off: delta, rs: npad, cs: 1 },
                );
            }
        }
        if let Some(dx) = dx.as_mut() {
            p.unpad_add(&dpadded, &mut dx.data_mut()[b * p.cin * nin..(b + 1) * p.cin * nin]);
        }
    }
    Ok(ConvGrads { input: dx, kernels: dw, bias: db })
}

fn require_odd(ks: &[usize]) -> Result<()> {
    if ks.iter().any(|k| k % 2 == 0) {
        return Err(Error::Invalid(format!("same-padded convolution needs odd kernels, got {ks:?}")));
    }
    Ok(())
}

/// Same-padded stride-1 3D convolution.
pub fn conv3d<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    kernels.expect_rank(5, "conv3d kernels")?;
    require_odd(&kernels.shape()[2..])?;
    let ks = &kernels.shape()[2..];
    conv3d_with(input, kernels, bias, ConvGeometry::same([ks[0], ks[1], ks[2]]))
}

pub fn conv3d_backward<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
    kernels.expect_rank(5, "conv3d kernels")?;
    let ks = &kernels.shape()[2..];
    conv3d_backward_with(input, kernels, grad_out, ConvGeometry::same([ks[0], ks[1], ks[2]]), true)
}

fn lift2d<T: Real>(t: &Tensor<T>, what: &str) -> Result<Tensor<T>> {
    t.expect_rank(4, what)?;
    let s = t.shape();
    t.clone().reshape(vec![s[0], s[1], 1, s[2], s[3]])
}

fn drop2d<T: Real>(t: Tensor<T>) -> Result<Tensor<T>> {
    let s = t.shape().to_vec();
    t.reshape(vec![s[0], s[1], s[3], s[4]])
}

/// 2D convolution on `B×C×H×W` with `K×C×kh×kw` kernels; `padding` and
/// `dilation` are (Y, X).
pub fn conv2d_with<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    padding: [usize; 2],
    dilation: [usize; 2],
) -> Result<Tensor<T>> {
    let geom = ConvGeometry { padding: [0, padding[0], padding[1]], dilation: [1, dilation[0], dilation[1]] };
    drop2d(conv3d_with(&lift2d(input, "conv2d input")?, &lift2d(kernels, "conv2d kernels")?, bias, geom)?)
}

pub fn conv2d_backward_with<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
    padding: [usize; 2],
    dilation: [usize; 2],
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let geom = ConvGeometry { padding: [0, padding[0], padding[1]], dilation: [1, dilation[0], dilation[1]] };
    let g = conv3d_backward_with(
        &lift2d(input, "conv2d input")?,
        &lift2d(kernels, "conv2d kernels")?,
        &lift2d(grad_out, "conv2d grad")?,
        geom,
        need_input_grad,
    )?;
    Ok(ConvGrads { input: g.input.map(drop2d).transpose()?, kernels: drop2d(g.kernels)?, bias: g.bias })
}

/// Same-padded stride-1 2D convolution.
pub fn conv2d<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    kernels.expect_rank(4, "conv2d kernels")?;
    require_odd(&kernels.shape()[2..])?;
    let ks = kernels.shape();
    conv2d_with(input, kernels, bias, [ks[2] / 2, ks[3] / 2], [1, 1])
}

pub fn conv2d_backward<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
    kernels.expect_rank(4, "conv2d kernels")?;
    let ks = kernels.shape();
    conv2d_backward_with(input, kernels, grad_out, [ks[2] / 2, ks[3] / 2], [1, 1], true)
}
