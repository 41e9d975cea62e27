//! The 2D pseudo-labeler: a window classifier (three valid convolutions
//! with max pooling, then two fully connected layers) that predicts the
//! center pixel of a square window.
//!
//! Whole-slice inference runs the same weights densely: each pooling stage
//! becomes a stride-1 pooling, later convolutions are dilated by the
//! accumulated pooling factor, and the fully connected layers become
//! convolutions. The result equals classifying every pixel's own
//! reflect-padded window, at a fraction of the cost.

use crate::checkpoint::{load_model, save_model, ModelRecord, ParamInfo};
use crate::error::{Error, Result};
use crate::fuselabel::{weighted_bce_logit_grad, weighted_bce_slices};
use crate::netops::{
    conv2d_backward_with, conv2d_with, dense, dense_backward, init_uniform, maxpool, maxpool_backward, maxpool_dense,
    relu_backward, relu_inplace, sigmoid_scalar, Adam, AdamConfig, Real, Tensor,
};
use crate::training::{EarlyStop, HyperParams, Normalization, TrainHistory};
use crate::volgrid::{
    extract_block, reflect_index, ArtifactMeta, Label, LabelVolume, PadMode, PatchSpec, ProbVolume, Shape3, Volume3D,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seg2DSpec {
    pub conv_channels: Vec<usize>,
    pub kernel: [usize; 2],
    pub fc_sizes: Vec<usize>,
    pub input_window: usize,
    #[serde(default = "default_pool")]
    pub pool: usize,
}

fn default_pool() -> usize {
    3
}

impl Default for Seg2DSpec {
    fn default() -> Self {
        Seg2DSpec { conv_channels: vec![16, 32, 64], kernel: [3, 3], fc_sizes: vec![128, 1], input_window: 35, pool: 3 }
    }
}

/// Spatial extent of the last convolution's output on one window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    final_hw: [usize; 2],
}

impl Seg2DSpec {
    fn geometry(&self) -> Result<Geometry> {
        let bad = |m: String| Err(Error::Config(format!("seg2d spec: {m}")));
        if self.conv_channels.len() != 3 {
            return bad(format!("need exactly 3 conv layers, got {}", self.conv_channels.len()));
        }
        if self.fc_sizes.len() != 2 {
            return bad(format!("need exactly 2 fully connected layers, got {}", self.fc_sizes.len()));
        }
        if self.fc_sizes[1] != 1 {
            return bad(format!("last fully connected layer must have 1 output, got {}", self.fc_sizes[1]));
        }
        if self.conv_channels.iter().chain(&self.fc_sizes).any(|&c| c == 0) || self.kernel.contains(&0) {
            return bad("layer sizes must be positive".into());
        }
        if self.input_window.is_multiple_of(2) {
            return bad(format!("input window must be odd, got {}", self.input_window));
        }
        if self.pool == 0 {
            return bad("pool must be positive".into());
        }
        let mut final_hw = [0; 2];
        for (a, out) in final_hw.iter_mut().enumerate() {
            let k = self.kernel[a] - 1;
            let mut s = self.input_window;
            for layer in 0..3 {
                if s <= k {
                    return bad(format!("window {} too small for the layer stack", self.input_window));
                }
                s -= k;
                if layer < 2 {
                    if !s.is_multiple_of(self.pool) {
                        return bad(format!(
                            "window {} does not pool evenly (extent {s} at layer {}, pool {})",
                            self.input_window,
                            layer + 1,
                            self.pool
                        ));
                    }
                    s /= self.pool;
                }
            }
            *out = s;
        }
        Ok(Geometry { final_hw })
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry().map(|_| ())
    }

    fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let g = self.geometry()?;
        let [kh, kw] = self.kernel;
        let c = &self.conv_channels;
        let f = &self.fc_sizes;
        Ok(vec![
            ("conv1.w".into(), vec![c[0], 1, kh, kw]),
            ("conv1.b".into(), vec![c[0]]),
            ("conv2.w".into(), vec![c[1], c[0], kh, kw]),
            ("conv2.b".into(), vec![c[1]]),
            ("conv3.w".into(), vec![c[2], c[1], kh, kw]),
            ("conv3.b".into(), vec![c[2]]),
            ("fc1.w".into(), vec![f[0], c[2] * g.final_hw[0] * g.final_hw[1]]),
            ("fc1.b".into(), vec![f[0]]),
            ("fc2.w".into(), vec![1, f[0]]),
            ("fc2.b".into(), vec![1]),
        ])
    }

    fn param_info(&self) -> Result<Vec<ParamInfo>> {
        Ok(self.param_shapes()?.into_iter().map(|(name, shape)| ParamInfo { name, shape }).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState2D {
    pub spec: Seg2DSpec,
    pub params: Vec<Tensor<f32>>,
    pub normalization: Normalization,
    pub seed: u64,
    pub epoch: usize,
}

impl ModelState2D {
    /// Number of layers carrying weights (convolutional and fully connected).
    pub fn parameterized_layers(&self) -> usize {
        self.params.len() / 2
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: Option<ArtifactMeta>) -> Result<()> {
        let rec = ModelRecord {
            tag: "seg2d",
            spec: &self.spec,
            names: self.spec.param_info()?,
            params: &self.params,
            normalization: self.normalization,
            seed: self.seed,
            epoch: self.epoch,
        };
        save_model(path, rec, meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Option<ArtifactMeta>)> {
        let (spec, h, params) = load_model(path, "seg2d", Seg2DSpec::param_info)?;
        Ok((ModelState2D { spec, params, normalization: h.normalization, seed: h.seed, epoch: h.epoch }, h.meta))
    }
}

/// Fan-in scaled uniform weights, zero biases, drawn from ChaCha8(seed).
pub fn build_seg2d(spec: &Seg2DSpec, seed: u64) -> Result<ModelState2D> {
    let shapes = spec.param_shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = shapes
        .into_iter()
        .map(|(_, shape)| {
            if shape.len() == 1 {
                Tensor::zeros(shape)
            } else {
                let fan_in = shape[1..].iter().product();
                init_uniform(shape, fan_in, &mut rng)
            }
        })
        .collect();
    Ok(ModelState2D { spec: spec.clone(), params, normalization: Normalization::default(), seed, epoch: 0 })
}

pub(crate) struct WindowCache<T> {
    x: Tensor<T>,
    a1: Tensor<T>,
    p1: Tensor<T>,
    a2: Tensor<T>,
    p2: Tensor<T>,
    a3: Tensor<T>,
    flat: Tensor<T>,
    h: Tensor<T>,
}

/// Logits (`B×1`) for a batch of `B×1×W×W` windows.
pub(crate) fn forward_windows<T: Real>(
    spec: &Seg2DSpec,
    params: &[Tensor<T>],
    x: Tensor<T>,
) -> Result<(Tensor<T>, WindowCache<T>)> {
    let pool = [spec.pool, spec.pool];
    let conv = |x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>| -> Result<Tensor<T>> {
        let mut y = conv2d_with(x, w, b, [0, 0], [1, 1])?;
        relu_inplace(&mut y);
        Ok(y)
    };
    let a1 = conv(&x, &params[0], &params[1])?;
    let p1 = maxpool(&a1, &pool)?;
    let a2 = conv(&p1, &params[2], &params[3])?;
    let p2 = maxpool(&a2, &pool)?;
    let a3 = conv(&p2, &params[4], &params[5])?;
    let b = x.shape()[0];
    let flat = a3.clone().reshape(vec![b, a3.len() / b])?;
    let mut h = dense(&flat, &params[6], &params[7])?;
    relu_inplace(&mut h);
    let z = dense(&h, &params[8], &params[9])?;
    Ok((z, WindowCache { x, a1, p1, a2, p2, a3, flat, h }))
}

/// Parameter gradients given `dL/dlogits`.
pub(crate) fn backward_windows<T: Real>(
    spec: &Seg2DSpec,
    params: &[Tensor<T>],
    c: &WindowCache<T>,
    dz: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let pool = [spec.pool, spec.pool];
    let g5 = dense_backward(&c.h, &params[8], dz)?;
    let dh = relu_backward(&c.h, &g5.input)?;
    let g4 = dense_backward(&c.flat, &params[6], &dh)?;
    let da3 = relu_backward(&c.a3, &g4.input.reshape(c.a3.shape().to_vec())?)?;
    let g3 = conv2d_backward_with(&c.p2, &params[4], &da3, [0, 0], [1, 1], true)?;
    let da2 = relu_backward(&c.a2, &maxpool_backward(&c.a2, &pool, g3.input.as_ref().unwrap())?)?;
    let g2 = conv2d_backward_with(&c.p1, &params[2], &da2, [0, 0], [1, 1], true)?;
    let da1 = relu_backward(&c.a1, &maxpool_backward(&c.a1, &pool, g2.input.as_ref().unwrap())?)?;
    let g1 = conv2d_backward_with(&c.x, &params[0], &da1, [0, 0], [1, 1], false)?;
    Ok(vec![g1.kernels, g1.bias, g2.kernels, g2.bias, g3.kernels, g3.bias, g4.weights, g4.bias, g5.weights, g5.bias])
}

/// Dense logits for one already-normalised slice (`h×w`).
fn slice_logits(model: &ModelState2D, slice: &[f32], h: usize, w: usize) -> Result<Vec<f32>> {
    let spec = &model.spec;
    let g = spec.geometry()?;
    let r = spec.input_window / 2;
    let (hp, wp) = (h + 2 * r, w + 2 * r);
    let padded = Tensor::from_fn(vec![1, 1, hp, wp], |i| {
        let (y, x) = ((i / wp) as isize - r as isize, (i % wp) as isize - r as isize);
        slice[reflect_index(y, h) * w + reflect_index(x, w)]
    });
    let p = &model.params;
    let s = spec.pool;
    let conv = |x: &Tensor<f32>, wt: &Tensor<f32>, b: &Tensor<f32>, d: usize, relu: bool| -> Result<Tensor<f32>> {
        let mut y = conv2d_with(x, wt, b, [0, 0], [d, d])?;
        if relu {
            relu_inplace(&mut y);
        }
        Ok(y)
    };
    let a1 = conv(&padded, &p[0], &p[1], 1, true)?;
    let q1 = maxpool_dense(&a1, &[s, s], &[1, 1])?;
    let a2 = conv(&q1, &p[2], &p[3], s, true)?;
    let q2 = maxpool_dense(&a2, &[s, s], &[s, s])?;
    let a3 = conv(&q2, &p[4], &p[5], s * s, true)?;
    let c3 = spec.conv_channels[2];
    let fc1 = p[6].clone().reshape(vec![spec.fc_sizes[0], c3, g.final_hw[0], g.final_hw[1]])?;
    let hid = conv(&a3, &fc1, &p[7], s * s, true)?;
    let fc2 = p[8].clone().reshape(vec![1, spec.fc_sizes[0], 1, 1])?;
    let z = conv(&hid, &fc2, &p[9], 1, false)?;
    if z.shape() != [1, 1, h, w] {
        return Err(Error::Shape(format!("dense inference produced {:?} for a {h}x{w} slice", z.shape())));
    }
    Ok(z.into_data())
}

/// Probability map computed slice by slice.
pub fn predict_volume_2d(model: &ModelState2D, v: &Volume3D) -> Result<ProbVolume> {
    let [d, h, w] = v.shape();
    let norm = model.normalization.apply(v);
    let slices: Vec<Vec<f32>> = (0..d)
        .into_par_iter()
        .map(|z| {
            let logits = slice_logits(model, &norm[z * h * w..(z + 1) * h * w], h, w)?;
            Ok(logits.into_iter().map(sigmoid_scalar).collect())
        })
        .collect::<Result<_>>()?;
    ProbVolume::new(v.shape(), v.voxel_size(), slices.concat())
}

/// Read access to annotations for training. Implementations report which
/// slices hold labels; the trainer only queries voxels in those slices.
pub trait LabelSource: Sync {
    fn shape(&self) -> Shape3;
    fn labeled_slices(&self) -> Vec<usize>;
    fn label(&self, z: usize, y: usize, x: usize) -> Label;
}

impl LabelSource for LabelVolume {
    fn shape(&self) -> Shape3 {
        LabelVolume::shape(self)
    }
    fn labeled_slices(&self) -> Vec<usize> {
        LabelVolume::labeled_slices(self)
    }
    fn label(&self, z: usize, y: usize, x: usize) -> Label {
        self.get(z, y, x)
    }
}

/// Pixel address packed as (volume, linear index).
type Pixel = (u32, u32);

fn collect_pixels<L: LabelSource>(data: &[(&Volume3D, &L)]) -> Result<(Vec<Pixel>, Vec<Pixel>)> {
    let (mut fg, mut bg) = (Vec::new(), Vec::new());
    for (vi, (v, l)) in data.iter().enumerate() {
        if l.shape() != v.shape() {
            return Err(Error::Shape(format!("labels {:?} vs volume {:?}", l.shape(), v.shape())));
        }
        let [_, h, w] = v.shape();
        for z in l.labeled_slices() {
            for y in 0..h {
                for x in 0..w {
                    let idx = ((z * h + y) * w + x) as u32;
                    match l.label(z, y, x) {
                        Label::Foreground => fg.push((vi as u32, idx)),
                        Label::Background => bg.push((vi as u32, idx)),
                        Label::Unlabeled => {}
                    }
                }
            }
        }
    }
    if fg.is_empty() && bg.is_empty() {
        return Err(Error::Invalid("no labeled pixels to train the 2D model on".into()));
    }
    Ok((fg, bg))
}

fn window_batch(
    spec: &Seg2DSpec,
    norm: &[Vec<f32>],
    shapes: &[Shape3],
    pixels: &[(Pixel, f32)],
) -> Result<(Tensor<f32>, Vec<f32>)> {
    let win = spec.input_window;
    let r = (win / 2) as isize;
    let mut x = Vec::with_capacity(pixels.len() * win * win);
    let mut t = Vec::with_capacity(pixels.len());
    for &((vi, idx), target) in pixels {
        let s = shapes[vi as usize];
        let idx = idx as usize;
        let (z, y, xx) = (idx / (s[1] * s[2]), (idx / s[2]) % s[1], idx % s[2]);
        let spec = PatchSpec { origin: [z as isize, y as isize - r, xx as isize - r], shape: [1, win, win] };
        x.extend(extract_block(&norm[vi as usize], s, &spec, PadMode::Reflect)?.values);
        t.push(target);
    }
    Ok((Tensor::new(vec![pixels.len(), 1, win, win], x)?, t))
}

/// Class-balanced minibatch training on labeled pixels. On a non-finite
/// loss the model is restored to its last finite state and an error is
/// returned.
pub fn train_seg2d<L: LabelSource>(
    model: &mut ModelState2D,
    data: &[(&Volume3D, &L)],
    hyper: &HyperParams,
) -> Result<TrainHistory> {
    hyper.validate()?;
    let (fg, bg) = collect_pixels(data)?;
    model.normalization = Normalization::fit(data.iter().map(|(v, _)| *v))?;
    let norm: Vec<Vec<f32>> = data.iter().map(|(v, _)| model.normalization.apply(v)).collect();
    let shapes: Vec<Shape3> = data.iter().map(|(v, _)| v.shape()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(hyper.lr), &model.params);
    let mut history = TrainHistory::default();
    let mut stop = EarlyStop::new(hyper.early_stop_patience);
    let ones = vec![1.0f32; hyper.batch_size];
    for _ in 0..hyper.epochs {
        let last_good = model.params.clone();
        let mut losses = Vec::with_capacity(hyper.batches_per_epoch());
        for _ in 0..hyper.batches_per_epoch() {
            let picks: Vec<(Pixel, f32)> = (0..hyper.batch_size)
                .map(|i| {
                    let from_fg = if fg.is_empty() {
                        false
                    } else if bg.is_empty() {
                        true
                    } else {
                        i % 2 == 0
                    };
                    let (pool, t) = if from_fg { (&fg, 1.0) } else { (&bg, 0.0) };
                    (pool[rng.random_range(0..pool.len())], t)
                })
                .collect();
            let (x, t) = window_batch(&model.spec, &norm, &shapes, &picks)?;
            let (z, cache) = forward_windows(&model.spec, &model.params, x)?;
            let p: Vec<f32> = z.data().iter().map(|&v| sigmoid_scalar(v)).collect();
            let loss = weighted_bce_slices(&p, &t, &ones)?;
            let dz = Tensor::new(z.shape().to_vec(), weighted_bce_logit_grad(&p, &t, &ones)?)?;
            let grads = backward_windows(&model.spec, &model.params, &cache, &dz)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                model.params = last_good;
                return Err(Error::numerical("train_seg2d", format!("non-finite loss at epoch {}", model.epoch)));
            }
            adam.update(&mut model.params, &grads);
            losses.push(loss);
        }
        if model.params.iter().any(|p| !p.all_finite()) {
            model.params = last_good;
            return Err(Error::numerical("train_seg2d", format!("parameters diverged at epoch {}", model.epoch)));
        }
        model.epoch += 1;
        let epoch_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        history.epoch_loss.push(epoch_loss);
        log::debug!("seg2d epoch {} loss {epoch_loss:.5}", model.epoch);
        if stop.observe(epoch_loss) {
            history.stopped_early = true;
            break;
        }
    }
    Ok(history)
}

/// Mean BCE of the model's per-pixel predictions over the labeled voxels.
pub fn labeled_bce(model: &ModelState2D, v: &Volume3D, labels: &LabelVolume) -> Result<f64> {
    labels.check_aligned(v.shape())?;
    let probs = predict_volume_2d(model, v)?;
    let (mut p, mut t) = (Vec::new(), Vec::new());
    for (i, l) in labels.labels().iter().enumerate() {
        if l.is_labeled() {
            p.push(probs.probs()[i]);
            t.push(if *l == Label::Foreground { 1.0f32 } else { 0.0 });
        }
    }
    let ones = vec![1.0f32; p.len()];
    weighted_bce_slices(&p, &t, &ones)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netops::{grad_check, DiffOp};
    use crate::phantom::{generate_phantom, sparsify_labels, PhantomConfig, SparsityPlan};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn hyper(epochs: usize, seed: u64) -> HyperParams {
        HyperParams {
            lr: 1e-3,
            batch_size: 16,
            patches_per_epoch: 64,
            epochs,
            seed,
            optimizer: Default::default(),
            early_stop_patience: 0,
        }
    }

    fn small_spec() -> Seg2DSpec {
        Seg2DSpec { conv_channels: vec![4, 6, 8], fc_sizes: vec![12, 1], ..Seg2DSpec::default() }
    }

    #[test]
    fn build_is_deterministic_and_has_five_layers() {
        let spec = Seg2DSpec::default();
        let a = build_seg2d(&spec, 1).unwrap();
        assert_eq!(a, build_seg2d(&spec, 1).unwrap());
        assert_ne!(a.params, build_seg2d(&spec, 2).unwrap().params);
        assert_eq!(a.parameterized_layers(), 5);
        assert_eq!(a.params[6].shape(), [128, 64]);
    }

    #[test]
    fn spec_validation() {
        let four = Seg2DSpec { conv_channels: vec![8, 8, 8, 8], ..Seg2DSpec::default() };
        assert!(build_seg2d(&four, 0).is_err());
        let three_fc = Seg2DSpec { fc_sizes: vec![8, 8, 1], ..Seg2DSpec::default() };
        assert!(build_seg2d(&three_fc, 0).is_err());
        let uneven = Seg2DSpec { input_window: 33, ..Seg2DSpec::default() };
        assert!(build_seg2d(&uneven, 0).is_err());
        let wider = Seg2DSpec { input_window: 53, ..Seg2DSpec::default() };
        assert_eq!(build_seg2d(&wider, 0).unwrap().params[6].shape(), [128, 64 * 9]);
    }

    fn window_probs(model: &ModelState2D, norm: &[f32], shape: Shape3, pixels: &[(usize, usize, usize)]) -> Vec<f32> {
        let picks: Vec<(Pixel, f32)> =
            pixels.iter().map(|&(z, y, x)| ((0, ((z * shape[1] + y) * shape[2] + x) as u32), 0.0)).collect();
        let (xw, _) = window_batch(&model.spec, &[norm.to_vec()], &[shape], &picks).unwrap();
        let (z, _) = forward_windows(&model.spec, &model.params, xw).unwrap();
        z.data().iter().map(|&v| sigmoid_scalar(v)).collect()
    }

    #[test]
    fn dense_inference_equals_window_classification() {
        for (spec, shape) in [(small_spec(), [2, 13, 11]), (Seg2DSpec { input_window: 53, ..small_spec() }, [1, 9, 20])]
        {
            let model = build_seg2d(&spec, 5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let data: Vec<f32> = (0..shape.iter().product()).map(|_| rng.random::<f32>()).collect();
            let v = Volume3D::from_f32(shape, [1.0; 3], data).unwrap();
            let dense = predict_volume_2d(&model, &v).unwrap();
            let norm = model.normalization.apply(&v);
            let pixels: Vec<_> = (0..shape[0])
                .flat_map(|z| (0..shape[1]).flat_map(move |y| (0..shape[2]).map(move |x| (z, y, x))))
                .collect();
            let win = window_probs(&model, &norm, shape, &pixels);
            for (i, (&a, &b)) in dense.probs().iter().zip(&win).enumerate() {
                assert!((a - b).abs() < 1e-5, "pixel {i}: dense {a} window {b}");
            }
        }
    }

    #[test]
    fn constant_volume_gives_constant_slices_in_range() {
        let model = build_seg2d(&small_spec(), 2).unwrap();
        let v = Volume3D::filled([3, 10, 12], [1.0; 3], 0.7).unwrap();
        let p = predict_volume_2d(&model, &v).unwrap();
        for s in p.probs().chunks(120) {
            assert!(s.iter().all(|&x| (x - s[0]).abs() < 1e-6));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r =
            Volume3D::from_f32([2, 9, 9], [1.0; 3], (0..162).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
        assert!(predict_volume_2d(&model, &r).unwrap().probs().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn slices_are_independent() {
        let model = build_seg2d(&small_spec(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shape = [4, 10, 9];
        let data: Vec<f32> = (0..360).map(|_| rng.random()).collect();
        let v = Volume3D::from_f32(shape, [1.0; 3], data.clone()).unwrap();
        let full = predict_volume_2d(&model, &v).unwrap();
        let perm = [2, 0, 3, 1];
        let permuted: Vec<f32> = perm.iter().flat_map(|&z| data[z * 90..(z + 1) * 90].to_vec()).collect();
        let pv = predict_volume_2d(&model, &Volume3D::from_f32(shape, [1.0; 3], permuted).unwrap()).unwrap();
        for (k, &z) in perm.iter().enumerate() {
            assert_eq!(&pv.probs()[k * 90..(k + 1) * 90], &full.probs()[z * 90..(z + 1) * 90]);
            let alone = predict_volume_2d(&model, &v.slab(z, 1).unwrap()).unwrap();
            assert_eq!(alone.probs(), &full.probs()[z * 90..(z + 1) * 90]);
        }
    }

    /// The window network as a function of its parameters at a fixed input.
    struct WindowNet {
        spec: Seg2DSpec,
        input: Tensor<f64>,
    }

    impl DiffOp for WindowNet {
        fn name(&self) -> String {
            "seg2d_windows".into()
        }
        fn arity(&self) -> usize {
            10
        }
        fn forward(&self, a: &[Tensor<f64>]) -> Result<Tensor<f64>> {
            Ok(forward_windows(&self.spec, a, self.input.clone())?.0)
        }
        fn backward(&self, a: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
            let (_, cache) = forward_windows(&self.spec, a, self.input.clone())?;
            backward_windows(&self.spec, a, &cache, g)
        }
    }

    #[test]
    fn network_gradient_passes_finite_differences() {
        let spec = Seg2DSpec { conv_channels: vec![2, 3, 4], fc_sizes: vec![5, 1], ..Seg2DSpec::default() };
        let model = build_seg2d(&spec, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = Tensor::from_fn(vec![2, 1, 35, 35], |_| rng.random_range(-1.0..1.0));
        // small positive bias shift keeps ReLUs away from their kink
        let point: Vec<Tensor<f64>> = model
            .params
            .iter()
            .map(|p| {
                let shift: Vec<f64> = (0..p.len()).map(|_| rng.random_range(0.0..0.05)).collect();
                Tensor::from_fn(p.shape().to_vec(), |i| p.data()[i] as f64 + shift[i])
            })
            .collect();
        let r = grad_check(&WindowNet { spec, input }, &point, 1e-5, 1e-4).unwrap();
        assert!(r.pass, "{r:?}");
    }

    fn smoke_data(n_slices: usize, seed: u64) -> (Volume3D, LabelVolume, LabelVolume) {
        let (v, dense) = generate_phantom(&PhantomConfig { seed, ..PhantomConfig::smoke() }).unwrap();
        let sparse = sparsify_labels(&dense, &SparsityPlan::evenly_spaced(n_slices, 16).unwrap()).unwrap();
        (v, dense, sparse)
    }

    #[test]
    fn constant_label_slice_is_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = Volume3D::from_f32([1, 12, 12], [1.0; 3], (0..144).map(|_| rng.random()).collect()).unwrap();
        let l = LabelVolume::filled([1, 12, 12], [1.0; 3], Label::Foreground).unwrap();
        let mut model = build_seg2d(&small_spec(), 0).unwrap();
        let h = train_seg2d(&mut model, &[(&v, &l)], &HyperParams { lr: 1e-2, ..hyper(40, 0) }).unwrap();
        assert!(*h.epoch_loss.last().unwrap() < 0.01, "{:?}", h.epoch_loss);
    }

    #[test]
    fn training_errors_and_determinism() {
        let (v, _, _) = smoke_data(1, 0);
        let none = LabelVolume::filled(v.shape(), v.voxel_size(), Label::Unlabeled).unwrap();
        let mut model = build_seg2d(&small_spec(), 0).unwrap();
        assert!(train_seg2d(&mut model, &[(&v, &none)], &hyper(1, 0)).is_err());

        let (v, _, sparse) = smoke_data(2, 1);
        let run = || {
            let mut m = build_seg2d(&small_spec(), 3).unwrap();
            let h = train_seg2d(&mut m, &[(&v, &sparse)], &hyper(3, 8)).unwrap();
            (m, h)
        };
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
        assert_eq!(m1.epoch, 3);
        assert!(h1.epoch_loss.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn held_out_slice_loss_decreases() {
        let (v, dense, sparse) = smoke_data(4, 2);
        let mut model = build_seg2d(&small_spec(), 1).unwrap();
        // held-out: a dense slice that is not in the training plan
        let held = sparsify_labels(&dense, &SparsityPlan::new(vec![5])).unwrap();
        assert!(!sparse.labeled_slices().contains(&5));
        model.normalization = Normalization::fit([&v]).unwrap();
        let before = labeled_bce(&model, &v, &held).unwrap();
        train_seg2d(&mut model, &[(&v, &sparse)], &HyperParams { lr: 3e-3, ..hyper(15, 0) }).unwrap();
        let after = labeled_bce(&model, &v, &held).unwrap();
        assert!(after < before, "held-out BCE {before} -> {after}");
    }

    /// Panics when asked about any voxel outside the declared slices.
    struct Guarded<'a> {
        inner: &'a LabelVolume,
        allowed: Vec<usize>,
        reads: AtomicUsize,
    }

    impl LabelSource for Guarded<'_> {
        fn shape(&self) -> Shape3 {
            self.inner.shape()
        }
        fn labeled_slices(&self) -> Vec<usize> {
            self.allowed.clone()
        }
        fn label(&self, z: usize, y: usize, x: usize) -> Label {
            assert!(self.allowed.contains(&z), "read of unlabeled slice {z}");
            let l = self.inner.get(z, y, x);
            assert!(l.is_labeled(), "read returned an unlabeled voxel");
            self.reads.fetch_add(1, Ordering::Relaxed);
            l
        }
    }

    #[test]
    fn training_reads_only_labeled_voxels() {
        let (v, _, sparse) = smoke_data(3, 4);
        let g = Guarded { inner: &sparse, allowed: sparse.labeled_slices(), reads: AtomicUsize::new(0) };
        let mut model = build_seg2d(&small_spec(), 0).unwrap();
        train_seg2d(&mut model, &[(&v, &g)], &hyper(2, 0)).unwrap();
        assert_eq!(g.reads.load(Ordering::Relaxed), 3 * 256);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut model = build_seg2d(&small_spec(), 6).unwrap();
        model.epoch = 7;
        model.normalization = Normalization { mean: 0.4, std: 0.2 };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let meta = ArtifactMeta { config_hash: "h".into(), stage: "train2d".into(), seed: 6, condition: None };
        model.save(&path, Some(meta.clone())).unwrap();
        let (back, m) = ModelState2D::load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(m, Some(meta));
    }
}
