//! 3D U-Net: encoder levels of two same-padded convolutions with ReLU,
//! max-pool downsampling, a mirrored decoder with nearest upsampling and
//! skip concatenation, and a 1×1×1 sigmoid head. Trained on patches of
//! fused targets under the weighted BCE; applied to whole volumes by tiling.

use crate::checkpoint::{load_model, save_model, ModelRecord, ParamInfo};
use crate::error::{Error, Result};
use crate::evalkit::{binarize, confusion, dice};
use crate::fuselabel::{weighted_bce_logit_grad, weighted_bce_slices, FusedTargets};
use crate::netops::{
    concat_channels, conv3d_backward_with, conv3d_with, init_uniform, maxpool, maxpool_backward, relu_backward,
    relu_inplace, sigmoid_scalar, split_channels, upsample, upsample_backward, Adam, AdamConfig, ConvGeometry, Real,
    Tensor,
};
use crate::reduce::pairwise_sum_by;
use crate::training::{EarlyStop, HyperParams, Normalization, TrainHistory};
use crate::volgrid::{
    extract_block, fuse_predictions, tile_origins, voxel_count, ArtifactMeta, Blend, LabelVolume, PadMode, PatchSpec,
    ProbVolume, Shape3, Volume3D,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seg3DSpec {
    pub depth_levels: usize,
    pub base_channels: usize,
    /// Downsampling between consecutive levels, `depth_levels - 1` entries.
    pub pool_factors: Vec<[usize; 3]>,
    pub patch_shape: Shape3,
    #[serde(default = "yes")]
    pub skip_connections: bool,
    #[serde(default = "three")]
    pub kernel: usize,
}

fn yes() -> bool {
    true
}

fn three() -> usize {
    3
}

impl Default for Seg3DSpec {
    fn default() -> Self {
        Seg3DSpec {
            depth_levels: 3,
            base_channels: 16,
            pool_factors: vec![[1, 2, 2], [2, 2, 2]],
            patch_shape: [32, 64, 64],
            skip_connections: true,
            kernel: 3,
        }
    }
}

impl Seg3DSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("seg3d spec: {m}")));
        if self.depth_levels == 0 || self.base_channels == 0 {
            return bad("depth_levels and base_channels must be positive".into());
        }
        if self.pool_factors.len() + 1 != self.depth_levels {
            return bad(format!(
                "{} levels need {} pool factors, got {}",
                self.depth_levels,
                self.depth_levels - 1,
                self.pool_factors.len()
            ));
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        let mut total = [1usize; 3];
        for f in &self.pool_factors {
            if f.contains(&0) {
                return bad(format!("pool factor {f:?} has a zero"));
            }
            for a in 0..3 {
                total[a] *= f[a];
            }
        }
        if (0..3).any(|a| self.patch_shape[a] == 0 || !self.patch_shape[a].is_multiple_of(total[a])) {
            return bad(format!(
                "patch shape {:?} is not divisible by the cumulative pooling {total:?}",
                self.patch_shape
            ));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn param_info(&self) -> Result<Vec<ParamInfo>> {
        self.validate()?;
        let k = self.kernel;
        let mut out = Vec::new();
        let mut conv = |name: String, cout: usize, cin: usize, k: usize| {
            out.push(ParamInfo { name: format!("{name}.w"), shape: vec![cout, cin, k, k, k] });
            out.push(ParamInfo { name: format!("{name}.b"), shape: vec![cout] });
        };
        for l in 0..self.depth_levels {
            let cin = if l == 0 { 1 } else { self.channels(l - 1) };
            conv(format!("enc{l}.a"), self.channels(l), cin, k);
            conv(format!("enc{l}.b"), self.channels(l), self.channels(l), k);
        }
        for l in (0..self.depth_levels - 1).rev() {
            let skip = if self.skip_connections { self.channels(l) } else { 0 };
            conv(format!("dec{l}.a"), self.channels(l), self.channels(l + 1) + skip, k);
            conv(format!("dec{l}.b"), self.channels(l), self.channels(l), k);
        }
        conv("head".into(), 1, self.channels(0), 1);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState3D {
    pub spec: Seg3DSpec,
    pub params: Vec<Tensor<f32>>,
    pub normalization: Normalization,
    pub seed: u64,
    pub epoch: usize,
}

impl ModelState3D {
    pub fn save(&self, path: impl AsRef<Path>, meta: Option<ArtifactMeta>) -> Result<()> {
        let rec = ModelRecord {
            tag: "seg3d",
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
        let (spec, h, params) = load_model(path, "seg3d", Seg3DSpec::param_info)?;
        Ok((ModelState3D { spec, params, normalization: h.normalization, seed: h.seed, epoch: h.epoch }, h.meta))
    }
}

/// Fan-in scaled uniform weights and zero biases, drawn from ChaCha8(seed).
/// The 1×1×1 head starts at zero, so an untrained model outputs 0.5.
pub fn build_seg3d(spec: &Seg3DSpec, seed: u64) -> Result<ModelState3D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = spec
        .param_info()?
        .into_iter()
        .map(|p| {
            if p.shape.len() == 1 || p.name.starts_with("head") {
                Tensor::zeros(p.shape)
            } else {
                let fan_in = p.shape[1..].iter().product();
                init_uniform(p.shape, fan_in, &mut rng)
            }
        })
        .collect();
    Ok(ModelState3D { spec: spec.clone(), params, normalization: Normalization::default(), seed, epoch: 0 })
}

struct Block<T> {
    input: Tensor<T>,
    a: Tensor<T>,
    b: Tensor<T>,
}

pub(crate) struct Cache<T> {
    enc: Vec<Block<T>>,
    dec: Vec<Block<T>>,
}

fn same<T: Real>(w: &Tensor<T>) -> ConvGeometry {
    let k = w.shape()[2];
    ConvGeometry::same([k, k, k])
}

fn conv_relu<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut y = conv3d_with(x, w, b, same(w))?;
    relu_inplace(&mut y);
    Ok(y)
}

fn block<T: Real>(input: Tensor<T>, p: &[Tensor<T>]) -> Result<Block<T>> {
    let a = conv_relu(&input, &p[0], &p[1])?;
    let b = conv_relu(&a, &p[2], &p[3])?;
    Ok(Block { input, a, b })
}

/// Parameter gradients and, optionally, the input gradient.
type BlockGrads<T> = (Vec<Tensor<T>>, Option<Tensor<T>>);

/// Gradients of the four block parameters, and of the block input if asked.
fn block_backward<T: Real>(blk: &Block<T>, p: &[Tensor<T>], db: &Tensor<T>, need_input: bool) -> Result<BlockGrads<T>> {
    let db = relu_backward(&blk.b, db)?;
    let gb = conv3d_backward_with(&blk.a, &p[2], &db, same(&p[2]), true)?;
    let da = relu_backward(&blk.a, gb.input.as_ref().unwrap())?;
    let ga = conv3d_backward_with(&blk.input, &p[0], &da, same(&p[0]), need_input)?;
    Ok((vec![ga.kernels, ga.bias, gb.kernels, gb.bias], ga.input))
}

/// Logits (`B×1×D×H×W`) for a `B×1×D×H×W` input.
pub(crate) fn forward<T: Real>(spec: &Seg3DSpec, params: &[Tensor<T>], x: Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
    let levels = spec.depth_levels;
    let mut enc: Vec<Block<T>> = Vec::with_capacity(levels);
    let mut h = x;
    for l in 0..levels {
        if l > 0 {
            h = maxpool(&enc[l - 1].b, &spec.pool_factors[l - 1])?;
        }
        enc.push(block(h, &params[4 * l..4 * l + 4])?);
        h = enc[l].b.clone();
    }
    let mut dec = Vec::with_capacity(levels - 1);
    for (i, l) in (0..levels - 1).rev().enumerate() {
        let up = upsample(&h, &spec.pool_factors[l])?;
        let input = if spec.skip_connections { concat_channels(&enc[l].b, &up)? } else { up };
        let off = 4 * (levels + i);
        let blk = block(input, &params[off..off + 4])?;
        h = blk.b.clone();
        dec.push(blk);
    }
    let head = params.len() - 2;
    let z = conv3d_with(&h, &params[head], &params[head + 1], ConvGeometry::valid())?;
    Ok((z, Cache { enc, dec }))
}

/// Parameter gradients given `dL/dlogits`.
pub(crate) fn backward<T: Real>(
    spec: &Seg3DSpec,
    params: &[Tensor<T>],
    cache: &Cache<T>,
    dz: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let levels = spec.depth_levels;
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; params.len()];
    let head = params.len() - 2;
    let top = cache.dec.last().map_or(&cache.enc[0].b, |d| &d.b);
    let gh = conv3d_backward_with(top, &params[head], dz, ConvGeometry::valid(), true)?;
    grads[head] = Some(gh.kernels);
    grads[head + 1] = Some(gh.bias);
    let mut dh = gh.input.unwrap();
    // gradient flowing into each encoder output through its skip connection
    let mut skip_grads: Vec<Option<Tensor<T>>> = (0..levels).map(|_| None).collect();
    for (i, l) in (0..levels - 1).rev().enumerate().rev() {
        let off = 4 * (levels + i);
        let (g, din) = block_backward(&cache.dec[i], &params[off..off + 4], &dh, true)?;
        for (k, gk) in g.into_iter().enumerate() {
            grads[off + k] = Some(gk);
        }
        let din = din.unwrap();
        let dup = if spec.skip_connections {
            let (ds, du) = split_channels(&din, spec.channels(l))?;
            skip_grads[l] = Some(ds);
            du
        } else {
            din
        };
        dh = upsample_backward(&dup, &spec.pool_factors[l])?;
    }
    for l in (0..levels).rev() {
        if let Some(s) = skip_grads[l].take() {
            for (d, v) in dh.data_mut().iter_mut().zip(s.data()) {
                *d += *v;
            }
        }
        let (g, din) = block_backward(&cache.enc[l], &params[4 * l..4 * l + 4], &dh, l > 0)?;
        for (k, gk) in g.into_iter().enumerate() {
            grads[4 * l + k] = Some(gk);
        }
        if l > 0 {
            dh = maxpool_backward(&cache.enc[l - 1].b, &spec.pool_factors[l - 1], &din.unwrap())?;
        }
    }
    Ok(grads.into_iter().map(|g| g.expect("every parameter receives a gradient")).collect())
}

/// One sampled training example: image, target and weight blocks of the
/// patch shape, in (Z, Y, X) order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTriple {
    pub volume: usize,
    pub spec: PatchSpec,
    pub image: Vec<f32>,
    pub target: Vec<f32>,
    pub weight: Vec<f32>,
}

/// Seeded patch sampler over aligned (normalised image, fused targets)
/// pairs. A fraction `fg_bias` of patches is centered on a voxel whose
/// target is foreground and whose weight is positive; the rest are centered
/// uniformly over all voxels. Weights outside the volume are zero.
pub struct PatchSampler<'a> {
    images: Vec<Vec<f32>>,
    fused: Vec<&'a FusedTargets>,
    fg: Vec<(u32, u32)>,
    offsets: Vec<usize>,
    patch: Shape3,
    fg_bias: f64,
    rng: ChaCha8Rng,
}

impl<'a> PatchSampler<'a> {
    pub fn new(
        images: Vec<Vec<f32>>,
        fused: Vec<&'a FusedTargets>,
        patch: Shape3,
        fg_bias: f64,
        seed: u64,
    ) -> Result<Self> {
        if images.len() != fused.len() || images.is_empty() {
            return Err(Error::Invalid("need one fused target set per image, at least one".into()));
        }
        if !(0.0..=1.0).contains(&fg_bias) {
            return Err(Error::Invalid(format!("fg_bias must be in [0, 1], got {fg_bias}")));
        }
        let mut fg = Vec::new();
        let mut offsets = vec![0];
        for (i, (img, f)) in images.iter().zip(&fused).enumerate() {
            if img.len() != voxel_count(f.shape) {
                return Err(Error::Shape(format!("image {i} does not match its targets {:?}", f.shape)));
            }
            for (j, (&t, &w)) in f.targets.iter().zip(&f.weights).enumerate() {
                if t >= 0.5 && w > 0.0 {
                    fg.push((i as u32, j as u32));
                }
            }
            offsets.push(offsets[i] + img.len());
        }
        Ok(PatchSampler { images, fused, fg, offsets, patch, fg_bias, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    fn center(&mut self) -> (usize, usize) {
        let biased = self.rng.random::<f64>() < self.fg_bias;
        if biased && !self.fg.is_empty() {
            let (v, i) = self.fg[self.rng.random_range(0..self.fg.len())];
            return (v as usize, i as usize);
        }
        let total = *self.offsets.last().unwrap();
        let g = self.rng.random_range(0..total);
        let v = self.offsets.partition_point(|&o| o <= g) - 1;
        (v, g - self.offsets[v])
    }

    /// Draws `n` patches. Centers are drawn sequentially from the seeded
    /// stream; block extraction runs in parallel.
    pub fn draw(&mut self, n: usize) -> Result<Vec<PatchTriple>> {
        if n == 0 {
            return Err(Error::Invalid("patch count must be positive".into()));
        }
        let centers: Vec<(usize, usize)> = (0..n).map(|_| self.center()).collect();
        centers
            .into_par_iter()
            .map(|(v, i)| {
                let f = self.fused[v];
                let s = f.shape;
                let c = [i / (s[1] * s[2]), (i / s[2]) % s[1], i % s[2]];
                let spec = PatchSpec::centered(c, self.patch);
                let image = extract_block(&self.images[v], s, &spec, PadMode::Reflect)?.values;
                let target = extract_block(&f.targets, s, &spec, PadMode::Zero)?.values;
                let w = extract_block(&f.weights, s, &spec, PadMode::Zero)?;
                let weight = w.values.iter().zip(&w.valid).map(|(&x, &ok)| if ok { x } else { 0.0 }).collect();
                Ok(PatchTriple { volume: v, spec, image, target, weight })
            })
            .collect()
    }
}

/// `n` patches drawn with a fresh sampler; see [`PatchSampler`].
pub fn sample_patches(
    images: &[Vec<f32>],
    fused: &[&FusedTargets],
    patch: Shape3,
    n: usize,
    seed: u64,
    fg_bias: f64,
) -> Result<Vec<PatchTriple>> {
    PatchSampler::new(images.to_vec(), fused.to_vec(), patch, fg_bias, seed)?.draw(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seg3DTrainOptions {
    pub fg_bias: f64,
}

impl Default for Seg3DTrainOptions {
    fn default() -> Self {
        Seg3DTrainOptions { fg_bias: 0.5 }
    }
}

/// Optional held-out pair scored with Dice after every epoch.
pub type Validation<'a> = Option<(&'a Volume3D, &'a LabelVolume)>;

/// Loss and gradients for one batch of patches.
fn batch_step(model: &ModelState3D, batch: &[PatchTriple]) -> Result<(f64, Vec<Tensor<f32>>)> {
    let p = model.spec.patch_shape;
    let n = voxel_count(p);
    let b = batch.len();
    let x = Tensor::new(vec![b, 1, p[0], p[1], p[2]], batch.iter().flat_map(|t| t.image.iter().copied()).collect())?;
    let target: Vec<f32> = batch.iter().flat_map(|t| t.target.iter().copied()).collect();
    let weight: Vec<f32> = batch.iter().flat_map(|t| t.weight.iter().copied()).collect();
    debug_assert_eq!(target.len(), b * n);
    let (z, cache) = forward(&model.spec, &model.params, x)?;
    let prob: Vec<f32> = z.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    let loss = weighted_bce_slices(&prob, &target, &weight)?;
    let dz = Tensor::new(z.shape().to_vec(), weighted_bce_logit_grad(&prob, &target, &weight)?)?;
    let grads = backward(&model.spec, &model.params, &cache, &dz)?;
    Ok((loss, grads))
}

/// Adam on the weighted BCE over sampled patches. `on_step` sees the
/// parameters after every update. On a non-finite loss or gradient the
/// model is restored to the parameters before that step and an error is
/// returned.
/// Starts the head bias at the log-odds of the weighted foreground rate, so
/// the rare class is not first learned as the absence of features.
fn init_head_bias(model: &mut ModelState3D, fused: &[&FusedTargets]) -> Result<()> {
    let (mut tw, mut w) = (0.0, 0.0);
    for f in fused {
        tw += pairwise_sum_by(f.targets.len(), &|i| (f.targets[i] * f.weights[i]) as f64);
        w += pairwise_sum_by(f.weights.len(), &|i| f.weights[i] as f64);
    }
    if w <= 0.0 {
        return Err(Error::Invalid("targets carry no positive weight".into()));
    }
    let rate = (tw / w).clamp(0.01, 0.99);
    let head = model.params.len() - 1;
    model.params[head].data_mut()[0] = (rate / (1.0 - rate)).ln() as f32;
    Ok(())
}

pub fn train_seg3d_observed(
    model: &mut ModelState3D,
    data: &[(&Volume3D, &FusedTargets)],
    hyper: &HyperParams,
    opts: &Seg3DTrainOptions,
    validation: Validation<'_>,
    mut on_step: impl FnMut(usize, &[Tensor<f32>]),
) -> Result<TrainHistory> {
    hyper.validate()?;
    model.spec.validate()?;
    for (v, f) in data {
        if v.shape() != f.shape {
            return Err(Error::Shape(format!("volume {:?} vs targets {:?}", v.shape(), f.shape)));
        }
    }
    model.normalization = Normalization::fit(data.iter().map(|(v, _)| *v))?;
    let images = data.iter().map(|(v, _)| model.normalization.apply(v)).collect();
    let fused: Vec<&FusedTargets> = data.iter().map(|(_, f)| *f).collect();
    if model.epoch == 0 {
        init_head_bias(model, &fused)?;
    }
    let mut sampler = PatchSampler::new(images, fused, model.spec.patch_shape, opts.fg_bias, hyper.seed)?;
    let mut adam = Adam::new(AdamConfig::with_lr(hyper.lr), &model.params);
    let mut history = TrainHistory::default();
    let mut stop = EarlyStop::new(hyper.early_stop_patience);
    let mut step = 0;
    for _ in 0..hyper.epochs {
        let mut losses = Vec::new();
        for _ in 0..hyper.batches_per_epoch() {
            let batch = sampler.draw(hyper.batch_size)?;
            let (loss, grads) = batch_step(model, &batch)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::numerical(
                    "train_seg3d",
                    format!("non-finite loss or gradient at step {step}; parameters kept from the previous step"),
                ));
            }
            let last_good = model.params.clone();
            adam.update(&mut model.params, &grads);
            if model.params.iter().any(|p| !p.all_finite()) {
                model.params = last_good;
                return Err(Error::numerical("train_seg3d", format!("parameters diverged at step {step}")));
            }
            step += 1;
            on_step(step, &model.params);
            losses.push(loss);
        }
        model.epoch += 1;
        let epoch_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        history.epoch_loss.push(epoch_loss);
        if let Some((v, l)) = validation {
            let p = predict_volume_3d(model, v, 0.25, Blend::Uniform)?;
            history.val_dice.push(dice(&confusion(&binarize(&p, 0.5)?, l)?));
        }
        log::debug!("seg3d epoch {} loss {epoch_loss:.5}", model.epoch);
        if stop.observe(epoch_loss) {
            history.stopped_early = true;
            break;
        }
    }
    Ok(history)
}

pub fn train_seg3d(
    model: &mut ModelState3D,
    data: &[(&Volume3D, &FusedTargets)],
    hyper: &HyperParams,
    opts: &Seg3DTrainOptions,
) -> Result<TrainHistory> {
    train_seg3d_observed(model, data, hyper, opts, None, |_, _| {})
}

/// Whole-volume probabilities from overlapping patch predictions. Axes
/// shorter than the patch are reflect-padded and cropped back.
pub fn predict_volume_3d(model: &ModelState3D, v: &Volume3D, overlap: f64, blend: Blend) -> Result<ProbVolume> {
    let ps = model.spec.patch_shape;
    let s = v.shape();
    let axes = (0..3).map(|a| tile_origins(s[a], ps[a], overlap)).collect::<Result<Vec<_>>>()?;
    let mut specs = Vec::new();
    for &z in &axes[0] {
        for &y in &axes[1] {
            for &x in &axes[2] {
                specs.push(PatchSpec { origin: [z, y, x], shape: ps });
            }
        }
    }
    let norm = model.normalization.apply(v);
    let blocks: Vec<(PatchSpec, Vec<f32>)> = specs
        .into_par_iter()
        .map(|spec| {
            let img = extract_block(&norm, s, &spec, PadMode::Reflect)?.values;
            let x = Tensor::new(vec![1, 1, ps[0], ps[1], ps[2]], img)?;
            let (z, _) = forward(&model.spec, &model.params, x)?;
            Ok((spec, z.data().iter().map(|&l| sigmoid_scalar(l)).collect()))
        })
        .collect::<Result<_>>()?;
    fuse_predictions(&blocks, s, blend)?.with_voxel_size(v.voxel_size())
}
