//! Pseudo-label generation, fusion with sparse ground truth into dense
//! weighted targets, and the weighted binary cross-entropy
//!
//! ```text
//! L = (S + α·P) / (N_L + α·N_U)
//! ```
//!
//! where `S`, `P` are the unweighted BCE sums over ground-truth and
//! pseudo-labeled voxels and `N_L`, `N_U` their counts. Ground-truth voxels
//! carry weight 1 and pseudo-labeled voxels weight α; α = 0 removes the
//! pseudo term entirely and leaves plain BCE over the annotated voxels.

use crate::error::{Error, Result};
use crate::netops::{DiffOp, Real, Tensor};
use crate::reduce::pairwise_sum;
use crate::volgrid::{
    read_volg, write_volg, ArtifactMeta, Dtype, Label, LabelVolume, ProbVolume, Shape3, VolgFile, VolgHeader,
    VolumeKind, VoxelData,
};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// Non-negative weight of the pseudo-label term.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Alpha(f64);

impl Alpha {
    pub fn new(v: f64) -> Result<Self> {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::Invalid(format!("alpha must be finite and >= 0, got {v}")));
        }
        Ok(Alpha(v))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Alpha {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Alpha::new(v)
    }
}

impl From<Alpha> for f64 {
    fn from(a: Alpha) -> f64 {
        a.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoMode {
    #[default]
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Provenance {
    GroundTruth = 0,
    Pseudo = 1,
}

/// Targets inferred on the unlabeled partition only.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub shape: Shape3,
    /// `Some(target)` on unlabeled voxels, `None` elsewhere.
    pub targets: Vec<Option<f32>>,
}

impl PseudoLabels {
    pub fn count(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Dense training targets with per-voxel loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedTargets {
    pub shape: Shape3,
    pub voxel_size: [f64; 3],
    pub targets: Vec<f32>,
    pub weights: Vec<f32>,
    pub provenance: Vec<Provenance>,
}

impl FusedTargets {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Thresholded (hard) or raw (soft) predictions on the unlabeled voxels.
/// Hard mode maps `p >= thr` to 1.
pub fn make_pseudo_labels(
    probs: &ProbVolume,
    labels: &LabelVolume,
    mode: PseudoMode,
    thr: f64,
) -> Result<PseudoLabels> {
    labels.check_aligned(probs.shape())?;
    if mode == PseudoMode::Hard && !(thr > 0.0 && thr < 1.0) {
        return Err(Error::Invalid(format!("threshold must be in (0, 1), got {thr}")));
    }
    let targets = probs
        .probs()
        .iter()
        .zip(labels.labels())
        .map(|(&p, &l)| {
            (l == Label::Unlabeled).then_some(match mode {
                PseudoMode::Hard => {
                    if p as f64 >= thr {
                        1.0
                    } else {
                        0.0
                    }
                }
                PseudoMode::Soft => p,
            })
        })
        .collect();
    Ok(PseudoLabels { shape: labels.shape(), targets })
}

/// Combine ground truth and pseudo-labels into dense weighted targets.
pub fn fuse(labels: &LabelVolume, pseudo: &PseudoLabels, alpha: Alpha) -> Result<FusedTargets> {
    labels.check_aligned(pseudo.shape)?;
    let n = labels.labels().len();
    let mut targets = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut provenance = Vec::with_capacity(n);
    let a = alpha.value() as f32;
    for (i, (&l, &p)) in labels.labels().iter().zip(&pseudo.targets).enumerate() {
        match (l, p) {
            (Label::Unlabeled, Some(t)) => {
                targets.push(t);
                weights.push(a);
                provenance.push(Provenance::Pseudo);
            }
            (Label::Unlabeled, None) => {
                return Err(Error::Invalid(format!("pseudo-labels miss unlabeled voxel {i}")));
            }
            (_, Some(_)) => {
                return Err(Error::Invalid(format!("pseudo-label given for annotated voxel {i}")));
            }
            (gt, None) => {
                targets.push(if gt == Label::Foreground { 1.0 } else { 0.0 });
                weights.push(1.0);
                provenance.push(Provenance::GroundTruth);
            }
        }
    }
    Ok(FusedTargets { shape: labels.shape(), voxel_size: labels.voxel_size(), targets, weights, provenance })
}

#[inline]
pub fn bce_term(p: f64, t: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -t * p.ln() - (1.0 - t) * (1.0 - p).ln()
}

fn check_lengths<T: Real>(pred: &[T], target: &[T], weight: &[T]) -> Result<()> {
    if pred.len() != target.len() || pred.len() != weight.len() {
        return Err(Error::Shape(format!(
            "prediction {}, target {}, weight {} lengths differ",
            pred.len(),
            target.len(),
            weight.len()
        )));
    }
    if pred.iter().chain(target).chain(weight).any(|v| v.is_nan()) {
        return Err(Error::numerical("weighted_bce", "NaN in inputs"));
    }
    Ok(())
}

/// Sum of the positive weights, in voxel order.
fn weight_total<T: Real>(weight: &[T]) -> f64 {
    let w: Vec<f64> = weight.iter().map(|w| w.to_f64_lossy()).filter(|&w| w != 0.0).collect();
    pairwise_sum(&w)
}

/// Weighted mean BCE over flat buffers. Zero-weight voxels are dropped
/// before the reduction, so their prediction and target never reach the
/// arithmetic and the sum over the remaining voxels is the same sum a
/// loss restricted to them would compute. Returns 0 when every weight is 0.
pub fn weighted_bce_slices<T: Real>(pred: &[T], target: &[T], weight: &[T]) -> Result<f64> {
    check_lengths(pred, target, weight)?;
    let wsum = weight_total(weight);
    if wsum == 0.0 {
        return Ok(0.0);
    }
    let terms: Vec<f64> = (0..pred.len())
        .filter_map(|i| {
            let w = weight[i].to_f64_lossy();
            (w != 0.0).then(|| w * bce_term(pred[i].to_f64_lossy(), target[i].to_f64_lossy()))
        })
        .collect();
    Ok(pairwise_sum(&terms) / wsum)
}

/// `∂L/∂p = w (p − t) / (p (1 − p)) / Σw`, with `p` clamped as in the loss.
pub fn weighted_bce_grad_slices<T: Real>(pred: &[T], target: &[T], weight: &[T]) -> Result<Vec<T>> {
    check_lengths(pred, target, weight)?;
    let wsum = weight_total(weight);
    Ok((0..pred.len())
        .map(|i| {
            let w = weight[i].to_f64_lossy();
            if w == 0.0 || wsum == 0.0 {
                return T::zero();
            }
            let p = pred[i].to_f64_lossy().clamp(BCE_EPS, 1.0 - BCE_EPS);
            let t = target[i].to_f64_lossy();
            T::from_f64_lossy(w * (p - t) / (p * (1.0 - p)) / wsum)
        })
        .collect())
}

/// Gradient with respect to the logits of a sigmoid output:
/// `w (p − t) / Σw`. This is the sigmoid chain rule applied to
/// [`weighted_bce_grad_slices`] in closed form.
pub fn weighted_bce_logit_grad<T: Real>(prob: &[T], target: &[T], weight: &[T]) -> Result<Vec<T>> {
    check_lengths(prob, target, weight)?;
    let wsum = weight_total(weight);
    Ok((0..prob.len())
        .map(|i| {
            let w = weight[i].to_f64_lossy();
            if w == 0.0 || wsum == 0.0 {
                return T::zero();
            }
            T::from_f64_lossy(w * (prob[i].to_f64_lossy() - target[i].to_f64_lossy()) / wsum)
        })
        .collect())
}

pub fn weighted_bce(pred: &ProbVolume, fused: &FusedTargets) -> Result<f64> {
    if pred.shape() != fused.shape {
        return Err(Error::Shape(format!("prediction {:?} vs targets {:?}", pred.shape(), fused.shape)));
    }
    weighted_bce_slices(pred.probs(), &fused.targets, &fused.weights)
}

pub fn weighted_bce_grad(pred: &ProbVolume, fused: &FusedTargets) -> Result<Vec<f32>> {
    if pred.shape() != fused.shape {
        return Err(Error::Shape(format!("prediction {:?} vs targets {:?}", pred.shape(), fused.shape)));
    }
    weighted_bce_grad_slices(pred.probs(), &fused.targets, &fused.weights)
}

/// The loss as a single-argument differentiable op of the predictions.
pub struct WeightedBceOp {
    pub target: Vec<f64>,
    pub weight: Vec<f64>,
}

impl DiffOp for WeightedBceOp {
    fn name(&self) -> String {
        "weighted_bce".into()
    }
    fn arity(&self) -> usize {
        1
    }
    fn forward(&self, a: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        Tensor::new(vec![1], vec![weighted_bce_slices(a[0].data(), &self.target, &self.weight)?])
    }
    fn backward(&self, a: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let grad = weighted_bce_grad_slices(a[0].data(), &self.target, &self.weight)?;
        let s = g.data()[0];
        Ok(vec![Tensor::new(a[0].shape().to_vec(), grad.into_iter().map(|v| v * s).collect())?])
    }
}

fn header(f: &FusedTargets, dtype: Dtype, kind: VolumeKind, meta: &Option<ArtifactMeta>) -> VolgHeader {
    VolgHeader { shape: f.shape, voxel_size: f.voxel_size, dtype, kind, meta: meta.clone() }
}

/// Writes `<prefix>_targets.volg`, `<prefix>_weights.volg` and
/// `<prefix>_provenance.volg`.
pub fn save_fused(f: &FusedTargets, dir: &Path, prefix: &str, meta: Option<ArtifactMeta>) -> Result<()> {
    write_volg(
        dir.join(format!("{prefix}_targets.volg")),
        &VolgFile { header: header(f, Dtype::F32, VolumeKind::Probs, &meta), data: VoxelData::F32(f.targets.clone()) },
    )?;
    write_volg(
        dir.join(format!("{prefix}_weights.volg")),
        &VolgFile {
            header: header(f, Dtype::F32, VolumeKind::Weights, &meta),
            data: VoxelData::F32(f.weights.clone()),
        },
    )?;
    write_volg(
        dir.join(format!("{prefix}_provenance.volg")),
        &VolgFile {
            header: header(f, Dtype::U8, VolumeKind::Provenance, &meta),
            data: VoxelData::U8(f.provenance.iter().map(|&p| p as u8).collect()),
        },
    )
}

/// Inverse of [`save_fused`]; also returns the stored artifact stamp.
pub fn load_fused(dir: &Path, prefix: &str) -> Result<(FusedTargets, Option<ArtifactMeta>)> {
    let t = read_volg(dir.join(format!("{prefix}_targets.volg")))?;
    let w = read_volg(dir.join(format!("{prefix}_weights.volg")))?;
    let p = read_volg(dir.join(format!("{prefix}_provenance.volg")))?;
    if t.header.shape != w.header.shape || t.header.shape != p.header.shape {
        return Err(Error::Artifact(format!("fused target files for {prefix} disagree on shape")));
    }
    let (VoxelData::F32(targets), VoxelData::F32(weights), VoxelData::U8(prov)) = (t.data, w.data, p.data) else {
        return Err(Error::Artifact(format!("fused target files for {prefix} have wrong dtypes")));
    };
    let provenance = prov
        .into_iter()
        .map(|v| match v {
            0 => Ok(Provenance::GroundTruth),
            1 => Ok(Provenance::Pseudo),
            _ => Err(Error::Artifact(format!("bad provenance value {v}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        FusedTargets { shape: t.header.shape, voxel_size: t.header.voxel_size, targets, weights, provenance },
        t.header.meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netops::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels_with_slices(shape: Shape3, slices: &[usize], rng: &mut ChaCha8Rng) -> LabelVolume {
        let plane = shape[1] * shape[2];
        let labels = (0..shape[0] * plane)
            .map(|i| {
                if slices.contains(&(i / plane)) {
                    if rng.random_bool(0.3) {
                        Label::Foreground
                    } else {
                        Label::Background
                    }
                } else {
                    Label::Unlabeled
                }
            })
            .collect();
        LabelVolume::new(shape, [2.0, 0.88, 0.88], labels).unwrap()
    }

    fn rand_probs(shape: Shape3, rng: &mut ChaCha8Rng) -> ProbVolume {
        let n = shape.iter().product();
        ProbVolume::new(shape, [1.0; 3], (0..n).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn hard_pseudo_labels() {
        let shape = [2, 3, 3];
        let labels = LabelVolume::filled(shape, [1.0; 3], Label::Unlabeled).unwrap();
        let probs = ProbVolume::new(shape, [1.0; 3], vec![0.9; 18]).unwrap();
        let p = make_pseudo_labels(&probs, &labels, PseudoMode::Hard, 0.5).unwrap();
        assert!(p.targets.iter().all(|&t| t == Some(1.0)));

        let dense = LabelVolume::filled(shape, [1.0; 3], Label::Background).unwrap();
        assert_eq!(make_pseudo_labels(&probs, &dense, PseudoMode::Hard, 0.5).unwrap().count(), 0);
        assert!(make_pseudo_labels(&probs, &labels, PseudoMode::Hard, 1.0).is_err());
    }

    #[test]
    fn hard_mode_matches_threshold_oracle_and_ignores_monotone_remaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = [6, 7, 8];
        let labels = labels_with_slices(shape, &[1, 4], &mut rng);
        let probs = rand_probs(shape, &mut rng);
        let p = make_pseudo_labels(&probs, &labels, PseudoMode::Hard, 0.5).unwrap();
        for i in 0..probs.probs().len() {
            let expect =
                (labels.labels()[i] == Label::Unlabeled).then_some(if probs.probs()[i] >= 0.5 { 1.0 } else { 0.0 });
            assert_eq!(p.targets[i], expect);
        }
        // p -> p^3 rescaled so that 0.5 stays fixed: strictly monotone
        let remapped: Vec<f32> = probs
            .probs()
            .iter()
            .map(|&v| {
                let x = (v as f64 - 0.5) * 2.0;
                ((x * x * x) / 2.0 + 0.5) as f32
            })
            .collect();
        let remapped = ProbVolume::new(shape, [1.0; 3], remapped).unwrap();
        assert_eq!(make_pseudo_labels(&remapped, &labels, PseudoMode::Hard, 0.5).unwrap(), p);
        let soft = make_pseudo_labels(&probs, &labels, PseudoMode::Soft, 0.5).unwrap();
        assert_eq!(soft.targets[0].is_some(), labels.labels()[0] == Label::Unlabeled);
    }

    #[test]
    fn fuse_weights_follow_provenance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = [4, 3, 3];
        let dense = labels_with_slices(shape, &[0, 1, 2, 3], &mut rng);
        let none = make_pseudo_labels(&rand_probs(shape, &mut rng), &dense, PseudoMode::Hard, 0.5).unwrap();
        let f = fuse(&dense, &none, Alpha::new(0.3).unwrap()).unwrap();
        assert!(f.weights.iter().all(|&w| w == 1.0));
        for (t, l) in f.targets.iter().zip(dense.labels()) {
            assert_eq!(*t, if *l == Label::Foreground { 1.0 } else { 0.0 });
        }

        let empty = LabelVolume::filled(shape, [1.0; 3], Label::Unlabeled).unwrap();
        let all = make_pseudo_labels(&rand_probs(shape, &mut rng), &empty, PseudoMode::Hard, 0.5).unwrap();
        let f = fuse(&empty, &all, Alpha::new(0.3).unwrap()).unwrap();
        assert!(f.weights.iter().all(|&w| w == 0.3f32));
        assert!(f.provenance.iter().all(|&p| p == Provenance::Pseudo));
    }

    #[test]
    fn twenty_two_of_fifty_slices_weight_histogram() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = [50, 6, 5];
        let slices: Vec<usize> = (0..22).map(|i| (2 * i * 50 + 50) / 44).collect();
        let labels = labels_with_slices(shape, &slices, &mut rng);
        let pseudo = make_pseudo_labels(&rand_probs(shape, &mut rng), &labels, PseudoMode::Hard, 0.5).unwrap();
        let f = fuse(&labels, &pseudo, Alpha::new(0.5).unwrap()).unwrap();
        let ones = f.weights.iter().filter(|&&w| w == 1.0).count();
        let halves = f.weights.iter().filter(|&&w| w == 0.5).count();
        // counting oracle: 22 and 28 whole slices of 30 voxels
        assert_eq!((ones, halves), (22 * 30, 28 * 30));
    }

    #[test]
    fn fuse_rejects_misaligned_pseudo_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = [3, 2, 2];
        let labels = labels_with_slices(shape, &[1], &mut rng);
        let mut pseudo = make_pseudo_labels(&rand_probs(shape, &mut rng), &labels, PseudoMode::Hard, 0.5).unwrap();
        let mut missing = pseudo.clone();
        missing.targets[0] = None;
        assert!(fuse(&labels, &missing, Alpha::new(1.0).unwrap()).is_err());
        pseudo.targets[4] = Some(1.0);
        assert!(fuse(&labels, &pseudo, Alpha::new(1.0).unwrap()).is_err());
        assert!(Alpha::new(-0.1).is_err());
        assert!(Alpha::new(f64::NAN).is_err());
    }

    #[test]
    fn bce_at_one_half_is_ln2() {
        let p = vec![0.5f64; 10];
        let t: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
        let w = vec![1.0; 10];
        assert!((weighted_bce_slices(&p, &t, &w).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let g = weighted_bce_grad_slices(&[0.5f64], &[0.5], &[1.0]).unwrap();
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn zero_alpha_equals_labeled_only_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = [5, 4, 4];
        let labels = labels_with_slices(shape, &[0, 3], &mut rng);
        let probs = rand_probs(shape, &mut rng);
        let pseudo = make_pseudo_labels(&probs, &labels, PseudoMode::Soft, 0.5).unwrap();
        let f = fuse(&labels, &pseudo, Alpha::new(0.0).unwrap()).unwrap();
        let loss = weighted_bce(&probs, &f).unwrap();
        let (mut p, mut t) = (vec![], vec![]);
        for (i, l) in labels.labels().iter().enumerate() {
            if l.is_labeled() {
                p.push(probs.probs()[i]);
                t.push(if *l == Label::Foreground { 1.0f32 } else { 0.0 });
            }
        }
        let plain = weighted_bce_slices(&p, &t, &vec![1.0f32; p.len()]).unwrap();
        assert_eq!(loss.to_bits(), plain.to_bits());
        let g = weighted_bce_grad(&probs, &f).unwrap();
        for (gi, pv) in g.iter().zip(&f.provenance) {
            if *pv == Provenance::Pseudo {
                assert_eq!(gi.to_bits(), 0.0f32.to_bits());
            }
        }
    }

    #[test]
    fn loss_matches_direct_summation_and_decomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let shape = [6, 5, 4];
            let slices: Vec<usize> = (0..6).filter(|_| rng.random_bool(0.4)).collect();
            let labels = labels_with_slices(shape, &slices, &mut rng);
            let probs = rand_probs(shape, &mut rng);
            let pseudo = make_pseudo_labels(&rand_probs(shape, &mut rng), &labels, PseudoMode::Soft, 0.5).unwrap();
            let alpha: f64 = rng.random_range(0.05..2.0);
            let f = fuse(&labels, &pseudo, Alpha::new(alpha).unwrap()).unwrap();
            let loss = weighted_bce(&probs, &f).unwrap();
            let (mut s, mut pp, mut nl, mut nu) = (0.0, 0.0, 0.0, 0.0);
            let (mut num, mut den) = (0.0f64, 0.0f64);
            for i in 0..f.len() {
                let p = (probs.probs()[i] as f64).clamp(1e-7, 1.0 - 1e-7);
                let t = f.targets[i] as f64;
                let b = -t * p.ln() - (1.0 - t) * (1.0 - p).ln();
                num += f.weights[i] as f64 * b;
                den += f.weights[i] as f64;
                if f.provenance[i] == Provenance::GroundTruth {
                    s += b;
                    nl += 1.0;
                } else {
                    pp += b;
                    nu += 1.0;
                }
            }
            let a32 = alpha as f32 as f64;
            assert!(((loss - num / den) / loss).abs() < 1e-6);
            assert!(((loss - (s + a32 * pp) / (nl + a32 * nu)) / loss).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_moves_with_alpha_toward_the_pseudo_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let shape = [6, 4, 4];
        let labels = labels_with_slices(shape, &[2, 3], &mut rng);
        let pseudo = make_pseudo_labels(&rand_probs(shape, &mut rng), &labels, PseudoMode::Hard, 0.5).unwrap();
        // predictions agree with the GT and disagree with the pseudo-labels,
        // so the pseudo mean exceeds the GT mean; flipping swaps that
        let fit = |agree_gt: bool| {
            let probs: Vec<f32> = (0..labels.labels().len())
                .map(|i| {
                    let t = match labels.labels()[i] {
                        Label::Foreground => 1.0,
                        Label::Background => 0.0,
                        Label::Unlabeled => pseudo.targets[i].unwrap(),
                    };
                    let good = labels.labels()[i].is_labeled() == agree_gt;
                    if good {
                        0.1 + 0.8 * t
                    } else {
                        0.9 - 0.8 * t
                    }
                })
                .collect();
            ProbVolume::new(shape, [1.0; 3], probs).unwrap()
        };
        for (agree_gt, increasing) in [(true, true), (false, false)] {
            let probs = fit(agree_gt);
            let losses: Vec<f64> = [0.0, 0.1, 0.5, 1.0, 2.0, 8.0]
                .iter()
                .map(|&a| weighted_bce(&probs, &fuse(&labels, &pseudo, Alpha::new(a).unwrap()).unwrap()).unwrap())
                .collect();
            for w in losses.windows(2) {
                assert_eq!(w[1] > w[0], increasing, "{losses:?}");
            }
        }
    }

    #[test]
    fn loss_gradient_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 60;
        let op = WeightedBceOp {
            target: (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { rng.random() }).collect(),
            weight: (0..n).map(|i| if i % 7 == 0 { 0.0 } else { rng.random_range(0.1..1.0) }).collect(),
        };
        let point = vec![Tensor::from_fn(vec![n], |_| rng.random_range(0.05..0.95))];
        let r = grad_check(&op, &point, 1e-5, 1e-4).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn logit_gradient_is_chain_rule_of_probability_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p: Vec<f64> = (0..40).map(|_| rng.random_range(0.01..0.99)).collect();
        let t: Vec<f64> = (0..40).map(|_| rng.random()).collect();
        let w: Vec<f64> = (0..40).map(|_| rng.random()).collect();
        let gp = weighted_bce_grad_slices(&p, &t, &w).unwrap();
        let gz = weighted_bce_logit_grad(&p, &t, &w).unwrap();
        for i in 0..40 {
            assert!((gp[i] * p[i] * (1.0 - p[i]) - gz[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_targets_persist() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = [3, 4, 4];
        let labels = labels_with_slices(shape, &[1], &mut rng);
        let pseudo = make_pseudo_labels(&rand_probs(shape, &mut rng), &labels, PseudoMode::Hard, 0.5).unwrap();
        let f = fuse(&labels, &pseudo, Alpha::new(0.5).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let meta = ArtifactMeta { config_hash: "abc".into(), stage: "pseudolabel".into(), seed: 3, condition: None };
        save_fused(&f, dir.path(), "train_0", Some(meta.clone())).unwrap();
        let (back, m) = load_fused(dir.path(), "train_0").unwrap();
        assert_eq!(back, f);
        assert_eq!(m, Some(meta));
    }
}
