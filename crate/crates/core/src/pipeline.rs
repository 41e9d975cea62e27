//! Stages of one experiment condition, shared by the sweep and the
//! stage-by-stage command line.

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::evalkit::{binarize, confusion, MetricsReport, Scheme};
use crate::fuselabel::{fuse, make_pseudo_labels, Alpha, FusedTargets};
use crate::phantom::{generate_phantom, sparsify_labels, SparsityPlan};
use crate::seg2d::{build_seg2d, predict_volume_2d, train_seg2d, ModelState2D};
use crate::seg3d::{build_seg3d, predict_volume_3d, train_seg3d, ModelState3D};
use crate::training::{HyperParams, TrainHistory};
use crate::volgrid::{LabelVolume, ProbVolume, Volume3D};
use rayon::prelude::*;

/// Training pairs and the held-out test pair, all densely labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<(Volume3D, LabelVolume)>,
    pub test: (Volume3D, LabelVolume),
}

pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let mut all: Vec<(Volume3D, LabelVolume)> = cfg
        .train_phantoms
        .par_iter()
        .chain([&cfg.test_phantom].into_par_iter())
        .map(generate_phantom)
        .collect::<Result<_>>()?;
    let test = all.pop().unwrap();
    Ok(Dataset { train: all, test })
}

/// Mixes seed components into one 64-bit seed (SplitMix64 finaliser).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

const TAG_2D: u64 = 2;
const TAG_3D: u64 = 3;

pub fn sparse_train_labels(ds: &Dataset, n_slices: usize) -> Result<Vec<LabelVolume>> {
    ds.train.iter().map(|(v, l)| sparsify_labels(l, &SparsityPlan::evenly_spaced(n_slices, v.shape()[0])?)).collect()
}

fn run_hyper(h: &HyperParams, cfg: &ExperimentConfig, run_seed: u64, tag: u64) -> HyperParams {
    HyperParams { seed: derive_seed(&[cfg.seed, h.seed, run_seed, tag, 1]), ..h.clone() }
}

pub fn train_pseudolabeler(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    sparse: &[LabelVolume],
    run_seed: u64,
) -> Result<(ModelState2D, TrainHistory)> {
    let mut model = build_seg2d(&cfg.seg2d.spec, derive_seed(&[cfg.seed, run_seed, TAG_2D]))?;
    let pairs: Vec<(&Volume3D, &LabelVolume)> = ds.train.iter().map(|(v, _)| v).zip(sparse).collect();
    let history = train_seg2d(&mut model, &pairs, &run_hyper(&cfg.seg2d.hyper, cfg, run_seed, TAG_2D))?;
    Ok((model, history))
}

/// 2D predictions on every training volume.
pub fn pseudo_probabilities(model: &ModelState2D, ds: &Dataset) -> Result<Vec<ProbVolume>> {
    ds.train.iter().map(|(v, _)| predict_volume_2d(model, v)).collect()
}

pub fn fuse_train_targets(
    cfg: &ExperimentConfig,
    sparse: &[LabelVolume],
    probs: &[ProbVolume],
    alpha: Alpha,
) -> Result<Vec<FusedTargets>> {
    sparse
        .iter()
        .zip(probs)
        .map(|(l, p)| {
            let pseudo = make_pseudo_labels(p, l, cfg.sweep.pseudo_mode, cfg.sweep.pseudo_threshold)?;
            fuse(l, &pseudo, alpha)
        })
        .collect()
}

/// Trains the 3D network. The initialisation and patch stream depend only
/// on the run seed, so every α shares them.
pub fn train_segmenter(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    fused: &[FusedTargets],
    run_seed: u64,
) -> Result<(ModelState3D, TrainHistory)> {
    let mut model = build_seg3d(&cfg.seg3d.spec, derive_seed(&[cfg.seed, run_seed, TAG_3D]))?;
    let pairs: Vec<(&Volume3D, &FusedTargets)> = ds.train.iter().map(|(v, _)| v).zip(fused).collect();
    let history =
        train_seg3d(&mut model, &pairs, &run_hyper(&cfg.seg3d.hyper, cfg, run_seed, TAG_3D), &cfg.seg3d.train)?;
    Ok((model, history))
}

pub fn predict_test_3d(cfg: &ExperimentConfig, model: &ModelState3D, v: &Volume3D) -> Result<ProbVolume> {
    predict_volume_3d(model, v, cfg.sweep.tile_overlap, cfg.sweep.blend)
}

pub fn score(
    cfg: &ExperimentConfig,
    probs: &ProbVolume,
    gt: &LabelVolume,
    scheme: Scheme,
    n_slices: usize,
    alpha: Option<f64>,
    seed: u64,
) -> Result<MetricsReport> {
    let counts = confusion(&binarize(probs, cfg.sweep.threshold)?, gt)?;
    Ok(MetricsReport::new(scheme, n_slices as f64 / cfg.depth() as f64, alpha, seed, counts))
}
