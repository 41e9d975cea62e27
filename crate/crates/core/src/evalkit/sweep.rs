use super::{MetricsReport, Scheme};
use crate::config::ExperimentConfig;
use crate::error::{Error, ErrorKind, Result};
use crate::fuselabel::Alpha;
use crate::pipeline::{
    fuse_train_targets, generate_dataset, predict_test_3d, pseudo_probabilities, score, sparse_train_labels,
    train_pseudolabeler, train_segmenter, Dataset,
};
use crate::seg2d::predict_volume_2d;
use crate::training::TrainHistory;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// A stage that failed inside one condition. The other conditions still run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionFailure {
    pub slice_count: usize,
    pub seed: u64,
    pub scheme: Scheme,
    pub alpha: Option<f64>,
    pub stage: String,
    pub kind: ErrorKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub slice_count: usize,
    pub seed: u64,
    pub scheme: Scheme,
    pub alpha: Option<f64>,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub reports: Vec<MetricsReport>,
    pub failures: Vec<ConditionFailure>,
    pub histories: Vec<TrainingRecord>,
}

#[derive(Default)]
struct Collector {
    out: SweepOutcome,
}

impl Collector {
    fn fail(&mut self, n: usize, seed: u64, scheme: Scheme, alpha: Option<f64>, stage: &str, e: &Error) {
        log::warn!("slices={n} seed={seed} {scheme}: {stage} failed: {e}");
        self.out.failures.push(ConditionFailure {
            slice_count: n,
            seed,
            scheme,
            alpha,
            stage: stage.into(),
            kind: e.kind(),
            message: e.to_string(),
        });
    }

    fn history(&mut self, n: usize, seed: u64, scheme: Scheme, alpha: Option<f64>, history: TrainHistory) {
        self.out.histories.push(TrainingRecord { slice_count: n, seed, scheme, alpha, history });
    }
}

/// Every 3D run of a condition: the α = 0 baseline and each positive α.
fn alpha_runs(cfg: &ExperimentConfig) -> Vec<(Scheme, f64)> {
    let mut runs = Vec::new();
    if cfg.sweep.schemes.contains(&Scheme::Seg3dSparse) {
        runs.push((Scheme::Seg3dSparse, 0.0));
    }
    if cfg.sweep.schemes.contains(&Scheme::Seg3dPseudo) {
        runs.extend(cfg.sweep.alphas.iter().filter(|&&a| a > 0.0).map(|&a| (Scheme::Seg3dPseudo, a)));
    }
    runs
}

fn run_condition(cfg: &ExperimentConfig, ds: &Dataset, n: usize, seed: u64) -> SweepOutcome {
    let mut c = Collector::default();
    let runs = alpha_runs(cfg);
    let fail_all = |c: &mut Collector, stage: &str, e: &Error| {
        if cfg.sweep.schemes.contains(&Scheme::Seg2d) {
            c.fail(n, seed, Scheme::Seg2d, None, stage, e);
        }
        for &(scheme, a) in &runs {
            c.fail(n, seed, scheme, Some(a), stage, e);
        }
    };
    let sparse = match sparse_train_labels(ds, n) {
        Ok(s) => s,
        Err(e) => {
            fail_all(&mut c, "sparsify", &e);
            return c.out;
        }
    };
    log::info!("slices={n} seed={seed}: training 2D pseudo-labeler");
    let model2d = match train_pseudolabeler(cfg, ds, &sparse, seed) {
        Ok((m, h)) => {
            c.history(n, seed, Scheme::Seg2d, None, h);
            m
        }
        Err(e) => {
            fail_all(&mut c, "train2d", &e);
            return c.out;
        }
    };
    if cfg.sweep.schemes.contains(&Scheme::Seg2d) {
        let r = predict_volume_2d(&model2d, &ds.test.0)
            .and_then(|p| score(cfg, &p, &ds.test.1, Scheme::Seg2d, n, None, seed));
        match r {
            Ok(r) => c.out.reports.push(r),
            Err(e) => c.fail(n, seed, Scheme::Seg2d, None, "eval", &e),
        }
    }
    if runs.is_empty() {
        return c.out;
    }
    let probs = match pseudo_probabilities(&model2d, ds) {
        Ok(p) => p,
        Err(e) => {
            for &(scheme, a) in &runs {
                c.fail(n, seed, scheme, Some(a), "pseudolabel", &e);
            }
            return c.out;
        }
    };
    for (scheme, a) in runs {
        log::info!("slices={n} seed={seed}: training 3D network, alpha={a}");
        let result = Alpha::new(a)
            .and_then(|alpha| fuse_train_targets(cfg, &sparse, &probs, alpha))
            .and_then(|fused| train_segmenter(cfg, ds, &fused, seed))
            .and_then(|(m, h)| {
                let p = predict_test_3d(cfg, &m, &ds.test.0)?;
                Ok((score(cfg, &p, &ds.test.1, scheme, n, Some(a), seed)?, h))
            });
        match result {
            Ok((r, h)) => {
                c.history(n, seed, scheme, Some(a), h);
                c.out.reports.push(r);
            }
            Err(e) => c.fail(n, seed, scheme, Some(a), "train3d", &e),
        }
    }
    c.out
}

/// Runs every (slice count, seed) condition. Phantoms are generated once
/// and shared; seeds vary network initialisation and sampling. Conditions
/// run on up to `sweep.jobs` threads and are merged in grid order, so the
/// outcome does not depend on the thread count.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let ds = generate_dataset(cfg)?;
    let grid: Vec<(usize, u64)> =
        cfg.sweep.slice_counts.iter().flat_map(|&n| cfg.sweep.seeds.iter().map(move |&s| (n, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.sweep.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let parts: Vec<SweepOutcome> =
        pool.install(|| grid.par_iter().map(|&(n, s)| run_condition(cfg, &ds, n, s)).collect());
    let mut out = SweepOutcome::default();
    for p in parts {
        out.reports.extend(p.reports);
        out.failures.extend(p.failures);
        out.histories.extend(p.histories);
    }
    Ok(out)
}
