//! Experiment configuration: one TOML file describes the phantoms, both
//! networks, and the sweep grid. Its hash stamps every artifact.

use crate::error::{Error, Result};
use crate::evalkit::Scheme;
use crate::fuselabel::{Alpha, PseudoMode};
use crate::phantom::PhantomConfig;
use crate::seg2d::Seg2DSpec;
use crate::seg3d::{Seg3DSpec, Seg3DTrainOptions};
use crate::training::HyperParams;
use crate::volgrid::Blend;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seg2DSection {
    pub spec: Seg2DSpec,
    pub hyper: HyperParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seg3DSection {
    pub spec: Seg3DSpec,
    pub hyper: HyperParams,
    #[serde(default)]
    pub train: Seg3DTrainOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub slice_counts: Vec<usize>,
    /// Pseudo-label weights for the proposed scheme; the sparse baseline
    /// always runs at 0.
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default = "all_schemes")]
    pub schemes: Vec<Scheme>,
    #[serde(default = "half")]
    pub threshold: f64,
    #[serde(default)]
    pub pseudo_mode: PseudoMode,
    #[serde(default = "half")]
    pub pseudo_threshold: f64,
    #[serde(default = "quarter")]
    pub tile_overlap: f64,
    #[serde(default)]
    pub blend: Blend,
    /// Conditions run concurrently; does not affect results.
    #[serde(default = "one")]
    pub jobs: usize,
}

fn all_schemes() -> Vec<Scheme> {
    Scheme::ALL.to_vec()
}

fn half() -> f64 {
    0.5
}

fn quarter() -> f64 {
    0.25
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub train_phantoms: Vec<PhantomConfig>,
    pub test_phantom: PhantomConfig,
    pub seg2d: Seg2DSection,
    pub seg3d: Seg3DSection,
    pub sweep: SweepConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    /// Full-size phantoms (50×114×114, three for training, one for test).
    pub fn desk() -> Self {
        let phantom = |seed| PhantomConfig { seed, ..PhantomConfig::default() };
        ExperimentConfig {
            seed: 0,
            output_dir: default_output(),
            train_phantoms: vec![phantom(1), phantom(2), phantom(3)],
            test_phantom: phantom(4),
            seg2d: Seg2DSection {
                spec: Seg2DSpec::default(),
                hyper: HyperParams {
                    lr: 1e-3,
                    batch_size: 64,
                    patches_per_epoch: 2048,
                    epochs: 30,
                    seed: 0,
                    optimizer: Default::default(),
                    early_stop_patience: 4,
                },
            },
            seg3d: Seg3DSection {
                spec: Seg3DSpec { base_channels: 8, ..Seg3DSpec::default() },
                hyper: HyperParams {
                    lr: 1e-3,
                    batch_size: 2,
                    patches_per_epoch: 16,
                    epochs: 12,
                    seed: 0,
                    optimizer: Default::default(),
                    early_stop_patience: 0,
                },
                train: Seg3DTrainOptions::default(),
            },
            sweep: SweepConfig {
                slice_counts: vec![2, 5, 11, 22, 50],
                alphas: vec![0.5],
                seeds: vec![0, 1, 2, 3, 4],
                schemes: all_schemes(),
                threshold: 0.5,
                pseudo_mode: PseudoMode::Hard,
                pseudo_threshold: 0.5,
                tile_overlap: 0.25,
                blend: Blend::Uniform,
                jobs: 1,
            },
        }
    }

    /// 16³ phantoms and small networks for fast end-to-end runs.
    pub fn smoke() -> Self {
        let phantom = |seed| PhantomConfig { seed, ..PhantomConfig::smoke() };
        let mut cfg = ExperimentConfig::desk();
        cfg.train_phantoms = vec![phantom(1), phantom(2), phantom(3)];
        cfg.test_phantom = phantom(4);
        cfg.seg2d.spec = Seg2DSpec { conv_channels: vec![8, 16, 32], fc_sizes: vec![64, 1], ..Seg2DSpec::default() };
        cfg.seg2d.hyper = HyperParams { batch_size: 32, patches_per_epoch: 256, epochs: 40, ..cfg.seg2d.hyper };
        cfg.seg3d.spec = Seg3DSpec { base_channels: 8, patch_shape: [16, 16, 16], ..Seg3DSpec::default() };
        cfg.seg3d.hyper = HyperParams { lr: 3e-3, batch_size: 2, patches_per_epoch: 10, epochs: 40, ..cfg.seg3d.hyper };
        cfg.sweep.slice_counts = vec![1, 2, 4, 16];
        cfg.sweep.seeds = vec![0, 1];
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_phantoms.is_empty() {
            return Err(Error::Config("at least one training phantom is required".into()));
        }
        for p in self.train_phantoms.iter().chain([&self.test_phantom]) {
            p.validate()?;
        }
        let depth = self.test_phantom.shape[0];
        if self.train_phantoms.iter().any(|p| p.shape[0] != depth) {
            return Err(Error::Config("all phantoms must share the same depth".into()));
        }
        self.seg2d.spec.validate()?;
        self.seg2d.hyper.validate()?;
        self.seg3d.spec.validate()?;
        self.seg3d.hyper.validate()?;
        if !(0.0..=1.0).contains(&self.seg3d.train.fg_bias) {
            return Err(Error::Config(format!("fg_bias must be in [0, 1], got {}", self.seg3d.train.fg_bias)));
        }
        let s = &self.sweep;
        if s.slice_counts.is_empty() || s.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one slice count and one seed".into()));
        }
        if let Some(&n) = s.slice_counts.iter().find(|&&n| n == 0 || n > depth) {
            return Err(Error::Config(format!("slice count {n} outside 1..={depth}")));
        }
        for &a in &s.alphas {
            Alpha::new(a).map_err(|e| Error::Config(e.to_string()))?;
        }
        if s.schemes.contains(&Scheme::Seg3dPseudo) && !s.alphas.iter().any(|&a| a > 0.0) {
            return Err(Error::Config("seg3d_pseudo needs at least one alpha > 0".into()));
        }
        for (name, t) in [("threshold", s.threshold), ("pseudo_threshold", s.pseudo_threshold)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1), got {t}")));
            }
        }
        if !(0.0..1.0).contains(&s.tile_overlap) {
            return Err(Error::Config(format!("tile_overlap must be in [0, 1), got {}", s.tile_overlap)));
        }
        if s.jobs == 0 {
            return Err(Error::Config("jobs must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// SHA-256 over the canonical JSON form, leaving out settings that do
    /// not change results (output location, parallelism).
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        let obj = v.as_object_mut().unwrap();
        obj.remove("output_dir");
        obj.get_mut("sweep").and_then(|s| s.as_object_mut()).map(|s| s.remove("jobs"));
        let canonical = serde_json::to_string(&v).expect("json value serialises");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn depth(&self) -> usize {
        self.test_phantom.shape[0]
    }
}
