//! On-disk layout of an experiment directory.
//!
//! ```text
//! <out>/config.toml
//! <out>/phantoms/{train0,train1,train2,test}_{volume,labels}.volg
//! <out>/runs/slices<N>_seed<S>/seg2d.ckpt
//! <out>/runs/slices<N>_seed<S>/pseudo/train<i>_probs.volg
//! <out>/runs/slices<N>_seed<S>/alpha<A>/train<i>_{targets,weights,provenance}.volg
//! <out>/runs/slices<N>_seed<S>/alpha<A>/seg3d.ckpt
//! <out>/results.csv, summary.json, failures.json, histories.json, <metric>.svg
//! ```

use pseudoseg::evalkit::fmt_sig6;
use pseudoseg::volgrid::ArtifactMeta;
use pseudoseg::{Error, Result};
use std::path::{Path, PathBuf};

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn phantom_names(n_train: usize) -> Vec<String> {
        (0..n_train).map(|i| format!("train{i}")).chain(["test".to_string()]).collect()
    }

    pub fn volume(&self, name: &str) -> PathBuf {
        self.root.join("phantoms").join(format!("{name}_volume.volg"))
    }

    pub fn labels(&self, name: &str) -> PathBuf {
        self.root.join("phantoms").join(format!("{name}_labels.volg"))
    }

    pub fn condition(&self, slices: usize, seed: u64) -> PathBuf {
        self.root.join("runs").join(format!("slices{slices}_seed{seed}"))
    }

    pub fn seg2d(&self, slices: usize, seed: u64) -> PathBuf {
        self.condition(slices, seed).join("seg2d.ckpt")
    }

    pub fn pseudo(&self, slices: usize, seed: u64, i: usize) -> PathBuf {
        self.condition(slices, seed).join("pseudo").join(format!("train{i}_probs.volg"))
    }

    pub fn alpha_dir(&self, slices: usize, seed: u64, alpha: f64) -> PathBuf {
        self.condition(slices, seed).join(format!("alpha{}", fmt_sig6(alpha)))
    }

    pub fn seg3d(&self, slices: usize, seed: u64, alpha: f64) -> PathBuf {
        self.alpha_dir(slices, seed, alpha).join("seg3d.ckpt")
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::Artifact(format!("cannot create {}: {e}", dir.display())))
        }
        None => Ok(()),
    }
}

pub fn meta(hash: &str, stage: &str, seed: u64, condition: Option<String>) -> ArtifactMeta {
    ArtifactMeta { config_hash: hash.to_string(), stage: stage.to_string(), seed, condition }
}

/// Refuses artifacts that were produced under a different configuration.
pub fn check_meta(found: Option<&ArtifactMeta>, hash: &str, path: &Path) -> Result<()> {
    let Some(m) = found else {
        return Err(Error::Artifact(format!("{} carries no provenance; regenerate it", path.display())));
    };
    if m.config_hash != hash {
        return Err(Error::Artifact(format!(
            "{} was written by stage `{}` under config {}, but the current config hashes to {}; rerun the upstream stage",
            path.display(),
            m.stage,
            short(&m.config_hash),
            short(hash)
        )));
    }
    Ok(())
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

/// Missing upstream files are artifact errors, not plain I/O failures.
pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Artifact(format!("missing upstream artifact {}", path.display())))
    }
}
