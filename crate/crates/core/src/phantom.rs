//! Synthetic neuron-like volumes: random axis-aligned ellipsoids on a dim
//! background, anisotropically blurred, with additive Gaussian noise.
//! Everything is drawn from a ChaCha8 stream seeded by the config, so a
//! config fully determines the output bytes.

use crate::error::{Error, Result};
use crate::volgrid::{reflect_index, voxel_count, Label, LabelVolume, Shape3, Volume3D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub shape: Shape3,
    #[serde(default = "default_voxel_size")]
    pub voxel_size: [f64; 3],
    pub n_cells: usize,
    pub radius_range_um: (f64, f64),
    pub intensity_fg: f64,
    pub intensity_bg: f64,
    pub noise_sigma: f64,
    pub blur_sigma_um: [f64; 3],
    pub seed: u64,
}

fn default_voxel_size() -> [f64; 3] {
    [2.0, 0.88, 0.88]
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            shape: [50, 114, 114],
            voxel_size: default_voxel_size(),
            n_cells: 40,
            radius_range_um: (5.0, 9.0),
            intensity_fg: 1.0,
            intensity_bg: 0.2,
            noise_sigma: 0.15,
            blur_sigma_um: [2.0, 0.88, 0.88],
            seed: 0,
        }
    }
}

impl PhantomConfig {
    /// 16³ variant used by fast end-to-end runs.
    pub fn smoke() -> Self {
        PhantomConfig { shape: [16, 16, 16], n_cells: 3, radius_range_um: (3.0, 5.0), ..PhantomConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.radius_range_um;
        if self.shape.contains(&0) {
            return Err(Error::Config(format!("phantom shape must be positive, got {:?}", self.shape)));
        }
        if self.voxel_size.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::Config(format!("voxel size must be positive, got {:?}", self.voxel_size)));
        }
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("radius range ({lo}, {hi}) is not ordered")));
        }
        if !(self.noise_sigma >= 0.0 && self.blur_sigma_um.iter().all(|&s| s >= 0.0)) {
            return Err(Error::Config("noise and blur sigmas must be >= 0".into()));
        }
        if !(self.intensity_bg >= 0.0 && self.intensity_fg > self.intensity_bg) {
            return Err(Error::Config(format!(
                "need intensity_fg > intensity_bg >= 0, got {} and {}",
                self.intensity_fg, self.intensity_bg
            )));
        }
        let coarsest = self.voxel_size.iter().cloned().fold(0.0, f64::max);
        if self.n_cells > 0 && lo < coarsest {
            return Err(Error::Config(format!(
                "minimum radius {lo} um is below one voxel ({coarsest} um) along some axis"
            )));
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

fn rasterize(cfg: &PhantomConfig, cells: &[Ellipsoid]) -> Vec<Label> {
    let s = cfg.shape;
    let vs = cfg.voxel_size;
    let mut labels = vec![Label::Background; voxel_count(s)];
    for c in cells {
        // bounding box in voxel indices
        let range = |a: usize| {
            let lo = ((c.center[a] - c.radii[a]) / vs[a] - 0.5).floor().max(0.0) as usize;
            let hi = (((c.center[a] + c.radii[a]) / vs[a] - 0.5).ceil().max(0.0) as usize).min(s[a] - 1);
            lo..=hi
        };
        for z in range(0) {
            let dz = ((z as f64 + 0.5) * vs[0] - c.center[0]) / c.radii[0];
            for y in range(1) {
                let dy = ((y as f64 + 0.5) * vs[1] - c.center[1]) / c.radii[1];
                for x in range(2) {
                    let dx = ((x as f64 + 0.5) * vs[2] - c.center[2]) / c.radii[2];
                    if dz * dz + dy * dy + dx * dx <= 1.0 {
                        labels[(z * s[1] + y) * s[2] + x] = Label::Foreground;
                    }
                }
            }
        }
    }
    labels
}

fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    let r = (3.0 * sigma_vox).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma_vox * sigma_vox)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur along one axis with mirrored borders.
fn blur_axis(data: &mut [f64], shape: Shape3, axis: usize, sigma_vox: f64) {
    if sigma_vox <= 0.0 {
        return;
    }
    let k = gaussian_kernel(sigma_vox);
    let r = (k.len() / 2) as isize;
    let n = shape[axis];
    let stride = [shape[1] * shape[2], shape[2], 1][axis];
    let mut line = vec![0.0; n];
    for base in 0..data.len() {
        // visit each line once, from its first element
        if !(base / stride).is_multiple_of(n) {
            continue;
        }
        for (i, l) in line.iter_mut().enumerate() {
            *l = data[base + i * stride];
        }
        for i in 0..n {
            let mut acc = 0.0;
            for (j, w) in k.iter().enumerate() {
                let src = reflect_index(i as isize + j as isize - r, n);
                acc += w * line[src];
            }
            data[base + i * stride] = acc;
        }
    }
}

/// Intensity volume and its dense ground truth.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(Volume3D, LabelVolume)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let extent: [f64; 3] = [0, 1, 2].map(|a| cfg.shape[a] as f64 * cfg.voxel_size[a]);
    let (lo, hi) = cfg.radius_range_um;
    let cells: Vec<Ellipsoid> = (0..cfg.n_cells)
        .map(|_| {
            let center = [0, 1, 2].map(|a| rng.random_range(0.0..extent[a]));
            let radii = [0, 1, 2].map(|_| if hi > lo { rng.random_range(lo..hi) } else { lo });
            Ellipsoid { center, radii }
        })
        .collect();
    let labels = rasterize(cfg, &cells);

    let mut field: Vec<f64> =
        labels.iter().map(|&l| if l == Label::Foreground { cfg.intensity_fg } else { cfg.intensity_bg }).collect();
    for a in 0..3 {
        blur_axis(&mut field, cfg.shape, a, cfg.blur_sigma_um[a] / cfg.voxel_size[a]);
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for v in field.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let data = field.into_iter().map(|v| v.max(0.0) as f32).collect();
    let volume = Volume3D::from_f32(cfg.shape, cfg.voxel_size, data)?;
    let labels = LabelVolume::new(cfg.shape, cfg.voxel_size, labels)?;
    Ok((volume, labels))
}

/// Which z-slices keep their ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityPlan {
    pub labeled_slice_indices: Vec<usize>,
}

impl SparsityPlan {
    pub fn new(labeled_slice_indices: Vec<usize>) -> Self {
        SparsityPlan { labeled_slice_indices }
    }

    /// `n` slices spread evenly over `depth`: index `i` is
    /// `floor((i + 0.5) * depth / n)`.
    pub fn evenly_spaced(n: usize, depth: usize) -> Result<Self> {
        if n > depth {
            return Err(Error::Invalid(format!("{n} slices requested from depth {depth}")));
        }
        Ok(SparsityPlan::new((0..n).map(|i| ((2 * i + 1) * depth) / (2 * n)).collect()))
    }

    pub fn labeled_fraction(&self, depth: usize) -> f64 {
        self.labeled_slice_indices.len() as f64 / depth as f64
    }
}

/// Keep the planned slices of a dense label volume; mark everything else
/// unlabeled.
pub fn sparsify_labels(dense: &LabelVolume, plan: &SparsityPlan) -> Result<LabelVolume> {
    if !dense.is_dense() {
        return Err(Error::Invalid("sparsify_labels needs a fully labeled input".into()));
    }
    let depth = dense.shape()[0];
    let mut keep = vec![false; depth];
    for &z in &plan.labeled_slice_indices {
        if z >= depth {
            return Err(Error::Invalid(format!("slice index {z} out of range for depth {depth}")));
        }
        if keep[z] {
            return Err(Error::Invalid(format!("slice index {z} listed twice")));
        }
        keep[z] = true;
    }
    let plane = dense.shape()[1] * dense.shape()[2];
    let labels =
        dense.labels().iter().enumerate().map(|(i, &l)| if keep[i / plane] { l } else { Label::Unlabeled }).collect();
    LabelVolume::new(dense.shape(), dense.voxel_size(), labels)
}
