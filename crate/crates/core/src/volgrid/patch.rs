//! Patch extraction with padding, and overlap-blended recombination of
//! per-patch predictions.

use super::{voxel_count, ProbVolume, Shape3, Volume3D};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Axis-aligned block of a volume. The origin may be negative or reach past
/// the far edge; such voxels are produced by padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub origin: [isize; 3],
    pub shape: Shape3,
}

impl PatchSpec {
    pub fn new(origin: [isize; 3], shape: Shape3) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Invalid(format!("patch shape must be positive, got {shape:?}")));
        }
        if (0..3).any(|a| origin[a] < -(shape[a] as isize)) {
            return Err(Error::Invalid(format!("patch origin {origin:?} below -shape {shape:?}")));
        }
        Ok(PatchSpec { origin, shape })
    }

    /// Patch of `shape` whose center voxel (`shape / 2`) is `center`.
    pub fn centered(center: [usize; 3], shape: Shape3) -> Self {
        let origin = [0, 1, 2].map(|a| center[a] as isize - (shape[a] / 2) as isize);
        PatchSpec { origin, shape }
    }

    fn overlaps(&self, shape: Shape3) -> bool {
        (0..3).all(|a| self.origin[a] < shape[a] as isize && self.origin[a] + self.shape[a] as isize > 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    #[default]
    Reflect,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Blend {
    #[default]
    Uniform,
    Hann,
}

/// Dense block plus a mask marking which voxels lie inside the source volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub spec: PatchSpec,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

/// Mirror an index into `[0, n)` without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`), folding repeatedly for large offsets.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Per-axis source index for each patch coordinate, or `None` when the
/// coordinate falls outside the volume.
fn axis_map(origin: isize, len: usize, n: usize) -> Vec<(usize, bool)> {
    (0..len as isize)
        .map(|k| {
            let i = origin + k;
            if (0..n as isize).contains(&i) {
                (i as usize, true)
            } else {
                (reflect_index(i, n), false)
            }
        })
        .collect()
}

/// Extract a patch from a raw `(Z, Y, X)` buffer.
pub fn extract_block(src: &[f32], shape: Shape3, spec: &PatchSpec, pad: PadMode) -> Result<Patch> {
    if src.len() != voxel_count(shape) {
        return Err(Error::Shape(format!("buffer of {} for shape {shape:?}", src.len())));
    }
    if spec.shape.contains(&0) {
        return Err(Error::Invalid("patch shape must be positive".into()));
    }
    if !spec.overlaps(shape) {
        return Err(Error::Invalid(format!(
            "patch {:?}+{:?} lies entirely outside volume {shape:?}",
            spec.origin, spec.shape
        )));
    }
    let maps: Vec<Vec<(usize, bool)>> = (0..3).map(|a| axis_map(spec.origin[a], spec.shape[a], shape[a])).collect();
    let n = voxel_count(spec.shape);
    let mut values = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for &(sz, vz) in &maps[0] {
        for &(sy, vy) in &maps[1] {
            let row = (sz * shape[1] + sy) * shape[2];
            for &(sx, vx) in &maps[2] {
                let ok = vz && vy && vx;
                valid.push(ok);
                values.push(match (ok, pad) {
                    (false, PadMode::Zero) => 0.0,
                    _ => src[row + sx],
                });
            }
        }
    }
    Ok(Patch { spec: *spec, values, valid })
}

pub fn extract_patch(v: &Volume3D, spec: &PatchSpec, pad: PadMode) -> Result<Patch> {
    extract_block(&v.to_f32(), v.shape(), spec, pad)
}

/// Separable raised-cosine weight along one axis. Strictly positive so that
/// patch borders still count when they are the only cover.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (i as f64 + 0.5) / n as f64).cos()).collect()
}

/// Weighted average of overlapping patch predictions. Patch voxels outside
/// `shape` are ignored.
pub fn fuse_predictions<B: AsRef<[f32]>>(
    patches: &[(PatchSpec, B)],
    shape: Shape3,
    blend: Blend,
) -> Result<ProbVolume> {
    let n = voxel_count(shape);
    let mut acc = vec![0.0f64; n];
    let mut wsum = vec![0.0f64; n];
    for (spec, block) in patches {
        let block = block.as_ref();
        if block.len() != voxel_count(spec.shape) {
            return Err(Error::Shape(format!("prediction block of {} values for patch {:?}", block.len(), spec.shape)));
        }
        let win: Vec<Vec<f64>> = (0..3)
            .map(|a| match blend {
                Blend::Uniform => vec![1.0; spec.shape[a]],
                Blend::Hann => hann_window(spec.shape[a]),
            })
            .collect();
        for pz in 0..spec.shape[0] {
            let z = spec.origin[0] + pz as isize;
            if !(0..shape[0] as isize).contains(&z) {
                continue;
            }
            for py in 0..spec.shape[1] {
                let y = spec.origin[1] + py as isize;
                if !(0..shape[1] as isize).contains(&y) {
                    continue;
                }
                let wzy = win[0][pz] * win[1][py];
                let src = (pz * spec.shape[1] + py) * spec.shape[2];
                let dst = (z as usize * shape[1] + y as usize) * shape[2];
                for px in 0..spec.shape[2] {
                    let x = spec.origin[2] + px as isize;
                    if !(0..shape[2] as isize).contains(&x) {
                        continue;
                    }
                    let w = wzy * win[2][px];
                    let i = dst + x as usize;
                    acc[i] += w * block[src + px] as f64;
                    wsum[i] += w;
                }
            }
        }
    }
    if let Some(i) = wsum.iter().position(|&w| w == 0.0) {
        let x = i % shape[2];
        let y = (i / shape[2]) % shape[1];
        let z = i / (shape[1] * shape[2]);
        return Err(Error::Invalid(format!("voxel ({z}, {y}, {x}) is not covered by any patch")));
    }
    let probs = acc.iter().zip(&wsum).map(|(a, w)| (a / w) as f32).collect();
    ProbVolume::new(shape, [1.0; 3], probs)
}

/// Tile origins along one axis so that consecutive tiles overlap by about
/// `overlap` of the patch length and the last tile ends at the far edge.
/// Axes shorter than the patch get a single tile at 0.
pub fn tile_origins(dim: usize, patch: usize, overlap: f64) -> Result<Vec<isize>> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Invalid(format!("tile overlap must be in [0, 1), got {overlap}")));
    }
    if dim <= patch {
        return Ok(vec![0]);
    }
    let step = ((patch as f64 * (1.0 - overlap)).round() as usize).max(1);
    let last = dim - patch;
    let mut out: Vec<isize> = (0..=last).step_by(step).map(|o| o as isize).collect();
    if *out.last().unwrap() != last as isize {
        out.push(last as isize);
    }
    Ok(out)
}
