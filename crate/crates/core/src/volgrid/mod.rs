//! Volumetric data model: intensity volumes, tri-state label volumes and
//! probability maps, all indexed in (Z, Y, X) order.

mod io;
mod patch;

pub use io::{
    load_labels, load_probs, load_volume, read_volg, save_labels, save_probs, save_volume, write_volg, ArtifactMeta,
    Dtype, VolgFile, VolgHeader, VolumeKind, VOLG_MAGIC,
};
pub use patch::{
    extract_block, extract_patch, fuse_predictions, hann_window, reflect_index, tile_origins, Blend, PadMode, Patch,
    PatchSpec,
};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Grid extent as (depth, height, width).
pub type Shape3 = [usize; 3];

pub fn voxel_count(shape: Shape3) -> usize {
    shape[0] * shape[1] * shape[2]
}

#[inline]
pub fn linear_index(shape: Shape3, z: usize, y: usize, x: usize) -> usize {
    (z * shape[1] + y) * shape[2] + x
}

fn check_shape(shape: Shape3) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::Shape(format!("all extents must be positive, got {shape:?}")));
    }
    Ok(())
}

fn check_voxel_size(voxel_size: [f64; 3]) -> Result<()> {
    if voxel_size.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
        return Err(Error::Invalid(format!("voxel size must be positive, got {voxel_size:?}")));
    }
    Ok(())
}

/// Raw voxel payload. The variant is the on-disk dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    U16(Vec<u16>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::F32(v) => v.len(),
            VoxelData::U8(v) => v.len(),
            VoxelData::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            VoxelData::F32(_) => Dtype::F32,
            VoxelData::U8(_) => Dtype::U8,
            VoxelData::U16(_) => Dtype::U16,
        }
    }

    #[inline]
    pub fn get(&self, i: usize) -> f32 {
        match self {
            VoxelData::F32(v) => v[i],
            VoxelData::U8(v) => v[i] as f32,
            VoxelData::U16(v) => v[i] as f32,
        }
    }
}

/// Scalar intensity grid with physical voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    shape: Shape3,
    voxel_size: [f64; 3],
    data: VoxelData,
    kind: VolumeKind,
    meta: Option<ArtifactMeta>,
}

impl Volume3D {
    pub fn new(shape: Shape3, voxel_size: [f64; 3], data: VoxelData) -> Result<Self> {
        check_shape(shape)?;
        check_voxel_size(voxel_size)?;
        if data.len() != voxel_count(shape) {
            return Err(Error::Shape(format!(
                "payload has {} voxels, shape {:?} needs {}",
                data.len(),
                shape,
                voxel_count(shape)
            )));
        }
        if let VoxelData::F32(v) = &data {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Invalid("volume contains NaN or infinite values".into()));
            }
        }
        Ok(Volume3D { shape, voxel_size, data, kind: VolumeKind::Intensity, meta: None })
    }

    pub fn from_f32(shape: Shape3, voxel_size: [f64; 3], data: Vec<f32>) -> Result<Self> {
        Self::new(shape, voxel_size, VoxelData::F32(data))
    }

    pub fn filled(shape: Shape3, voxel_size: [f64; 3], value: f32) -> Result<Self> {
        Self::from_f32(shape, voxel_size, vec![value; voxel_count(shape)])
    }

    pub fn with_kind(mut self, kind: VolumeKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn with_meta(mut self, meta: ArtifactMeta) -> Self {
        self.meta = Some(meta);
        self
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn data(&self) -> &VoxelData {
        &self.data
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn meta(&self) -> Option<&ArtifactMeta> {
        self.meta.as_ref()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data.get(linear_index(self.shape, z, y, x))
    }

    pub fn to_f32(&self) -> Vec<f32> {
        match &self.data {
            VoxelData::F32(v) => v.clone(),
            other => (0..other.len()).map(|i| other.get(i)).collect(),
        }
    }

    /// Copy of z-slices `[z0, z0 + n)` as a new volume.
    pub fn slab(&self, z0: usize, n: usize) -> Result<Volume3D> {
        if n == 0 || z0 + n > self.shape[0] {
            return Err(Error::Invalid(format!("slab {z0}+{n} outside depth {}", self.shape[0])));
        }
        let plane = self.shape[1] * self.shape[2];
        let range = z0 * plane..(z0 + n) * plane;
        let data = match &self.data {
            VoxelData::F32(v) => VoxelData::F32(v[range].to_vec()),
            VoxelData::U8(v) => VoxelData::U8(v[range].to_vec()),
            VoxelData::U16(v) => VoxelData::U16(v[range].to_vec()),
        };
        Volume3D::new([n, self.shape[1], self.shape[2]], self.voxel_size, data)
    }
}

/// Per-voxel annotation state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Background = 0,
    Foreground = 1,
    Unlabeled = 2,
}

impl Label {
    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Background),
            1 => Some(Label::Foreground),
            2 => Some(Label::Unlabeled),
            _ => None,
        }
    }

    pub fn is_labeled(self) -> bool {
        self != Label::Unlabeled
    }
}

/// Tri-state annotation volume. Voxels with a label other than
/// [`Label::Unlabeled`] form the labeled partition, the rest the unlabeled one.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    shape: Shape3,
    voxel_size: [f64; 3],
    labels: Vec<Label>,
    meta: Option<ArtifactMeta>,
}

impl LabelVolume {
    pub fn new(shape: Shape3, voxel_size: [f64; 3], labels: Vec<Label>) -> Result<Self> {
        check_shape(shape)?;
        check_voxel_size(voxel_size)?;
        if labels.len() != voxel_count(shape) {
            return Err(Error::Shape(format!("{} labels for shape {:?}", labels.len(), shape)));
        }
        Ok(LabelVolume { shape, voxel_size, labels, meta: None })
    }

    pub fn filled(shape: Shape3, voxel_size: [f64; 3], label: Label) -> Result<Self> {
        Self::new(shape, voxel_size, vec![label; voxel_count(shape)])
    }

    pub fn with_meta(mut self, meta: ArtifactMeta) -> Self {
        self.meta = Some(meta);
        self
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [Label] {
        &mut self.labels
    }

    pub fn meta(&self) -> Option<&ArtifactMeta> {
        self.meta.as_ref()
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> Label {
        self.labels[linear_index(self.shape, z, y, x)]
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_labeled()).count()
    }

    pub fn labeled_fraction(&self) -> f64 {
        self.labeled_count() as f64 / self.labels.len() as f64
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == Label::Foreground).count()
    }

    /// True when no voxel is [`Label::Unlabeled`].
    pub fn is_dense(&self) -> bool {
        self.labels.iter().all(|l| l.is_labeled())
    }

    /// Indices of z-slices containing at least one labeled voxel.
    pub fn labeled_slices(&self) -> Vec<usize> {
        let plane = self.shape[1] * self.shape[2];
        (0..self.shape[0]).filter(|&z| self.labels[z * plane..(z + 1) * plane].iter().any(|l| l.is_labeled())).collect()
    }

    pub fn check_aligned(&self, shape: Shape3) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape(format!("labels {:?} do not match volume {:?}", self.shape, shape)));
        }
        Ok(())
    }
}

/// Per-voxel probability map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    shape: Shape3,
    voxel_size: [f64; 3],
    probs: Vec<f32>,
    meta: Option<ArtifactMeta>,
}

impl ProbVolume {
    pub fn new(shape: Shape3, voxel_size: [f64; 3], probs: Vec<f32>) -> Result<Self> {
        check_shape(shape)?;
        check_voxel_size(voxel_size)?;
        if probs.len() != voxel_count(shape) {
            return Err(Error::Shape(format!("{} probabilities for shape {:?}", probs.len(), shape)));
        }
        if let Some(bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Invalid(format!("probability {bad} outside [0, 1]")));
        }
        Ok(ProbVolume { shape, voxel_size, probs, meta: None })
    }

    pub fn with_voxel_size(mut self, voxel_size: [f64; 3]) -> Result<Self> {
        check_voxel_size(voxel_size)?;
        self.voxel_size = voxel_size;
        Ok(self)
    }

    pub fn with_meta(mut self, meta: ArtifactMeta) -> Self {
        self.meta = Some(meta);
        self
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn meta(&self) -> Option<&ArtifactMeta> {
        self.meta.as_ref()
    }

    pub fn into_probs(self) -> Vec<f32> {
        self.probs
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.probs[linear_index(self.shape, z, y, x)]
    }
}
