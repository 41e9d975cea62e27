//! VOLG container: 8-byte magic, little-endian `u32` header length, UTF-8
//! JSON header, then the raw little-endian payload in C order (Z, Y, X).

use super::{voxel_count, Label, LabelVolume, ProbVolume, Shape3, Volume3D, VoxelData};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const VOLG_MAGIC: &[u8; 8] = b"VOLG0001";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
    U16,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
            Dtype::U16 => 2,
        }
    }
}

/// What the payload means. `weights` and `provenance` carry persisted
/// fused training targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Intensity,
    Labels,
    Probs,
    Weights,
    Provenance,
}

/// Traceability stamp written into every pipeline artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub config_hash: String,
    pub stage: String,
    pub seed: u64,
    /// Experiment condition the artifact belongs to, e.g. `slices=5 alpha=0.5`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolgHeader {
    pub shape: Shape3,
    pub voxel_size: [f64; 3],
    pub dtype: Dtype,
    pub kind: VolumeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<ArtifactMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolgFile {
    pub header: VolgHeader,
    pub data: VoxelData,
}

impl VolgFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.header.dtype != self.data.dtype() {
            return Err(Error::Invalid("header dtype does not match payload".into()));
        }
        let json = serde_json::to_vec(&self.header).map_err(|e| Error::Format(format!("header encode: {e}")))?;
        let mut out = Vec::with_capacity(12 + json.len() + self.data.len() * self.header.dtype.size());
        out.extend_from_slice(VOLG_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        match &self.data {
            VoxelData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            VoxelData::U8(v) => out.extend_from_slice(v),
            VoxelData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != VOLG_MAGIC {
            return Err(Error::Format("missing VOLG0001 magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() < hlen {
            return Err(Error::Format(format!("header length {hlen} exceeds file size")));
        }
        let header: VolgHeader =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Format(format!("header: {e}")))?;
        let payload = &body[hlen..];
        let n = voxel_count(header.shape);
        let expected = n * header.dtype.size();
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "size mismatch: header declares {n} voxels ({expected} bytes), payload has {} bytes",
                payload.len()
            )));
        }
        let data = match header.dtype {
            Dtype::F32 => {
                let v: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Format("payload contains NaN or infinite values".into()));
                }
                VoxelData::F32(v)
            }
            Dtype::U8 => VoxelData::U8(payload.to_vec()),
            Dtype::U16 => {
                VoxelData::U16(payload.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().unwrap())).collect())
            }
        };
        if header.kind == VolumeKind::Labels {
            match &data {
                VoxelData::U8(v) if v.iter().all(|&l| l <= 2) => {}
                VoxelData::U8(_) => return Err(Error::Format("label values must be 0, 1 or 2".into())),
                _ => return Err(Error::Format("label payloads must be u8".into())),
            }
        }
        Ok(VolgFile { header, data })
    }
}

pub fn read_volg(path: impl AsRef<Path>) -> Result<VolgFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    VolgFile::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_volg(path: impl AsRef<Path>, file: &VolgFile) -> Result<()> {
    let path = path.as_ref();
    let bytes = file.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let f = read_volg(path)?;
    let mut v = Volume3D::new(f.header.shape, f.header.voxel_size, f.data)?.with_kind(f.header.kind);
    if let Some(m) = f.header.meta {
        v = v.with_meta(m);
    }
    Ok(v)
}

pub fn save_volume(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let file = VolgFile {
        header: VolgHeader {
            shape: v.shape(),
            voxel_size: v.voxel_size(),
            dtype: v.data().dtype(),
            kind: v.kind(),
            meta: v.meta().cloned(),
        },
        data: v.data().clone(),
    };
    write_volg(path, &file)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let f = read_volg(path)?;
    if f.header.kind != VolumeKind::Labels {
        return Err(Error::Format(format!("expected kind labels, found {:?}", f.header.kind)));
    }
    let VoxelData::U8(raw) = f.data else { unreachable!("validated in from_bytes") };
    let labels = raw.into_iter().map(|v| Label::from_u8(v).unwrap()).collect();
    let mut l = LabelVolume::new(f.header.shape, f.header.voxel_size, labels)?;
    if let Some(m) = f.header.meta {
        l = l.with_meta(m);
    }
    Ok(l)
}

pub fn save_labels(l: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let file = VolgFile {
        header: VolgHeader {
            shape: l.shape(),
            voxel_size: l.voxel_size(),
            dtype: Dtype::U8,
            kind: VolumeKind::Labels,
            meta: l.meta().cloned(),
        },
        data: VoxelData::U8(l.labels().iter().map(|&v| v as u8).collect()),
    };
    write_volg(path, &file)
}

pub fn load_probs(path: impl AsRef<Path>) -> Result<ProbVolume> {
    let f = read_volg(path)?;
    if f.header.kind != VolumeKind::Probs {
        return Err(Error::Format(format!("expected kind probs, found {:?}", f.header.kind)));
    }
    let VoxelData::F32(p) = f.data else {
        return Err(Error::Format("probability payloads must be f32".into()));
    };
    let mut out = ProbVolume::new(f.header.shape, f.header.voxel_size, p)?;
    if let Some(m) = f.header.meta {
        out = out.with_meta(m);
    }
    Ok(out)
}

pub fn save_probs(p: &ProbVolume, path: impl AsRef<Path>) -> Result<()> {
    let file = VolgFile {
        header: VolgHeader {
            shape: p.shape(),
            voxel_size: p.voxel_size(),
            dtype: Dtype::F32,
            kind: VolumeKind::Probs,
            meta: p.meta().cloned(),
        },
        data: VoxelData::F32(p.probs().to_vec()),
    };
    write_volg(path, &file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.volg");
        let v = Volume3D::filled([2, 2, 2], [1.0; 3], 0.0).unwrap();
        save_volume(&v, &p).unwrap();
        let first = std::fs::read(&p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back, v);
        save_volume(&back, &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }

    #[test]
    fn truncated_payload_is_a_size_mismatch() {
        let v = Volume3D::new([1, 2, 5], [1.0; 3], VoxelData::U8(vec![3; 10])).unwrap();
        let file = VolgFile {
            header: VolgHeader {
                shape: v.shape(),
                voxel_size: v.voxel_size(),
                dtype: Dtype::U8,
                kind: VolumeKind::Intensity,
                meta: None,
            },
            data: v.data().clone(),
        };
        let mut bytes = file.to_bytes().unwrap();
        bytes.pop();
        let err = VolgFile::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("size mismatch"), "{err}");
    }

    #[test]
    fn unknown_dtype_and_nan_are_rejected() {
        let header = br#"{"shape":[1,1,1],"voxel_size":[1.0,1.0,1.0],"dtype":"f64","kind":"intensity"}"#;
        let mut bytes = VOLG_MAGIC.to_vec();
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 8]);
        assert!(VolgFile::from_bytes(&bytes).is_err());

        let header = br#"{"shape":[1,1,1],"voxel_size":[1.0,1.0,1.0],"dtype":"f32","kind":"intensity"}"#;
        let mut bytes = VOLG_MAGIC.to_vec();
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        assert!(VolgFile::from_bytes(&bytes).is_err());
    }

    #[test]
    fn missing_file_and_read_only_destination() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_volume(dir.path().join("nope.volg")), Err(Error::Io { .. })));
        let v = Volume3D::filled([1, 1, 1], [1.0; 3], 1.0).unwrap();
        // a directory path cannot be written as a file
        assert!(save_volume(&v, dir.path()).is_err());
    }

    #[test]
    fn labels_reject_out_of_range_values() {
        let file = VolgFile {
            header: VolgHeader {
                shape: [1, 1, 2],
                voxel_size: [1.0; 3],
                dtype: Dtype::U8,
                kind: VolumeKind::Labels,
                meta: None,
            },
            data: VoxelData::U8(vec![1, 3]),
        };
        let bytes = file.to_bytes().unwrap();
        assert!(VolgFile::from_bytes(&bytes).is_err());
    }

    #[test]
    fn voxel_size_survives_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.volg");
        let vs = [0.1 + 0.2, 1.0 / 3.0, 2.0f64.sqrt()];
        let v = Volume3D::filled([1, 2, 2], vs, 0.5).unwrap();
        save_volume(&v, &path).unwrap();
        assert_eq!(load_volume(&path).unwrap().voxel_size().map(f64::to_bits), vs.map(f64::to_bits));
    }
}
