//! Model checkpoints: `VOLGCKPT` magic, a length-prefixed JSON header, then
//! every parameter tensor as little-endian f32 in declared order.

use crate::error::{Error, Result};
use crate::netops::Tensor;
use crate::training::Normalization;
use crate::volgrid::ArtifactMeta;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CKPT_MAGIC: &[u8; 8] = b"VOLGCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: String,
    pub spec: serde_json::Value,
    pub seed: u64,
    pub epoch: usize,
    pub normalization: Normalization,
    pub params: Vec<ParamInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<ArtifactMeta>,
}

pub fn checkpoint_bytes(header: &CheckpointHeader, params: &[Tensor<f32>]) -> Result<Vec<u8>> {
    if header.params.len() != params.len() || header.params.iter().zip(params).any(|(i, p)| i.shape != p.shape()) {
        return Err(Error::Shape("checkpoint header does not describe the parameters".into()));
    }
    let json = serde_json::to_vec(header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + params.iter().map(|p| 4 * p.len()).sum::<usize>());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<Tensor<f32>>)> {
    if bytes.len() < 12 || &bytes[..8] != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| Error::Format(e.to_string()))?;
    let mut payload = &bytes[12 + hlen..];
    let expect: usize = header.params.iter().map(|p| 4 * p.shape.iter().product::<usize>()).sum();
    if payload.len() != expect {
        return Err(Error::Format(format!("checkpoint payload {} bytes, header implies {expect}", payload.len())));
    }
    let mut params = Vec::with_capacity(header.params.len());
    for info in &header.params {
        let n: usize = info.shape.iter().product();
        let data: Vec<f32> =
            payload[..4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite value in parameter {}", info.name)));
        }
        payload = &payload[4 * n..];
        params.push(Tensor::new(info.shape.clone(), data)?);
    }
    Ok((header, params))
}

pub fn write_checkpoint(path: impl AsRef<Path>, header: &CheckpointHeader, params: &[Tensor<f32>]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_bytes(header, params)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointHeader, Vec<Tensor<f32>>)> {
    let path = path.as_ref();
    parse_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Training state common to both networks, as stored in a checkpoint.
pub(crate) struct ModelRecord<'a, S> {
    pub tag: &'a str,
    pub spec: &'a S,
    pub names: Vec<ParamInfo>,
    pub params: &'a [Tensor<f32>],
    pub normalization: Normalization,
    pub seed: u64,
    pub epoch: usize,
}

pub(crate) fn save_model<S: Serialize>(
    path: impl AsRef<Path>,
    rec: ModelRecord<'_, S>,
    meta: Option<ArtifactMeta>,
) -> Result<()> {
    let header = CheckpointHeader {
        model: rec.tag.into(),
        spec: serde_json::to_value(rec.spec).map_err(|e| Error::Format(e.to_string()))?,
        seed: rec.seed,
        epoch: rec.epoch,
        normalization: rec.normalization,
        params: rec.names,
        meta,
    };
    write_checkpoint(path, &header, rec.params)
}

/// Reads a checkpoint and checks it holds a `tag` model whose parameter
/// shapes match `shapes_of(spec)`.
pub(crate) fn load_model<S: serde::de::DeserializeOwned>(
    path: impl AsRef<Path>,
    tag: &str,
    shapes_of: impl Fn(&S) -> Result<Vec<ParamInfo>>,
) -> Result<(S, CheckpointHeader, Vec<Tensor<f32>>)> {
    let (h, params) = read_checkpoint(path)?;
    if h.model != tag {
        return Err(Error::Artifact(format!("checkpoint holds a {} model, expected {tag}", h.model)));
    }
    let spec: S = serde_json::from_value(h.spec.clone()).map_err(|e| Error::Format(e.to_string()))?;
    let shapes = shapes_of(&spec)?;
    if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| s.shape != p.shape()) {
        return Err(Error::Artifact(format!("{tag} checkpoint parameters do not match its spec")));
    }
    Ok((spec, h, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (CheckpointHeader, Vec<Tensor<f32>>) {
        let params = vec![Tensor::from_fn(vec![2, 3], |i| i as f32 * 0.5), Tensor::full(vec![2], -1.0f32)];
        let header = CheckpointHeader {
            model: "test".into(),
            spec: serde_json::json!({"k": 3}),
            seed: 9,
            epoch: 4,
            normalization: Normalization { mean: 0.3, std: 1.5 },
            params: vec![
                ParamInfo { name: "w".into(), shape: vec![2, 3] },
                ParamInfo { name: "b".into(), shape: vec![2] },
            ],
            meta: None,
        };
        (header, params)
    }

    #[test]
    fn round_trip() {
        let (h, p) = sample();
        let bytes = checkpoint_bytes(&h, &p).unwrap();
        let (h2, p2) = parse_checkpoint(&bytes).unwrap();
        assert_eq!(h2, h);
        assert_eq!(p2, p);
        assert_eq!(checkpoint_bytes(&h2, &p2).unwrap(), bytes);
    }

    #[test]
    fn rejects_damage() {
        let (h, p) = sample();
        let bytes = checkpoint_bytes(&h, &p).unwrap();
        assert!(parse_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(parse_checkpoint(&bad).is_err());
        assert!(checkpoint_bytes(&h, &p[..1]).is_err());
    }
}
