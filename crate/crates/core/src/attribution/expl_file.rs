//! Binary explanation file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EXPL"  u8 version = 1  u8 dtype (0 = f32)
//! u32 C  u32 H  u32 W
//! C·H·W × f32 raw map, row-major
//! u32 n  n bytes of UTF-8 JSON metadata
//! ```
//!
//! The metadata object holds `method`, `params`, `target` and
//! `model_digest`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AttributionError, ExplanationMap, Method, Result};
use crate::autodiff::Target;
use crate::tensor::{chw_of, Element, Tensor};

pub const EXPL_MAGIC: &[u8; 4] = b"EXPL";
pub const EXPL_VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    method: Method,
    params: serde_json::Value,
    target: TargetMeta,
    model_digest: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetMeta {
    layer: String,
    neuron: usize,
}

/// Serializes `map` (its raw values as f32) to the explanation format.
pub fn to_expl_bytes<T: Element>(map: &ExplanationMap<T>) -> Result<Vec<u8>> {
    let (c, h, w) = chw_of(map.raw.shape())?;
    let mut out = Vec::with_capacity(18 + 4 * map.raw.len());
    out.extend_from_slice(EXPL_MAGIC);
    out.push(EXPL_VERSION);
    out.push(DTYPE_F32);
    for d in [c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in map.raw.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    let meta = Metadata {
        method: map.method,
        params: map.params.clone(),
        target: TargetMeta {
            layer: map.target.layer.clone(),
            neuron: map.target.neuron,
        },
        model_digest: map.model_digest.clone(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| AttributionError::File(e.to_string()))?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

/// Parses an explanation file. The raw map comes back as `[C, H, W]`.
pub fn from_expl_bytes(bytes: &[u8]) -> Result<ExplanationMap<f32>> {
    let bad = |msg: &str| AttributionError::File(msg.to_string());
    let mut rest = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if rest.len() < n {
            return Err(bad("truncated"));
        }
        let (head, tail) = rest.split_at(n);
        rest = tail;
        Ok(head)
    };
    if take(4)? != EXPL_MAGIC {
        return Err(bad("bad magic, expected EXPL"));
    }
    let header = take(2)?;
    if header[0] != EXPL_VERSION {
        return Err(AttributionError::File(format!(
            "unsupported version {}, expected {EXPL_VERSION}",
            header[0]
        )));
    }
    if header[1] != DTYPE_F32 {
        return Err(AttributionError::File(format!(
            "unsupported dtype code {}",
            header[1]
        )));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("dimensions overflow"))?;
    let payload = take(n.checked_mul(4).ok_or_else(|| bad("dimensions overflow"))?)?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let json = take(len)?;
    if !rest.is_empty() {
        return Err(bad("trailing bytes after metadata"));
    }
    let meta: Metadata =
        serde_json::from_slice(json).map_err(|e| AttributionError::File(e.to_string()))?;
    let raw = Tensor::new(dims.to_vec(), data)?;
    let mut map = ExplanationMap::new(
        raw,
        meta.method,
        Target::new(meta.target.layer, meta.target.neuron),
        meta.params,
    )?;
    map.model_digest = meta.model_digest;
    Ok(map)
}

pub fn write_explanation<T: Element>(
    path: impl AsRef<Path>,
    map: &ExplanationMap<T>,
) -> Result<()> {
    Ok(std::fs::write(path, to_expl_bytes(map)?)?)
}

pub fn read_explanation(path: impl AsRef<Path>) -> Result<ExplanationMap<f32>> {
    from_expl_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ExplanationMap<f32> {
        let raw = Tensor::new(vec![2, 1, 3], vec![0.5, -1.25, 3.0, 0.0, 1e-7, -2.5]).unwrap();
        ExplanationMap::new(
            raw,
            Method::LrpEpsilon,
            Target::new("fc", 2),
            serde_json::json!({"epsilon": 0.01, "batchnorm": "reject"}),
        )
        .unwrap()
        .with_digest("abc123")
    }

    #[test]
    fn round_trip_is_exact() {
        let map = sample();
        let bytes = to_expl_bytes(&map).unwrap();
        assert_eq!(&bytes[..6], b"EXPL\x01\x00");
        assert_eq!(&bytes[6..18], &[2, 0, 0, 0, 1, 0, 0, 0, 3, 0, 0, 0]);
        let back = from_expl_bytes(&bytes).unwrap();
        assert_eq!(back, map);
        assert_eq!(to_expl_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn rank_one_and_two_maps_are_stored_as_chw() {
        let raw = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let map = ExplanationMap::new(
            raw,
            Method::Saliency,
            Target::new("fc", 0),
            serde_json::json!({}),
        )
        .unwrap();
        let back = from_expl_bytes(&to_expl_bytes(&map).unwrap()).unwrap();
        assert_eq!(back.raw.shape(), &[1, 1, 3]);
        assert_eq!(back.raw.data(), map.raw.data());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = to_expl_bytes(&sample()).unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(from_expl_bytes(&bad_magic)
            .unwrap_err()
            .to_string()
            .contains("magic"));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(from_expl_bytes(&bad_version)
            .unwrap_err()
            .to_string()
            .contains("version"));
        assert!(from_expl_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(from_expl_bytes(&trailing).is_err());
    }
}
