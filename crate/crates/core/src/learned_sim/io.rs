//! `IDWTS1` weights container.
//!
//! Layout: the 7 magic bytes `IDWTS1\0`, a little-endian `u32` byte length,
//! a UTF-8 JSON header `{hyper, stats, tensors: [{name, shape}]}`, then every
//! tensor as little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelHyper, ModelParams, NormStats};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 7] = b"IDWTS1\0";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    hyper: ModelHyper,
    stats: NormStats,
    tensors: Vec<TensorEntry>,
}

impl ModelParams {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            hyper: self.hyper.clone(),
            stats: self.stats().clone(),
            tensors: self
                .tensor_specs()
                .iter()
                .map(|(name, shape)| TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(11 + json.len() + 8 * self.num_weights());
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |detail: &str| Error::format(origin, detail);
        let m = WEIGHTS_MAGIC.len();
        if bytes.len() < m + 4 || &bytes[..m] != WEIGHTS_MAGIC {
            return Err(bad("missing IDWTS1 magic"));
        }
        let hlen = u32::from_le_bytes(bytes[m..m + 4].try_into().expect("4 bytes")) as usize;
        let body = bytes
            .get(m + 4..m + 4 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let mut rest = &bytes[m + 4 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            if rest.len() < 8 * n {
                return Err(bad(&format!("tensor {} is truncated", entry.name)));
            }
            let data = rest[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            rest = &rest[8 * n..];
            tensors.push(Tensor::new(entry.shape.clone(), data)?);
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        ModelParams::from_parts(header.hyper, header.stats, tensors)
            .map_err(|e| bad(&e.to_string()))
    }
}

pub fn write_weights(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, params.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn read_weights(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelParams::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut p = ModelParams::init(
            ModelHyper {
                width: 8,
                blocks: 2,
                ..ModelHyper::default()
            },
            3,
        )
        .unwrap();
        p.set_stats(NormStats {
            velocity_mean: [0.1, -1.0 / 3.0],
            velocity_std: [0.7, 1e-300],
            accel_mean: [0.0, -0.98],
            accel_std: [2.0, 3.0],
        });
        let bytes = p.to_bytes().unwrap();
        assert_eq!(&bytes[..7], b"IDWTS1\0");
        let back = ModelParams::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = ModelParams::init(
            ModelHyper {
                width: 4,
                blocks: 1,
                ..ModelHyper::default()
            },
            3,
        )
        .unwrap();
        let mut bytes = p.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            ModelParams::from_bytes(&bytes, Path::new("mem")),
            Err(Error::Format { .. })
        ));
        assert!(ModelParams::from_bytes(b"nope", Path::new("mem")).is_err());
    }
}
