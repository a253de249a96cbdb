//! `IDTRAJ1` trajectory container.
//!
//! Layout: the 8 magic bytes `IDTRAJ1\0`, a little-endian `u32` byte length,
//! that many bytes of UTF-8 JSON header, then `num_steps × num_particles × 2`
//! little-endian `f32` positions, frame-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::NodeType;
use crate::error::{Error, Result};

pub const TRAJECTORY_MAGIC: &[u8; 8] = b"IDTRAJ1\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    /// Number of stored frames (a `K`-step rollout stores `K + 1`).
    pub num_steps: usize,
    pub num_particles: usize,
    pub dt: f64,
    pub radius: f64,
    pub node_types: Vec<NodeType>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub header: TrajectoryHeader,
    /// One position list per frame.
    pub frames: Vec<Vec<[f64; 2]>>,
}

impl Trajectory {
    pub fn new(
        dt: f64,
        radius: f64,
        node_types: Vec<NodeType>,
        frames: Vec<Vec<[f64; 2]>>,
    ) -> Result<Self> {
        if frames.iter().any(|f| f.len() != node_types.len()) {
            return Err(Error::shape(
                "trajectory",
                "frame length differs from node count",
            ));
        }
        Ok(Trajectory {
            header: TrajectoryHeader {
                num_steps: frames.len(),
                num_particles: node_types.len(),
                dt,
                radius,
                node_types,
            },
            frames,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let n = self.header.num_particles;
        let mut out = Vec::with_capacity(12 + header.len() + self.frames.len() * n * 8);
        out.extend_from_slice(TRAJECTORY_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for frame in &self.frames {
            for p in frame {
                out.extend_from_slice(&(p[0] as f32).to_le_bytes());
                out.extend_from_slice(&(p[1] as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |detail: &str| Error::format(origin, detail);
        if bytes.len() < 12 || &bytes[..8] != TRAJECTORY_MAGIC {
            return Err(bad("missing IDTRAJ1 magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: TrajectoryHeader =
            serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        if header.node_types.len() != header.num_particles {
            return Err(bad("node_types length differs from num_particles"));
        }
        let payload = &bytes[12 + hlen..];
        let n = header.num_particles;
        if payload.len() != header.num_steps * n * 8 {
            return Err(bad("position payload has the wrong length"));
        }
        let floats: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let frames = floats
            .chunks_exact((2 * n).max(1))
            .take(header.num_steps)
            .map(|f| f.chunks_exact(2).map(|p| [p[0], p[1]]).collect())
            .collect::<Vec<Vec<[f64; 2]>>>();
        let frames = if n == 0 {
            vec![Vec::new(); header.num_steps]
        } else {
            frames
        };
        Ok(Trajectory { header, frames })
    }
}

pub fn write_trajectory(path: &Path, trajectory: &Trajectory) -> Result<()> {
    let bytes = trajectory.to_bytes()?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Trajectory::from_bytes(&bytes, path)
}
