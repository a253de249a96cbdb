use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{rollout_oracle, OracleConfig, Segment};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::state_graph::{read_trajectory, write_trajectory, NodeType, ParticleState, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub trajectories: usize,
    pub steps: usize,
    pub min_particles: usize,
    pub max_particles: usize,
    pub min_segments: usize,
    pub max_segments: usize,
    /// Grid spacing of the initial fluid block.
    pub fluid_spacing: f64,
    /// Spacing of the design particles sampled along each segment.
    pub design_spacing: f64,
    pub oracle: OracleConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            trajectories: 200,
            steps: 50,
            min_particles: 50,
            max_particles: 150,
            min_segments: 1,
            max_segments: 4,
            fluid_spacing: 0.02,
            design_spacing: 0.015,
            oracle: OracleConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trajectories == 0 {
            return Err(Error::config("the dataset needs at least one trajectory"));
        }
        if self.min_particles == 0 || self.min_particles > self.max_particles {
            return Err(Error::config("invalid particle-count range"));
        }
        if self.min_segments == 0 || self.min_segments > self.max_segments {
            return Err(Error::config("invalid segment-count range"));
        }
        if !(self.fluid_spacing > 0.0 && self.design_spacing > 0.0) {
            return Err(Error::config("spacings must be positive"));
        }
        self.oracle.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub count: usize,
    /// Trajectory file names relative to the manifest directory.
    pub files: Vec<String>,
    pub config: DatasetConfig,
}

impl DatasetManifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

pub fn sample_obstacle_count(rng: &mut impl Rng, cfg: &DatasetConfig) -> usize {
    rng.gen_range(cfg.min_segments..=cfg.max_segments)
}

fn sample_segment(rng: &mut impl Rng, ceiling: f64) -> Segment {
    loop {
        let c = [
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.08..ceiling.max(0.09)),
        ];
        let half = 0.5 * rng.gen_range(0.1..0.4);
        let angle: f64 = rng.gen_range(-0.7..0.7);
        let d = [half * angle.cos(), half * angle.sin()];
        let a = [c[0] - d[0], c[1] - d[1]];
        let b = [c[0] + d[0], c[1] + d[1]];
        let inside = |p: [f64; 2]| (0.02..=0.98).contains(&p[0]) && p[1] >= 0.02 && p[1] <= ceiling;
        if inside(a) && inside(b) {
            return Segment::new(a, b);
        }
    }
}

/// Evenly spaced points along `seg`, endpoints included.
pub(crate) fn sample_segment_points(seg: &Segment, spacing: f64) -> Vec<[f64; 2]> {
    let count = (seg.length() / spacing + 1e-9).floor() as usize + 1;
    let count = count.max(2);
    (0..count)
        .map(|k| {
            let t = k as f64 / (count - 1) as f64;
            [
                seg.a[0] + t * (seg.b[0] - seg.a[0]),
                seg.a[1] + t * (seg.b[1] - seg.a[1]),
            ]
        })
        .collect()
}

/// A jittered fluid block above one to four random segments.
pub fn sample_training_scene(
    rng: &mut impl Rng,
    cfg: &DatasetConfig,
) -> Result<(ParticleState, Vec<Segment>)> {
    let s = cfg.fluid_spacing;
    let n = rng.gen_range(cfg.min_particles..=cfg.max_particles);
    let min_cols = n.div_ceil(15).max(5);
    let cols = rng.gen_range(min_cols..=min_cols.max(15));
    let rows = n.div_ceil(cols);
    let (w, h) = (cols as f64 * s, rows as f64 * s);
    let x0 = rng.gen_range(0.05..(0.95 - w).max(0.051));
    let y0 = rng.gen_range(0.45..(0.97 - h).max(0.451));

    let mut points = Vec::with_capacity(n);
    for k in 0..n {
        let (r, c) = (k / cols, k % cols);
        let jx = rng.gen_range(-0.1..0.1) * s;
        let jy = rng.gen_range(-0.1..0.1) * s;
        points.push([
            x0 + (c as f64 + 0.5) * s + jx,
            y0 + (r as f64 + 0.5) * s + jy,
        ]);
    }
    let mut types = vec![NodeType::Fluid; n];

    let segments: Vec<Segment> = (0..sample_obstacle_count(rng, cfg))
        .map(|_| sample_segment(rng, y0 - 0.04))
        .collect();
    for seg in &segments {
        let pts = sample_segment_points(seg, cfg.design_spacing);
        types.extend(std::iter::repeat(NodeType::Design).take(pts.len()));
        points.extend(pts);
    }
    Ok((
        ParticleState::at_rest(Tensor::from_points(&points), types)?,
        segments,
    ))
}

/// Simulates one scene and returns its trajectory.
fn simulate_scene(seed: u64, index: usize, cfg: &DatasetConfig) -> Result<Trajectory> {
    let mut rng = scene_rng(seed, index);
    let (initial, segments) = sample_training_scene(&mut rng, cfg)?;
    let oracle = cfg.oracle.clone().with_obstacles(segments);
    let states = rollout_oracle(&initial, &oracle, cfg.steps)?;
    Trajectory::new(
        oracle.dt,
        oracle.interaction_radius,
        initial.node_types.to_vec(),
        states.iter().map(|s| s.positions.points()).collect(),
    )
}

/// Writes `cfg.trajectories` oracle rollouts and a manifest into `out_dir`.
///
/// Scenes are keyed by index, so the output does not depend on the thread count.
pub fn generate_dataset(seed: u64, cfg: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files: Vec<String> = (0..cfg.trajectories)
        .map(|i| format!("traj_{i:05}.idtraj"))
        .collect();
    files
        .par_iter()
        .enumerate()
        .map(|(i, name)| {
            let traj = simulate_scene(seed, i, cfg)?;
            write_trajectory(&out_dir.join(name), &traj)
        })
        .collect::<Result<Vec<()>>>()?;
    let manifest = DatasetManifest {
        seed,
        count: cfg.trajectories,
        files,
        config: cfg.clone(),
    };
    let path = out_dir.join(DatasetManifest::FILE_NAME);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads a manifest and all trajectories it lists.
pub fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Vec<Trajectory>)> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let dir: PathBuf = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let trajectories = manifest
        .files
        .iter()
        .map(|f| read_trajectory(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    if trajectories.is_empty() {
        return Err(Error::config(format!(
            "dataset {} is empty",
            manifest_path.display()
        )));
    }
    Ok((manifest, trajectories))
}
