//! Ground-truth toy particle fluid.
//!
//! Linear pairwise repulsion, gravity, and velocity damping, with inelastic
//! position projection off obstacle segments and the scene walls. The solver is
//! plain `f64` code full of branches and projections; it is never recorded on a
//! tape.

mod dataset;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use dataset::{
    generate_dataset, load_dataset, sample_obstacle_count, sample_training_scene, DatasetConfig,
    DatasetManifest,
};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::state_graph::{build_radius_edges_where, FloorMode, NodeType, ParticleState, HISTORY};

/// Magnitude beyond which a coordinate counts as a diverged simulation.
pub const DIVERGENCE_LIMIT: f64 = 10.0;

const PROJECTION_PASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: [f64; 2],
    pub b: [f64; 2],
}

impl Segment {
    pub fn new(a: [f64; 2], b: [f64; 2]) -> Self {
        Segment { a, b }
    }

    pub fn length(&self) -> f64 {
        ((self.b[0] - self.a[0]).powi(2) + (self.b[1] - self.a[1]).powi(2)).sqrt()
    }

    /// Closest point on the segment to `p`.
    pub fn closest_point(&self, p: [f64; 2]) -> [f64; 2] {
        let ab = [self.b[0] - self.a[0], self.b[1] - self.a[1]];
        let len2 = ab[0] * ab[0] + ab[1] * ab[1];
        if len2 == 0.0 {
            return self.a;
        }
        let t = (((p[0] - self.a[0]) * ab[0] + (p[1] - self.a[1]) * ab[1]) / len2).clamp(0.0, 1.0);
        [self.a[0] + t * ab[0], self.a[1] + t * ab[1]]
    }

    pub fn distance(&self, p: [f64; 2]) -> f64 {
        let q = self.closest_point(p);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
    }

    /// Moves `pos` out of the collision band of this segment. `prev` is the
    /// position at the start of the step and decides which side a crossing
    /// particle is returned to.
    fn resolve(&self, prev: [f64; 2], pos: [f64; 2], radius: f64) -> Option<[f64; 2]> {
        let ab = [self.b[0] - self.a[0], self.b[1] - self.a[1]];
        let len = (ab[0] * ab[0] + ab[1] * ab[1]).sqrt();
        if len == 0.0 {
            return None;
        }
        let n = [-ab[1] / len, ab[0] / len];
        let side_of = |p: [f64; 2]| (p[0] - self.a[0]) * n[0] + (p[1] - self.a[1]) * n[1];
        let sp = side_of(prev);
        let sq = side_of(pos);
        let side = if sp < 0.0 { -1.0 } else { 1.0 };

        if sp * sq < 0.0 {
            let t = sp / (sp - sq);
            let hit = [
                prev[0] + t * (pos[0] - prev[0]),
                prev[1] + t * (pos[1] - prev[1]),
            ];
            let u = ((hit[0] - self.a[0]) * ab[0] + (hit[1] - self.a[1]) * ab[1]) / (len * len);
            if (0.0..=1.0).contains(&u) {
                let shift = side * radius - sq;
                return Some([pos[0] + shift * n[0], pos[1] + shift * n[1]]);
            }
        }

        let q = self.closest_point(pos);
        let d = [pos[0] - q[0], pos[1] - q[1]];
        let dist = (d[0] * d[0] + d[1] * d[1]).sqrt();
        if dist >= radius {
            return None;
        }
        let dir = if dist > 0.0 {
            [d[0] / dist, d[1] / dist]
        } else {
            [side * n[0], side * n[1]]
        };
        Some([q[0] + dir[0] * radius, q[1] + dir[1] * radius])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub gravity: [f64; 2],
    pub interaction_radius: f64,
    pub stiffness: f64,
    /// Fraction of velocity retained per step, in `(0, 1]`.
    pub damping: f64,
    pub dt: f64,
    pub obstacles: Vec<Segment>,
    /// Minimum distance fluid particles keep from obstacle segments.
    pub collision_radius: f64,
    /// Scene box `[x_min, y_min, x_max, y_max]`.
    pub bounds: [f64; 4],
    /// Enables the left, right and top walls and the floor rule.
    pub walls: bool,
    pub floor: FloorMode,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            gravity: [0.0, -1.0],
            interaction_radius: 0.03,
            stiffness: 40.0,
            damping: 0.98,
            dt: crate::state_graph::DEFAULT_DT,
            obstacles: Vec::new(),
            collision_radius: 0.01,
            bounds: [0.0, 0.0, 1.0, 1.0],
            walls: true,
            floor: FloorMode::Wall,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.interaction_radius > 0.0) {
            return Err(Error::config("interaction radius must be positive"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::config("damping must lie in (0, 1]"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config("dt must be positive"));
        }
        Ok(())
    }

    pub fn with_obstacles(mut self, obstacles: Vec<Segment>) -> Self {
        self.obstacles = obstacles;
        self
    }
}

/// Repulsive acceleration on every particle from overlapping active fluid neighbours.
fn repulsion(state: &ParticleState, cfg: &OracleConfig) -> Result<Vec<[f64; 2]>> {
    let n = state.len();
    let points = state.positions.points();
    let edges = build_radius_edges_where(&points, cfg.interaction_radius, |i| {
        state.is_active_fluid(i)
    })?;
    let mut acc = vec![[0.0; 2]; n];
    for e in 0..edges.len() {
        let d = edges.distance[e];
        if d <= 0.0 || d >= cfg.interaction_radius {
            continue;
        }
        let scale = cfg.stiffness * (cfg.interaction_radius - d) / d;
        let j = edges.receivers[e];
        acc[j][0] += scale * edges.displacement[e][0];
        acc[j][1] += scale * edges.displacement[e][1];
    }
    Ok(acc)
}

/// One ground-truth transition.
pub fn step_oracle(state: &ParticleState, cfg: &OracleConfig) -> Result<ParticleState> {
    cfg.validate()?;
    let n = state.len();
    let dt = cfg.dt;
    let repel = repulsion(state, cfg)?;
    let [x0, y0, x1, y1] = cfg.bounds;

    let mut positions = state.positions.data().to_vec();
    let mut history = state.velocity_history.data().to_vec();
    let mut removed = state.removed.to_vec();
    let mut removed_positions = state.removed_positions.data().to_vec();
    let width = 2 * HISTORY;

    for i in 0..n {
        if !state.is_active_fluid(i) {
            continue;
        }
        let prev = state.positions.point(i);
        let v = state.latest_velocity(i);
        let vx = cfg.damping * v[0] + (cfg.gravity[0] + repel[i][0]) * dt;
        let vy = cfg.damping * v[1] + (cfg.gravity[1] + repel[i][1]) * dt;
        let mut p = [prev[0] + vx * dt, prev[1] + vy * dt];

        for _ in 0..PROJECTION_PASSES {
            let mut moved = false;
            for seg in &cfg.obstacles {
                if let Some(q) = seg.resolve(prev, p, cfg.collision_radius) {
                    p = q;
                    moved = true;
                }
            }
            if !moved {
                break;
            }
        }

        if cfg.walls {
            p[0] = p[0].clamp(x0, x1);
            p[1] = p[1].min(y1);
            match cfg.floor {
                FloorMode::Wall => p[1] = p[1].max(y0),
                FloorMode::Remove => {
                    if p[1] <= y0 {
                        removed[i] = true;
                        removed_positions[2 * i] = p[0];
                        removed_positions[2 * i + 1] = p[1];
                    }
                }
            }
        }

        if p.iter()
            .any(|c| !c.is_finite() || c.abs() > DIVERGENCE_LIMIT)
        {
            return Err(Error::Divergence {
                step: 0,
                detail: format!("particle {i} reached ({}, {})", p[0], p[1]),
            });
        }

        let row = &mut history[i * width..(i + 1) * width];
        row.copy_within(2.., 0);
        row[width - 2] = (p[0] - prev[0]) / dt;
        row[width - 1] = (p[1] - prev[1]) / dt;
        positions[2 * i] = p[0];
        positions[2 * i + 1] = p[1];
    }

    Ok(ParticleState {
        positions: Tensor::new(vec![n, 2], positions)?,
        velocity_history: Tensor::new(vec![n, width], history)?,
        node_types: Arc::clone(&state.node_types),
        removed: removed.into(),
        removed_positions: Tensor::new(vec![n, 2], removed_positions)?,
    })
}

/// `steps` ground-truth transitions; returns all `steps + 1` states.
pub fn rollout_oracle(
    initial: &ParticleState,
    cfg: &OracleConfig,
    steps: usize,
) -> Result<Vec<ParticleState>> {
    let mut out = Vec::with_capacity(steps + 1);
    out.push(initial.clone());
    for k in 0..steps {
        let next = step_oracle(&out[k], cfg).map_err(|e| match e {
            Error::Divergence { detail, .. } => Error::Divergence { step: k, detail },
            other => other,
        })?;
        out.push(next);
    }
    Ok(out)
}

/// Kinetic energy `½ Σ |v|²` over active fluid particles, from the newest velocity row.
pub fn kinetic_energy(state: &ParticleState) -> f64 {
    state
        .active_fluid_indices()
        .into_iter()
        .map(|i| {
            let v = state.latest_velocity(i);
            0.5 * (v[0] * v[0] + v[1] * v[1])
        })
        .sum()
}

/// Checks that design particles are labelled and fluid is labelled as such.
pub fn fluid_count(state: &ParticleState) -> usize {
    state
        .node_types
        .iter()
        .filter(|t| **t == NodeType::Fluid)
        .count()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn fluid(points: &[[f64; 2]]) -> ParticleState {
        ParticleState::at_rest(
            Tensor::from_points(points),
            vec![NodeType::Fluid; points.len()],
        )
        .unwrap()
    }

    fn with_velocity(mut s: ParticleState, vels: &[[f64; 2]]) -> ParticleState {
        let data = vels.iter().flat_map(|v| [v[0], v[1], v[0], v[1]]).collect();
        s.velocity_history = Tensor::new(vec![vels.len(), 4], data).unwrap();
        s
    }

    #[test]
    fn free_fall_single_step() {
        let cfg = OracleConfig::default();
        let s = fluid(&[[0.5, 0.5]]);
        let next = step_oracle(&s, &cfg).unwrap();
        let [x, y] = next.positions.point(0);
        assert_eq!(x, 0.5);
        assert!((y - (0.5 - 1.0 * 0.05 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn wall_clamps_and_stops_normal_motion() {
        let cfg = OracleConfig {
            gravity: [0.0, 0.0],
            ..OracleConfig::default()
        };
        let s = with_velocity(fluid(&[[1.0, 0.5]]), &[[0.5, 0.0]]);
        let next = step_oracle(&s, &cfg).unwrap();
        assert_eq!(next.positions.point(0)[0], 1.0);
        assert_eq!(next.latest_velocity(0)[0], 0.0);
    }

    #[test]
    fn overlapping_pair_separates() {
        let cfg = OracleConfig {
            gravity: [0.0, 0.0],
            ..OracleConfig::default()
        };
        let r = cfg.interaction_radius;
        let s = fluid(&[[0.5, 0.5], [0.5 + 0.5 * r, 0.5]]);
        let before = 0.5 * r;
        let next = step_oracle(&s, &cfg).unwrap();
        let [a, b] = [next.positions.point(0), next.positions.point(1)];
        let after = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        // Each particle gains k (r - d) dt^2 of separation.
        let expected = before + 2.0 * cfg.stiffness * (r - before) * cfg.dt * cfg.dt;
        assert!(after > before);
        assert!((after - expected).abs() < 1e-12);
    }

    #[test]
    fn rollout_composition() {
        let cfg = OracleConfig::default();
        let s = fluid(&[[0.3, 0.6], [0.31, 0.61], [0.7, 0.2]]);
        assert_eq!(rollout_oracle(&s, &cfg, 0).unwrap(), vec![s.clone()]);
        let three = rollout_oracle(&s, &cfg, 3).unwrap();
        let manual = step_oracle(
            &step_oracle(&step_oracle(&s, &cfg).unwrap(), &cfg).unwrap(),
            &cfg,
        )
        .unwrap();
        assert_eq!(three[3], manual);
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<[f64; 2]> = (0..60)
            .map(|_| [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)])
            .collect();
        let cfg =
            OracleConfig::default().with_obstacles(vec![Segment::new([0.1, 0.15], [0.9, 0.1])]);
        let s = fluid(&pts);
        let a = rollout_oracle(&s, &cfg, 20).unwrap();
        let b = rollout_oracle(&s, &cfg, 20).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn momentum_is_conserved_without_external_forces() {
        let cfg = OracleConfig {
            gravity: [0.0, 0.0],
            damping: 1.0,
            walls: false,
            ..OracleConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<[f64; 2]> = (0..30)
            .map(|_| [rng.gen_range(0.4..0.6), rng.gen_range(0.4..0.6)])
            .collect();
        let vels: Vec<[f64; 2]> = (0..30)
            .map(|_| [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)])
            .collect();
        let s = with_velocity(fluid(&pts), &vels);
        let momentum = |s: &ParticleState| {
            (0..s.len()).fold([0.0, 0.0], |m, i| {
                let v = s.latest_velocity(i);
                [m[0] + v[0], m[1] + v[1]]
            })
        };
        let p0 = momentum(&s);
        let traj = rollout_oracle(&s, &cfg, 50).unwrap();
        let p1 = momentum(&traj[50]);
        assert!(
            (p0[0] - p1[0]).abs() < 1e-10 && (p0[1] - p1[1]).abs() < 1e-10,
            "{p0:?} vs {p1:?}"
        );
    }

    #[test]
    fn obstacles_are_impenetrable() {
        let segs = vec![
            Segment::new([0.1, 0.3], [0.6, 0.2]),
            Segment::new([0.5, 0.55], [0.9, 0.6]),
            Segment::new([0.2, 0.75], [0.35, 0.7]),
        ];
        let cfg = OracleConfig::default().with_obstacles(segs.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts = Vec::new();
        while pts.len() < 80 {
            let p = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
            if segs.iter().all(|s| s.distance(p) > cfg.collision_radius) {
                pts.push(p);
            }
        }
        let traj = rollout_oracle(&fluid(&pts), &cfg, 60).unwrap();
        for s in &traj[1..] {
            for i in 0..s.len() {
                for seg in &segs {
                    assert!(seg.distance(s.positions.point(i)) >= cfg.collision_radius - 1e-9);
                }
            }
        }
    }

    #[test]
    fn fast_particle_does_not_tunnel() {
        let cfg = OracleConfig {
            gravity: [0.0, 0.0],
            ..OracleConfig::default()
        }
        .with_obstacles(vec![Segment::new([0.2, 0.5], [0.8, 0.5])]);
        let s = with_velocity(fluid(&[[0.5, 0.52]]), &[[0.0, -4.0]]);
        let next = step_oracle(&s, &cfg).unwrap();
        let y = next.positions.point(0)[1];
        assert!((y - 0.51).abs() < 1e-12, "{y}");
    }

    #[test]
    fn kinetic_energy_decays_with_damping() {
        let cfg = OracleConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts: Vec<[f64; 2]> = (0..40).map(|i| [0.05 + 0.022 * i as f64, 0.0]).collect();
        let vels: Vec<[f64; 2]> = (0..40).map(|_| [rng.gen_range(-0.3..0.3), 0.0]).collect();
        let s = with_velocity(fluid(&pts), &vels);
        let traj = rollout_oracle(&s, &cfg, 100).unwrap();
        assert!(kinetic_energy(&traj[100]) < kinetic_energy(&traj[0]));
    }

    #[test]
    fn divergence_reports_step() {
        let cfg = OracleConfig {
            gravity: [0.0, -1e6],
            walls: false,
            ..OracleConfig::default()
        };
        let s = fluid(&[[0.5, 0.5]]);
        match rollout_oracle(&s, &cfg, 5) {
            Err(Error::Divergence { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected divergence, got {:?}", other.map(|t| t.len())),
        }
    }

    #[test]
    fn config_validation() {
        assert!(OracleConfig {
            damping: 0.0,
            ..OracleConfig::default()
        }
        .validate()
        .is_err());
        assert!(OracleConfig {
            interaction_radius: 0.0,
            ..OracleConfig::default()
        }
        .validate()
        .is_err());
        assert!(OracleConfig::default().validate().is_ok());
    }
}
