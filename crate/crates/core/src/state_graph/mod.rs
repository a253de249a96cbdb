//! Particle states as graphs: positions, velocity history, node labels, and
//! proximity edges.

mod edges;
mod trajectory;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use edges::{build_radius_edges, build_radius_edges_where, EdgeSet};
pub use trajectory::{
    read_trajectory, write_trajectory, Trajectory, TrajectoryHeader, TRAJECTORY_MAGIC,
};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Number of finite-difference velocity rows carried per particle.
pub const HISTORY: usize = 2;

/// Default integration step in scene time units.
pub const DEFAULT_DT: f64 = 0.05;

/// Soft scene bound; non-removed particles outside it count as a diverged rollout.
pub const SCENE_LIMIT: (f64, f64) = (-0.1, 1.1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum NodeType {
    Fluid = 0,
    Design = 1,
    Wall = 2,
}

impl NodeType {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }
}

impl From<NodeType> for u8 {
    fn from(t: NodeType) -> u8 {
        t as u8
    }
}

impl TryFrom<u8> for NodeType {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(NodeType::Fluid),
            1 => Ok(NodeType::Design),
            2 => Ok(NodeType::Wall),
            other => Err(format!("unknown node type {other}")),
        }
    }
}

/// What happens to particles that reach the floor line `y = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FloorMode {
    /// The floor is a solid wall.
    #[default]
    Wall,
    /// Particles at or below the floor are removed and their position recorded.
    Remove,
}

/// Graph-structured physical state. Immutable once built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    /// `[N, 2]` positions in scene units.
    pub positions: Tensor,
    /// `[N, 2 * HISTORY]` velocity rows, oldest first.
    pub velocity_history: Tensor,
    pub node_types: Arc<[NodeType]>,
    pub removed: Arc<[bool]>,
    /// `[N, 2]`, the first out-of-domain position of each removed particle (zero otherwise).
    pub removed_positions: Tensor,
}

impl ParticleState {
    /// State at rest: zero velocity history, nothing removed.
    pub fn at_rest(positions: Tensor, node_types: Vec<NodeType>) -> Result<Self> {
        let n = positions.rows();
        if positions.shape() != [n, 2] || node_types.len() != n {
            return Err(Error::shape(
                "particle state",
                format!(
                    "positions {:?} with {} node types",
                    positions.shape(),
                    node_types.len()
                ),
            ));
        }
        Ok(ParticleState {
            positions,
            velocity_history: Tensor::zeros(&[n, 2 * HISTORY]),
            node_types: node_types.into(),
            removed: vec![false; n].into(),
            removed_positions: Tensor::zeros(&[n, 2]),
        })
    }

    pub fn len(&self) -> usize {
        self.node_types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_types.is_empty()
    }

    /// Newest velocity row of particle `i`.
    pub fn latest_velocity(&self, i: usize) -> [f64; 2] {
        let row = self.velocity_history.row(i);
        [row[2 * HISTORY - 2], row[2 * HISTORY - 1]]
    }

    /// Fluid particles still in the scene.
    pub fn is_active_fluid(&self, i: usize) -> bool {
        self.node_types[i] == NodeType::Fluid && !self.removed[i]
    }

    pub fn active_fluid_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.is_active_fluid(i))
            .collect()
    }

    /// Accumulated positions `u^D` of removed particles, in particle order.
    pub fn removed_position_list(&self) -> Vec<[f64; 2]> {
        (0..self.len())
            .filter(|&i| self.removed[i])
            .map(|i| self.removed_positions.point(i))
            .collect()
    }

    pub fn aux(&self, floor: FloorMode) -> StateAux {
        StateAux {
            node_types: Arc::clone(&self.node_types),
            removed: Arc::clone(&self.removed),
            floor,
        }
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        vec![
            self.positions.clone(),
            self.velocity_history.clone(),
            self.removed_positions.clone(),
        ]
    }

    pub fn from_tensors(tensors: &[Tensor], aux: &StateAux) -> Result<Self> {
        let [positions, history, removed_positions] = tensors else {
            return Err(Error::shape(
                "particle state",
                format!("{} tensors", tensors.len()),
            ));
        };
        Ok(ParticleState {
            positions: positions.clone(),
            velocity_history: history.clone(),
            node_types: Arc::clone(&aux.node_types),
            removed: Arc::clone(&aux.removed),
            removed_positions: removed_positions.clone(),
        })
    }

    /// Errors if any non-removed particle left the soft scene bound or is non-finite.
    pub fn check_bounds(&self, step: usize) -> Result<()> {
        let (lo, hi) = SCENE_LIMIT;
        for i in 0..self.len() {
            if self.removed[i] {
                continue;
            }
            let [x, y] = self.positions.point(i);
            if !(x.is_finite() && y.is_finite()) || x < lo || x > hi || y < lo || y > hi {
                return Err(Error::Divergence {
                    step,
                    detail: format!("particle {i} at ({x}, {y}) left the scene"),
                });
            }
        }
        Ok(())
    }
}

/// Gradient-free part of a state carried alongside its tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct StateAux {
    pub node_types: Arc<[NodeType]>,
    pub removed: Arc<[bool]>,
    pub floor: FloorMode,
}

impl StateAux {
    pub fn mobile_mask(&self) -> Vec<bool> {
        self.node_types
            .iter()
            .zip(self.removed.iter())
            .map(|(t, r)| *t == NodeType::Fluid && !r)
            .collect()
    }
}

/// Tape handles for the differentiable state tensors.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub positions: Var,
    pub history: Var,
    pub removed_positions: Var,
}

impl StateVars {
    pub fn from_slice(vars: &[Var]) -> Result<Self> {
        match vars {
            [p, h, r] => Ok(StateVars {
                positions: *p,
                history: *h,
                removed_positions: *r,
            }),
            _ => Err(Error::shape("state vars", format!("{} vars", vars.len()))),
        }
    }

    pub fn to_vec(self) -> Vec<Var> {
        vec![self.positions, self.history, self.removed_positions]
    }
}

fn mask_tensor(mask: &[bool], width: usize) -> Tensor {
    let data = mask
        .iter()
        .flat_map(|&m| std::iter::repeat(if m { 1.0 } else { 0.0 }).take(width))
        .collect();
    Tensor::from_parts(vec![mask.len(), width], data)
}

/// Semi-implicit Euler update from per-particle accelerations, recorded on `tape`.
///
/// Only active fluid particles move; design and removed particles keep their
/// position and velocity history unchanged. With [`FloorMode::Remove`], fluid
/// particles ending at `y <= 0` are flagged removed and their new position is
/// recorded as the removal position.
pub fn advance_on_tape(
    tape: &Tape,
    state: StateVars,
    aux: &StateAux,
    accel: Var,
    dt: f64,
) -> Result<(StateVars, StateAux)> {
    let n = aux.node_types.len();
    let width = 2 * HISTORY;
    if tape.shape(accel) != [n, 2] {
        return Err(Error::shape(
            "advance_state",
            format!("acceleration {:?} for {n} particles", tape.shape(accel)),
        ));
    }
    let mobile = aux.mobile_mask();
    let m2 = tape.constant(mask_tensor(&mobile, 2));
    let v_latest = tape.slice(state.history, 1, width - 2, width)?;
    let dv = tape.scale(accel, dt)?;
    let v_new = tape.add(v_latest, dv)?;
    let v_new = tape.mul(v_new, m2)?;
    let step = tape.scale(v_new, dt)?;
    let positions = tape.add(state.positions, step)?;

    let older = tape.slice(state.history, 1, 2, width)?;
    let shifted = tape.concat(&[older, v_new], 1)?;
    let keep = tape.constant(mask_tensor(
        &mobile.iter().map(|m| !m).collect::<Vec<_>>(),
        width,
    ));
    let take = tape.constant(mask_tensor(&mobile, width));
    let shifted = tape.mul(shifted, take)?;
    let kept = tape.mul(state.history, keep)?;
    let history = tape.add(shifted, kept)?;

    let mut removed = aux.removed.to_vec();
    let mut removed_positions = state.removed_positions;
    if aux.floor == FloorMode::Remove {
        let values = tape.value(positions);
        let newly: Vec<bool> = (0..n)
            .map(|i| mobile[i] && values.get2(i, 1) <= 0.0)
            .collect();
        if newly.iter().any(|&b| b) {
            let mask = tape.constant(mask_tensor(&newly, 2));
            let crossing = tape.mul(positions, mask)?;
            removed_positions = tape.add(removed_positions, crossing)?;
            for (r, nw) in removed.iter_mut().zip(&newly) {
                *r |= nw;
            }
        }
    }
    Ok((
        StateVars {
            positions,
            history,
            removed_positions,
        },
        StateAux {
            node_types: Arc::clone(&aux.node_types),
            removed: removed.into(),
            floor: aux.floor,
        },
    ))
}

/// Gradient-free [`advance_on_tape`].
pub fn advance_state(
    state: &ParticleState,
    accel: &Tensor,
    dt: f64,
    floor: FloorMode,
) -> Result<ParticleState> {
    if !accel.is_finite() {
        return Err(Error::NonFinite {
            op: "advance_state",
            phase: "forward",
        });
    }
    let tape = Tape::new();
    let vars = StateVars {
        positions: tape.constant(state.positions.clone()),
        history: tape.constant(state.velocity_history.clone()),
        removed_positions: tape.constant(state.removed_positions.clone()),
    };
    let a = tape.constant(accel.clone());
    let (next, aux) = advance_on_tape(&tape, vars, &state.aux(floor), a, dt)?;
    ParticleState::from_tensors(
        &[
            tape.value(next.positions),
            tape.value(next.history),
            tape.value(next.removed_positions),
        ],
        &aux,
    )
}
