//! Reverse-mode gradients through long rollouts with segment checkpointing.
//!
//! The forward pass keeps only the state at each segment boundary. The reverse
//! pass walks segments from last to first, re-running each segment on a fresh
//! tape from its stored boundary and seeding it with the gradient that flowed
//! back from the segment after it. Parameter gradients are threaded through the
//! segments as seeds on the parameter leaves, so accumulation happens in the same
//! order as one monolithic tape and the result is bit-identical to it.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One differentiable transition of a rollout.
///
/// `state` holds the differentiable part of the state, `aux` everything that is
/// carried along without gradients (masks, labels). Implementations must be
/// pure: the same inputs must produce bit-identical outputs.
pub trait RolloutStep {
    type Aux: Clone;

    fn step(
        &self,
        tape: &Tape,
        state: &[Var],
        aux: &Self::Aux,
        params: &[Var],
    ) -> Result<(Vec<Var>, Self::Aux)>;
}

/// Segment boundaries `0 = s_0 < s_1 < … < s_m = K`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointSchedule {
    boundaries: Vec<usize>,
}

impl CheckpointSchedule {
    pub fn new(boundaries: Vec<usize>) -> Result<Self> {
        if boundaries.first() != Some(&0) {
            return Err(Error::config("checkpoint schedule must start at step 0"));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "checkpoint boundaries must be strictly increasing",
            ));
        }
        Ok(CheckpointSchedule { boundaries })
    }

    /// One checkpoint per rollout step.
    pub fn per_step(steps: usize) -> Self {
        CheckpointSchedule {
            boundaries: (0..=steps).collect(),
        }
    }

    /// Segments of `len` steps (the last one may be shorter).
    pub fn every(steps: usize, len: usize) -> Self {
        let len = len.max(1);
        let mut boundaries: Vec<usize> = (0..steps).step_by(len).collect();
        boundaries.push(steps);
        boundaries.dedup();
        CheckpointSchedule { boundaries }
    }

    /// A single segment covering the whole rollout.
    pub fn single(steps: usize) -> Self {
        let mut boundaries = vec![0, steps];
        boundaries.dedup();
        CheckpointSchedule { boundaries }
    }

    pub fn steps(&self) -> usize {
        *self.boundaries.last().unwrap_or(&0)
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn max_segment_len(&self) -> usize {
        self.boundaries
            .windows(2)
            .map(|w| w[1] - w[0])
            .max()
            .unwrap_or(0)
    }
}

/// Whether rollout parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode {
    Differentiable,
    Constant,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RolloutStats {
    /// Number of step-function evaluations, forward and recompute combined.
    pub forward_steps: usize,
    /// Number of stored boundary states.
    pub stored_states: usize,
    /// Largest tape (in nodes) alive at any time during the reverse pass.
    pub peak_tape_nodes: usize,
}

#[derive(Clone, Debug)]
pub struct RolloutGradient {
    pub loss: f64,
    /// Gradient per initial-state tensor; `None` when no path reaches the loss.
    pub initial: Vec<Option<Tensor>>,
    /// Gradient per parameter tensor (all `None` in [`ParamMode::Constant`]).
    pub params: Vec<Option<Tensor>>,
    pub stats: RolloutStats,
}

impl RolloutGradient {
    pub fn initial_or_zeros(&self, index: usize, like: &Tensor) -> Tensor {
        self.initial[index]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn bind_params(tape: &Tape, params: &[Tensor], mode: ParamMode) -> Vec<Var> {
    params
        .iter()
        .map(|p| match mode {
            ParamMode::Differentiable => tape.leaf(p.clone()),
            ParamMode::Constant => tape.constant(p.clone()),
        })
        .collect()
}

/// Runs `steps` transitions without recording gradients, returning every state when
/// `keep_all` is set (otherwise only the final one).
pub fn rollout_forward<S: RolloutStep>(
    step: &S,
    initial: &[Tensor],
    aux: &S::Aux,
    params: &[Tensor],
    steps: usize,
    keep_all: bool,
) -> Result<Vec<(Vec<Tensor>, S::Aux)>> {
    let mut out = Vec::new();
    let mut state = initial.to_vec();
    let mut aux = aux.clone();
    if keep_all {
        out.push((state.clone(), aux.clone()));
    }
    for _ in 0..steps {
        let (next, next_aux) = single_step(step, &state, &aux, params)?;
        state = next;
        aux = next_aux;
        if keep_all {
            out.push((state.clone(), aux.clone()));
        }
    }
    if !keep_all {
        out.push((state, aux));
    }
    Ok(out)
}

fn single_step<S: RolloutStep>(
    step: &S,
    state: &[Tensor],
    aux: &S::Aux,
    params: &[Tensor],
) -> Result<(Vec<Tensor>, S::Aux)> {
    let tape = Tape::new();
    let vars: Vec<Var> = state.iter().map(|t| tape.constant(t.clone())).collect();
    let pv = bind_params(&tape, params, ParamMode::Constant);
    let (next, next_aux) = step.step(&tape, &vars, aux, &pv)?;
    Ok((next.iter().map(|&v| tape.value(v)).collect(), next_aux))
}

/// Reference gradient: one tape spanning all `steps` transitions and the loss.
pub fn plain_rollout_backward<S, L>(
    step: &S,
    initial: &[Tensor],
    aux: &S::Aux,
    params: &[Tensor],
    mode: ParamMode,
    steps: usize,
    loss: L,
) -> Result<RolloutGradient>
where
    S: RolloutStep,
    L: Fn(&Tape, &[Var], &S::Aux, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let init: Vec<Var> = initial.iter().map(|t| tape.leaf(t.clone())).collect();
    let pv = bind_params(&tape, params, mode);
    let mut state = init.clone();
    let mut aux = aux.clone();
    for _ in 0..steps {
        let (next, next_aux) = step.step(&tape, &state, &aux, &pv)?;
        state = next;
        aux = next_aux;
    }
    let root = loss(&tape, &state, &aux, &pv)?;
    let value = tape.scalar_value(root)?;
    let peak = tape.len();
    let mut grads = tape.backward(root)?;
    Ok(RolloutGradient {
        loss: value,
        initial: init.iter().map(|&v| grads.take(v)).collect(),
        params: match mode {
            ParamMode::Differentiable => pv.iter().map(|&v| grads.take(v)).collect(),
            ParamMode::Constant => vec![None; params.len()],
        },
        stats: RolloutStats {
            forward_steps: steps,
            stored_states: 0,
            peak_tape_nodes: peak,
        },
    })
}

/// Loss and gradients of `loss(step^K(initial))` using segment checkpointing.
pub fn checkpointed_rollout_backward<S, L>(
    step: &S,
    initial: &[Tensor],
    aux: &S::Aux,
    params: &[Tensor],
    mode: ParamMode,
    loss: L,
    schedule: &CheckpointSchedule,
) -> Result<RolloutGradient>
where
    S: RolloutStep,
    L: Fn(&Tape, &[Var], &S::Aux, &[Var]) -> Result<Var>,
{
    let steps = schedule.steps();
    let bounds = schedule.boundaries();
    let mut stats = RolloutStats::default();

    // Forward: keep boundary states only.
    let mut stored: Vec<(Vec<Tensor>, S::Aux)> = Vec::with_capacity(bounds.len());
    let mut state = initial.to_vec();
    let mut cur_aux = aux.clone();
    let mut next_boundary = 0;
    for t in 0..=steps {
        if next_boundary < bounds.len() && bounds[next_boundary] == t {
            stored.push((state.clone(), cur_aux.clone()));
            next_boundary += 1;
        }
        if t == steps {
            break;
        }
        let (next, next_aux) = single_step(step, &state, &cur_aux, params)?;
        stats.forward_steps += 1;
        state = next;
        cur_aux = next_aux;
    }
    stats.stored_states = stored.len();

    // Loss on the final state.
    let (loss_value, mut state_grad, mut param_grad) = {
        let (final_state, final_aux) = stored.last().expect("schedule has a final boundary");
        let tape = Tape::new();
        let vars: Vec<Var> = final_state.iter().map(|t| tape.leaf(t.clone())).collect();
        let pv = bind_params(&tape, params, mode);
        let root = loss(&tape, &vars, final_aux, &pv)?;
        let value = tape.scalar_value(root)?;
        stats.peak_tape_nodes = stats.peak_tape_nodes.max(tape.len());
        let mut grads = tape.backward(root)?;
        let sg: Vec<Option<Tensor>> = vars.iter().map(|&v| grads.take(v)).collect();
        let pg: Vec<Option<Tensor>> = match mode {
            ParamMode::Differentiable => pv.iter().map(|&v| grads.take(v)).collect(),
            ParamMode::Constant => vec![None; params.len()],
        };
        (value, sg, pg)
    };

    // Reverse over segments.
    for seg in (0..bounds.len().saturating_sub(1)).rev() {
        let (start, end) = (bounds[seg], bounds[seg + 1]);
        let (seg_state, seg_aux) = &stored[seg];
        let tape = Tape::new();
        let leaves: Vec<Var> = seg_state.iter().map(|t| tape.leaf(t.clone())).collect();
        let pv = bind_params(&tape, params, mode);
        let mut vars = leaves.clone();
        let mut a = seg_aux.clone();
        for _ in start..end {
            let (next, next_aux) = step.step(&tape, &vars, &a, &pv)?;
            stats.forward_steps += 1;
            vars = next;
            a = next_aux;
        }
        if cfg!(debug_assertions) {
            let expected = &stored[seg + 1].0;
            let same = vars.len() == expected.len()
                && vars.iter().zip(expected).all(|(&v, e)| {
                    let got = tape.value(v);
                    got.shape() == e.shape()
                        && got
                            .data()
                            .iter()
                            .zip(e.data())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                });
            if !same {
                return Err(Error::ImpureStep { step: start });
            }
        }
        stats.peak_tape_nodes = stats.peak_tape_nodes.max(tape.len());

        let mut seeds = Vec::new();
        for (&v, g) in vars.iter().zip(state_grad.iter_mut()) {
            if let Some(g) = g.take() {
                seeds.push((v, g));
            }
        }
        if mode == ParamMode::Differentiable {
            for (&v, g) in pv.iter().zip(param_grad.iter_mut()) {
                if let Some(g) = g.take() {
                    seeds.push((v, g));
                }
            }
        }
        if seeds.is_empty() {
            state_grad = vec![None; leaves.len()];
            continue;
        }
        let mut grads = tape.backward_seeded(seeds)?;
        state_grad = leaves.iter().map(|&v| grads.take(v)).collect();
        if mode == ParamMode::Differentiable {
            param_grad = pv.iter().map(|&v| grads.take(v)).collect();
        }
    }

    Ok(RolloutGradient {
        loss: loss_value,
        initial: state_grad,
        params: param_grad,
        stats,
    })
}
