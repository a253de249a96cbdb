//! Design objectives: reward of the rollout started from the designed scene.

use crate::autodiff::{checkpointed_rollout_backward, CheckpointSchedule, ParamMode, Tape, Tensor};
use crate::design_space::{assemble_initial_state, DesignGeometry};
use crate::error::{Error, Result};
use crate::learned_sim::{
    ensemble_value_and_grad, rollout_model, Ensemble, ModelParams, ModelStep,
};
use crate::oracle_sim::{rollout_oracle, DIVERGENCE_LIMIT};
use crate::rewards::{evaluate_reward, reward_on_tape, smoothness_on_tape, RewardReport};
use crate::state_graph::{ParticleState, StateVars};
use crate::tasks::TaskSpec;

/// Initial state and geometry of design `phi` in `task`.
pub fn design_scene(task: &TaskSpec, phi: &[f64]) -> Result<(ParticleState, DesignGeometry)> {
    let geometry = task.design.geometry(phi)?;
    let state = assemble_initial_state(&geometry.particles, &task.template)?;
    Ok((state, geometry))
}

fn check_finite(value: f64, what: &'static str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            op: what,
            phase: "objective",
        })
    }
}

/// `J_M` and its gradient for a single model, with the given checkpoint schedule.
pub fn model_value_and_grad_with(
    task: &TaskSpec,
    params: &ModelParams,
    phi: &[f64],
    schedule: &CheckpointSchedule,
) -> Result<(f64, Vec<f64>)> {
    if schedule.steps() != task.rollout_steps {
        return Err(Error::config(
            "checkpoint schedule does not cover the task rollout",
        ));
    }
    let (state, _) = design_scene(task, phi)?;
    let aux = state.aux(task.oracle.floor);
    let steps = task.rollout_steps;
    let reward = &task.reward;
    let rg = checkpointed_rollout_backward(
        &ModelStep { model: params },
        &state.tensors(),
        &aux,
        params.tensors(),
        ParamMode::Constant,
        |tape, fin, fin_aux, _| {
            let pos = StateVars::from_slice(fin)?.positions;
            let value = tape.value(pos);
            for (i, p) in value.points().iter().enumerate() {
                if !fin_aux.removed[i]
                    && p.iter()
                        .any(|c| !c.is_finite() || c.abs() > DIVERGENCE_LIMIT)
                {
                    return Err(Error::Divergence {
                        step: steps,
                        detail: format!("particle {i} reached ({}, {})", p[0], p[1]),
                    });
                }
            }
            Ok(reward_on_tape(tape, reward, fin, fin_aux, None)?.total)
        },
        schedule,
    )?;

    // Pull the position gradient back through the design function.
    let tape = Tape::new();
    let phi_var = tape.leaf(Tensor::vector(phi.to_vec()));
    let dv = task.design.on_tape(&tape, phi_var)?;
    let fluid = state.len() - tape.shape(dv.particles)[0];
    let mut value = rg.loss;
    let mut seeds = Vec::new();
    if let Some(g) = &rg.initial[0] {
        let rows = g.data()[2 * fluid..].to_vec();
        seeds.push((dv.particles, Tensor::new(tape.shape(dv.particles), rows)?));
    }
    if let (Some(field), Some(gamma)) = (dv.field, regularizer_weight(task)) {
        let reg = tape.scale(smoothness_on_tape(&tape, field)?, gamma)?;
        value -= tape.scalar_value(reg)?;
        seeds.push((reg, Tensor::scalar(-1.0)));
    }
    let grad = if seeds.is_empty() {
        vec![0.0; phi.len()]
    } else {
        tape.backward_seeded(seeds)?.wrt(phi_var).into_data()
    };
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            op: "design gradient",
            phase: "objective",
        });
    }
    Ok((check_finite(value, "model objective")?, grad))
}

fn regularizer_weight(task: &TaskSpec) -> Option<f64> {
    use crate::rewards::RewardSpec;
    match task.reward {
        RewardSpec::Direction { gamma_r, .. } | RewardSpec::Pools { gamma_r, .. }
            if gamma_r > 0.0 =>
        {
            Some(gamma_r)
        }
        _ => None,
    }
}

/// `J_M` and its gradient for a single model with one checkpoint per step.
pub fn model_value_and_grad(
    task: &TaskSpec,
    params: &ModelParams,
    phi: &[f64],
) -> Result<(f64, Vec<f64>)> {
    model_value_and_grad_with(
        task,
        params,
        phi,
        &CheckpointSchedule::per_step(task.rollout_steps),
    )
}

/// `J_M` and `∇_φ J_M` averaged over the ensemble members.
pub fn objective_model(
    task: &TaskSpec,
    ensemble: &Ensemble,
    phi: &[f64],
) -> Result<(f64, Vec<f64>)> {
    ensemble_value_and_grad(|m, p| model_value_and_grad(task, m, p), ensemble, phi)
}

/// Final state of a learned rollout plus the heightfield parameters, if any.
pub fn model_final_state(
    task: &TaskSpec,
    params: &ModelParams,
    phi: &[f64],
) -> Result<(ParticleState, Option<Vec<f64>>)> {
    let (state, geometry) = design_scene(task, phi)?;
    let mut states = rollout_model(&state, params, task.rollout_steps, task.oracle.floor)?;
    Ok((states.pop().expect("initial state"), geometry.field))
}

/// Final state of a ground-truth rollout plus the heightfield parameters, if any.
pub fn oracle_final_state(
    task: &TaskSpec,
    phi: &[f64],
) -> Result<(ParticleState, Option<Vec<f64>>)> {
    let (state, geometry) = design_scene(task, phi)?;
    let cfg = task.oracle.clone().with_obstacles(geometry.segments);
    let mut states = rollout_oracle(&state, &cfg, task.rollout_steps)?;
    Ok((states.pop().expect("initial state"), geometry.field))
}

/// Reward report of the learned rollout, averaged term by term over the ensemble.
pub fn evaluate_model(
    task: &TaskSpec,
    ensemble: &Ensemble,
    phi: &[f64],
    baseline: f64,
) -> Result<RewardReport> {
    use rayon::prelude::*;
    let reports: Vec<RewardReport> = ensemble
        .members()
        .par_iter()
        .map(|m| {
            let (fin, field) = model_final_state(task, m, phi)?;
            evaluate_reward(&task.reward, &fin, field.as_deref(), 0.0)
        })
        .collect::<Result<_>>()?;
    let k = reports.len() as f64;
    let avg = |f: fn(&RewardReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    let raw = avg(|r| r.raw);
    Ok(RewardReport {
        raw,
        normalized: raw - baseline,
        main: avg(|r| r.main),
        spread: avg(|r| r.spread),
        regularizer: avg(|r| r.regularizer),
        empty: reports.iter().any(|r| r.empty),
    })
}

pub fn evaluate_oracle(task: &TaskSpec, phi: &[f64], baseline: f64) -> Result<RewardReport> {
    let (fin, field) = oracle_final_state(task, phi)?;
    evaluate_reward(&task.reward, &fin, field.as_deref(), baseline)
}

/// `J_M` without gradients, averaged over the ensemble.
pub fn model_value(task: &TaskSpec, ensemble: &Ensemble, phi: &[f64]) -> Result<f64> {
    Ok(evaluate_model(task, ensemble, phi, 0.0)?.raw)
}

/// `J_S`: reward of the ground-truth rollout.
pub fn objective_oracle(task: &TaskSpec, phi: &[f64]) -> Result<f64> {
    check_finite(evaluate_oracle(task, phi, 0.0)?.raw, "oracle objective")
}
