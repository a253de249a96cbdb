//! Design optimizers: Adam gradient ascent through the learned simulator and the
//! cross-entropy method against either simulator.

mod adam;
mod objective;
mod run;
mod task;

pub use adam::{adam_step, adam_step_lr, clip_global_norm, global_norm, AdamConfig, AdamState};
pub use objective::{
    design_scene, evaluate_model, evaluate_oracle, model_final_state, model_value,
    model_value_and_grad, model_value_and_grad_with, objective_model, objective_oracle,
    oracle_final_state,
};
pub use run::{
    cem_optimize, cem_sample, cem_step, gd_optimize, select_elites, CemConfig, GdConfig,
    OptIteration, OptOutcome, OptRunRecord, SimulatorKind, SIGMA_FLOOR,
};
pub use task::{optimize_task, OptimizerKind, TaskRun};
