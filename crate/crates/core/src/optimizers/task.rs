//! Running an optimizer on a task with either simulator.

use serde::{Deserialize, Serialize};

use super::adam::AdamConfig;
use super::objective::{model_value, objective_model, objective_oracle};
use super::run::{cem_optimize, gd_optimize, CemConfig, GdConfig, OptOutcome, SimulatorKind};
use crate::error::{Error, Result};
use crate::learned_sim::Ensemble;
use crate::tasks::TaskSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Gd,
    Cem,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRun {
    pub optimizer: OptimizerKind,
    pub simulator: SimulatorKind,
    pub gd: GdConfig,
    pub cem: CemConfig,
}

impl TaskRun {
    /// Optimizer settings taken from the task defaults.
    pub fn from_task(
        task: &TaskSpec,
        optimizer: OptimizerKind,
        simulator: SimulatorKind,
        seed: u64,
    ) -> Self {
        let d = &task.optimizer;
        TaskRun {
            optimizer,
            simulator,
            gd: GdConfig {
                adam: AdamConfig {
                    learning_rate: d.gd_learning_rate,
                    clip: d.gradient_clip,
                    ..AdamConfig::default()
                },
                steps: d.steps,
                eval_every: 0,
            },
            cem: CemConfig {
                population: d.cem_population,
                elite_fraction: d.cem_elite_fraction,
                initial_mean: None,
                initial_sigma: vec![d.cem_initial_sigma],
                smoothing: d.cem_smoothing,
                steps: d.steps,
                simulator,
                seed,
                eval_every: 0,
            },
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.gd.steps = steps;
        self.cem.steps = steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.optimizer == OptimizerKind::Gd && self.simulator == SimulatorKind::Oracle {
            return Err(Error::config(
                "oracle is non-differentiable: gradient descent needs the model simulator",
            ));
        }
        match self.optimizer {
            OptimizerKind::Gd => self.gd.adam.validate(),
            OptimizerKind::Cem => self.cem.validate(),
        }
    }
}

/// Optimizes the design of `task`. `ensemble` is required with the model simulator.
pub fn optimize_task(
    task: &TaskSpec,
    run: &TaskRun,
    ensemble: Option<&Ensemble>,
) -> Result<OptOutcome> {
    run.validate()?;
    let need_model = || ensemble.ok_or_else(|| Error::config("the model simulator needs weights"));
    let oracle = |phi: &[f64]| objective_oracle(task, phi);
    let start = task.design.initial_phi();
    Ok(match (run.optimizer, run.simulator) {
        (OptimizerKind::Gd, _) => {
            let e = need_model()?;
            gd_optimize(
                &start,
                |phi| objective_model(task, e, phi),
                Some(oracle),
                &run.gd,
            )
        }
        (OptimizerKind::Cem, SimulatorKind::Model) => {
            let e = need_model()?;
            let mut cfg = run.cem.clone();
            cfg.simulator = SimulatorKind::Model;
            cfg.initial_mean.get_or_insert(start);
            cem_optimize(
                task.design.arity(),
                |phi| model_value(task, e, phi),
                Some(oracle),
                &cfg,
            )
        }
        (OptimizerKind::Cem, SimulatorKind::Oracle) => {
            let mut cfg = run.cem.clone();
            cfg.simulator = SimulatorKind::Oracle;
            cfg.eval_every = 0;
            cfg.initial_mean.get_or_insert(start);
            cem_optimize(
                task.design.arity(),
                oracle,
                None::<fn(&[f64]) -> Result<f64>>,
                &cfg,
            )
        }
    })
}
