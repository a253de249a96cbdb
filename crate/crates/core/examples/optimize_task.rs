//! Optimizes a Contain design with gradient descent and with CEM through a
//! learned simulator, then scores both with the ground-truth simulator.
//!
//! Pass a weights file to use a trained model; otherwise a briefly trained
//! model is used, so the designs are only illustrative.

use std::path::PathBuf;

use invdes::learned_sim::{read_weights, train, Ensemble, ModelHyper, TrainConfig};
use invdes::optimizers::{evaluate_oracle, optimize_task, OptimizerKind, SimulatorKind, TaskRun};
use invdes::oracle_sim::{generate_dataset, load_dataset, DatasetConfig};
use invdes::tasks::generate_task;

fn main() -> invdes::Result<()> {
    let model = match std::env::args().nth(1).map(PathBuf::from) {
        Some(path) => read_weights(&path)?,
        None => {
            let dir = std::env::temp_dir().join("invdes-example-optimize");
            generate_dataset(
                3,
                &DatasetConfig {
                    trajectories: 8,
                    ..DatasetConfig::default()
                },
                &dir,
            )?;
            let (_, data) = load_dataset(&dir.join("manifest.json"))?;
            train(
                &data,
                ModelHyper::default(),
                &TrainConfig {
                    steps: 300,
                    ..TrainConfig::default()
                },
            )?
            .params
        }
    };
    let ensemble = Ensemble::new(vec![model])?;
    let task = generate_task("contain", 0)?;
    let baseline = evaluate_oracle(&task, &task.design.initial_phi(), 0.0)?.raw;
    println!("initial ground-truth reward {baseline:.4}");
    for kind in [OptimizerKind::Gd, OptimizerKind::Cem] {
        let run = TaskRun::from_task(&task, kind, SimulatorKind::Model, 0).with_steps(10);
        let record = optimize_task(&task, &run, Some(&ensemble))?.into_result()?;
        let score = evaluate_oracle(&task, &record.best_phi, baseline)?;
        println!(
            "{kind:?}: best model reward {:.4} after {} evaluations, normalized ground-truth reward {:+.4}",
            record.best_value.unwrap_or(f64::NAN),
            record.total_evals(),
            score.normalized
        );
    }
    Ok(())
}
