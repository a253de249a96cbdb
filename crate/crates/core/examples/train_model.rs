//! Trains a small learned simulator for a few hundred steps and compares its
//! one-step error with the zero-acceleration baseline.

use invdes::learned_sim::{one_step_mse, train, write_weights, ModelHyper, TrainConfig};
use invdes::oracle_sim::{generate_dataset, load_dataset, DatasetConfig};

fn main() -> invdes::Result<()> {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(500);
    let dir = std::env::temp_dir().join("invdes-example-train");
    let cfg = DatasetConfig {
        trajectories: 12,
        ..DatasetConfig::default()
    };
    generate_dataset(1, &cfg, &dir.join("train"))?;
    generate_dataset(
        2,
        &DatasetConfig {
            trajectories: 3,
            ..cfg
        },
        &dir.join("holdout"),
    )?;
    let (_, data) = load_dataset(&dir.join("train/manifest.json"))?;
    let (_, holdout) = load_dataset(&dir.join("holdout/manifest.json"))?;

    let out = train(
        &data,
        ModelHyper::default(),
        &TrainConfig {
            steps,
            ..TrainConfig::default()
        },
    )?;
    let tail = &out.losses[out.losses.len().saturating_sub(50)..];
    println!(
        "mean loss over the last {} steps: {:.4}",
        tail.len(),
        tail.iter().sum::<f64>() / tail.len() as f64
    );
    let e = one_step_mse(&out.params, &holdout)?;
    println!(
        "held-out one-step MSE {:.3e}, baseline {:.3e} ({:.1}%)",
        e.model_mse,
        e.baseline_mse,
        100.0 * e.model_mse / e.baseline_mse
    );
    let path = dir.join("model.idw");
    write_weights(&path, &out.params)?;
    println!("weights written to {}", path.display());
    Ok(())
}
