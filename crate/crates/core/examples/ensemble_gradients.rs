//! Averages design gradients over an ensemble of learned simulators.
//!
//! Pass weight files to use trained members; otherwise three untrained
//! networks stand in.

use invdes::learned_sim::{read_weights, Ensemble, ModelHyper, ModelParams};
use invdes::optimizers::{model_value_and_grad, objective_model};
use invdes::tasks::generate_task;

fn fmt(g: &[f64]) -> String {
    g.iter()
        .map(|x| format!("{x:+.2e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn main() -> invdes::Result<()> {
    let task = generate_task("contain", 0)?;
    let paths: Vec<String> = std::env::args().skip(1).collect();
    let members: Vec<ModelParams> = if paths.is_empty() {
        (0..3)
            .map(|s| ModelParams::init(ModelHyper::default(), s))
            .collect::<invdes::Result<_>>()?
    } else {
        paths
            .iter()
            .map(|p| read_weights(p.as_ref()))
            .collect::<invdes::Result<_>>()?
    };
    let phi = task.design.initial_phi();
    for (k, m) in members.iter().enumerate() {
        let (v, g) = model_value_and_grad(&task, m, &phi)?;
        println!("member {k}: J_M {v:.5}\n  gradient {}", fmt(&g[..6]));
    }
    let (v, g) = objective_model(&task, &Ensemble::new(members)?, &phi)?;
    println!("ensemble: J_M {v:.5}\n  gradient {}", fmt(&g[..6]));
    Ok(())
}
