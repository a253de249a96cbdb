//! Scores a few hand-made final states under each reward kind.

use invdes::autodiff::Tensor;
use invdes::rewards::{evaluate_reward, RewardSpec};
use invdes::state_graph::{NodeType, ParticleState};

fn main() -> invdes::Result<()> {
    let cluster: Vec<[f64; 2]> = (0..20)
        .map(|k| [0.5 + 0.01 * (k % 5) as f64, 0.2 + 0.01 * (k / 5) as f64])
        .collect();
    let state = ParticleState::at_rest(
        Tensor::from_points(&cluster),
        vec![NodeType::Fluid; cluster.len()],
    )?;
    let specs = [
        RewardSpec::GaussianGoal {
            mu: [0.52, 0.215],
            sigma: 0.1,
        },
        RewardSpec::GaussianGoal {
            mu: [0.9, 0.9],
            sigma: 0.1,
        },
        RewardSpec::Direction {
            direction: [0.0, -1.0],
            center: [0.5, 0.5],
            gamma_r: 300.0,
        },
    ];
    for spec in &specs {
        let r = evaluate_reward(spec, &state, None, 0.0)?;
        println!(
            "{spec:?}\n  raw {:.4} (main {:.4}, spread {:.4})",
            r.raw, r.main, r.spread
        );
    }
    let field = vec![0.0; 25];
    let bumpy: Vec<f64> = (0..25).map(|k| (k as f64).sin()).collect();
    let spec = RewardSpec::Direction {
        direction: [1.0, 0.0],
        center: [0.5, 0.5],
        gamma_r: 300.0,
    };
    for (label, f) in [("flat", &field), ("bumpy", &bumpy)] {
        let r = evaluate_reward(&spec, &state, Some(f), 0.0)?;
        println!("{label} heightfield regularizer {:.3}", r.regularizer);
    }
    Ok(())
}
