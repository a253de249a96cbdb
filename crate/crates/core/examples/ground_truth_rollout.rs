//! Drops a block of fluid onto a tilted segment with the ground-truth simulator.

use invdes::autodiff::Tensor;
use invdes::oracle_sim::{fluid_count, kinetic_energy, rollout_oracle, OracleConfig, Segment};
use invdes::state_graph::{NodeType, ParticleState};

fn main() -> invdes::Result<()> {
    let mut pts = Vec::new();
    for i in 0..10 {
        for j in 0..6 {
            pts.push([0.3 + 0.02 * i as f64, 0.6 + 0.02 * j as f64]);
        }
    }
    let state =
        ParticleState::at_rest(Tensor::from_points(&pts), vec![NodeType::Fluid; pts.len()])?;
    let cfg = OracleConfig::default().with_obstacles(vec![Segment::new([0.1, 0.45], [0.7, 0.3])]);
    let states = rollout_oracle(&state, &cfg, 60)?;
    for (k, s) in states.iter().enumerate().step_by(10) {
        let mean_y = s.positions.points().iter().map(|p| p[1]).sum::<f64>() / s.len() as f64;
        println!(
            "step {k:>3}: mean height {mean_y:.3}, kinetic energy {:.4}",
            kinetic_energy(s)
        );
    }
    println!(
        "{} fluid particles still active",
        fluid_count(states.last().expect("states"))
    );
    Ok(())
}
