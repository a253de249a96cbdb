//! Writes a small training set of ground-truth trajectories and reads it back.

use invdes::oracle_sim::{generate_dataset, load_dataset, DatasetConfig};

fn main() -> invdes::Result<()> {
    let dir = std::env::temp_dir().join("invdes-example-data");
    let cfg = DatasetConfig {
        trajectories: 4,
        steps: 20,
        ..DatasetConfig::default()
    };
    let manifest = generate_dataset(7, &cfg, &dir)?;
    println!("wrote {} trajectories to {}", manifest.count, dir.display());
    let (_, trajs) = load_dataset(&dir.join("manifest.json"))?;
    for (file, t) in manifest.files.iter().zip(&trajs) {
        let fluid = t
            .header
            .node_types
            .iter()
            .filter(|n| **n == invdes::state_graph::NodeType::Fluid)
            .count();
        println!(
            "{file}: {} frames, {} particles ({fluid} fluid)",
            t.frames.len(),
            t.header.num_particles
        );
    }
    Ok(())
}
