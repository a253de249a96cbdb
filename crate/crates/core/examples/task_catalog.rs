//! Lists the built-in tasks and writes one as JSON.

use invdes::tasks::generate_task;

fn main() -> invdes::Result<()> {
    for name in [
        "contain",
        "ramp",
        "maze-3",
        "maze-4",
        "maze-5",
        "maze-6",
        "landscape-direction",
        "landscape-pools",
    ] {
        let t = generate_task(name, 1)?;
        println!(
            "{name:<20} {:<28} arity {:>2}, K={:>3}, gd lr {}, cem pop {}",
            t.design.kind.name(),
            t.design.arity(),
            t.rollout_steps,
            t.optimizer.gd_learning_rate,
            t.optimizer.cem_population
        );
    }
    let path = std::env::temp_dir().join("invdes-contain-task.json");
    generate_task("contain", 1)?.write(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}
