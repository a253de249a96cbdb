//! Geometry produced by each design parameterization.

use invdes::tasks::generate_task_with;
use invdes::tasks::TaskOverrides;

fn main() -> invdes::Result<()> {
    let cases = [
        ("contain", "", TaskOverrides::default()),
        (
            "contain",
            "",
            TaskOverrides {
                absolute_angles: Some(true),
                ..TaskOverrides::default()
            },
        ),
        (
            "contain",
            "+offset",
            TaskOverrides {
                global_offset: Some([0.0, 0.1]),
                ..TaskOverrides::default()
            },
        ),
        ("maze-3", "", TaskOverrides::default()),
        ("landscape-pools", "", TaskOverrides::default()),
        (
            "landscape-pools",
            "",
            TaskOverrides {
                control_points: Some(5),
                ..TaskOverrides::default()
            },
        ),
    ];
    for (name, extra, ov) in cases {
        let task = generate_task_with(name, 0, &ov)?;
        let space = &task.design;
        let mut phi = space.initial_phi();
        // A smooth non-trivial design.
        for (k, p) in phi.iter_mut().enumerate() {
            *p += 0.2 * (k as f64 * 0.7).sin();
        }
        let g = space.geometry(&phi)?;
        println!(
            "{name:<16} {:<34} arity {:>2}: {:>3} vertices, {:>3} particles, {:>2} segments",
            format!("{}{extra}", space.kind.name()),
            space.arity(),
            g.vertices.len(),
            g.particles.rows(),
            g.segments.len()
        );
    }
    Ok(())
}
