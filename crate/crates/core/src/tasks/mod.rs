//! Procedural tasks: a scene template, a design space, a reward and a rollout length.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::design_space::{
    DesignAlpha, DesignKind, DesignSpace, Heightfield, JointTool, RotorGrid, SceneTemplate,
    DESIGN_SPACING,
};
use crate::error::{Error, Result};
use crate::oracle_sim::OracleConfig;
use crate::rewards::RewardSpec;
use crate::state_graph::FloorMode;

pub const DEFAULT_ROLLOUT: usize = 50;
pub const LANDSCAPE_ROLLOUT: usize = 80;
pub const MAX_ROLLOUT: usize = 300;
pub const GAMMA_R: f64 = 300.0;
pub const GAMMA_H: f64 = 0.3;
pub const GOAL_SIGMA: f64 = 0.1;
pub const POOL_SIGMA: f64 = 0.4;
pub const LANDSCAPE_CENTER: [f64; 2] = [0.5, 0.5];
pub const LANDSCAPE_DIRECTIONS: usize = 8;

const TOOL_ANCHOR: [f64; 2] = [0.15, 0.35];
const TOOL_LENGTH: f64 = 0.8;
const CONTAIN_JOINTS: usize = 16;
const SPLASH_FLUID: [f64; 4] = [0.2, 0.5, 0.3, 0.6];
const MAZE_FLUID: [f64; 4] = [0.2, 0.75, 0.8, 0.8];
const LANDSCAPE_FLUID: [f64; 4] = [0.45, 0.55, 0.55, 0.85];
const FIELD_NODES: usize = 25;
const FIELD_RANGE: [f64; 2] = [0.1, 0.9];
const FIELD_BASE: f64 = 0.4;

/// Rotor domain box and total tool length per grid size.
fn maze_geometry(n: usize) -> Option<([f64; 4], f64)> {
    match n {
        3 => Some(([0.14, 0.3, 0.65, 0.6], 0.72)),
        4 => Some(([0.14, 0.3, 0.71, 0.6], 0.64)),
        5 => Some(([0.14, 0.3, 0.75, 0.6], 0.65)),
        6 => Some(([0.14, 0.25, 0.77, 0.65], 0.63)),
        _ => None,
    }
}

/// Floor-level pool layouts for the pools task.
pub const POOL_LAYOUTS: [&[[f64; 2]]; 3] = [
    &[[0.075, 0.0], [0.925, 0.0]],
    &[[0.025, 0.0], [0.5, 0.0], [0.975, 0.0]],
    &[[0.0, 0.0], [0.5, 0.0], [1.0, 0.0]],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Contain,
    Ramp,
    Maze(usize),
    LandscapeDirection,
    LandscapePools,
}

impl TaskKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "contain" => Ok(TaskKind::Contain),
            "ramp" => Ok(TaskKind::Ramp),
            "landscape-direction" => Ok(TaskKind::LandscapeDirection),
            "landscape-pools" => Ok(TaskKind::LandscapePools),
            other => {
                let n = other
                    .strip_prefix("maze-")
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|n| maze_geometry(*n).is_some());
                n.map(TaskKind::Maze).ok_or_else(|| {
                    Error::config(format!(
                        "unknown task `{other}` (expected contain, ramp, maze-3..maze-6, landscape-direction, landscape-pools)"
                    ))
                })
            }
        }
    }

    pub fn name(self) -> String {
        match self {
            TaskKind::Contain => "contain".into(),
            TaskKind::Ramp => "ramp".into(),
            TaskKind::Maze(n) => format!("maze-{n}"),
            TaskKind::LandscapeDirection => "landscape-direction".into(),
            TaskKind::LandscapePools => "landscape-pools".into(),
        }
    }
}

/// Per-task optimizer hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerDefaults {
    pub gd_learning_rate: f64,
    pub gradient_clip: Option<f64>,
    pub cem_population: usize,
    pub cem_elite_fraction: f64,
    pub cem_initial_sigma: f64,
    pub cem_smoothing: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub seed: u64,
    pub template: SceneTemplate,
    pub design: DesignSpace,
    pub reward: RewardSpec,
    /// Box the reward target was drawn from, if any.
    pub reward_box: Option<[f64; 4]>,
    pub rollout_steps: usize,
    /// Ground-truth simulator settings; obstacles are filled in from the design.
    pub oracle: OracleConfig,
    pub optimizer: OptimizerDefaults,
}

/// Optional changes applied on top of a generated task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskOverrides {
    pub rollout_steps: Option<usize>,
    /// Joint count of tool tasks.
    pub joints: Option<usize>,
    /// Parameterize tool angles absolutely instead of relative to the previous joint.
    pub absolute_angles: Option<bool>,
    /// Adds a free tool translation to `φ`, starting at this offset.
    pub global_offset: Option<[f64; 2]>,
    /// Control values per heightfield for landscape tasks.
    pub control_points: Option<usize>,
    /// Index into [`POOL_LAYOUTS`].
    pub pool_layout: Option<usize>,
    /// Index of the target direction for the direction task.
    pub direction: Option<usize>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        self.template.validate()?;
        self.design.validate()?;
        self.reward.validate()?;
        self.oracle.validate()?;
        if self.rollout_steps > MAX_ROLLOUT {
            return Err(Error::config(format!("rollout length above {MAX_ROLLOUT}")));
        }
        Ok(())
    }

    pub fn kind(&self) -> Result<TaskKind> {
        TaskKind::parse(&self.name)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: TaskSpec =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

fn sample_in_box(rng: &mut ChaCha8Rng, b: [f64; 4]) -> [f64; 2] {
    [rng.gen_range(b[0]..=b[2]), rng.gen_range(b[1]..=b[3])]
}

/// Unit target direction `k` of the direction task, pointing down and across.
pub fn landscape_direction(k: usize) -> [f64; 2] {
    let theta = (k as f64 * 180.0 / (LANDSCAPE_DIRECTIONS - 1) as f64).to_radians();
    [theta.cos(), -theta.sin()]
}

pub fn generate_task(name: &str, seed: u64) -> Result<TaskSpec> {
    generate_task_with(name, seed, &TaskOverrides::default())
}

pub fn generate_task_with(name: &str, seed: u64, ov: &TaskOverrides) -> Result<TaskSpec> {
    let kind = TaskKind::parse(name)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = |fluid_box| SceneTemplate {
        fluid_box,
        jitter_seed: seed,
        ..SceneTemplate::default()
    };
    let tool_optimizer = OptimizerDefaults {
        gd_learning_rate: 0.005,
        gradient_clip: Some(10.0),
        cem_population: 20,
        cem_elite_fraction: 0.1,
        cem_initial_sigma: 0.5,
        cem_smoothing: 0.1,
        steps: 1000,
    };
    let landscape_optimizer = OptimizerDefaults {
        gd_learning_rate: 0.01,
        gradient_clip: None,
        cem_population: 40,
        cem_initial_sigma: 0.1,
        steps: 200,
        ..tool_optimizer.clone()
    };
    let field = |control_points: Option<usize>| {
        let kind = if control_points.is_some() {
            DesignKind::HeightfieldControlPoints
        } else {
            DesignKind::Heightfield
        };
        DesignSpace::new(
            kind,
            DesignAlpha::Field(Heightfield {
                nodes: FIELD_NODES,
                x_range: FIELD_RANGE,
                base_y: FIELD_BASE,
                gamma_h: GAMMA_H,
                spacing: DESIGN_SPACING,
                control_points: control_points.unwrap_or(0),
            }),
        )
    };
    let landscape_oracle = OracleConfig {
        floor: FloorMode::Remove,
        ..OracleConfig::default()
    };

    let spec = match kind {
        TaskKind::Contain | TaskKind::Ramp => {
            let reward_box = if kind == TaskKind::Contain {
                [0.4, 0.1, 0.6, 0.3]
            } else {
                [0.8, 0.0, 1.0, 0.2]
            };
            let mu = sample_in_box(&mut rng, reward_box);
            let design_kind = if ov.absolute_angles.unwrap_or(false) {
                DesignKind::AbsoluteJoints
            } else {
                DesignKind::RelativeJoints
            };
            let design = DesignSpace::new(
                design_kind,
                DesignAlpha::Joints(JointTool {
                    anchor: TOOL_ANCHOR,
                    tool_length: TOOL_LENGTH,
                    joints: ov.joints.unwrap_or(CONTAIN_JOINTS),
                    spacing: DESIGN_SPACING,
                    global_offset: ov.global_offset.is_some(),
                    initial_offset: ov.global_offset.unwrap_or([0.0; 2]),
                }),
            )?;
            TaskSpec {
                name: kind.name(),
                seed,
                template: template(SPLASH_FLUID),
                design,
                reward: RewardSpec::GaussianGoal {
                    mu,
                    sigma: GOAL_SIGMA,
                },
                reward_box: Some(reward_box),
                rollout_steps: DEFAULT_ROLLOUT,
                oracle: OracleConfig::default(),
                optimizer: tool_optimizer,
            }
        }
        TaskKind::Maze(n) => {
            let reward_box = [0.1, 0.1, 0.9, 0.2];
            let mu = sample_in_box(&mut rng, reward_box);
            let (domain_box, length) = maze_geometry(n).expect("parsed maze size");
            let design = DesignSpace::new(
                DesignKind::RotorGrid,
                DesignAlpha::Rotors(RotorGrid {
                    n,
                    domain_box,
                    rotor_length: length / n as f64,
                    spacing: DESIGN_SPACING,
                }),
            )?;
            TaskSpec {
                name: kind.name(),
                seed,
                template: template(MAZE_FLUID),
                design,
                reward: RewardSpec::GaussianGoal {
                    mu,
                    sigma: GOAL_SIGMA,
                },
                reward_box: Some(reward_box),
                rollout_steps: DEFAULT_ROLLOUT,
                oracle: OracleConfig::default(),
                optimizer: OptimizerDefaults {
                    gd_learning_rate: 0.01,
                    cem_initial_sigma: 1.5,
                    ..tool_optimizer
                },
            }
        }
        TaskKind::LandscapeDirection => {
            let k = match ov.direction {
                Some(k) if k < LANDSCAPE_DIRECTIONS => k,
                Some(k) => return Err(Error::config(format!("direction index {k} out of range"))),
                None => rng.gen_range(0..LANDSCAPE_DIRECTIONS),
            };
            TaskSpec {
                name: kind.name(),
                seed,
                template: template(LANDSCAPE_FLUID),
                design: field(ov.control_points)?,
                reward: RewardSpec::Direction {
                    direction: landscape_direction(k),
                    center: LANDSCAPE_CENTER,
                    gamma_r: GAMMA_R,
                },
                reward_box: None,
                rollout_steps: LANDSCAPE_ROLLOUT,
                oracle: landscape_oracle,
                optimizer: landscape_optimizer,
            }
        }
        TaskKind::LandscapePools => {
            let layout = match ov.pool_layout {
                Some(k) if k < POOL_LAYOUTS.len() => k,
                Some(k) => return Err(Error::config(format!("pool layout {k} out of range"))),
                None => rng.gen_range(0..POOL_LAYOUTS.len()),
            };
            TaskSpec {
                name: kind.name(),
                seed,
                template: template(LANDSCAPE_FLUID),
                design: field(ov.control_points)?,
                reward: RewardSpec::Pools {
                    centers: POOL_LAYOUTS[layout].to_vec(),
                    sigma: POOL_SIGMA,
                    gamma_r: GAMMA_R,
                },
                reward_box: None,
                rollout_steps: LANDSCAPE_ROLLOUT,
                oracle: landscape_oracle,
                optimizer: landscape_optimizer,
            }
        }
    };
    let mut spec = spec;
    if let Some(k) = ov.rollout_steps {
        spec.rollout_steps = k;
    }
    let misplaced = match kind {
        TaskKind::Contain | TaskKind::Ramp => {
            ov.control_points.is_some() || ov.pool_layout.is_some() || ov.direction.is_some()
        }
        TaskKind::Maze(_) => {
            ov.joints.is_some()
                || ov.global_offset.is_some()
                || ov.absolute_angles.is_some()
                || ov.control_points.is_some()
        }
        _ => ov.joints.is_some() || ov.global_offset.is_some() || ov.absolute_angles.is_some(),
    };
    if misplaced {
        return Err(Error::config(format!(
            "override does not apply to task {}",
            kind.name()
        )));
    }
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_task() {
        for name in [
            "contain",
            "ramp",
            "maze-4",
            "landscape-direction",
            "landscape-pools",
        ] {
            assert_eq!(
                generate_task(name, 3).unwrap(),
                generate_task(name, 3).unwrap()
            );
        }
        assert_ne!(
            generate_task("contain", 3).unwrap(),
            generate_task("contain", 4).unwrap()
        );
    }

    #[test]
    fn goals_stay_in_their_boxes() {
        for seed in 0..200 {
            for name in ["contain", "ramp", "maze-3"] {
                let t = generate_task(name, seed).unwrap();
                let b = t.reward_box.unwrap();
                let RewardSpec::GaussianGoal { mu, sigma } = t.reward else {
                    panic!()
                };
                assert_eq!(sigma, 0.1);
                assert!(mu[0] >= b[0] && mu[0] <= b[2] && mu[1] >= b[1] && mu[1] <= b[3]);
            }
        }
    }

    #[test]
    fn arities() {
        assert_eq!(generate_task("contain", 0).unwrap().design.arity(), 16);
        for n in 3..=6 {
            assert_eq!(
                generate_task(&format!("maze-{n}"), 0)
                    .unwrap()
                    .design
                    .arity(),
                n * n
            );
        }
        let ov = TaskOverrides {
            joints: Some(24),
            ..Default::default()
        };
        assert_eq!(
            generate_task_with("contain", 0, &ov)
                .unwrap()
                .design
                .arity(),
            24
        );
        assert_eq!(
            generate_task("landscape-pools", 0).unwrap().design.arity(),
            25
        );
        let cp = TaskOverrides {
            control_points: Some(5),
            ..Default::default()
        };
        assert_eq!(
            generate_task_with("landscape-direction", 0, &cp)
                .unwrap()
                .design
                .arity(),
            5
        );
    }

    #[test]
    fn contain_scene() {
        let t = generate_task("contain", 1).unwrap();
        assert_eq!(t.template.fluid_box, [0.2, 0.5, 0.3, 0.6]);
        assert_eq!(t.rollout_steps, 50);
        let g = t.design.geometry(&t.design.initial_phi()).unwrap();
        assert_eq!(g.vertices[0], [0.15, 0.35]);
        assert_eq!(t.optimizer.gradient_clip, Some(10.0));
    }

    #[test]
    fn landscape_directions_point_down() {
        for k in 0..LANDSCAPE_DIRECTIONS {
            let d = landscape_direction(k);
            assert!((d[0].hypot(d[1]) - 1.0).abs() < 1e-15);
            assert!(d[1] <= 1e-15);
        }
        assert_eq!(landscape_direction(0), [1.0, -0.0]);
        assert!((landscape_direction(7)[0] + 1.0).abs() < 1e-15);
        let t = generate_task("landscape-pools", 2).unwrap();
        assert_eq!(t.oracle.floor, FloorMode::Remove);
    }

    #[test]
    fn unknown_names_and_bad_overrides() {
        assert!(generate_task("airfoil", 0).is_err());
        assert!(generate_task("maze-2", 0).is_err());
        let ov = TaskOverrides {
            joints: Some(3),
            ..Default::default()
        };
        assert!(generate_task_with("maze-3", 0, &ov).is_err());
        let long = TaskOverrides {
            rollout_steps: Some(301),
            ..Default::default()
        };
        assert!(generate_task_with("contain", 0, &long).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        for name in [
            "contain",
            "maze-5",
            "landscape-direction",
            "landscape-pools",
        ] {
            let t = generate_task(name, 11).unwrap();
            let json = serde_json::to_string(&t).unwrap();
            let back: TaskSpec = serde_json::from_str(&json).unwrap();
            assert_eq!(back, t);
            assert_eq!(serde_json::to_string(&back).unwrap(), json);
        }
    }
}
