//! Property tests for invariants that must hold for arbitrary inputs.

use proptest::prelude::*;

use invdes::autodiff::{Tape, Tensor};
use invdes::optimizers::{
    cem_step, clip_global_norm, gd_optimize, global_norm, select_elites, CemConfig, GdConfig,
};
use invdes::oracle_sim::{step_oracle, OracleConfig, Segment};
use invdes::rewards::{evaluate_reward, reward_on_tape, smoothness, RewardSpec};
use invdes::state_graph::{advance_state, build_radius_edges, FloorMode, NodeType, ParticleState};
use invdes::tasks::{generate_task, TaskSpec};

fn point() -> impl Strategy<Value = [f64; 2]> {
    (0.0..1.0f64, 0.0..1.0f64).prop_map(|(x, y)| [x, y])
}

fn points(max: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec(point(), 1..max)
}

fn fluid(pts: &[[f64; 2]]) -> ParticleState {
    ParticleState::at_rest(Tensor::from_points(pts), vec![NodeType::Fluid; pts.len()]).unwrap()
}

fn rewards() -> Vec<RewardSpec> {
    vec![
        RewardSpec::GaussianGoal {
            mu: [0.4, 0.3],
            sigma: 0.1,
        },
        RewardSpec::Direction {
            direction: [0.6, -0.8],
            center: [0.5, 0.5],
            gamma_r: 300.0,
        },
    ]
}

const TASKS: [&str; 8] = [
    "contain",
    "ramp",
    "maze-3",
    "maze-4",
    "maze-5",
    "maze-6",
    "landscape-direction",
    "landscape-pools",
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn backward_is_linear(xs in prop::collection::vec(-2.0..2.0f64, 1..12), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let grad = |ca: f64, cb: f64| {
            let tape = Tape::new();
            let x = tape.leaf(Tensor::vector(xs.clone()));
            let f = tape.sum(tape.tanh(x).unwrap()).unwrap();
            let g = tape.mean(tape.exp(x).unwrap()).unwrap();
            let root = tape.add(tape.scale(f, ca).unwrap(), tape.scale(g, cb).unwrap()).unwrap();
            tape.backward(root).unwrap().wrt(x).into_data()
        };
        let (gf, gg, mixed) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(a, b));
        for i in 0..xs.len() {
            prop_assert!((mixed[i] - (a * gf[i] + b * gg[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn leaves_off_the_path_get_exact_zero(xs in prop::collection::vec(-2.0..2.0f64, 1..8)) {
        let tape = Tape::new();
        let used = tape.leaf(Tensor::vector(xs.clone()));
        let unused = tape.leaf(Tensor::vector(xs.clone()));
        let _dead_branch = tape.exp(unused).unwrap();
        let root = tape.sum(tape.square(used).unwrap()).unwrap();
        let g = tape.backward(root).unwrap();
        prop_assert!(g.wrt(unused).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn edges_are_symmetric_without_self_loops(pts in points(120), radius in 0.01..0.2f64) {
        let e = build_radius_edges(&pts, radius).unwrap();
        let pairs: std::collections::HashSet<(usize, usize)> = e.pairs().collect();
        for (k, (s, r)) in e.pairs().enumerate() {
            prop_assert!(s != r);
            prop_assert!(pairs.contains(&(r, s)));
            let d = [pts[r][0] - pts[s][0], pts[r][1] - pts[s][1]];
            prop_assert!((e.displacement[k][0] - d[0]).abs() <= 1e-15);
            prop_assert!((e.displacement[k][1] - d[1]).abs() <= 1e-15);
            prop_assert!((e.distance[k] - (d[0] * d[0] + d[1] * d[1]).sqrt()).abs() <= 1e-15);
        }
    }

    #[test]
    fn design_nodes_do_not_advance(pts in points(20), acc in prop::collection::vec(-5.0..5.0f64, 40)) {
        let n = pts.len();
        let types: Vec<NodeType> = (0..n).map(|i| if i % 2 == 0 { NodeType::Design } else { NodeType::Fluid }).collect();
        let s = ParticleState::at_rest(Tensor::from_points(&pts), types.clone()).unwrap();
        let a = Tensor::new(vec![n, 2], acc[..2 * n].to_vec()).unwrap();
        let next = advance_state(&s, &a, 0.05, FloorMode::Wall).unwrap();
        for i in (0..n).step_by(2) {
            prop_assert_eq!(next.positions.row(i), s.positions.row(i));
            prop_assert_eq!(next.velocity_history.row(i), s.velocity_history.row(i));
        }
    }

    #[test]
    fn particle_state_json_round_trip(pts in points(30)) {
        let s = fluid(&pts);
        let back: ParticleState = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        prop_assert_eq!(back, s);
    }

    #[test]
    fn oracle_keeps_fluid_off_obstacles(pts in prop::collection::vec((0.1..0.9f64, 0.45..0.9f64), 1..40),
                                        ax in 0.1..0.5f64, bx in 0.5..0.9f64, ay in 0.3..0.45f64, by in 0.3..0.45f64) {
        let pts: Vec<[f64; 2]> = pts.into_iter().map(|(x, y)| [x, y]).collect();
        let seg = Segment::new([ax, ay], [bx, by]);
        let cfg = OracleConfig::default().with_obstacles(vec![seg]);
        let mut s = fluid(&pts);
        for _ in 0..30 {
            let next = step_oracle(&s, &cfg).unwrap();
            prop_assert_eq!(&step_oracle(&s, &cfg).unwrap(), &next);
            for p in next.positions.points() {
                prop_assert!(seg.distance(p) >= cfg.collision_radius - 1e-9);
            }
            s = next;
        }
    }

    #[test]
    fn design_gradients_match_finite_differences(task in prop::sample::select(TASKS.to_vec()), raw in prop::collection::vec(-0.1..0.1f64, 64), seed in 0usize..1000) {
        let task = generate_task(task, 0).unwrap();
        let arity = task.design.arity();
        let phi = raw[..arity].to_vec();
        let d = task.design.geometry(&phi).unwrap().particles;
        let w: Vec<f64> = (0..d.len()).map(|k| ((k * 7919 + seed) % 13) as f64 / 6.5 - 1.0).collect();
        let value = |p: &[f64]| -> f64 {
            task.design.geometry(p).unwrap().particles.data().iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let tape = Tape::new();
        let pv = tape.leaf(Tensor::vector(phi.clone()));
        let vars = task.design.on_tape(&tape, pv).unwrap();
        let wv = tape.constant(Tensor::new(tape.shape(vars.particles), w.clone()).unwrap());
        let root = tape.dot(vars.particles, wv).unwrap();
        let g = tape.backward(root).unwrap().wrt(pv).into_data();
        let h = 1e-5;
        let fd: Vec<f64> = (0..arity).map(|i| {
            let (mut a, mut b) = (phi.clone(), phi.clone());
            a[i] += h;
            b[i] -= h;
            (value(&a) - value(&b)) / (2.0 * h)
        }).collect();
        let diff = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = fd.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-8);
        prop_assert!(diff / scale < 1e-6, "relative error {}", diff / scale);
    }

    #[test]
    fn heightfield_offsets_stay_strictly_inside(phi in prop::collection::vec(-15.0..15.0f64, 25)) {
        let task = generate_task("landscape-pools", 0).unwrap();
        let g = task.design.geometry(&phi).unwrap();
        let base = 0.4;
        for v in &g.vertices {
            prop_assert!((v[1] - base).abs() < invdes::tasks::GAMMA_H);
        }
    }

    #[test]
    fn rewards_are_permutation_invariant(pts in points(25), shift in 1usize..25) {
        let mut perm = pts.clone();
        perm.rotate_left(shift % pts.len());
        perm.reverse();
        for spec in rewards() {
            let a = evaluate_reward(&spec, &fluid(&pts), None, 0.0).unwrap().raw;
            let b = evaluate_reward(&spec, &fluid(&perm), None, 0.0).unwrap().raw;
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn reward_gradients_match_finite_differences(pts in prop::collection::vec((0.2..0.8f64, 0.2..0.8f64), 2..10)) {
        let pts: Vec<[f64; 2]> = pts.into_iter().map(|(x, y)| [x, y]).collect();
        for spec in rewards() {
            let s = fluid(&pts);
            let value = |p: &[[f64; 2]]| evaluate_reward(&spec, &fluid(p), None, 0.0).unwrap().raw;
            let tape = Tape::new();
            let t = s.tensors();
            let vars = vec![tape.leaf(t[0].clone()), tape.constant(t[1].clone()), tape.constant(t[2].clone())];
            let r = reward_on_tape(&tape, &spec, &vars, &s.aux(FloorMode::Wall), None).unwrap();
            let g = tape.backward(r.total).unwrap().wrt(vars[0]).into_data();
            let h = 1e-5;
            let mut fd = Vec::new();
            for i in 0..pts.len() {
                for c in 0..2 {
                    let (mut a, mut b) = (pts.clone(), pts.clone());
                    a[i][c] += h;
                    b[i][c] -= h;
                    fd.push((value(&a) - value(&b)) / (2.0 * h));
                }
            }
            let diff = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = fd.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-6);
            prop_assert!(diff / scale < 1e-6, "relative error {}", diff / scale);
        }
    }

    #[test]
    fn regularizer_zero_iff_constant(field in prop::collection::vec(-2.0..2.0f64, 2..30), c in -2.0..2.0f64) {
        prop_assert_eq!(smoothness(&vec![c; field.len()]), 0.0);
        let constant = field.iter().all(|v| *v == field[0]);
        prop_assert_eq!(smoothness(&field) == 0.0, constant);
    }

    #[test]
    fn clipping_bounds_the_norm(mut g in prop::collection::vec(-50.0..50.0f64, 1..20), max in 0.1..20.0f64) {
        let before = g.clone();
        let norm = clip_global_norm(&mut g, max);
        prop_assert!((norm - global_norm(&before)).abs() <= 1e-12 * norm.max(1.0));
        prop_assert!(global_norm(&g) <= max + 1e-12);
        let s = if norm > max { max / norm } else { 1.0 };
        for (a, b) in g.iter().zip(&before) {
            prop_assert!((a - s * b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn elite_set_is_shift_invariant(values in prop::collection::vec(-1000i32..1000, 1..40), shift in -1_000_000i32..1_000_000, frac in 0.05..1.0f64) {
        // Integer-valued objectives keep the shifted values exact.
        let count = ((frac * values.len() as f64) as usize).max(1);
        let plain: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        let shifted: Vec<f64> = values.iter().map(|&v| (v + shift) as f64).collect();
        prop_assert_eq!(select_elites(&plain, count), select_elites(&shifted, count));
    }

    #[test]
    fn cem_update_ignores_evaluation_order(values in prop::collection::vec(-10.0..10.0f64, 20), rot in 0usize..20) {
        let distinct = { let mut s = values.clone(); s.sort_by(f64::total_cmp); s.windows(2).all(|w| w[0] != w[1]) };
        prop_assume!(distinct);
        let cfg = CemConfig::default();
        let samples: Vec<Vec<f64>> = values.iter().enumerate().map(|(k, v)| vec![k as f64 * 0.1, v * 0.3]).collect();
        let mut pv = values.clone();
        let mut ps = samples.clone();
        pv.rotate_left(rot);
        ps.rotate_left(rot);
        let a = cem_step(&[0.0, 0.0], &[1.0, 1.0], &values, &samples, &cfg).unwrap();
        let b = cem_step(&[0.0, 0.0], &[1.0, 1.0], &pv, &ps, &cfg).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn gd_is_deterministic(start in prop::collection::vec(-1.0..1.0f64, 1..6)) {
        let f = |p: &[f64]| Ok((-p.iter().map(|x| (x - 0.3).powi(4)).sum::<f64>(), p.iter().map(|x| -4.0 * (x - 0.3).powi(3)).collect()));
        type NoOracle = fn(&[f64]) -> invdes::Result<f64>;
        let cfg = GdConfig { steps: 25, ..GdConfig::default() };
        let a = gd_optimize(&start, f, None::<NoOracle>, &cfg).into_result().unwrap();
        let b = gd_optimize(&start, f, None::<NoOracle>, &cfg).into_result().unwrap();
        prop_assert_eq!(a.total_evals(), 25);
        let bits = |r: &invdes::optimizers::OptRunRecord| r.iterations.iter().flat_map(|i| i.phi.iter().map(|x| x.to_bits())).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn tasks_are_deterministic_and_in_their_boxes(task in prop::sample::select(TASKS.to_vec()), seed in 0u64..10_000) {
        let a: TaskSpec = generate_task(task, seed).unwrap();
        prop_assert_eq!(&a, &generate_task(task, seed).unwrap());
        if let (Some(b), RewardSpec::GaussianGoal { mu, .. }) = (a.reward_box, &a.reward) {
            prop_assert!(mu[0] >= b[0] && mu[0] <= b[2] && mu[1] >= b[1] && mu[1] <= b[3]);
        }
        prop_assert_eq!(a.design.initial_phi().len(), a.design.arity());
    }
}
