use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ModelGraph, ModelHyper, ModelParams, NormStats};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::optimizers::{adam_step_lr, AdamConfig, AdamState};
use crate::oracle_sim::load_dataset;
use crate::state_graph::{NodeType, ParticleState, Trajectory, HISTORY};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of the run after which the learning rate is multiplied by `decay_factor`.
    pub decay_at: f64,
    pub decay_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 2,
            learning_rate: 1e-4,
            decay_at: 0.6,
            decay_factor: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mini-batch loss of every step.
    pub losses: Vec<f64>,
}

/// One training example: a (possibly noised) input state and the acceleration
/// that carries it onto the true next positions.
#[derive(Clone, Debug)]
pub struct TrainInput {
    pub state: ParticleState,
    /// `[N, 2]`, zero for non-fluid rows.
    pub target: Tensor,
}

fn frame(traj: &Trajectory, t: isize) -> &[[f64; 2]] {
    &traj.frames[t.max(0) as usize]
}

/// Input state at frame `t` with `HISTORY` finite-difference velocity rows.
///
/// Frames before the first are taken equal to it, matching scenes that start at rest.
/// With `noise > 0` every fluid input position (current and history) receives
/// independent zero-mean Gaussian noise.
pub fn sample_training_input(
    traj: &Trajectory,
    t: usize,
    noise: f64,
    rng: &mut impl Rng,
) -> Result<TrainInput> {
    let n = traj.header.num_particles;
    let dt = traj.header.dt;
    if t + 1 >= traj.frames.len() {
        return Err(Error::config(format!("frame {t} has no successor")));
    }
    let types = &traj.header.node_types;
    let dist = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
    let t = t as isize;
    // window[k] is frame t - HISTORY + k.
    let mut window: Vec<Vec<[f64; 2]>> = (0..=HISTORY as isize)
        .map(|k| frame(traj, t - HISTORY as isize + k).to_vec())
        .collect();
    if noise > 0.0 {
        for w in &mut window {
            for (i, p) in w.iter_mut().enumerate() {
                if types[i] == NodeType::Fluid {
                    p[0] += dist.sample(rng);
                    p[1] += dist.sample(rng);
                }
            }
        }
    }
    let next = frame(traj, t + 1);
    let mut history = Vec::with_capacity(n * 2 * HISTORY);
    let mut target = vec![0.0; n * 2];
    for i in 0..n {
        for k in 0..HISTORY {
            for d in 0..2 {
                history.push((window[k + 1][i][d] - window[k][i][d]) / dt);
            }
        }
        if types[i] == NodeType::Fluid {
            for d in 0..2 {
                let v_last = (window[HISTORY][i][d] - window[HISTORY - 1][i][d]) / dt;
                target[2 * i + d] = ((next[i][d] - window[HISTORY][i][d]) / dt - v_last) / dt;
            }
        }
    }
    let mut state = ParticleState::at_rest(Tensor::from_points(&window[HISTORY]), types.clone())?;
    state.velocity_history = Tensor::new(vec![n, 2 * HISTORY], history)?;
    Ok(TrainInput {
        state,
        target: Tensor::new(vec![n, 2], target)?,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 1.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Velocity and clean target-acceleration statistics over all fluid particles and frames.
pub fn compute_stats(trajs: &[Trajectory]) -> Result<NormStats> {
    let mut vel = [Vec::new(), Vec::new()];
    let mut acc = [Vec::new(), Vec::new()];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for traj in trajs {
        let dt = traj.header.dt;
        for t in 1..traj.frames.len() {
            for (i, ty) in traj.header.node_types.iter().enumerate() {
                if *ty == NodeType::Fluid {
                    for d in 0..2 {
                        vel[d].push((traj.frames[t][i][d] - traj.frames[t - 1][i][d]) / dt);
                    }
                }
            }
        }
        for t in 0..traj.frames.len().saturating_sub(1) {
            let input = sample_training_input(traj, t, 0.0, &mut rng)?;
            for (i, ty) in traj.header.node_types.iter().enumerate() {
                if *ty == NodeType::Fluid {
                    for d in 0..2 {
                        acc[d].push(input.target.get2(i, d));
                    }
                }
            }
        }
    }
    let (vm0, vs0) = mean_std(&vel[0]);
    let (vm1, vs1) = mean_std(&vel[1]);
    let (am0, as0) = mean_std(&acc[0]);
    let (am1, as1) = mean_std(&acc[1]);
    Ok(NormStats {
        velocity_mean: [vm0, vm1],
        velocity_std: [vs0, vs1],
        accel_mean: [am0, am1],
        accel_std: [as0, as1],
    }
    .clamped())
}

fn stack(inputs: &[TrainInput]) -> Result<(Tensor, Tensor, Tensor)> {
    let mut pos = Vec::new();
    let mut hist = Vec::new();
    let mut target = Vec::new();
    for inp in inputs {
        pos.extend_from_slice(inp.state.positions.data());
        hist.extend_from_slice(inp.state.velocity_history.data());
        target.extend_from_slice(inp.target.data());
    }
    let n = pos.len() / 2;
    Ok((
        Tensor::new(vec![n, 2], pos)?,
        Tensor::new(vec![n, 2 * HISTORY], hist)?,
        Tensor::new(vec![n, 2], target)?,
    ))
}

fn check_dataset(trajs: &[Trajectory], hyper: &ModelHyper) -> Result<Vec<(usize, usize)>> {
    let pairs: Vec<(usize, usize)> = trajs
        .iter()
        .enumerate()
        .flat_map(|(k, t)| (0..t.frames.len().saturating_sub(1)).map(move |f| (k, f)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::config("the training dataset has no transitions"));
    }
    if let Some(t) = trajs
        .iter()
        .find(|t| (t.header.dt - hyper.dt).abs() > 1e-12)
    {
        return Err(Error::config(format!(
            "dataset dt {} differs from model dt {}",
            t.header.dt, hyper.dt
        )));
    }
    Ok(pairs)
}

/// Trains a fresh model with Adam on noised one-step transitions.
pub fn train(trajs: &[Trajectory], hyper: ModelHyper, cfg: &TrainConfig) -> Result<TrainOutcome> {
    hyper.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let pairs = check_dataset(trajs, &hyper)?;
    let mut params = ModelParams::init(hyper, cfg.seed)?;
    params.set_stats(compute_stats(trajs)?);
    let stats = params.stats().clone();

    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        clip: None,
        ..AdamConfig::default()
    };
    adam.validate()?;
    let mut flat = params.flat();
    let mut state = AdamState::new(flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let decay_step = (cfg.decay_at * cfg.steps as f64).round() as usize;
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut inputs = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (k, t) = pairs[rng.gen_range(0..pairs.len())];
            inputs.push(sample_training_input(
                &trajs[k],
                t,
                params.hyper.noise_scale,
                &mut rng,
            )?);
        }
        let graphs = inputs
            .iter()
            .map(|i| params.graph(&i.state))
            .collect::<Result<Vec<_>>>()?;
        let graph = ModelGraph::batch(&graphs);
        let (pos, hist, target) = stack(&inputs)?;
        let fluid = graph.fluid_nodes();
        if fluid.is_empty() {
            losses.push(0.0);
            continue;
        }
        let mut tnorm = Vec::with_capacity(2 * fluid.len());
        for &l in &fluid {
            let g = graph.nodes[l];
            for d in 0..2 {
                tnorm.push((target.get2(g, d) - stats.accel_mean[d]) / stats.accel_std[d]);
            }
        }

        let tape = Tape::new();
        let pv: Vec<_> = params
            .tensors()
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect();
        let p = tape.constant(pos);
        let h = tape.constant(hist);
        let out = params.normalized_output(&tape, &pv, &graph, p, h)?;
        let pred = tape.gather(out, fluid.clone().into())?;
        let tv = tape.constant(Tensor::new(vec![fluid.len(), 2], tnorm)?);
        let loss = tape.mean(tape.square(tape.sub(pred, tv)?)?)?;
        let value = tape.scalar_value(loss)?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: "non-finite training loss".into(),
            });
        }
        let grads = tape.backward(loss)?;
        let grad: Vec<f64> = pv.iter().flat_map(|&v| grads.wrt(v).into_data()).collect();
        let lr = if step < decay_step {
            cfg.learning_rate
        } else {
            cfg.learning_rate * cfg.decay_factor
        };
        adam_step_lr(&mut flat, &grad, &mut state, &adam, lr)?;
        params.set_flat(&flat)?;
        losses.push(value);
    }
    Ok(TrainOutcome { params, losses })
}

pub fn train_from_manifest(
    manifest: &Path,
    hyper: ModelHyper,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let (_, trajs) = load_dataset(manifest)?;
    train(&trajs, hyper, cfg)
}

/// Mean squared one-step acceleration error in raw units over fluid particles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneStepError {
    pub model_mse: f64,
    /// Error of always predicting zero acceleration.
    pub baseline_mse: f64,
    pub samples: usize,
}

/// One-step error on clean inputs at every transition of `trajs`.
pub fn one_step_mse(params: &ModelParams, trajs: &[Trajectory]) -> Result<OneStepError> {
    let parts: Vec<(f64, f64, usize)> = trajs
        .par_iter()
        .map(|traj| -> Result<(f64, f64, usize)> {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (mut m, mut b, mut c) = (0.0, 0.0, 0);
            for t in 0..traj.frames.len().saturating_sub(1) {
                let input = sample_training_input(traj, t, 0.0, &mut rng)?;
                let pred = params.predict_accel(&input.state)?;
                for (i, ty) in traj.header.node_types.iter().enumerate() {
                    if *ty != NodeType::Fluid {
                        continue;
                    }
                    for d in 0..2 {
                        let a = input.target.get2(i, d);
                        m += (pred.get2(i, d) - a).powi(2);
                        b += a * a;
                        c += 1;
                    }
                }
            }
            Ok((m, b, c))
        })
        .collect::<Result<_>>()?;
    let (m, b, c) = parts.iter().fold((0.0, 0.0, 0), |acc, p| {
        (acc.0 + p.0, acc.1 + p.1, acc.2 + p.2)
    });
    if c == 0 {
        return Err(Error::config("no fluid transitions to evaluate"));
    }
    Ok(OneStepError {
        model_mse: m / c as f64,
        baseline_mse: b / c as f64,
        samples: c,
    })
}

pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{i},{l}").expect("writing to a String");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
