//! Learned simulator: an encode-process-decode graph network that predicts
//! per-particle accelerations, plus its training loop and ensembles.

mod io;
mod network;
mod train;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use io::{read_weights, write_weights, WEIGHTS_MAGIC};
pub use network::{Latents, ModelGraph, EDGE_FEATURES, NODE_FEATURES};
pub use train::{
    compute_stats, one_step_mse, sample_training_input, train, train_from_manifest, write_loss_csv,
    OneStepError, TrainConfig, TrainInput, TrainOutcome,
};

use crate::autodiff::{rollout_forward, RolloutStep, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::oracle_sim::DIVERGENCE_LIMIT;
use crate::state_graph::{advance_on_tape, ParticleState, StateAux, StateVars, DEFAULT_DT};
use network::Layout;

/// Floor applied to every normalization standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelHyper {
    pub width: usize,
    pub blocks: usize,
    /// Connectivity radius for graph edges.
    pub radius: f64,
    /// Std of the Gaussian noise added to input positions during training.
    pub noise_scale: f64,
    pub dt: f64,
    /// Walls `[x_min, y_min, x_max, y_max]` used for the wall-distance features.
    pub bounds: [f64; 4],
}

impl Default for ModelHyper {
    fn default() -> Self {
        ModelHyper {
            width: 32,
            blocks: 3,
            radius: 0.045,
            noise_scale: 3e-4,
            dt: DEFAULT_DT,
            bounds: [0.0, 0.0, 1.0, 1.0],
        }
    }
}

impl ModelHyper {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::config("hidden width must be positive"));
        }
        if !(self.radius > 0.0 && self.dt > 0.0 && self.noise_scale >= 0.0) {
            return Err(Error::config(
                "radius and dt must be positive, noise scale non-negative",
            ));
        }
        Ok(())
    }
}

/// Per-dimension normalization statistics of velocities and target accelerations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub velocity_mean: [f64; 2],
    pub velocity_std: [f64; 2],
    pub accel_mean: [f64; 2],
    pub accel_std: [f64; 2],
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats {
            velocity_mean: [0.0; 2],
            velocity_std: [1.0; 2],
            accel_mean: [0.0; 2],
            accel_std: [1.0; 2],
        }
    }
}

impl NormStats {
    /// Copy with every std raised to at least [`STD_FLOOR`].
    pub fn clamped(&self) -> Self {
        let f = |s: [f64; 2]| {
            s.map(|v| {
                if v.is_finite() {
                    v.max(STD_FLOOR)
                } else {
                    STD_FLOOR
                }
            })
        };
        NormStats {
            velocity_std: f(self.velocity_std),
            accel_std: f(self.accel_std),
            ..self.clone()
        }
    }
}

/// Network weights, normalization statistics, and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub hyper: ModelHyper,
    stats: NormStats,
    tensors: Vec<Tensor>,
    layout: Arc<Layout>,
}

impl ModelParams {
    /// Uniform fan-in initialization; layer-norm gains start at one and biases at zero.
    pub fn init(hyper: ModelHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let layout = Layout::new(&hyper);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout
            .specs
            .iter()
            .map(|(name, shape)| {
                if name.ends_with("norm.gain") {
                    Tensor::filled(shape, 1.0)
                } else if name.ends_with("norm.bias") {
                    Tensor::zeros(shape)
                } else {
                    // Biases share the fan-in of their weight matrix.
                    let fan_in = if shape.len() == 2 {
                        shape[0]
                    } else {
                        fan_in_of(&layout, name)
                    };
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let n: usize = shape.iter().product();
                    Tensor::from_parts(
                        shape.clone(),
                        (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
                    )
                }
            })
            .collect();
        Ok(ModelParams {
            hyper,
            stats: NormStats::default(),
            tensors,
            layout: Arc::new(layout),
        })
    }

    pub(crate) fn from_parts(
        hyper: ModelHyper,
        stats: NormStats,
        tensors: Vec<Tensor>,
    ) -> Result<Self> {
        hyper.validate()?;
        let layout = Layout::new(&hyper);
        if tensors.len() != layout.specs.len()
            || tensors
                .iter()
                .zip(&layout.specs)
                .any(|(t, (_, s))| t.shape() != s.as_slice())
        {
            return Err(Error::shape(
                "model params",
                "weight shapes differ from the hyperparameters",
            ));
        }
        Ok(ModelParams {
            hyper,
            stats: stats.clamped(),
            tensors,
            layout: Arc::new(layout),
        })
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn set_stats(&mut self, stats: NormStats) {
        self.stats = stats.clamped();
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// `(name, shape)` of every weight tensor in declaration order.
    pub fn tensor_specs(&self) -> &[(String, Vec<usize>)] {
        &self.layout.specs
    }

    pub fn num_weights(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_weights() {
            return Err(Error::shape(
                "set_flat",
                format!("{} values for {} weights", flat.len(), self.num_weights()),
            ));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn graph(&self, state: &ParticleState) -> Result<ModelGraph> {
        ModelGraph::build(
            &state.positions,
            &state.aux(Default::default()),
            self.hyper.radius,
        )
    }

    /// Encoder stage on a fresh tape.
    pub fn encode(&self, state: &ParticleState) -> Result<(Tensor, Tensor, ModelGraph)> {
        let graph = self.graph(state)?;
        let tape = Tape::new();
        let pv = self.bind(&tape);
        let (p, h) = (
            tape.constant(state.positions.clone()),
            tape.constant(state.velocity_history.clone()),
        );
        let lat = network::encode(
            &tape,
            &self.hyper,
            &self.stats,
            &self.layout,
            &pv,
            &graph,
            p,
            h,
        )?;
        Ok((tape.value(lat.nodes), tape.value(lat.edges), graph))
    }

    /// Processor stage applied to given latents.
    pub fn process(
        &self,
        nodes: &Tensor,
        edges: &Tensor,
        graph: &ModelGraph,
    ) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let pv = self.bind(&tape);
        let lat = Latents {
            nodes: tape.constant(nodes.clone()),
            edges: tape.constant(edges.clone()),
        };
        let out = network::process(&tape, &self.hyper, &self.layout, &pv, graph, lat)?;
        Ok((tape.value(out.nodes), tape.value(out.edges)))
    }

    /// Decoder stage: de-normalized accelerations, one row per latent node.
    pub fn decode(&self, nodes: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let pv = self.bind(&tape);
        let lat = Latents {
            nodes: tape.constant(nodes.clone()),
            edges: tape.constant(Tensor::zeros(&[0, self.hyper.width])),
        };
        let out = network::decode_normalized(&tape, &self.layout, &pv, lat)?;
        Ok(tape.value(network::denormalize(&tape, &self.stats, out)?))
    }

    fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect()
    }

    /// Per-particle accelerations `[N, 2]` recorded on `tape`; rows of particles
    /// outside the graph are zero.
    pub fn predict_on_tape(
        &self,
        tape: &Tape,
        pv: &[Var],
        positions: Var,
        history: Var,
        aux: &StateAux,
    ) -> Result<Var> {
        let graph = ModelGraph::build(&tape.value(positions), aux, self.hyper.radius)?;
        let out = self.normalized_output(tape, pv, &graph, positions, history)?;
        let acc = network::denormalize(tape, &self.stats, out)?;
        tape.scatter_add(acc, Arc::clone(&graph.nodes), graph.num_particles)
    }

    /// Normalized decoder output per graph node.
    pub(crate) fn normalized_output(
        &self,
        tape: &Tape,
        pv: &[Var],
        graph: &ModelGraph,
        positions: Var,
        history: Var,
    ) -> Result<Var> {
        if pv.len() != self.tensors.len() {
            return Err(Error::shape(
                "model",
                format!(
                    "{} parameter vars for {} tensors",
                    pv.len(),
                    self.tensors.len()
                ),
            ));
        }
        let lat = network::encode(
            tape,
            &self.hyper,
            &self.stats,
            &self.layout,
            pv,
            graph,
            positions,
            history,
        )?;
        let lat = network::process(tape, &self.hyper, &self.layout, pv, graph, lat)?;
        network::decode_normalized(tape, &self.layout, pv, lat)
    }

    /// Predicted accelerations for every particle of `state`.
    pub fn predict_accel(&self, state: &ParticleState) -> Result<Tensor> {
        let tape = Tape::new();
        let pv = self.bind(&tape);
        let p = tape.constant(state.positions.clone());
        let h = tape.constant(state.velocity_history.clone());
        let a = self.predict_on_tape(&tape, &pv, p, h, &state.aux(Default::default()))?;
        Ok(tape.value(a))
    }
}

fn fan_in_of(layout: &Layout, bias_name: &str) -> usize {
    let weight = bias_name.replace(".bias", ".weight");
    layout
        .specs
        .iter()
        .find(|(n, _)| *n == weight)
        .map(|(_, s)| s[0])
        .unwrap_or(1)
}

/// One learned transition as a differentiable rollout step. The parameter
/// slice passed to [`RolloutStep::step`] must be the model's weight tensors.
#[derive(Clone, Copy, Debug)]
pub struct ModelStep<'a> {
    pub model: &'a ModelParams,
}

impl RolloutStep for ModelStep<'_> {
    type Aux = StateAux;

    fn step(
        &self,
        tape: &Tape,
        state: &[Var],
        aux: &StateAux,
        params: &[Var],
    ) -> Result<(Vec<Var>, StateAux)> {
        let sv = StateVars::from_slice(state)?;
        let acc = self
            .model
            .predict_on_tape(tape, params, sv.positions, sv.history, aux)?;
        let (next, next_aux) = advance_on_tape(tape, sv, aux, acc, self.model.hyper.dt)?;
        Ok((next.to_vec(), next_aux))
    }
}

/// Errors when a coordinate of a non-removed particle is non-finite or beyond the divergence limit.
pub fn check_divergence(state: &ParticleState, step: usize) -> Result<()> {
    for i in 0..state.len() {
        if state.removed[i] {
            continue;
        }
        let p = state.positions.point(i);
        if p.iter()
            .any(|c| !c.is_finite() || c.abs() > DIVERGENCE_LIMIT)
        {
            return Err(Error::Divergence {
                step,
                detail: format!("particle {i} reached ({}, {})", p[0], p[1]),
            });
        }
    }
    Ok(())
}

/// One learned transition. The floor behaviour comes from `floor`.
pub fn model_step(
    state: &ParticleState,
    params: &ModelParams,
    floor: crate::state_graph::FloorMode,
) -> Result<ParticleState> {
    let aux = state.aux(floor);
    let (next, next_aux) = rollout_forward(
        &ModelStep { model: params },
        &state.tensors(),
        &aux,
        params.tensors(),
        1,
        false,
    )?
    .pop()
    .expect("final state");
    ParticleState::from_tensors(&next, &next_aux)
}

/// `steps` learned transitions; returns all `steps + 1` states.
pub fn rollout_model(
    initial: &ParticleState,
    params: &ModelParams,
    steps: usize,
    floor: crate::state_graph::FloorMode,
) -> Result<Vec<ParticleState>> {
    let mut out = Vec::with_capacity(steps + 1);
    out.push(initial.clone());
    for k in 0..steps {
        let next = model_step(&out[k], params, floor)?;
        check_divergence(&next, k)?;
        out.push(next);
    }
    Ok(out)
}

/// Models trained on disjoint data splits, sharing hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    members: Vec<ModelParams>,
}

impl Ensemble {
    pub fn new(members: Vec<ModelParams>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::config("an ensemble needs at least one member"));
        };
        if members.iter().any(|m| m.hyper != first.hyper) {
            return Err(Error::config(
                "ensemble members have different hyperparameters",
            ));
        }
        Ok(Ensemble { members })
    }

    pub fn members(&self) -> &[ModelParams] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Mean value and mean gradient of `objective` over the ensemble members, evaluated in parallel.
pub fn ensemble_value_and_grad<F>(
    objective: F,
    ensemble: &Ensemble,
    phi: &[f64],
) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&ModelParams, &[f64]) -> Result<(f64, Vec<f64>)> + Sync,
{
    let results: Vec<(f64, Vec<f64>)> = ensemble
        .members
        .par_iter()
        .map(|m| objective(m, phi))
        .collect::<Result<_>>()?;
    let k = results.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; phi.len()];
    for (v, g) in &results {
        if g.len() != grad.len() {
            return Err(Error::shape(
                "ensemble",
                format!(
                    "gradient of length {} for {} parameters",
                    g.len(),
                    grad.len()
                ),
            ));
        }
        value += v;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    grad.iter_mut().for_each(|g| *g /= k);
    Ok((value / k, grad))
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::state_graph::{FloorMode, NodeType};

    fn scene(n: usize, seed: u64) -> ParticleState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.gen_range(0.4..0.5), rng.gen_range(0.4..0.5)])
            .collect();
        let mut s =
            ParticleState::at_rest(Tensor::from_points(&pts), vec![NodeType::Fluid; n]).unwrap();
        let hist = (0..n * 4).map(|_| rng.gen_range(-0.2..0.2)).collect();
        s.velocity_history = Tensor::new(vec![n, 4], hist).unwrap();
        s
    }

    fn model() -> ModelParams {
        ModelParams::init(ModelHyper::default(), 4).unwrap()
    }

    #[test]
    fn single_node_encoding() {
        let s = ParticleState::at_rest(Tensor::from_points(&[[0.5, 0.5]]), vec![NodeType::Fluid])
            .unwrap();
        let (nodes, edges, g) = model().encode(&s).unwrap();
        assert_eq!(nodes.shape(), &[1, 32]);
        assert_eq!(edges.shape(), &[0, 32]);
        assert_eq!(g.num_edges(), 0);
        assert!(nodes.is_finite());
        assert_eq!(NODE_FEATURES, 11);
    }

    #[test]
    fn zero_blocks_is_identity() {
        let m = ModelParams::init(
            ModelHyper {
                blocks: 0,
                ..ModelHyper::default()
            },
            1,
        )
        .unwrap();
        let s = scene(6, 2);
        let (nodes, edges, g) = m.encode(&s).unwrap();
        let (n2, e2) = m.process(&nodes, &edges, &g).unwrap();
        assert_eq!(n2, nodes);
        assert_eq!(e2, edges);
    }

    #[test]
    fn decoder_output_is_denormalized() {
        let mut m = model();
        let last_w = m.layout.dec.w[2];
        let last_b = m.layout.dec.b[2];
        m.tensors[last_w] = Tensor::zeros(m.tensors[last_w].shape());
        m.tensors[last_b] = Tensor::zeros(&[2]);
        m.set_stats(NormStats {
            accel_mean: [0.25, -1.0],
            accel_std: [0.0, 2.0],
            ..NormStats::default()
        });
        assert_eq!(m.stats().accel_std[0], STD_FLOOR);
        let out = m.decode(&Tensor::filled(&[3, 32], 0.7)).unwrap();
        assert_eq!(out.data(), &[0.25, -1.0, 0.25, -1.0, 0.25, -1.0]);
    }

    #[test]
    fn permutation_equivariance() {
        let m = model();
        let s = scene(6, 8);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let pts: Vec<[f64; 2]> = perm.iter().map(|&i| s.positions.point(i)).collect();
        let hist: Vec<f64> = perm
            .iter()
            .flat_map(|&i| s.velocity_history.row(i).to_vec())
            .collect();
        let mut p =
            ParticleState::at_rest(Tensor::from_points(&pts), vec![NodeType::Fluid; 6]).unwrap();
        p.velocity_history = Tensor::new(vec![6, 4], hist).unwrap();
        let a = m.predict_accel(&s).unwrap();
        let b = m.predict_accel(&p).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for d in 0..2 {
                assert!((b.get2(k, d) - a.get2(i, d)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn translation_with_walls_leaves_prediction_unchanged() {
        let m = model();
        let s = scene(8, 5);
        let delta = [0.137, -0.021];
        let mut t = s.clone();
        t.positions = s.positions.map(|v| v);
        let shifted: Vec<[f64; 2]> = s
            .positions
            .points()
            .iter()
            .map(|p| [p[0] + delta[0], p[1] + delta[1]])
            .collect();
        t.positions = Tensor::from_points(&shifted);
        let mut mt = m.clone();
        let [x0, y0, x1, y1] = m.hyper.bounds;
        mt.hyper.bounds = [x0 + delta[0], y0 + delta[1], x1 + delta[0], y1 + delta[1]];
        let a = m.predict_accel(&s).unwrap();
        let b = mt.predict_accel(&t).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn design_nodes_do_not_move_and_steps_are_deterministic() {
        let m = model();
        let mut s = scene(5, 3);
        let mut types = s.node_types.to_vec();
        types[4] = NodeType::Design;
        s.node_types = types.into();
        let a = model_step(&s, &m, FloorMode::Wall).unwrap();
        let b = model_step(&s, &m, FloorMode::Wall).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.positions.point(4), s.positions.point(4));
        assert_ne!(a.positions.point(0), s.positions.point(0));
    }

    #[test]
    fn rollout_composition() {
        let m = model();
        let s = scene(5, 9);
        assert_eq!(
            rollout_model(&s, &m, 0, FloorMode::Wall).unwrap(),
            vec![s.clone()]
        );
        let r = rollout_model(&s, &m, 3, FloorMode::Wall).unwrap();
        let manual = model_step(
            &model_step(
                &model_step(&s, &m, FloorMode::Wall).unwrap(),
                &m,
                FloorMode::Wall,
            )
            .unwrap(),
            &m,
            FloorMode::Wall,
        )
        .unwrap();
        assert_eq!(r[3], manual);
    }

    #[test]
    fn step_gradient_matches_finite_differences() {
        let m = model();
        let mut s = scene(5, 12);
        s.positions = Tensor::from_points(&[
            [0.45, 0.45],
            [0.47, 0.452],
            [0.44, 0.47],
            [0.46, 0.43],
            [0.48, 0.47],
        ]);
        let f = |s: &ParticleState| {
            model_step(s, &m, FloorMode::Wall)
                .unwrap()
                .positions
                .get2(0, 1)
        };

        let tape = Tape::new();
        let p = tape.leaf(s.positions.clone());
        let h = tape.constant(s.velocity_history.clone());
        let r = tape.constant(s.removed_positions.clone());
        let pv = m.bind(&tape);
        let step = ModelStep { model: &m };
        let (next, _) = step
            .step(&tape, &[p, h, r], &s.aux(FloorMode::Wall), &pv)
            .unwrap();
        let y0 = tape
            .slice(tape.slice(next[0], 0, 0, 1).unwrap(), 1, 1, 2)
            .unwrap();
        let root = tape.sum(y0).unwrap();
        let g = tape.backward(root).unwrap().wrt(p).get2(1, 0);

        let h_fd = 1e-6;
        let mut plus = s.clone();
        plus.positions.data_mut()[2] += h_fd;
        let mut minus = s.clone();
        minus.positions.data_mut()[2] -= h_fd;
        let fd = (f(&plus) - f(&minus)) / (2.0 * h_fd);
        assert!(g != 0.0);
        assert!((g - fd).abs() / fd.abs().max(1e-12) < 1e-3, "{g} vs {fd}");
    }

    #[test]
    fn ensemble_means() {
        let a = model();
        let b = ModelParams::init(ModelHyper::default(), 99).unwrap();
        let objective = |m: &ModelParams, phi: &[f64]| -> Result<(f64, Vec<f64>)> {
            let w = m.tensors()[0].data()[0];
            Ok((w * phi[0], vec![w, 2.0 * w]))
        };
        let one = ensemble_value_and_grad(
            objective,
            &Ensemble::new(vec![a.clone()]).unwrap(),
            &[2.0, 0.0],
        )
        .unwrap();
        let three = ensemble_value_and_grad(
            objective,
            &Ensemble::new(vec![a.clone(), a.clone(), a.clone()]).unwrap(),
            &[2.0, 0.0],
        )
        .unwrap();
        for (x, y) in one.1.iter().zip(&three.1) {
            assert!((x - y).abs() < 1e-12);
        }
        let two = ensemble_value_and_grad(
            objective,
            &Ensemble::new(vec![a.clone(), b.clone()]).unwrap(),
            &[2.0, 0.0],
        )
        .unwrap();
        let (wa, wb) = (a.tensors()[0].data()[0], b.tensors()[0].data()[0]);
        assert_eq!(two.1, vec![(wa + wb) / 2.0, (2.0 * wa + 2.0 * wb) / 2.0]);
        assert!(Ensemble::new(vec![]).is_err());
    }
}
