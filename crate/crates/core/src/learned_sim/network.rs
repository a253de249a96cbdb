use std::sync::Arc;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::state_graph::{build_radius_edges_where, NodeType, StateAux, HISTORY};

use super::{ModelHyper, NormStats};

pub const NODE_FEATURES: usize = 2 * HISTORY + NodeType::COUNT + 4;
pub const EDGE_FEATURES: usize = 3;

/// Indices of one MLP's tensors in the flat parameter list.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Mlp {
    pub w: [usize; 3],
    pub b: [usize; 3],
    pub norm: Option<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub specs: Vec<(String, Vec<usize>)>,
    pub enc_node: Mlp,
    pub enc_edge: Mlp,
    /// `(edge update, node update)` per processor block.
    pub blocks: Vec<(Mlp, Mlp)>,
    pub dec: Mlp,
}

impl Layout {
    pub fn new(hyper: &ModelHyper) -> Self {
        let w = hyper.width;
        let mut specs = Vec::new();
        let enc_node = push_mlp(&mut specs, "encoder.node", NODE_FEATURES, w, w, true);
        let enc_edge = push_mlp(&mut specs, "encoder.edge", EDGE_FEATURES, w, w, true);
        let blocks = (0..hyper.blocks)
            .map(|p| {
                let e = push_mlp(
                    &mut specs,
                    &format!("processor.{p}.edge"),
                    3 * w,
                    w,
                    w,
                    true,
                );
                let n = push_mlp(
                    &mut specs,
                    &format!("processor.{p}.node"),
                    2 * w,
                    w,
                    w,
                    true,
                );
                (e, n)
            })
            .collect();
        let dec = push_mlp(&mut specs, "decoder", w, w, 2, false);
        Layout {
            specs,
            enc_node,
            enc_edge,
            blocks,
            dec,
        }
    }
}

fn push_mlp(
    specs: &mut Vec<(String, Vec<usize>)>,
    name: &str,
    input: usize,
    hidden: usize,
    out: usize,
    norm: bool,
) -> Mlp {
    let dims = [(input, hidden), (hidden, hidden), (hidden, out)];
    let mut w = [0; 3];
    let mut b = [0; 3];
    for (l, (i, o)) in dims.into_iter().enumerate() {
        w[l] = specs.len();
        specs.push((format!("{name}.{l}.weight"), vec![i, o]));
        b[l] = specs.len();
        specs.push((format!("{name}.{l}.bias"), vec![o]));
    }
    let norm = norm.then(|| {
        let g = specs.len();
        specs.push((format!("{name}.norm.gain"), vec![out]));
        specs.push((format!("{name}.norm.bias"), vec![out]));
        [g, g + 1]
    });
    Mlp { w, b, norm }
}

/// Node subset and edges the network runs on.
///
/// Only non-removed particles take part, and edges between two non-fluid
/// particles are dropped. Non-fluid particles without any edge cannot influence
/// a fluid prediction, so they are left out of `nodes`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    /// Global particle index of each graph node, ascending within one scene.
    pub nodes: Arc<[usize]>,
    pub node_types: Vec<NodeType>,
    /// Local indices.
    pub senders: Arc<[usize]>,
    pub receivers: Arc<[usize]>,
    /// Particle count of the full state(s).
    pub num_particles: usize,
}

impl ModelGraph {
    pub fn build(positions: &Tensor, aux: &StateAux, radius: f64) -> Result<Self> {
        let n = aux.node_types.len();
        if positions.shape() != [n, 2] {
            return Err(Error::shape(
                "model graph",
                format!("positions {:?} for {n} nodes", positions.shape()),
            ));
        }
        let points = positions.points();
        let edges = build_radius_edges_where(&points, radius, |i| !aux.removed[i])?;
        let fluid = |i: usize| aux.node_types[i] == NodeType::Fluid;
        let mut used = vec![false; n];
        let mut pairs = Vec::with_capacity(edges.len());
        for (s, r) in edges.pairs() {
            if fluid(s) || fluid(r) {
                used[s] = true;
                used[r] = true;
                pairs.push((s, r));
            }
        }
        for i in 0..n {
            if fluid(i) && !aux.removed[i] {
                used[i] = true;
            }
        }
        let mut local = vec![usize::MAX; n];
        let mut nodes = Vec::new();
        for i in 0..n {
            if used[i] {
                local[i] = nodes.len();
                nodes.push(i);
            }
        }
        Ok(ModelGraph {
            node_types: nodes.iter().map(|&i| aux.node_types[i]).collect(),
            nodes: nodes.into(),
            senders: pairs.iter().map(|p| local[p.0]).collect(),
            receivers: pairs.iter().map(|p| local[p.1]).collect(),
            num_particles: n,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.senders.len()
    }

    /// Graph of several scenes stacked along the particle axis.
    pub fn batch(parts: &[ModelGraph]) -> ModelGraph {
        let mut nodes = Vec::new();
        let mut node_types = Vec::new();
        let mut senders = Vec::new();
        let mut receivers = Vec::new();
        let mut particle_offset = 0;
        for g in parts {
            let node_offset = nodes.len();
            nodes.extend(g.nodes.iter().map(|i| i + particle_offset));
            node_types.extend_from_slice(&g.node_types);
            senders.extend(g.senders.iter().map(|s| s + node_offset));
            receivers.extend(g.receivers.iter().map(|r| r + node_offset));
            particle_offset += g.num_particles;
        }
        ModelGraph {
            nodes: nodes.into(),
            node_types,
            senders: senders.into(),
            receivers: receivers.into(),
            num_particles: particle_offset,
        }
    }

    /// Local indices of fluid nodes.
    pub fn fluid_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes())
            .filter(|&i| self.node_types[i] == NodeType::Fluid)
            .collect()
    }
}

/// Node and edge latents of a graph.
#[derive(Clone, Copy, Debug)]
pub struct Latents {
    pub nodes: Var,
    pub edges: Var,
}

fn diag(values: &[f64]) -> Tensor {
    let n = values.len();
    let mut data = vec![0.0; n * n];
    for (i, v) in values.iter().enumerate() {
        data[i * n + i] = *v;
    }
    Tensor::from_parts(vec![n, n], data)
}

pub(crate) fn apply_mlp(tape: &Tape, pv: &[Var], m: &Mlp, x: Var) -> Result<Var> {
    let h = tape.affine(x, pv[m.w[0]], pv[m.b[0]])?;
    mlp_tail(tape, pv, m, h)
}

/// Everything after the first affine layer.
fn mlp_tail(tape: &Tape, pv: &[Var], m: &Mlp, first: Var) -> Result<Var> {
    let h = tape.relu(first)?;
    let h = tape.affine(h, pv[m.w[1]], pv[m.b[1]])?;
    let h = tape.relu(h)?;
    let out = tape.affine(h, pv[m.w[2]], pv[m.b[2]])?;
    match m.norm {
        Some([g, b]) => tape.layer_norm(out, pv[g], pv[b]),
        None => Ok(out),
    }
}

/// Input features and encoder MLPs.
///
/// `positions` and `history` cover every particle of the state(s); the graph
/// selects the rows it needs.
pub(crate) fn encode(
    tape: &Tape,
    hyper: &ModelHyper,
    stats: &NormStats,
    layout: &Layout,
    pv: &[Var],
    graph: &ModelGraph,
    positions: Var,
    history: Var,
) -> Result<Latents> {
    let n = graph.num_nodes();
    let r = hyper.radius;
    let pos = tape.gather(positions, Arc::clone(&graph.nodes))?;
    let hist = tape.gather(history, Arc::clone(&graph.nodes))?;

    let inv: Vec<f64> = (0..2 * HISTORY)
        .map(|c| 1.0 / stats.velocity_std[c % 2])
        .collect();
    let shift: Vec<f64> = (0..2 * HISTORY)
        .map(|c| -stats.velocity_mean[c % 2] / stats.velocity_std[c % 2])
        .collect();
    let vel = tape.affine(
        hist,
        tape.constant(diag(&inv)),
        tape.constant(Tensor::vector(shift)),
    )?;

    let mut onehot = vec![0.0; n * NodeType::COUNT];
    for (i, t) in graph.node_types.iter().enumerate() {
        onehot[i * NodeType::COUNT + t.index()] = 1.0;
    }
    let onehot = tape.constant(Tensor::from_parts(vec![n, NodeType::COUNT], onehot));

    let [x0, y0, x1, y1] = hyper.bounds;
    let wall_w = Tensor::from_parts(vec![2, 4], vec![1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0, -1.0]);
    let wall_b = Tensor::vector(vec![-x0, x1, -y0, y1]);
    let walls = tape.affine(pos, tape.constant(wall_w), tape.constant(wall_b))?;
    let walls = tape.clamp(walls, -r, r)?;
    let walls = tape.scale(walls, 1.0 / r)?;

    let node_in = tape.concat(&[vel, onehot, walls], 1)?;

    let ps = tape.gather(pos, Arc::clone(&graph.senders))?;
    let pr = tape.gather(pos, Arc::clone(&graph.receivers))?;
    let disp = tape.sub(pr, ps)?;
    let dist = tape.sqrt(tape.row_sum(tape.square(disp)?)?)?;
    let edge_in = tape.concat(&[disp, dist], 1)?;
    let edge_in = tape.scale(edge_in, 1.0 / r)?;

    Ok(Latents {
        nodes: apply_mlp(tape, pv, &layout.enc_node, node_in)?,
        edges: apply_mlp(tape, pv, &layout.enc_edge, edge_in)?,
    })
}

/// Residual message passing.
///
/// The first edge-MLP layer acting on `[edge, sender, receiver]` is evaluated as
/// three products, with the node products computed once per node.
pub(crate) fn process(
    tape: &Tape,
    hyper: &ModelHyper,
    layout: &Layout,
    pv: &[Var],
    graph: &ModelGraph,
    latents: Latents,
) -> Result<Latents> {
    let w = hyper.width;
    let n = graph.num_nodes();
    let mut nodes = latents.nodes;
    let mut edges = latents.edges;
    for (em, nm) in &layout.blocks {
        let w0 = pv[em.w[0]];
        let we = tape.slice(w0, 0, 0, w)?;
        let ws = tape.slice(w0, 0, w, 2 * w)?;
        let wr = tape.slice(w0, 0, 2 * w, 3 * w)?;
        let from_edge = tape.affine(edges, we, pv[em.b[0]])?;
        let from_s = tape.gather(tape.matmul(nodes, ws)?, Arc::clone(&graph.senders))?;
        let from_r = tape.gather(tape.matmul(nodes, wr)?, Arc::clone(&graph.receivers))?;
        let first = tape.add(tape.add(from_edge, from_s)?, from_r)?;
        let update = mlp_tail(tape, pv, em, first)?;
        edges = tape.add(edges, update)?;

        let agg = tape.scatter_add(edges, Arc::clone(&graph.receivers), n)?;
        let node_in = tape.concat(&[nodes, agg], 1)?;
        let update = apply_mlp(tape, pv, nm, node_in)?;
        nodes = tape.add(nodes, update)?;
    }
    Ok(Latents { nodes, edges })
}

/// Normalized decoder output, one row per graph node.
pub(crate) fn decode_normalized(
    tape: &Tape,
    layout: &Layout,
    pv: &[Var],
    latents: Latents,
) -> Result<Var> {
    apply_mlp(tape, pv, &layout.dec, latents.nodes)
}

pub(crate) fn denormalize(tape: &Tape, stats: &NormStats, out: Var) -> Result<Var> {
    tape.affine(
        out,
        tape.constant(diag(&stats.accel_std)),
        tape.constant(Tensor::vector(stats.accel_mean.to_vec())),
    )
}
