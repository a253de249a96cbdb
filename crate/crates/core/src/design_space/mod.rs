//! Design functions: parameters `φ` plus fixed scene geometry to initial states.
//!
//! Every kind produces a set of vertices on the tape and a list of vertex pairs
//! forming straight segments. Design particles are a constant linear
//! interpolation of those vertices, so the whole map stays differentiable.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::oracle_sim::Segment;
use crate::state_graph::{NodeType, ParticleState, HISTORY};

/// Default spacing of design particles along tool segments.
pub const DESIGN_SPACING: f64 = 0.015;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignKind {
    RelativeJoints,
    AbsoluteJoints,
    RotorGrid,
    Heightfield,
    HeightfieldControlPoints,
}

impl DesignKind {
    pub fn name(self) -> &'static str {
        match self {
            DesignKind::RelativeJoints => "relative-joints",
            DesignKind::AbsoluteJoints => "absolute-joints",
            DesignKind::RotorGrid => "rotor-grid",
            DesignKind::Heightfield => "heightfield",
            DesignKind::HeightfieldControlPoints => "heightfield-control-points",
        }
    }
}

/// A chain of rigid segments hanging off an anchor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointTool {
    pub anchor: [f64; 2],
    pub tool_length: f64,
    pub joints: usize,
    pub spacing: f64,
    /// Prepends a free `[dx, dy]` translation of the whole tool to `φ`.
    #[serde(default)]
    pub global_offset: bool,
    /// Starting translation used by [`DesignSpace::initial_phi`] when `global_offset` is set.
    #[serde(default)]
    pub initial_offset: [f64; 2],
}

/// An `n × n` grid of straight rotors centred in a box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotorGrid {
    pub n: usize,
    pub domain_box: [f64; 4],
    pub rotor_length: f64,
    pub spacing: f64,
}

/// A polyline of `nodes` points over `x_range` displaced vertically by `γ_H tanh(φ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Heightfield {
    pub nodes: usize,
    pub x_range: [f64; 2],
    pub base_y: f64,
    pub gamma_h: f64,
    pub spacing: f64,
    /// Number of control values for the control-point kind.
    #[serde(default)]
    pub control_points: usize,
}

/// Static geometry `α` of a design space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DesignAlpha {
    Joints(JointTool),
    Rotors(RotorGrid),
    Field(Heightfield),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSpace {
    pub kind: DesignKind,
    pub alpha: DesignAlpha,
}

/// Tape handles produced by a design function.
#[derive(Clone, Copy, Debug)]
pub struct DesignVars {
    /// `[V, 2]` polyline or rotor end points.
    pub vertices: Var,
    /// `[D, 2]` design particle positions.
    pub particles: Var,
    /// `[M, 1]` heightfield parameters before `tanh` (heightfield kinds only).
    pub field: Option<Var>,
}

/// Plain values of a design.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignGeometry {
    pub vertices: Vec<[f64; 2]>,
    pub particles: Tensor,
    pub segments: Vec<Segment>,
    pub field: Option<Vec<f64>>,
}

fn constant(tape: &Tape, rows: usize, cols: usize, data: Vec<f64>) -> Var {
    tape.constant(Tensor::new(vec![rows, cols], data).expect("consistent constant shape"))
}

impl DesignSpace {
    pub fn new(kind: DesignKind, alpha: DesignAlpha) -> Result<Self> {
        let d = DesignSpace { kind, alpha };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{what} must be positive")))
            }
        };
        match (&self.kind, &self.alpha) {
            (DesignKind::RelativeJoints | DesignKind::AbsoluteJoints, DesignAlpha::Joints(j)) => {
                positive(j.tool_length, "tool length")?;
                positive(j.spacing, "spacing")?;
                if j.joints == 0 {
                    return Err(Error::config("a joint tool needs at least one joint"));
                }
            }
            (DesignKind::RotorGrid, DesignAlpha::Rotors(r)) => {
                positive(r.rotor_length, "rotor length")?;
                positive(r.spacing, "spacing")?;
                if r.n == 0
                    || !(r.domain_box[2] > r.domain_box[0] && r.domain_box[3] > r.domain_box[1])
                {
                    return Err(Error::config("invalid rotor grid"));
                }
            }
            (
                DesignKind::Heightfield | DesignKind::HeightfieldControlPoints,
                DesignAlpha::Field(h),
            ) => {
                positive(h.gamma_h, "gamma_h")?;
                positive(h.spacing, "spacing")?;
                if h.nodes < 2 || !(h.x_range[1] > h.x_range[0]) {
                    return Err(Error::config(
                        "a heightfield needs two or more nodes over a non-empty range",
                    ));
                }
                if self.kind == DesignKind::HeightfieldControlPoints && h.control_points < 2 {
                    return Err(Error::config(
                        "control-point heightfields need at least two control points",
                    ));
                }
            }
            (kind, _) => {
                return Err(Error::config(format!(
                    "geometry does not match design kind {}",
                    kind.name()
                )));
            }
        }
        Ok(())
    }

    /// Length of `φ`.
    pub fn arity(&self) -> usize {
        match &self.alpha {
            DesignAlpha::Joints(j) => j.joints + if j.global_offset { 2 } else { 0 },
            DesignAlpha::Rotors(r) => r.n * r.n,
            DesignAlpha::Field(h) => match self.kind {
                DesignKind::HeightfieldControlPoints => h.control_points,
                _ => h.nodes,
            },
        }
    }

    /// Starting design: all zeros, plus the configured offset for offset tools.
    pub fn initial_phi(&self) -> Vec<f64> {
        let mut phi = vec![0.0; self.arity()];
        if let DesignAlpha::Joints(j) = &self.alpha {
            if j.global_offset {
                phi[..2].copy_from_slice(&j.initial_offset);
            }
        }
        phi
    }

    fn check_phi(&self, len: usize) -> Result<()> {
        if len != self.arity() {
            return Err(Error::shape(
                "design",
                format!(
                    "{} parameters for {} with arity {}",
                    len,
                    self.kind.name(),
                    self.arity()
                ),
            ));
        }
        Ok(())
    }

    /// Vertex pairs that form straight segments.
    pub fn segment_pairs(&self) -> Vec<(usize, usize)> {
        match &self.alpha {
            DesignAlpha::Joints(j) => (0..j.joints).map(|k| (k, k + 1)).collect(),
            DesignAlpha::Rotors(r) => {
                let m = r.n * r.n;
                (0..m).map(|k| (k, m + k)).collect()
            }
            DesignAlpha::Field(h) => (0..h.nodes - 1).map(|k| (k, k + 1)).collect(),
        }
    }

    fn num_vertices(&self) -> usize {
        match &self.alpha {
            DesignAlpha::Joints(j) => j.joints + 1,
            DesignAlpha::Rotors(r) => 2 * r.n * r.n,
            DesignAlpha::Field(h) => h.nodes,
        }
    }

    /// Sub-intervals per segment so that particle spacing never exceeds the configured spacing.
    fn pieces(&self) -> usize {
        let (len, spacing) = match &self.alpha {
            DesignAlpha::Joints(j) => (j.tool_length / j.joints as f64, j.spacing),
            DesignAlpha::Rotors(r) => (r.rotor_length, r.spacing),
            DesignAlpha::Field(h) => (
                (h.x_range[1] - h.x_range[0]) / (h.nodes - 1) as f64,
                h.spacing,
            ),
        };
        ((len / spacing - 1e-9).ceil() as usize).max(1)
    }

    /// Constant `[D, V]` matrix mapping vertices to design particles.
    ///
    /// Each segment contributes its start and interior points; vertices that start
    /// no segment are appended at the end.
    pub fn interpolation(&self) -> Tensor {
        let v = self.num_vertices();
        let p = self.pieces();
        let pairs = self.segment_pairs();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for &(a, b) in &pairs {
            for j in 0..p {
                let t = j as f64 / p as f64;
                let mut row = vec![0.0; v];
                row[a] += 1.0 - t;
                row[b] += t;
                rows.push(row);
            }
        }
        let starts: Vec<bool> = (0..v).map(|i| pairs.iter().any(|&(a, _)| a == i)).collect();
        for (i, &s) in starts.iter().enumerate() {
            if !s {
                let mut row = vec![0.0; v];
                row[i] = 1.0;
                rows.push(row);
            }
        }
        let d = rows.len();
        Tensor::from_parts(vec![d, v], rows.concat())
    }

    pub fn num_particles(&self) -> usize {
        self.interpolation().rows()
    }

    /// Records the design function on `tape`; `phi` is a `[P]` or `[P, 1]` tensor.
    pub fn on_tape(&self, tape: &Tape, phi: Var) -> Result<DesignVars> {
        self.validate()?;
        let p = tape.shape(phi).iter().product::<usize>();
        self.check_phi(p)?;
        let phi = tape.reshape(phi, vec![p, 1])?;
        let mut field = None;
        let vertices = match &self.alpha {
            DesignAlpha::Joints(j) => {
                let n = j.joints;
                let (angles_raw, anchor) = if j.global_offset {
                    let off = tape.reshape(tape.slice(phi, 0, 0, 2)?, vec![2])?;
                    let base = tape.constant(Tensor::vector(j.anchor.to_vec()));
                    (tape.slice(phi, 0, 2, p)?, tape.add(base, off)?)
                } else {
                    (phi, tape.constant(Tensor::vector(j.anchor.to_vec())))
                };
                let angles = match self.kind {
                    DesignKind::RelativeJoints => {
                        // Prefix sums as a lower-triangular matmul.
                        let mut tri = vec![0.0; n * n];
                        for r in 0..n {
                            for c in 0..=r {
                                tri[r * n + c] = 1.0;
                            }
                        }
                        tape.matmul(constant(tape, n, n, tri), angles_raw)?
                    }
                    _ => angles_raw,
                };
                let seg = j.tool_length / n as f64;
                let dirs = tape.concat(&[tape.cos(angles)?, tape.sin(angles)?], 1)?;
                let steps = tape.scale(dirs, seg)?;
                let mut acc = vec![0.0; (n + 1) * n];
                for r in 0..=n {
                    for c in 0..r {
                        acc[r * n + c] = 1.0;
                    }
                }
                let rel = tape.matmul(constant(tape, n + 1, n, acc), steps)?;
                tape.add_row(rel, anchor)?
            }
            DesignAlpha::Rotors(r) => {
                let m = r.n * r.n;
                let [x0, y0, x1, y1] = r.domain_box;
                let (w, h) = ((x1 - x0) / r.n as f64, (y1 - y0) / r.n as f64);
                let mut centers = Vec::with_capacity(2 * m);
                for row in 0..r.n {
                    for col in 0..r.n {
                        centers.push(x0 + (col as f64 + 0.5) * w);
                        centers.push(y0 + (row as f64 + 0.5) * h);
                    }
                }
                let centers = constant(tape, m, 2, centers);
                let dirs = tape.concat(&[tape.cos(phi)?, tape.sin(phi)?], 1)?;
                let half = tape.scale(dirs, 0.5 * r.rotor_length)?;
                let a = tape.sub(centers, half)?;
                let b = tape.add(centers, half)?;
                tape.concat(&[a, b], 0)?
            }
            DesignAlpha::Field(hf) => {
                let map = if self.kind == DesignKind::HeightfieldControlPoints {
                    let interp = linear_resample(hf.control_points, hf.nodes);
                    tape.matmul(tape.constant(interp), phi)?
                } else {
                    phi
                };
                field = Some(map);
                let ys = tape.offset(tape.scale(tape.tanh(map)?, hf.gamma_h)?, hf.base_y)?;
                let xs: Vec<f64> = (0..hf.nodes)
                    .map(|i| {
                        hf.x_range[0]
                            + (hf.x_range[1] - hf.x_range[0]) * i as f64 / (hf.nodes - 1) as f64
                    })
                    .collect();
                tape.concat(&[tape.constant(Tensor::column(xs)), ys], 1)?
            }
        };
        let particles = tape.matmul(tape.constant(self.interpolation()), vertices)?;
        Ok(DesignVars {
            vertices,
            particles,
            field,
        })
    }

    /// Evaluates the design function without recording gradients.
    pub fn geometry(&self, phi: &[f64]) -> Result<DesignGeometry> {
        self.check_phi(phi.len())?;
        let tape = Tape::new();
        let vars = self.on_tape(&tape, tape.constant(Tensor::vector(phi.to_vec())))?;
        let vertices = tape.value(vars.vertices).points();
        let segments = self
            .segment_pairs()
            .into_iter()
            .map(|(a, b)| Segment::new(vertices[a], vertices[b]))
            .collect();
        Ok(DesignGeometry {
            particles: tape.value(vars.particles),
            field: vars.field.map(|f| tape.value(f).into_data()),
            vertices,
            segments,
        })
    }
}

/// `[m, c]` matrix that linearly interpolates `c` evenly placed values onto `m` evenly placed nodes.
pub fn linear_resample(c: usize, m: usize) -> Tensor {
    let mut data = vec![0.0; m * c];
    for i in 0..m {
        let x = if m == 1 {
            0.0
        } else {
            i as f64 * (c - 1) as f64 / (m - 1) as f64
        };
        let lo = (x.floor() as usize).min(c.saturating_sub(2));
        let t = x - lo as f64;
        if c == 1 {
            data[i * c] = 1.0;
        } else {
            data[i * c + lo] = 1.0 - t;
            data[i * c + lo + 1] = t;
        }
    }
    Tensor::from_parts(vec![m, c], data)
}

/// Fixed scene conditions: the initial fluid block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneTemplate {
    /// `[x_min, y_min, x_max, y_max]`.
    pub fluid_box: [f64; 4],
    pub fluid_spacing: f64,
    /// Jitter amplitude as a fraction of the spacing.
    pub jitter: f64,
    pub jitter_seed: u64,
}

impl Default for SceneTemplate {
    fn default() -> Self {
        SceneTemplate {
            fluid_box: [0.2, 0.5, 0.3, 0.6],
            fluid_spacing: 0.02,
            jitter: 0.1,
            jitter_seed: 0,
        }
    }
}

impl SceneTemplate {
    pub fn validate(&self) -> Result<()> {
        let [x0, y0, x1, y1] = self.fluid_box;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(x1 > x0 && y1 > y0) || ![x0, y0, x1, y1].into_iter().all(unit) {
            return Err(Error::config(
                "fluid box must be non-degenerate and inside the unit square",
            ));
        }
        if !(self.fluid_spacing > 0.0) || !(0.0..0.5).contains(&self.jitter) {
            return Err(Error::config("invalid fluid spacing or jitter"));
        }
        Ok(())
    }

    /// Grid dimensions `(columns, rows)` that fit the box.
    pub fn grid(&self) -> (usize, usize) {
        let [x0, y0, x1, y1] = self.fluid_box;
        let s = self.fluid_spacing;
        (
            ((x1 - x0) / s + 1e-9).floor() as usize,
            ((y1 - y0) / s + 1e-9).floor() as usize,
        )
    }

    /// Jittered cell-centre grid, row by row from the bottom.
    pub fn fluid_positions(&self) -> Vec<[f64; 2]> {
        let (nx, ny) = self.grid();
        let [x0, y0, ..] = self.fluid_box;
        let s = self.fluid_spacing;
        let amp = self.jitter * s;
        let mut rng = ChaCha8Rng::seed_from_u64(self.jitter_seed);
        let mut out = Vec::with_capacity(nx * ny);
        for r in 0..ny {
            for c in 0..nx {
                let (jx, jy) = if amp > 0.0 {
                    (rng.gen_range(-amp..amp), rng.gen_range(-amp..amp))
                } else {
                    (0.0, 0.0)
                };
                out.push([
                    x0 + (c as f64 + 0.5) * s + jx,
                    y0 + (r as f64 + 0.5) * s + jy,
                ]);
            }
        }
        out
    }
}

fn node_types(fluid: usize, design: usize) -> Arc<[NodeType]> {
    let mut t = vec![NodeType::Fluid; fluid];
    t.extend(std::iter::repeat(NodeType::Design).take(design));
    t.into()
}

/// Fluid particles of the template followed by `design` particles, all at rest.
pub fn assemble_initial_state(design: &Tensor, template: &SceneTemplate) -> Result<ParticleState> {
    template.validate()?;
    let fluid = template.fluid_positions();
    let d = if design.is_empty() { 0 } else { design.rows() };
    if d > 0 && design.shape() != [d, 2] {
        return Err(Error::shape(
            "assemble_initial_state",
            format!("design {:?}", design.shape()),
        ));
    }
    let mut data: Vec<f64> = fluid.iter().flat_map(|p| p.to_vec()).collect();
    data.extend_from_slice(design.data());
    let n = fluid.len() + d;
    Ok(ParticleState {
        positions: Tensor::new(vec![n, 2], data)?,
        velocity_history: Tensor::zeros(&[n, 2 * HISTORY]),
        node_types: node_types(fluid.len(), d),
        removed: vec![false; n].into(),
        removed_positions: Tensor::zeros(&[n, 2]),
    })
}

/// Differentiable counterpart of [`assemble_initial_state`]: returns the state
/// tensors `[positions, history, removed_positions]` and node types.
pub fn assemble_on_tape(
    tape: &Tape,
    design: Var,
    template: &SceneTemplate,
) -> Result<(Vec<Var>, Arc<[NodeType]>)> {
    template.validate()?;
    let fluid = template.fluid_positions();
    let d = tape.shape(design)[0];
    let f = tape.constant(Tensor::from_points(&fluid));
    let positions = tape.concat(&[f, design], 0)?;
    let n = fluid.len() + d;
    Ok((
        vec![
            positions,
            tape.constant(Tensor::zeros(&[n, 2 * HISTORY])),
            tape.constant(Tensor::zeros(&[n, 2])),
        ],
        node_types(fluid.len(), d),
    ))
}

/// The unit exchanged between commands: a design space together with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignFile {
    pub kind: DesignKind,
    pub phi: Vec<f64>,
    pub alpha: DesignAlpha,
}

impl DesignFile {
    pub fn new(space: &DesignSpace, phi: Vec<f64>) -> Result<Self> {
        space.check_phi(phi.len())?;
        Ok(DesignFile {
            kind: space.kind,
            phi,
            alpha: space.alpha.clone(),
        })
    }

    pub fn space(&self) -> Result<DesignSpace> {
        let s = DesignSpace {
            kind: self.kind,
            alpha: self.alpha.clone(),
        };
        s.validate()?;
        s.check_phi(self.phi.len())?;
        Ok(s)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;

    fn joints(kind: DesignKind, n: usize) -> DesignSpace {
        DesignSpace::new(
            kind,
            DesignAlpha::Joints(JointTool {
                anchor: [0.15, 0.35],
                tool_length: 0.8,
                joints: n,
                spacing: DESIGN_SPACING,
                global_offset: false,
                initial_offset: [0.0; 2],
            }),
        )
        .unwrap()
    }

    fn field(kind: DesignKind, control: usize) -> DesignSpace {
        DesignSpace::new(
            kind,
            DesignAlpha::Field(Heightfield {
                nodes: 25,
                x_range: [0.1, 0.9],
                base_y: 0.4,
                gamma_h: 0.3,
                spacing: DESIGN_SPACING,
                control_points: control,
            }),
        )
        .unwrap()
    }

    fn rotors(n: usize) -> DesignSpace {
        DesignSpace::new(
            DesignKind::RotorGrid,
            DesignAlpha::Rotors(RotorGrid {
                n,
                domain_box: [0.14, 0.25, 0.77, 0.65],
                rotor_length: 0.105,
                spacing: DESIGN_SPACING,
            }),
        )
        .unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn zero_angles_give_a_horizontal_tool() {
        let g = joints(DesignKind::RelativeJoints, 16)
            .geometry(&[0.0; 16])
            .unwrap();
        assert_eq!(g.vertices[0], [0.15, 0.35]);
        assert!((g.vertices[16][0] - 0.95).abs() < 1e-12);
        assert!(g.particles.points().iter().all(|p| p[1] == 0.35));
        let spacing = g.particles.get2(1, 0) - g.particles.get2(0, 0);
        assert!(spacing <= DESIGN_SPACING + 1e-12);
    }

    #[test]
    fn quarter_turn_gives_a_vertical_tool() {
        let mut phi = vec![0.0; 4];
        phi[0] = PI / 2.0;
        let g = joints(DesignKind::RelativeJoints, 4)
            .geometry(&phi)
            .unwrap();
        assert!((g.vertices[4][0] - 0.15).abs() < 1e-12);
        assert!((g.vertices[4][1] - 1.15).abs() < 1e-12);
    }

    #[test]
    fn tip_height_gradient() {
        let space = joints(DesignKind::RelativeJoints, 8);
        let tape = Tape::new();
        let phi = tape.leaf(Tensor::vector(vec![0.0; 8]));
        let v = space.on_tape(&tape, phi).unwrap();
        let tip = tape
            .sum(
                tape.slice(tape.slice(v.vertices, 0, 8, 9).unwrap(), 1, 1, 2)
                    .unwrap(),
            )
            .unwrap();
        let g = tape.backward(tip).unwrap().wrt(phi);
        let h = 1e-6;
        let tip_y = |p0: f64| {
            let mut p = vec![0.0; 8];
            p[0] = p0;
            space.geometry(&p).unwrap().vertices[8][1]
        };
        let fd = (tip_y(h) - tip_y(-h)) / (2.0 * h);
        assert!((g.data()[0] - fd).abs() / fd.abs() < 1e-6);
        assert!((g.data()[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn absolute_matches_relative_under_prefix_sums() {
        let rel = [0.3, -0.2, 0.5, 0.1, -0.4];
        let abs: Vec<f64> = rel
            .iter()
            .scan(0.0, |s, x| {
                *s += x;
                Some(*s)
            })
            .collect();
        let a = joints(DesignKind::RelativeJoints, 5)
            .geometry(&rel)
            .unwrap();
        let b = joints(DesignKind::AbsoluteJoints, 5)
            .geometry(&abs)
            .unwrap();
        assert!(close(a.particles.data(), b.particles.data(), 1e-12));
        let z = joints(DesignKind::AbsoluteJoints, 5)
            .geometry(&[0.0; 5])
            .unwrap();
        assert_eq!(
            z,
            joints(DesignKind::RelativeJoints, 5)
                .geometry(&[0.0; 5])
                .unwrap()
        );
        let one_r = joints(DesignKind::RelativeJoints, 1)
            .geometry(&[0.7])
            .unwrap();
        let one_a = joints(DesignKind::AbsoluteJoints, 1)
            .geometry(&[0.7])
            .unwrap();
        assert_eq!(one_r, one_a);
    }

    #[test]
    fn global_offset_translates_the_tool() {
        let mut space = joints(DesignKind::RelativeJoints, 3);
        if let DesignAlpha::Joints(j) = &mut space.alpha {
            j.global_offset = true;
            j.initial_offset = [2.0, 0.0];
        }
        assert_eq!(space.arity(), 5);
        assert_eq!(space.initial_phi(), vec![2.0, 0.0, 0.0, 0.0, 0.0]);
        let g = space.geometry(&space.initial_phi()).unwrap();
        assert_eq!(g.vertices[0], [2.15, 0.35]);
    }

    #[test]
    fn single_rotor_at_box_centre() {
        let space = rotors(1);
        let g = space.geometry(&[0.0]).unwrap();
        let c = [(0.14 + 0.77) / 2.0, (0.25 + 0.65) / 2.0];
        assert!(close(&g.vertices[0], &[c[0] - 0.0525, c[1]], 1e-12));
        assert!(close(&g.vertices[1], &[c[0] + 0.0525, c[1]], 1e-12));
    }

    #[test]
    fn half_turn_leaves_a_rotor_unchanged_as_a_set() {
        let space = rotors(2);
        let a = space.geometry(&[0.3, 0.0, -0.2, 1.0]).unwrap();
        let b = space.geometry(&[0.3, PI, -0.2, 1.0]).unwrap();
        let mut pa = a.particles.points();
        let mut pb = b.particles.points();
        let key = |p: &[f64; 2]| ((p[0] * 1e9).round() as i64, (p[1] * 1e9).round() as i64);
        pa.sort_by_key(key);
        pb.sort_by_key(key);
        for (x, y) in pa.iter().zip(&pb) {
            assert!(close(x, y, 1e-12));
        }
        assert_eq!(space.arity(), 4);
    }

    #[test]
    fn heightfield_offsets() {
        let space = field(DesignKind::Heightfield, 0);
        let flat = space.geometry(&[0.0; 25]).unwrap();
        assert!(flat.vertices.iter().all(|v| v[1] == 0.4));
        let high = space.geometry(&[50.0; 25]).unwrap();
        assert!((high.vertices[3][1] - 0.7).abs() < 1e-12);

        let tape = Tape::new();
        let phi = tape.leaf(Tensor::vector(vec![0.0; 25]));
        let v = space.on_tape(&tape, phi).unwrap();
        let y = tape.sum(tape.slice(v.vertices, 1, 1, 2).unwrap()).unwrap();
        let g = tape.backward(y).unwrap().wrt(phi);
        assert!(g.data().iter().all(|&d| (d - 0.3).abs() < 1e-15));
    }

    #[test]
    fn control_points_interpolate() {
        let space = field(DesignKind::HeightfieldControlPoints, 2);
        let g = space.geometry(&[0.0, 1.0]).unwrap();
        assert!((g.field.as_ref().unwrap()[12] - 0.5).abs() < 1e-15);
        let c = space.geometry(&[0.4, 0.4]).unwrap();
        assert!(c.field.unwrap().iter().all(|&v| (v - 0.4).abs() < 1e-15));

        let full = field(DesignKind::HeightfieldControlPoints, 25);
        let direct = field(DesignKind::Heightfield, 0);
        let phi: Vec<f64> = (0..25).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = full.geometry(&phi).unwrap();
        let b = direct.geometry(&phi).unwrap();
        assert!(close(a.particles.data(), b.particles.data(), 1e-15));
    }

    #[test]
    fn contain_fluid_grid() {
        let t = SceneTemplate::default();
        assert_eq!(t.grid(), (5, 5));
        let pts = t.fluid_positions();
        assert_eq!(pts.len(), 25);
        for (k, p) in pts.iter().enumerate() {
            let (r, c) = (k / 5, k % 5);
            assert!((p[0] - (0.2 + (c as f64 + 0.5) * 0.02)).abs() <= 0.002);
            assert!((p[1] - (0.5 + (r as f64 + 0.5) * 0.02)).abs() <= 0.002);
        }
        assert_eq!(t.fluid_positions(), pts);
    }

    #[test]
    fn assembled_state_layout() {
        let t = SceneTemplate::default();
        let empty = assemble_initial_state(&Tensor::zeros(&[0, 2]), &t).unwrap();
        assert_eq!(empty.len(), 25);
        assert!(empty.node_types.iter().all(|n| *n == NodeType::Fluid));

        let space = joints(DesignKind::RelativeJoints, 4);
        let tape = Tape::new();
        let phi = tape.leaf(Tensor::vector(vec![0.1; 4]));
        let v = space.on_tape(&tape, phi).unwrap();
        let (state, types) = assemble_on_tape(&tape, v.particles, &t).unwrap();
        assert_eq!(types.len(), 25 + space.num_particles());
        let loss = tape.sum(state[0]).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(phi).data().iter().any(|&x| x != 0.0));
        let plain =
            assemble_initial_state(&space.geometry(&[0.1; 4]).unwrap().particles, &t).unwrap();
        assert_eq!(plain.node_types, types);
    }

    #[test]
    fn kind_and_geometry_must_agree() {
        let bad = DesignSpace {
            kind: DesignKind::RotorGrid,
            alpha: joints(DesignKind::RelativeJoints, 2).alpha,
        };
        assert!(bad.validate().is_err());
        assert!(joints(DesignKind::RelativeJoints, 3)
            .geometry(&[0.0; 2])
            .is_err());
    }

    #[test]
    fn design_file_round_trip() {
        for space in [
            joints(DesignKind::RelativeJoints, 3),
            rotors(2),
            field(DesignKind::HeightfieldControlPoints, 3),
        ] {
            let phi: Vec<f64> = (0..space.arity())
                .map(|i| 0.1 * i as f64 + 1.0 / 3.0)
                .collect();
            let file = DesignFile::new(&space, phi).unwrap();
            let json = serde_json::to_string(&file).unwrap();
            let back: DesignFile = serde_json::from_str(&json).unwrap();
            assert_eq!(back, file);
            assert_eq!(back.space().unwrap(), space);
        }
    }
}
