use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    ScalarMul(usize, usize),
    MatMul(usize, usize),
    Affine(usize, usize, usize),
    AddRow(usize, usize),
    Sum(usize),
    Mean(usize),
    StdDev(usize),
    Dot(usize, usize),
    RowSum(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Square(usize),
    Sqrt(usize),
    Sin(usize),
    Cos(usize),
    Clamp(usize, f64, f64),
    Gather(usize, Arc<[usize]>),
    ScatterAdd(usize, Arc<[usize]>),
    Concat(Vec<usize>, usize),
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    LayerNorm {
        input: usize,
        gain: usize,
        bias: usize,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::ScalarMul(..) => "scalar_mul",
            Op::MatMul(..) => "matmul",
            Op::Affine(..) => "affine",
            Op::AddRow(..) => "add_row",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::StdDev(..) => "stddev",
            Op::Dot(..) => "dot",
            Op::RowSum(..) => "row_sum",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Clamp(..) => "clamp",
            Op::Gather(..) => "gather",
            Op::ScatterAdd(..) => "scatter_add",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::LayerNorm { .. } => "layer_norm",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of tensor operations for one reverse sweep.
///
/// A tape is single-threaded and is consumed by its first backward pass.
pub struct Tape {
    id: u32,
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by a backward pass, indexed by tape node.
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Accumulated gradient, or `None` when no path reaches the root.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index()).and_then(Option::as_ref)
    }

    /// Gradient with respect to `var`, zero-filled when `var` does not reach the root.
    pub fn wrt(&self, var: Var) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.index()]),
        }
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.index()).and_then(Option::take)
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn expect_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(
            op,
            format!("expected a 2-D tensor, got {s:?}"),
        )),
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn column_sums(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len() as u32;
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn check(&self, var: Var) -> Result<usize> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        if var.tape != self.id || var.index() >= self.len() {
            return Err(Error::ForeignVar);
        }
        Ok(var.index())
    }

    fn input(&self, var: Var) -> Result<(usize, Tensor, bool)> {
        let i = self.check(var)?;
        let nodes = self.nodes.borrow();
        Ok((i, nodes[i].value.clone(), nodes[i].requires_grad))
    }

    /// Records a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn value(&self, var: Var) -> Tensor {
        self.nodes.borrow()[var.index()].value.clone()
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.index()].value.shape().to_vec()
    }

    pub fn scalar_value(&self, var: Var) -> Result<f64> {
        self.value(var).to_scalar()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes.borrow()[var.index()].requires_grad
    }

    /// The side of the kink taken by every element of every `relu` and `clamp`
    /// recorded so far. Two evaluations of the same graph with equal
    /// signatures lie in the same smooth piece of the recorded function.
    pub fn branch_signature(&self) -> Vec<u8> {
        let nodes = self.nodes.borrow();
        let mut out = Vec::new();
        for node in nodes.iter() {
            match node.op {
                Op::Relu(a) => out.extend(nodes[a].value.data().iter().map(|&x| u8::from(x > 0.0))),
                Op::Clamp(a, lo, hi) => out.extend(nodes[a].value.data().iter().map(|&x| {
                    if x < lo {
                        0
                    } else if x > hi {
                        2
                    } else {
                        1
                    }
                })),
                _ => {}
            }
        }
        out
    }

    fn unary(&self, a: Var, op: impl FnOnce(usize) -> Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let (ia, ta, ga) = self.input(a)?;
        Ok(self.push(op(ia), ta.map(f), ga))
    }

    fn binary_elementwise(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        op: impl FnOnce(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ia, ta, ga) = self.input(a)?;
        let (ib, tb, gb) = self.input(b)?;
        check_same(name, &ta, &tb)?;
        let out = ta.zip_map(&tb, f)?;
        Ok(self.push(op(ia, ib), out, ga || gb))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn scale(&self, a: Var, factor: f64) -> Result<Var> {
        self.unary(a, |i| Op::Scale(i, factor), |x| x * factor)
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// Adds a constant to every element.
    pub fn offset(&self, a: Var, shift: f64) -> Result<Var> {
        self.unary(a, Op::Offset, |x| x + shift)
    }

    /// Scalar variable times tensor (the only implicit broadcast).
    pub fn scalar_mul(&self, s: Var, a: Var) -> Result<Var> {
        let (is, ts, gs) = self.input(s)?;
        let (ia, ta, ga) = self.input(a)?;
        if ts.len() != 1 {
            return Err(Error::shape(
                "scalar_mul",
                format!("scalar operand has shape {:?}", ts.shape()),
            ));
        }
        let c = ts.data()[0];
        Ok(self.push(Op::ScalarMul(is, ia), ta.map(|x| c * x), gs || ga))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ta, ga) = self.input(a)?;
        let (ib, tb, gb) = self.input(b)?;
        let (m, k) = expect_2d("matmul", &ta)?;
        let (k2, n) = expect_2d("matmul", &tb)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        Ok(self.push(
            Op::MatMul(ia, ib),
            Tensor::from_parts(vec![m, n], out),
            ga || gb,
        ))
    }

    /// `x · w + b` with `x: [m, k]`, `w: [k, n]`, `b: [n]`.
    pub fn affine(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, tx, gx) = self.input(x)?;
        let (iw, tw, gw) = self.input(w)?;
        let (ib, tb, gb) = self.input(b)?;
        let (m, k) = expect_2d("affine", &tx)?;
        let (k2, n) = expect_2d("affine", &tw)?;
        if k != k2 || tb.len() != n {
            return Err(Error::shape(
                "affine",
                format!("x {:?}, w {:?}, b {:?}", tx.shape(), tw.shape(), tb.shape()),
            ));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(tb.data());
        }
        gemm(m, k, n, tx.data(), false, tw.data(), false, &mut out, true);
        Ok(self.push(
            Op::Affine(ix, iw, ib),
            Tensor::from_parts(vec![m, n], out),
            gx || gw || gb,
        ))
    }

    /// Adds `row` (`[n]` or `[1, n]`) to every row of `a: [m, n]`.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let (ia, ta, ga) = self.input(a)?;
        let (ir, tr, gr) = self.input(row)?;
        let (m, n) = expect_2d("add_row", &ta)?;
        if tr.len() != n {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", ta.shape(), tr.shape()),
            ));
        }
        let mut out = ta.data().to_vec();
        for r in 0..m {
            for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(tr.data()) {
                *o += v;
            }
        }
        Ok(self.push(
            Op::AddRow(ia, ir),
            Tensor::from_parts(vec![m, n], out),
            ga || gr,
        ))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let (ia, ta, ga) = self.input(a)?;
        let s = ta.data().iter().sum();
        Ok(self.push(Op::Sum(ia), Tensor::scalar(s), ga))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let (ia, ta, ga) = self.input(a)?;
        if ta.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = ta.data().iter().sum::<f64>() / ta.len() as f64;
        Ok(self.push(Op::Mean(ia), Tensor::scalar(s), ga))
    }

    /// Population standard deviation over all elements.
    pub fn stddev(&self, a: Var) -> Result<Var> {
        let (ia, ta, ga) = self.input(a)?;
        if ta.is_empty() {
            return Err(Error::shape("stddev", "empty tensor"));
        }
        let n = ta.len() as f64;
        let m = ta.data().iter().sum::<f64>() / n;
        let var = ta.data().iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        Ok(self.push(Op::StdDev(ia), Tensor::scalar(var.sqrt()), ga))
    }

    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ta, ga) = self.input(a)?;
        let (ib, tb, gb) = self.input(b)?;
        check_same("dot", &ta, &tb)?;
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Op::Dot(ia, ib), Tensor::scalar(s), ga || gb))
    }

    /// Sums each row of `a: [m, n]` into `[m, 1]`.
    pub fn row_sum(&self, a: Var) -> Result<Var> {
        let (ia, ta, ga) = self.input(a)?;
        let (m, n) = expect_2d("row_sum", &ta)?;
        let out = (0..m)
            .map(|r| ta.data()[r * n..(r + 1) * n].iter().sum())
            .collect();
        Ok(self.push(Op::RowSum(ia), Tensor::from_parts(vec![m, 1], out), ga))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh, f64::tanh)
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square, |x| x * x)
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sqrt, f64::sqrt)
    }

    pub fn sin(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sin, f64::sin)
    }

    pub fn cos(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Cos, f64::cos)
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, |i| Op::Clamp(i, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Selects rows (first-axis slices) of `a` by index.
    pub fn gather(&self, a: Var, indices: Arc<[usize]>) -> Result<Var> {
        let (ia, ta, ga) = self.input(a)?;
        if ta.shape().is_empty() {
            return Err(Error::shape("gather", "cannot gather from a scalar"));
        }
        let rows = ta.rows();
        let width = ta.cols();
        let mut out = Vec::with_capacity(indices.len() * width);
        for &idx in indices.iter() {
            if idx >= rows {
                return Err(Error::IndexOutOfRange {
                    op: "gather",
                    index: idx,
                    len: rows,
                });
            }
            out.extend_from_slice(&ta.data()[idx * width..(idx + 1) * width]);
        }
        let mut shape = ta.shape().to_vec();
        shape[0] = indices.len();
        Ok(self.push(Op::Gather(ia, indices), Tensor::from_parts(shape, out), ga))
    }

    /// Sums rows of `a` into `slots` output rows: `out[indices[e]] += a[e]`.
    pub fn scatter_add(&self, a: Var, indices: Arc<[usize]>, slots: usize) -> Result<Var> {
        let (ia, ta, ga) = self.input(a)?;
        if ta.shape().is_empty() || ta.rows() != indices.len() {
            return Err(Error::shape(
                "scatter_add",
                format!("{:?} rows vs {} indices", ta.shape(), indices.len()),
            ));
        }
        let width = ta.cols();
        let mut out = vec![0.0; slots * width];
        for (e, &target) in indices.iter().enumerate() {
            if target >= slots {
                return Err(Error::IndexOutOfRange {
                    op: "scatter_add",
                    index: target,
                    len: slots,
                });
            }
            let src = &ta.data()[e * width..(e + 1) * width];
            for (o, v) in out[target * width..(target + 1) * width]
                .iter_mut()
                .zip(src)
            {
                *o += v;
            }
        }
        let mut shape = ta.shape().to_vec();
        shape[0] = slots;
        Ok(self.push(
            Op::ScatterAdd(ia, indices),
            Tensor::from_parts(shape, out),
            ga,
        ))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no operands"));
        }
        let mut inputs = Vec::with_capacity(parts.len());
        let mut tensors = Vec::with_capacity(parts.len());
        let mut requires = false;
        for &p in parts {
            let (i, t, g) = self.input(p)?;
            inputs.push(i);
            requires |= g;
            tensors.push(t);
        }
        let first = tensors[0].shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} for shape {first:?}"),
            ));
        }
        let mut total = 0;
        for t in &tensors {
            let s = t.shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{first:?} vs {s:?} on axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for t in &tensors {
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Op::Concat(inputs, axis),
            Tensor::from_parts(shape, out),
            requires,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let (ia, ta, ga) = self.input(a)?;
        let shape = ta.shape();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("{start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, extent, inner) = axis_split(shape, axis);
        let len = end - start;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            out.extend_from_slice(&ta.data()[base + start * inner..base + end * inner]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[axis] = len;
        Ok(self.push(
            Op::Slice {
                input: ia,
                axis,
                start,
            },
            Tensor::from_parts(new_shape, out),
            ga,
        ))
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let (ia, ta, ga) = self.input(a)?;
        let out = ta.reshaped(shape)?;
        Ok(self.push(Op::Reshape(ia), out, ga))
    }

    /// Per-row layer normalization of `x: [m, n]` with learnable `gain`/`bias` of length `n`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (ix, tx, gx) = self.input(x)?;
        let (ig, tg, gg) = self.input(gain)?;
        let (ib, tb, gb) = self.input(bias)?;
        let (m, n) = expect_2d("layer_norm", &tx)?;
        if tg.len() != n || tb.len() != n {
            return Err(Error::shape(
                "layer_norm",
                format!("width {n} vs gain {:?}", tg.shape()),
            ));
        }
        let mut normalized = Vec::with_capacity(m * n);
        let mut out = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for (c, v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                normalized.push(h);
                out.push(h * tg.data()[c] + tb.data()[c]);
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                input: ix,
                gain: ig,
                bias: ib,
                normalized: Tensor::from_parts(vec![m, n], normalized),
                inv_std,
            },
            Tensor::from_parts(vec![m, n], out),
            gx || gg || gb,
        ))
    }

    /// Reverse sweep from a scalar root. Consumes the tape.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let (_, value, _) = self.input(root)?;
        if value.len() != 1 {
            return Err(Error::NonScalarRoot(value.shape().to_vec()));
        }
        if !value.is_finite() {
            let op = self.nodes.borrow()[root.index()].op.name();
            return Err(Error::NonFinite {
                op,
                phase: "forward",
            });
        }
        let seed = Tensor::filled(value.shape(), 1.0);
        self.backward_seeded(vec![(root, seed)])
    }

    /// Reverse sweep starting from arbitrary seed gradients (a vector-Jacobian product).
    ///
    /// Seeds placed on leaves act as initial accumulator values; contributions from the
    /// sweep are added after them, in reverse recording order.
    pub fn backward_seeded(&self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.len()];
        for (var, seed) in seeds {
            let i = self.check(var)?;
            let nodes = self.nodes.borrow();
            check_same("backward seed", &nodes[i].value, &seed)?;
            match &mut grads[i] {
                Some(g) => {
                    for (a, b) in g.data_mut().iter_mut().zip(seed.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(seed),
            }
        }
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        for i in (0..nodes.len()).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = grads[i].take() else {
                continue;
            };
            propagate(&nodes, i, &grad, &mut grads)?;
            grads[i] = Some(grad);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }
}

fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    target: usize,
    contribution: Vec<f64>,
    from: &Op,
) -> Result<()> {
    if !nodes[target].requires_grad {
        return Ok(());
    }
    if contribution.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: from.name(),
            phase: "backward",
        });
    }
    match &mut grads[target] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(&contribution) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::from_parts(
                nodes[target].value.shape().to_vec(),
                contribution,
            ))
        }
    }
    Ok(())
}

fn propagate(nodes: &[Node], i: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let op = &nodes[i].op;
    let g = grad.data();
    let out = &nodes[i].value;
    let val = |j: usize| &nodes[j].value;
    let wants = |j: usize| nodes[j].requires_grad;
    macro_rules! acc {
        ($target:expr, $contrib:expr) => {
            accumulate(nodes, grads, $target, $contrib, op)?
        };
    }
    match op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) => {
            if wants(*a) {
                acc!(*a, g.to_vec());
            }
            if wants(*b) {
                acc!(*b, g.to_vec());
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                acc!(*a, g.to_vec());
            }
            if wants(*b) {
                acc!(*b, g.iter().map(|v| -v).collect());
            }
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                acc!(
                    *a,
                    g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect()
                );
            }
            if wants(*b) {
                acc!(
                    *b,
                    g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect()
                );
            }
        }
        Op::Scale(a, c) => acc!(*a, g.iter().map(|v| v * c).collect()),
        Op::Offset(a) | Op::Reshape(a) => acc!(*a, g.to_vec()),
        Op::ScalarMul(s, a) => {
            if wants(*s) {
                let d = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                acc!(*s, vec![d]);
            }
            if wants(*a) {
                let c = val(*s).data()[0];
                acc!(*a, g.iter().map(|v| v * c).collect());
            }
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k) = (ta.shape()[0], ta.shape()[1]);
            let n = tb.shape()[1];
            if wants(*a) {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g, false, tb.data(), true, &mut da, false);
                acc!(*a, da);
            }
            if wants(*b) {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, ta.data(), true, g, false, &mut db, false);
                acc!(*b, db);
            }
        }
        Op::Affine(x, w, b) => {
            let (tx, tw) = (val(*x), val(*w));
            let (m, k) = (tx.shape()[0], tx.shape()[1]);
            let n = tw.shape()[1];
            if wants(*x) {
                let mut dx = vec![0.0; m * k];
                gemm(m, n, k, g, false, tw.data(), true, &mut dx, false);
                acc!(*x, dx);
            }
            if wants(*w) {
                let mut dw = vec![0.0; k * n];
                gemm(k, m, n, tx.data(), true, g, false, &mut dw, false);
                acc!(*w, dw);
            }
            if wants(*b) {
                acc!(*b, column_sums(g, m, n));
            }
        }
        Op::AddRow(a, r) => {
            if wants(*a) {
                acc!(*a, g.to_vec());
            }
            if wants(*r) {
                let n = val(*r).len();
                acc!(*r, column_sums(g, g.len() / n, n));
            }
        }
        Op::Sum(a) => acc!(*a, vec![g[0]; val(*a).len()]),
        Op::Mean(a) => {
            let n = val(*a).len();
            acc!(*a, vec![g[0] / n as f64; n]);
        }
        Op::StdDev(a) => {
            let ta = val(*a);
            let n = ta.len() as f64;
            let s = out.data()[0];
            let contrib = if s > 0.0 {
                let m = ta.data().iter().sum::<f64>() / n;
                ta.data().iter().map(|x| g[0] * (x - m) / (n * s)).collect()
            } else {
                // Zero spread: use the zero subgradient.
                vec![0.0; ta.len()]
            };
            acc!(*a, contrib);
        }
        Op::Dot(a, b) => {
            if wants(*a) {
                acc!(*a, val(*b).data().iter().map(|y| g[0] * y).collect());
            }
            if wants(*b) {
                acc!(*b, val(*a).data().iter().map(|x| g[0] * x).collect());
            }
        }
        Op::RowSum(a) => {
            let n = val(*a).cols();
            acc!(
                *a,
                g.iter()
                    .flat_map(|&v| std::iter::repeat(v).take(n))
                    .collect()
            );
        }
        Op::Tanh(a) => acc!(
            *a,
            g.iter()
                .zip(out.data())
                .map(|(d, y)| d * (1.0 - y * y))
                .collect()
        ),
        Op::Relu(a) => acc!(
            *a,
            g.iter()
                .zip(val(*a).data())
                .map(|(d, x)| if *x > 0.0 { *d } else { 0.0 })
                .collect()
        ),
        Op::Exp(a) => acc!(*a, g.iter().zip(out.data()).map(|(d, y)| d * y).collect()),
        Op::Square(a) => acc!(
            *a,
            g.iter()
                .zip(val(*a).data())
                .map(|(d, x)| 2.0 * x * d)
                .collect()
        ),
        Op::Sqrt(a) => acc!(
            *a,
            g.iter()
                .zip(out.data())
                .map(|(d, y)| if *y > 0.0 { d / (2.0 * y) } else { 0.0 })
                .collect()
        ),
        Op::Sin(a) => acc!(
            *a,
            g.iter()
                .zip(val(*a).data())
                .map(|(d, x)| d * x.cos())
                .collect()
        ),
        Op::Cos(a) => acc!(
            *a,
            g.iter()
                .zip(val(*a).data())
                .map(|(d, x)| -d * x.sin())
                .collect()
        ),
        Op::Clamp(a, lo, hi) => acc!(
            *a,
            g.iter()
                .zip(val(*a).data())
                .map(|(d, x)| if *x >= *lo && *x <= *hi { *d } else { 0.0 })
                .collect()
        ),
        Op::Gather(a, idx) => {
            let ta = val(*a);
            let width = ta.cols();
            let mut da = vec![0.0; ta.len()];
            for (r, &src) in idx.iter().enumerate() {
                for (o, v) in da[src * width..(src + 1) * width]
                    .iter_mut()
                    .zip(&g[r * width..(r + 1) * width])
                {
                    *o += v;
                }
            }
            acc!(*a, da);
        }
        Op::ScatterAdd(a, idx) => {
            let width = val(*a).cols();
            let mut da = Vec::with_capacity(idx.len() * width);
            for &t in idx.iter() {
                da.extend_from_slice(&g[t * width..(t + 1) * width]);
            }
            acc!(*a, da);
        }
        Op::Concat(inputs, axis) => {
            let (outer, total, inner) = axis_split(out.shape(), *axis);
            let mut offset = 0;
            for &p in inputs {
                let extent = val(p).shape()[*axis];
                if wants(p) {
                    let mut d = Vec::with_capacity(outer * extent * inner);
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        d.extend_from_slice(&g[base..base + extent * inner]);
                    }
                    acc!(p, d);
                }
                offset += extent;
            }
        }
        Op::Slice { input, axis, start } => {
            let src_shape = val(*input).shape();
            let (outer, extent, inner) = axis_split(src_shape, *axis);
            let len = out.shape()[*axis];
            let mut d = vec![0.0; outer * extent * inner];
            for o in 0..outer {
                let base = o * extent * inner + start * inner;
                d[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            acc!(*input, d);
        }
        Op::LayerNorm {
            input,
            gain,
            bias,
            normalized,
            inv_std,
        } => {
            let n = normalized.cols();
            let m = normalized.rows();
            let xh = normalized.data();
            let tg = val(*gain).data();
            if wants(*input) {
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xh[r * n..(r + 1) * n];
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for c in 0..n {
                        let dh = gr[c] * tg[c];
                        sum_d += dh;
                        sum_dh += dh * hr[c];
                    }
                    let nf = n as f64;
                    for c in 0..n {
                        let dh = gr[c] * tg[c];
                        dx[r * n + c] = inv_std[r] / nf * (nf * dh - sum_d - hr[c] * sum_dh);
                    }
                }
                acc!(*input, dx);
            }
            if wants(*gain) {
                let mut dg = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        dg[c] += g[r * n + c] * xh[r * n + c];
                    }
                }
                acc!(*gain, dg);
            }
            if wants(*bias) {
                acc!(*bias, column_sums(g, m, n));
            }
        }
    }
    Ok(())
}
