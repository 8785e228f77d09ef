//! Tape-based reverse-mode automatic differentiation over small dense
//! fp64 tensors.
//!
//! Every operation is evaluated eagerly and appended to a linear
//! [`Tape`]. Calling [`Tape::backward`] on a scalar node walks the tape in
//! reverse and accumulates `d(loss)/d(node)` for every node the loss
//! depends on. Tensors are at most rank 2 and stored row-major. The only
//! broadcasting rule is scalar broadcast in the binary elementwise ops.
//!
//! ```
//! use scan_core::autodiff::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.scalar(3.0);
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x), vec![6.0]);
//! ```

mod adam;
mod params;

pub use adam::{adam_step, AdamState};
pub use params::{Binding, Init, ParamStore, Tensor};

use std::fmt;

use thiserror::Error;

/// Dimensions of a tensor. Rank 0 is a scalar.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Self {
        Shape(dims.to_vec())
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn vector(len: usize) -> Self {
        Shape(vec![len])
    }

    pub fn matrix(rows: usize, cols: usize) -> Self {
        Shape(vec![rows, cols])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        if self.0.len() == 1 {
            write!(f, ",")?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(Shape),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{0}` registered twice")]
    DuplicateParameter(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The operation set of the engine.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// `(m,k)·(k,n) -> (m,n)` or `(m,k)·(k,) -> (m,)`.
    MatMul,
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    /// Concatenation of rank-0/rank-1 inputs into one vector.
    Concat,
    /// Contiguous sub-vector of a rank-1 input.
    Slice { start: usize, len: usize },
    /// Flat-index element read, producing a scalar.
    Index(usize),
    /// Stacks equally shaped rank-0/rank-1 inputs along a new leading axis.
    Stack,
    Transpose,
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    /// `ln(1 + e^x)`, computed stably.
    Softplus,
    Neg,
    /// Multiplication by a constant.
    Scale(f64),
    /// Addition of a constant.
    Offset(f64),
    /// Softmax along `axis` of a rank-1 or rank-2 input.
    Softmax { axis: usize },
    /// Softmax of a rank-1 input restricted to the entries flagged `true`.
    /// Excluded entries are exactly zero, and so is every output when no
    /// entry is flagged.
    MaskedSoftmax(Vec<bool>),
    Sum,
    Mean,
    /// Euclidean norm of all entries.
    Norm,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Concat => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Index(_) => "index",
            OpKind::Stack => "stack",
            OpKind::Transpose => "transpose",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Softplus => "softplus",
            OpKind::Neg => "neg",
            OpKind::Scale(_) => "scale",
            OpKind::Offset(_) => "offset",
            OpKind::Softmax { .. } => "softmax",
            OpKind::MaskedSoftmax(_) => "masked_softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Norm => "norm",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul => Some(2),
            OpKind::Concat | OpKind::Stack => None,
            _ => Some(1),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Shape,
    value: Vec<f64>,
    op: Option<OpKind>,
    inputs: Vec<Var>,
}

/// A linear record of eagerly evaluated operations.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn softmax_into(xs: &[f64], mask: Option<&[bool]>, out: &mut [f64]) {
    let active = |i: usize| mask.is_none_or(|m| m[i]);
    let mut max = f64::NEG_INFINITY;
    for (i, &x) in xs.iter().enumerate() {
        if active(i) && x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut total = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        out[i] = if active(i) { (x - max).exp() } else { 0.0 };
        total += out[i];
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    /// Records a leaf (input or parameter copy).
    pub fn leaf(&mut self, shape: Shape, values: Vec<f64>) -> Result<Var> {
        if shape.numel() != values.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "leaf",
                reason: format!("{} values for shape {shape}", values.len()),
            });
        }
        Ok(self.push(shape, values, None, Vec::new()))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Shape::scalar(), vec![value], None, Vec::new())
    }

    pub fn vector(&mut self, values: &[f64]) -> Var {
        self.push(Shape::vector(values.len()), values.to_vec(), None, Vec::new())
    }

    pub fn zeros(&mut self, len: usize) -> Var {
        self.push(Shape::vector(len), vec![0.0; len], None, Vec::new())
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// First element of a node, i.e. the value of a scalar.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn shape(&self, v: Var) -> &Shape {
        &self.nodes[v.0].shape
    }

    /// Gradient accumulated by the last [`Tape::backward`]; zeros for nodes
    /// the loss does not depend on.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        match self.grads.get(v.0) {
            Some(g) if !g.is_empty() => g.clone(),
            _ => vec![0.0; self.nodes[v.0].value.len()],
        }
    }

    pub(crate) fn grad_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).filter(|g| !g.is_empty()).map(|g| g.as_slice())
    }

    fn push(&mut self, shape: Shape, value: Vec<f64>, op: Option<OpKind>, inputs: Vec<Var>) -> Var {
        debug_assert_eq!(shape.numel(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            inputs,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `op` on `inputs` and records it.
    pub fn apply(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var> {
        let name = op.name();
        if let Some(n) = op.arity() {
            if inputs.len() != n {
                return Err(AutodiffError::InvalidArgument {
                    op: name,
                    reason: format!("expected {n} inputs, got {}", inputs.len()),
                });
            }
        } else if inputs.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: name,
                reason: "expected at least one input".into(),
            });
        }
        let (shape, value) = self.forward(&op, inputs)?;
        Ok(self.push(shape, value, Some(op), inputs.to_vec()))
    }

    fn forward(&self, op: &OpKind, inputs: &[Var]) -> Result<(Shape, Vec<f64>)> {
        let name = op.name();
        let node = |v: Var| &self.nodes[v.0];
        match op {
            OpKind::MatMul => {
                let (a, b) = (node(inputs[0]), node(inputs[1]));
                let mismatch = || AutodiffError::ShapeMismatch {
                    op: name,
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                };
                if a.shape.rank() != 2 {
                    return Err(mismatch());
                }
                let (m, k) = (a.shape.0[0], a.shape.0[1]);
                match b.shape.dims() {
                    [kb] if *kb == k => {
                        let out = (0..m)
                            .map(|i| {
                                let row = &a.value[i * k..(i + 1) * k];
                                row.iter().zip(&b.value).map(|(x, y)| x * y).sum()
                            })
                            .collect();
                        Ok((Shape::vector(m), out))
                    }
                    [kb, n] if *kb == k => {
                        let n = *n;
                        let mut out = vec![0.0; m * n];
                        for i in 0..m {
                            for p in 0..k {
                                let aip = a.value[i * k + p];
                                let brow = &b.value[p * n..(p + 1) * n];
                                let orow = &mut out[i * n..(i + 1) * n];
                                for (o, bv) in orow.iter_mut().zip(brow) {
                                    *o += aip * bv;
                                }
                            }
                        }
                        Ok((Shape::matrix(m, n), out))
                    }
                    _ => Err(mismatch()),
                }
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let (a, b) = (node(inputs[0]), node(inputs[1]));
                let f = |x: f64, y: f64| match op {
                    OpKind::Add => x + y,
                    OpKind::Sub => x - y,
                    _ => x * y,
                };
                if a.shape == b.shape {
                    let out = a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect();
                    Ok((a.shape.clone(), out))
                } else if b.shape.is_scalar() {
                    let y = b.value[0];
                    Ok((a.shape.clone(), a.value.iter().map(|&x| f(x, y)).collect()))
                } else if a.shape.is_scalar() {
                    let x = a.value[0];
                    Ok((b.shape.clone(), b.value.iter().map(|&y| f(x, y)).collect()))
                } else {
                    Err(AutodiffError::ShapeMismatch {
                        op: name,
                        lhs: a.shape.clone(),
                        rhs: b.shape.clone(),
                    })
                }
            }
            OpKind::Concat => {
                let mut out = Vec::new();
                for &v in inputs {
                    let n = node(v);
                    if n.shape.rank() > 1 {
                        return Err(AutodiffError::ShapeMismatch {
                            op: name,
                            lhs: node(inputs[0]).shape.clone(),
                            rhs: n.shape.clone(),
                        });
                    }
                    out.extend_from_slice(&n.value);
                }
                Ok((Shape::vector(out.len()), out))
            }
            OpKind::Slice { start, len } => {
                let a = node(inputs[0]);
                if a.shape.rank() != 1 || start + len > a.value.len() {
                    return Err(AutodiffError::InvalidArgument {
                        op: name,
                        reason: format!("range {start}..{} out of bounds for {}", start + len, a.shape),
                    });
                }
                Ok((Shape::vector(*len), a.value[*start..start + len].to_vec()))
            }
            OpKind::Index(i) => {
                let a = node(inputs[0]);
                match a.value.get(*i) {
                    Some(&x) => Ok((Shape::scalar(), vec![x])),
                    None => Err(AutodiffError::InvalidArgument {
                        op: name,
                        reason: format!("flat index {i} out of bounds for {}", a.shape),
                    }),
                }
            }
            OpKind::Stack => {
                let first = &node(inputs[0]).shape;
                if first.rank() > 1 {
                    return Err(AutodiffError::InvalidArgument {
                        op: name,
                        reason: format!("cannot stack rank-{} inputs", first.rank()),
                    });
                }
                let mut out = Vec::with_capacity(first.numel() * inputs.len());
                for &v in inputs {
                    let n = node(v);
                    if &n.shape != first {
                        return Err(AutodiffError::ShapeMismatch {
                            op: name,
                            lhs: first.clone(),
                            rhs: n.shape.clone(),
                        });
                    }
                    out.extend_from_slice(&n.value);
                }
                let shape = if first.is_scalar() {
                    Shape::vector(inputs.len())
                } else {
                    Shape::matrix(inputs.len(), first.0[0])
                };
                Ok((shape, out))
            }
            OpKind::Transpose => {
                let a = node(inputs[0]);
                if a.shape.rank() != 2 {
                    return Err(AutodiffError::InvalidArgument {
                        op: name,
                        reason: format!("expected a matrix, got {}", a.shape),
                    });
                }
                let (m, n) = (a.shape.0[0], a.shape.0[1]);
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[j * m + i] = a.value[i * n + j];
                    }
                }
                Ok((Shape::matrix(n, m), out))
            }
            OpKind::Relu
            | OpKind::Tanh
            | OpKind::Sigmoid
            | OpKind::Exp
            | OpKind::Log
            | OpKind::Softplus
            | OpKind::Neg
            | OpKind::Scale(_)
            | OpKind::Offset(_) => {
                let a = node(inputs[0]);
                let f = |x: f64| match op {
                    OpKind::Relu => x.max(0.0),
                    OpKind::Tanh => x.tanh(),
                    OpKind::Sigmoid => sigmoid(x),
                    OpKind::Exp => x.exp(),
                    OpKind::Log => x.ln(),
                    OpKind::Softplus => softplus(x),
                    OpKind::Neg => -x,
                    OpKind::Scale(c) => c * x,
                    OpKind::Offset(c) => x + c,
                    _ => unreachable!(),
                };
                Ok((a.shape.clone(), a.value.iter().map(|&x| f(x)).collect()))
            }
            OpKind::Softmax { axis } => {
                let a = node(inputs[0]);
                let mut out = vec![0.0; a.value.len()];
                match (a.shape.dims(), axis) {
                    ([_], 0) => softmax_into(&a.value, None, &mut out),
                    ([_, n], 1) => {
                        let n = *n;
                        for (row, orow) in a.value.chunks(n).zip(out.chunks_mut(n)) {
                            softmax_into(row, None, orow);
                        }
                    }
                    ([m, n], 0) => {
                        let (m, n) = (*m, *n);
                        let mut col = vec![0.0; m];
                        let mut ocol = vec![0.0; m];
                        for j in 0..n {
                            for (i, c) in col.iter_mut().enumerate() {
                                *c = a.value[i * n + j];
                            }
                            softmax_into(&col, None, &mut ocol);
                            for (i, &o) in ocol.iter().enumerate() {
                                out[i * n + j] = o;
                            }
                        }
                    }
                    _ => {
                        return Err(AutodiffError::InvalidArgument {
                            op: name,
                            reason: format!("axis {axis} invalid for {}", a.shape),
                        })
                    }
                }
                Ok((a.shape.clone(), out))
            }
            OpKind::MaskedSoftmax(mask) => {
                let a = node(inputs[0]);
                if a.shape.rank() != 1 || mask.len() != a.value.len() {
                    return Err(AutodiffError::InvalidArgument {
                        op: name,
                        reason: format!("mask of length {} for {}", mask.len(), a.shape),
                    });
                }
                let mut out = vec![0.0; a.value.len()];
                softmax_into(&a.value, Some(mask), &mut out);
                Ok((a.shape.clone(), out))
            }
            OpKind::Sum | OpKind::Mean | OpKind::Norm => {
                let a = node(inputs[0]);
                let v = match op {
                    OpKind::Sum => a.value.iter().sum(),
                    OpKind::Mean => {
                        if a.value.is_empty() {
                            return Err(AutodiffError::InvalidArgument {
                                op: name,
                                reason: "mean of an empty tensor".into(),
                            });
                        }
                        a.value.iter().sum::<f64>() / a.value.len() as f64
                    }
                    _ => a.value.iter().map(|x| x * x).sum::<f64>().sqrt(),
                };
                Ok((Shape::scalar(), vec![v]))
            }
        }
    }

    /// Populates gradients of `loss` with respect to every recorded node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = &self.nodes[loss.0].shape;
        if shape.numel() != 1 || shape.rank() > 1 {
            return Err(AutodiffError::NonScalarLoss(shape.clone()));
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        grads[loss.0] = vec![1.0];
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_empty() {
                continue;
            }
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            let g = std::mem::take(&mut grads[idx]);
            self.propagate(op, node, &g, &mut grads);
            grads[idx] = g;
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, op: &OpKind, node: &Node, g: &[f64], grads: &mut [Vec<f64>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let slot = &mut grads[v.0];
            if slot.is_empty() {
                *slot = vec![0.0; nodes[v.0].value.len()];
            }
            f(slot);
        };
        let inputs = &node.inputs;
        let y = &node.value;
        match op {
            OpKind::MatMul => {
                let (a, b) = (&nodes[inputs[0].0], &nodes[inputs[1].0]);
                let (m, k) = (a.shape.0[0], a.shape.0[1]);
                if b.shape.rank() == 1 {
                    acc(inputs[0], &mut |ga| {
                        for (i, &gi) in g.iter().enumerate().take(m) {
                            if gi != 0.0 {
                                for (x, bv) in ga[i * k..(i + 1) * k].iter_mut().zip(&b.value) {
                                    *x += gi * bv;
                                }
                            }
                        }
                    });
                    acc(inputs[1], &mut |gb| {
                        for (i, &gi) in g.iter().enumerate().take(m) {
                            if gi != 0.0 {
                                for (x, av) in gb.iter_mut().zip(&a.value[i * k..(i + 1) * k]) {
                                    *x += gi * av;
                                }
                            }
                        }
                    });
                } else {
                    let n = b.shape.0[1];
                    acc(inputs[0], &mut |ga| {
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * b.value[p * n + j];
                                }
                                ga[i * k + p] += s;
                            }
                        }
                    });
                    acc(inputs[1], &mut |gb| {
                        for i in 0..m {
                            for p in 0..k {
                                let aip = a.value[i * k + p];
                                for j in 0..n {
                                    gb[p * n + j] += aip * g[i * n + j];
                                }
                            }
                        }
                    });
                }
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let (a, b) = (&nodes[inputs[0].0], &nodes[inputs[1].0]);
                let a_bcast = a.shape != node.shape;
                let b_bcast = b.shape != node.shape;
                let av = |i: usize| if a_bcast { a.value[0] } else { a.value[i] };
                let bv = |i: usize| if b_bcast { b.value[0] } else { b.value[i] };
                let da = |i: usize| match op {
                    OpKind::Mul => g[i] * bv(i),
                    _ => g[i],
                };
                let db = |i: usize| match op {
                    OpKind::Add => g[i],
                    OpKind::Sub => -g[i],
                    _ => g[i] * av(i),
                };
                acc(inputs[0], &mut |ga| {
                    if a_bcast {
                        ga[0] += (0..g.len()).map(da).sum::<f64>();
                    } else {
                        for (i, x) in ga.iter_mut().enumerate() {
                            *x += da(i);
                        }
                    }
                });
                acc(inputs[1], &mut |gb| {
                    if b_bcast {
                        gb[0] += (0..g.len()).map(db).sum::<f64>();
                    } else {
                        for (i, x) in gb.iter_mut().enumerate() {
                            *x += db(i);
                        }
                    }
                });
            }
            OpKind::Concat | OpKind::Stack => {
                let mut offset = 0;
                for &v in inputs {
                    let n = nodes[v.0].value.len();
                    acc(v, &mut |gv| {
                        for (x, gi) in gv.iter_mut().zip(&g[offset..offset + n]) {
                            *x += gi;
                        }
                    });
                    offset += n;
                }
            }
            OpKind::Slice { start, len } => acc(inputs[0], &mut |ga| {
                for (x, gi) in ga[*start..start + len].iter_mut().zip(g) {
                    *x += gi;
                }
            }),
            OpKind::Index(i) => acc(inputs[0], &mut |ga| ga[*i] += g[0]),
            OpKind::Transpose => {
                // node is (n, m), input (m, n)
                let (n, m) = (node.shape.0[0], node.shape.0[1]);
                acc(inputs[0], &mut |ga| {
                    for j in 0..n {
                        for i in 0..m {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            OpKind::Relu
            | OpKind::Tanh
            | OpKind::Sigmoid
            | OpKind::Exp
            | OpKind::Log
            | OpKind::Softplus
            | OpKind::Neg
            | OpKind::Scale(_)
            | OpKind::Offset(_) => {
                let x = &nodes[inputs[0].0].value;
                let d = |i: usize| match op {
                    OpKind::Relu => {
                        if x[i] > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    OpKind::Tanh => 1.0 - y[i] * y[i],
                    OpKind::Sigmoid => y[i] * (1.0 - y[i]),
                    OpKind::Exp => y[i],
                    OpKind::Log => 1.0 / x[i],
                    OpKind::Softplus => sigmoid(x[i]),
                    OpKind::Neg => -1.0,
                    OpKind::Scale(c) => *c,
                    _ => 1.0,
                };
                acc(inputs[0], &mut |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        if g[i] != 0.0 {
                            *x += g[i] * d(i);
                        }
                    }
                });
            }
            OpKind::Softmax { axis } => {
                let dims = node.shape.dims().to_vec();
                acc(inputs[0], &mut |ga| match (dims.as_slice(), axis) {
                    ([_], _) => softmax_backward(y, g, ga, 0, 1, y.len()),
                    ([m, n], 1) => {
                        for i in 0..*m {
                            softmax_backward(y, g, ga, i * n, 1, *n);
                        }
                    }
                    ([m, n], _) => {
                        for j in 0..*n {
                            softmax_backward(y, g, ga, j, *n, *m);
                        }
                    }
                    _ => unreachable!(),
                });
            }
            OpKind::MaskedSoftmax(_) => {
                // masked entries have y = 0, so the generic rule already
                // leaves them untouched
                acc(inputs[0], &mut |ga| softmax_backward(y, g, ga, 0, 1, y.len()));
            }
            OpKind::Sum => acc(inputs[0], &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            OpKind::Mean => acc(inputs[0], &mut |ga| {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|x| *x += s);
            }),
            OpKind::Norm => {
                let norm = y[0];
                if norm > 0.0 {
                    let x = &nodes[inputs[0].0].value;
                    acc(inputs[0], &mut |ga| {
                        for (gi, xi) in ga.iter_mut().zip(x) {
                            *gi += g[0] * xi / norm;
                        }
                    });
                }
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(OpKind::Concat, parts)
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(OpKind::Slice { start, len }, &[a])
    }

    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        self.apply(OpKind::Index(i), &[a])
    }

    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(OpKind::Stack, parts)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Tanh, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Log, &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Softplus, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Neg, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[a])
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Offset(c), &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Softmax { axis: 0 }, &[a])
    }

    pub fn masked_softmax(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        self.apply(OpKind::MaskedSoftmax(mask), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[a])
    }

    pub fn norm(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Norm, &[a])
    }

    /// Sum of a non-empty list of equally shaped nodes, folded left to right.
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts.split_first().ok_or(AutodiffError::InvalidArgument {
            op: "add",
            reason: "empty sum".into(),
        })?;
        rest.iter().try_fold(first, |acc, &p| self.add(acc, p))
    }

    /// `w·x + b` for a weight matrix `w` and bias vector `b`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let wx = self.matmul(w, x)?;
        self.add(wx, b)
    }
}

fn softmax_backward(y: &[f64], g: &[f64], ga: &mut [f64], start: usize, step: usize, len: usize) {
    let idx = |i: usize| start + i * step;
    let dot: f64 = (0..len).map(|i| g[idx(i)] * y[idx(i)]).sum();
    for i in 0..len {
        let k = idx(i);
        ga[k] += y[k] * (g[k] - dot);
    }
}
