//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value. Inputs always
//! precede their consumers, so `backward` is a single sweep over the node list
//! in reverse. Nodes that cannot reach a parameter are marked as not needing a
//! gradient and are skipped during the sweep.

use indexmap::IndexMap;

use crate::error::{AutodiffError, Result};
use crate::params::{Bound, Gradients, ParamSet};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds accepted by [`Tape::forward_op`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul,
    /// Elementwise add. The right operand may broadcast as a row `[n]`/`[1, n]`,
    /// a column `[m, 1]`, or a scalar.
    Add,
    /// Elementwise subtract, same broadcasting as `Add`.
    Sub,
    /// Elementwise multiply, same broadcasting as `Add`.
    Mul,
    /// Multiply by a constant.
    Scale(f32),
    Tanh,
    Sigmoid,
    Relu,
    /// Softmax over the last axis (max-subtracted).
    Softmax,
    Log,
    /// Rows of a `[vocab, dim]` table.
    Gather(Vec<usize>),
    /// Concatenate along the last axis.
    Concat,
    /// Columns `start..start + len` of the last axis.
    SliceCols { start: usize, len: usize },
    /// Same data, new shape with an equal element count.
    Reshape(Vec<usize>),
    /// `[g * m, n] -> [m, n]`, summing each run of `g` consecutive rows.
    SumGroups(usize),
    Sum,
    Mean,
    /// `sum_i w_i * -ln p[i, t_i]` over rows of a probability matrix.
    CrossEntropy { targets: Vec<usize>, weights: Vec<f32> },
    /// Forward value of the second input, gradient routed to the first.
    StraightThrough,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax",
            OpKind::Log => "log",
            OpKind::Gather(_) => "gather",
            OpKind::Concat => "concat",
            OpKind::SliceCols { .. } => "slice_cols",
            OpKind::Reshape(_) => "reshape",
            OpKind::SumGroups(_) => "sum_groups",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::CrossEntropy { .. } => "cross_entropy",
            OpKind::StraightThrough => "straight_through",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Debug)]
enum Recorded {
    Leaf,
    Param,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Binary { kind: BinaryKind, a: usize, b: usize, bc: Broadcast, cols: usize },
    Scale { a: usize, c: f32 },
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Softmax(usize),
    Log(usize),
    Gather { table: usize, indices: Vec<usize>, dim: usize },
    Concat { inputs: Vec<usize>, widths: Vec<usize> },
    SliceCols { a: usize, start: usize, len: usize, width: usize },
    Reshape(usize),
    SumGroups { a: usize, group: usize, cols: usize },
    Sum(usize),
    Mean(usize),
    CrossEntropy { probs: usize, targets: Vec<usize>, weights: Vec<f32>, classes: usize },
    StraightThrough { soft: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
struct Node {
    op: Recorded,
    value: Tensor,
    needs_grad: bool,
}

/// Single-threaded recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: IndexMap<String, usize>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Recorded, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Recorded::Leaf, t, false)
    }

    /// A named trainable leaf. Its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, name: &str, t: Tensor) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(AutodiffError::DuplicateParam(name.to_string()));
        }
        let v = self.push(Recorded::Param, t, true);
        self.params.insert(name.to_string(), v.0);
        Ok(v)
    }

    /// Puts every tensor of `set` on the tape, as parameters when `trainable`
    /// and as constants otherwise.
    pub fn bind(&mut self, set: &ParamSet, trainable: bool) -> Result<Bound> {
        let mut vars = IndexMap::with_capacity(set.len());
        for (name, t) in set.iter() {
            let v = if trainable {
                self.param(name, t.clone())?
            } else {
                self.constant(t.clone())
            };
            vars.insert(name.to_string(), v);
        }
        Ok(Bound::new(vars))
    }

    /// Records `kind` applied to `inputs`.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let name = kind.name();
        let arity = match kind {
            OpKind::MatMul
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::StraightThrough => Some(2),
            OpKind::Concat => None,
            _ => Some(1),
        };
        if let Some(expected) = arity {
            if inputs.len() != expected {
                return Err(AutodiffError::Arity {
                    op: name,
                    expected,
                    got: inputs.len(),
                });
            }
        } else if inputs.is_empty() {
            return Err(AutodiffError::Arity {
                op: name,
                expected: 1,
                got: 0,
            });
        }

        let (op, value) = match kind {
            OpKind::MatMul => self.fwd_matmul(inputs[0].0, inputs[1].0)?,
            OpKind::Add => self.fwd_binary(BinaryKind::Add, name, inputs[0].0, inputs[1].0)?,
            OpKind::Sub => self.fwd_binary(BinaryKind::Sub, name, inputs[0].0, inputs[1].0)?,
            OpKind::Mul => self.fwd_binary(BinaryKind::Mul, name, inputs[0].0, inputs[1].0)?,
            OpKind::Scale(c) => {
                let a = inputs[0].0;
                let x = &self.nodes[a].value;
                let data = x.data().iter().map(|v| v * c).collect();
                (Recorded::Scale { a, c }, Tensor::new(x.shape().to_vec(), data)?)
            }
            OpKind::Tanh => self.fwd_unary(inputs[0].0, Recorded::Tanh, f32::tanh)?,
            OpKind::Sigmoid => self.fwd_unary(inputs[0].0, Recorded::Sigmoid, sigmoid)?,
            OpKind::Relu => self.fwd_unary(inputs[0].0, Recorded::Relu, |v| v.max(0.0))?,
            OpKind::Log => self.fwd_unary(inputs[0].0, Recorded::Log, f32::ln)?,
            OpKind::Softmax => {
                let a = inputs[0].0;
                let x = &self.nodes[a].value;
                let mut out = x.data().to_vec();
                let cols = x.last_dim();
                if cols > 0 {
                    for row in out.chunks_mut(cols) {
                        softmax_in_place(row);
                    }
                }
                (Recorded::Softmax(a), Tensor::new(x.shape().to_vec(), out)?)
            }
            OpKind::Gather(indices) => {
                let table = inputs[0].0;
                let t = &self.nodes[table].value;
                if t.shape().len() != 2 {
                    return Err(AutodiffError::InvalidArgument {
                        op: name,
                        detail: format!("table must be 2-D, got shape {:?}", t.shape()),
                    });
                }
                let (vocab, dim) = (t.shape()[0], t.shape()[1]);
                let mut out = Vec::with_capacity(indices.len() * dim);
                for &i in &indices {
                    if i >= vocab {
                        return Err(AutodiffError::IndexOutOfRange {
                            op: name,
                            index: i,
                            bound: vocab,
                        });
                    }
                    out.extend_from_slice(t.row(i));
                }
                let shape = vec![indices.len(), dim];
                (Recorded::Gather { table, indices, dim }, Tensor::new(shape, out)?)
            }
            OpKind::Concat => self.fwd_concat(inputs)?,
            OpKind::SliceCols { start, len } => {
                let a = inputs[0].0;
                let x = &self.nodes[a].value;
                let width = x.last_dim();
                if start + len > width {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: name,
                        index: start + len,
                        bound: width,
                    });
                }
                let rows = x.rows();
                let mut out = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    out.extend_from_slice(&x.row(r)[start..start + len]);
                }
                let mut shape = x.shape().to_vec();
                *shape.last_mut().unwrap() = len;
                (Recorded::SliceCols { a, start, len, width }, Tensor::new(shape, out)?)
            }
            OpKind::Reshape(shape) => {
                let a = inputs[0].0;
                let x = &self.nodes[a].value;
                if shape.iter().product::<usize>() != x.len() {
                    return Err(AutodiffError::ShapeMismatch {
                        op: name,
                        lhs: x.shape().to_vec(),
                        rhs: shape,
                    });
                }
                (Recorded::Reshape(a), Tensor::new(shape, x.data().to_vec())?)
            }
            OpKind::SumGroups(group) => {
                let a = inputs[0].0;
                let x = &self.nodes[a].value;
                if group == 0 || x.shape().len() != 2 || !x.shape()[0].is_multiple_of(group) {
                    return Err(AutodiffError::InvalidArgument {
                        op: name,
                        detail: format!("cannot group rows of {:?} in runs of {group}", x.shape()),
                    });
                }
                let cols = x.shape()[1];
                let m = x.shape()[0] / group;
                let mut out = vec![0.0; m * cols];
                for (r, row) in x.data().chunks(cols).enumerate() {
                    axpy(1.0, row, &mut out[(r / group) * cols..(r / group + 1) * cols]);
                }
                (Recorded::SumGroups { a, group, cols }, Tensor::new(vec![m, cols], out)?)
            }
            OpKind::Sum => {
                let a = inputs[0].0;
                let s: f32 = self.nodes[a].value.data().iter().sum();
                (Recorded::Sum(a), Tensor::scalar(s))
            }
            OpKind::Mean => {
                let a = inputs[0].0;
                let x = &self.nodes[a].value;
                if x.is_empty() {
                    return Err(AutodiffError::InvalidArgument {
                        op: name,
                        detail: "mean of empty tensor".into(),
                    });
                }
                let s: f32 = x.data().iter().sum::<f32>() / x.len() as f32;
                (Recorded::Mean(a), Tensor::scalar(s))
            }
            OpKind::CrossEntropy { targets, weights } => {
                let probs = inputs[0].0;
                let p = &self.nodes[probs].value;
                let classes = p.last_dim();
                let rows = p.rows();
                if targets.len() != rows || weights.len() != rows {
                    return Err(AutodiffError::ShapeMismatch {
                        op: name,
                        lhs: p.shape().to_vec(),
                        rhs: vec![targets.len(), weights.len()],
                    });
                }
                let mut loss = 0.0f32;
                for (r, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
                    if t >= classes {
                        return Err(AutodiffError::IndexOutOfRange {
                            op: name,
                            index: t,
                            bound: classes,
                        });
                    }
                    if w != 0.0 {
                        loss -= w * p.row(r)[t].ln();
                    }
                }
                (
                    Recorded::CrossEntropy {
                        probs,
                        targets,
                        weights,
                        classes,
                    },
                    Tensor::scalar(loss),
                )
            }
            OpKind::StraightThrough => {
                let (soft, hard) = (inputs[0].0, inputs[1].0);
                let s = &self.nodes[soft].value;
                let h = &self.nodes[hard].value;
                if s.shape() != h.shape() {
                    return Err(AutodiffError::ShapeMismatch {
                        op: name,
                        lhs: s.shape().to_vec(),
                        rhs: h.shape().to_vec(),
                    });
                }
                (Recorded::StraightThrough { soft }, h.clone())
            }
        };

        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let needs = op_inputs(&op).iter().any(|&i| self.needs(i));
        Ok(self.push(op, value, needs))
    }

    fn fwd_unary(
        &self,
        a: usize,
        rec: fn(usize) -> Recorded,
        f: impl Fn(f32) -> f32,
    ) -> Result<(Recorded, Tensor)> {
        let x = &self.nodes[a].value;
        let data = x.data().iter().map(|&v| f(v)).collect();
        Ok((rec(a), Tensor::new(x.shape().to_vec(), data)?))
    }

    fn fwd_matmul(&self, a: usize, b: usize) -> Result<(Recorded, Tensor)> {
        let x = &self.nodes[a].value;
        let y = &self.nodes[b].value;
        if x.shape().len() != 2 || y.shape().len() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        let out = matmul_kernel(x.data(), y.data(), m, k, n);
        Ok((Recorded::MatMul { a, b, m, k, n }, Tensor::new(vec![m, n], out)?))
    }

    fn fwd_binary(
        &self,
        kind: BinaryKind,
        name: &'static str,
        a: usize,
        b: usize,
    ) -> Result<(Recorded, Tensor)> {
        let x = &self.nodes[a].value;
        let y = &self.nodes[b].value;
        let bc = broadcast_kind(x, y).ok_or_else(|| AutodiffError::ShapeMismatch {
            op: name,
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        })?;
        let cols = x.last_dim();
        let mut data = x.data().to_vec();
        match kind {
            BinaryKind::Add => broadcast_apply(&mut data, y.data(), bc, cols, |p, q| *p += q),
            BinaryKind::Sub => broadcast_apply(&mut data, y.data(), bc, cols, |p, q| *p -= q),
            BinaryKind::Mul => broadcast_apply(&mut data, y.data(), bc, cols, |p, q| *p *= q),
        }
        Ok((
            Recorded::Binary { kind, a, b, bc, cols },
            Tensor::new(x.shape().to_vec(), data)?,
        ))
    }

    fn fwd_concat(&self, inputs: &[Var]) -> Result<(Recorded, Tensor)> {
        let first = &self.nodes[inputs[0].0].value;
        let lead = &first.shape()[..first.shape().len().saturating_sub(1)];
        let rows = first.rows();
        let mut widths = Vec::with_capacity(inputs.len());
        for v in inputs {
            let t = &self.nodes[v.0].value;
            let tl = &t.shape()[..t.shape().len().saturating_sub(1)];
            if tl != lead || t.shape().is_empty() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            widths.push(t.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in inputs {
                out.extend_from_slice(self.nodes[v.0].value.row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok((
            Recorded::Concat {
                inputs: inputs.iter().map(|v| v.0).collect(),
                widths,
            },
            Tensor::new(shape, out)?,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns one gradient per registered parameter, in registration order.
    /// Parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(AutodiffError::EmptyTape);
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(AutodiffError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut out = IndexMap::with_capacity(self.params.len());
        for (name, &id) in &self.params {
            let shape = self.nodes[id].value.shape().to_vec();
            let t = match grads.get_mut(id).and_then(Option::take) {
                Some(g) => Tensor::new(shape, g)?,
                None => Tensor::zeros(&shape),
            };
            out.insert(name.clone(), t);
        }
        Ok(Gradients::from_map(out))
    }

    fn propagate(&self, id: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Recorded::Leaf | Recorded::Param => {}
            Recorded::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                let av = self.nodes[a].value.data();
                let bv = self.nodes[b].value.data();
                if self.needs(a) {
                    let ga = slot(grads, a, m * k);
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let br = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] += dot(gr, br);
                        }
                    }
                }
                if self.needs(b) {
                    let gb = slot(grads, b, k * n);
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let s = av[i * k + p];
                            if s != 0.0 {
                                axpy(s, gr, &mut gb[p * n..(p + 1) * n]);
                            }
                        }
                    }
                }
            }
            Recorded::Binary { kind, a, b, bc, cols } => {
                let (a, b, bc, cols) = (*a, *b, *bc, *cols);
                let blen = self.nodes[b].value.len();
                if self.needs(a) {
                    let ga = slot(grads, a, g.len());
                    match kind {
                        BinaryKind::Add | BinaryKind::Sub => {
                            for (x, &d) in ga.iter_mut().zip(g) {
                                *x += d;
                            }
                        }
                        BinaryKind::Mul => {
                            let yd = self.nodes[b].value.data();
                            for (i, (x, &d)) in ga.iter_mut().zip(g).enumerate() {
                                *x += d * yd[rhs_index(bc, i, cols)];
                            }
                        }
                    }
                }
                if self.needs(b) {
                    let xd = self.nodes[a].value.data();
                    let gb = slot(grads, b, blen);
                    for (i, &d) in g.iter().enumerate() {
                        let j = rhs_index(bc, i, cols);
                        gb[j] += match kind {
                            BinaryKind::Add => d,
                            BinaryKind::Sub => -d,
                            BinaryKind::Mul => d * xd[i],
                        };
                    }
                }
            }
            Recorded::Scale { a, c } => {
                if self.needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    axpy(*c, g, ga);
                }
            }
            Recorded::Tanh(a) => {
                let y = node.value.data();
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            Recorded::Sigmoid(a) => {
                let y = node.value.data();
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            Recorded::Relu(a) => {
                let x = self.nodes[*a].value.data();
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
            Recorded::Log(a) => {
                let x = self.nodes[*a].value.data();
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] / x[i];
                }
            }
            Recorded::Softmax(a) => {
                let y = &node.value;
                let cols = y.last_dim();
                let ga = slot(grads, *a, g.len());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let inner = dot(gr, yr);
                    let out = &mut ga[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        out[c] += yr[c] * (gr[c] - inner);
                    }
                }
            }
            Recorded::Gather {
                table,
                indices,
                dim,
            } => {
                let tlen = self.nodes[*table].value.len();
                let gt = slot(grads, *table, tlen);
                for (r, &i) in indices.iter().enumerate() {
                    axpy(1.0, &g[r * dim..(r + 1) * dim], &mut gt[i * dim..(i + 1) * dim]);
                }
            }
            Recorded::Concat { inputs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = if total == 0 { 0 } else { g.len() / total };
                let mut offset = 0;
                for (&inp, &w) in inputs.iter().zip(widths) {
                    if self.needs(inp) {
                        let gi = slot(grads, inp, rows * w);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            axpy(1.0, src, &mut gi[r * w..(r + 1) * w]);
                        }
                    }
                    offset += w;
                }
            }
            Recorded::SliceCols {
                a,
                start,
                len,
                width,
            } => {
                let rows = g.len() / len.max(&1);
                let ga = slot(grads, *a, rows * width);
                for r in 0..rows {
                    let dst = &mut ga[r * width + start..r * width + start + len];
                    axpy(1.0, &g[r * len..(r + 1) * len], dst);
                }
            }
            Recorded::Reshape(a) => {
                let ga = slot(grads, *a, g.len());
                axpy(1.0, g, ga);
            }
            Recorded::SumGroups { a, group, cols } => {
                let ga = slot(grads, *a, g.len() * group);
                for (r, dst) in ga.chunks_mut(*cols).enumerate() {
                    axpy(1.0, &g[(r / group) * cols..(r / group + 1) * cols], dst);
                }
            }
            Recorded::Sum(a) => {
                let n = self.nodes[*a].value.len();
                let ga = slot(grads, *a, n);
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
            Recorded::Mean(a) => {
                let n = self.nodes[*a].value.len();
                let ga = slot(grads, *a, n);
                let d = g[0] / n as f32;
                for x in ga.iter_mut() {
                    *x += d;
                }
            }
            Recorded::CrossEntropy {
                probs,
                targets,
                weights,
                classes,
            } => {
                let p = self.nodes[*probs].value.data();
                let n = p.len();
                let gp = slot(grads, *probs, n);
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w != 0.0 {
                        let idx = r * classes + t;
                        gp[idx] -= g[0] * w / p[idx];
                    }
                }
            }
            Recorded::StraightThrough { soft } => {
                if self.needs(*soft) {
                    let gs = slot(grads, *soft, g.len());
                    axpy(1.0, g, gs);
                }
            }
        }
    }

    // Convenience wrappers around `forward_op`.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        self.forward_op(OpKind::Scale(c), &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Sigmoid, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Relu, &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Softmax, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Log, &[a])
    }
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.forward_op(OpKind::Gather(indices.to_vec()), &[table])
    }
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.forward_op(OpKind::Concat, parts)
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.forward_op(OpKind::SliceCols { start, len }, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.forward_op(OpKind::Reshape(shape.to_vec()), &[a])
    }
    pub fn sum_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        self.forward_op(OpKind::SumGroups(group), &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Mean, &[a])
    }
    /// Mean cross-entropy over rows.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let w = 1.0 / targets.len().max(1) as f32;
        self.cross_entropy_weighted(probs, targets, &vec![w; targets.len()])
    }
    pub fn cross_entropy_weighted(
        &mut self,
        probs: Var,
        targets: &[usize],
        weights: &[f32],
    ) -> Result<Var> {
        self.forward_op(
            OpKind::CrossEntropy {
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            &[probs],
        )
    }
    pub fn straight_through(&mut self, soft: Var, hard: Var) -> Result<Var> {
        self.forward_op(OpKind::StraightThrough, &[soft, hard])
    }
}

fn op_inputs(op: &Recorded) -> Vec<usize> {
    match op {
        Recorded::Leaf | Recorded::Param => vec![],
        Recorded::MatMul { a, b, .. } | Recorded::Binary { a, b, .. } => vec![*a, *b],
        Recorded::Scale { a, .. }
        | Recorded::Tanh(a)
        | Recorded::Sigmoid(a)
        | Recorded::Relu(a)
        | Recorded::Softmax(a)
        | Recorded::Log(a)
        | Recorded::SliceCols { a, .. }
        | Recorded::Reshape(a)
        | Recorded::SumGroups { a, .. }
        | Recorded::Sum(a)
        | Recorded::Mean(a) => vec![*a],
        Recorded::Gather { table, .. } => vec![*table],
        Recorded::Concat { inputs, .. } => inputs.clone(),
        Recorded::CrossEntropy { probs, .. } => vec![*probs],
        Recorded::StraightThrough { soft } => vec![*soft],
    }
}

fn broadcast_kind(x: &Tensor, y: &Tensor) -> Option<Broadcast> {
    if x.shape() == y.shape() {
        return Some(Broadcast::Same);
    }
    if y.len() == 1 {
        return Some(Broadcast::Scalar);
    }
    let cols = x.last_dim();
    let rows = x.rows();
    let ys = y.shape();
    let row_like = match ys {
        [n] => *n == cols,
        [1, n] => *n == cols,
        _ => false,
    };
    if row_like {
        return Some(Broadcast::Row);
    }
    if ys.len() == 2 && ys[1] == 1 && ys[0] == rows && x.shape().len() == 2 {
        return Some(Broadcast::Col);
    }
    None
}

#[inline]
fn broadcast_apply(out: &mut [f32], y: &[f32], bc: Broadcast, cols: usize, f: impl Fn(&mut f32, f32)) {
    match bc {
        Broadcast::Same => out.iter_mut().zip(y).for_each(|(p, &q)| f(p, q)),
        Broadcast::Row => {
            for chunk in out.chunks_mut(cols.max(1)) {
                chunk.iter_mut().zip(y).for_each(|(p, &q)| f(p, q));
            }
        }
        Broadcast::Col => {
            for (chunk, &q) in out.chunks_mut(cols.max(1)).zip(y) {
                chunk.iter_mut().for_each(|p| f(p, q));
            }
        }
        Broadcast::Scalar => out.iter_mut().for_each(|p| f(p, y[0])),
    }
}

fn rhs_index(bc: Broadcast, i: usize, cols: usize) -> usize {
    match bc {
        Broadcast::Same => i,
        Broadcast::Row => i % cols,
        Broadcast::Col => i / cols,
        Broadcast::Scalar => 0,
    }
}

fn slot(grads: &mut [Option<Vec<f32>>], id: usize, len: usize) -> &mut Vec<f32> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    acc.iter().sum::<f32>() + tail
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn matmul_kernel(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s != 0.0 {
                axpy(s, &b[p * n..(p + 1) * n], row);
            }
        }
    }
    out
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of one row.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
