//! Finite-difference verification of the tape's backward rules.
//!
//! Each op has a plain `f64` reference forward here that shares no code with
//! the tape. A check builds `L = sum_i c_i * op(x)_i` with random weights
//! `c`, differentiates it on the tape, and compares against central
//! differences of the reference forward. The error reported is
//! `max_i |analytic_i - numeric_i| / max(max_i |numeric_i|, 1e-6)`, i.e. the
//! worst coordinate relative to the gradient's scale.

use rand::Rng;

use crate::error::Result;
use crate::tape::{OpKind, Tape};
use crate::tensor::Tensor;

/// Op kinds covered by [`random_case`].
pub const CHECKED_OPS: &[&str] = &[
    "matmul",
    "add",
    "add_row",
    "add_col",
    "sub",
    "mul",
    "mul_row",
    "scale",
    "tanh",
    "sigmoid",
    "relu",
    "softmax",
    "log",
    "gather",
    "concat",
    "slice_cols",
    "reshape",
    "sum_groups",
    "sum",
    "mean",
    "cross_entropy",
    "straight_through",
];

/// One op applied to concrete inputs. `differentiable[i]` marks inputs that
/// are perturbed and differentiated.
#[derive(Clone, Debug)]
pub struct OpCase {
    pub name: &'static str,
    pub kind: OpKind,
    pub inputs: Vec<Tensor>,
    pub differentiable: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

fn rand_tensor<R: Rng>(rng: &mut R, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero so kinks are never straddled by the probe.
fn rand_away_from_zero<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05f32..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random small instance of the op named `name` (one of [`CHECKED_OPS`]).
pub fn random_case<R: Rng>(name: &str, rng: &mut R) -> OpCase {
    let m = rng.gen_range(1..=4);
    let k = rng.gen_range(1..=4);
    let n = rng.gen_range(1..=4);
    let two = |kind, name, a, b| OpCase {
        name,
        kind,
        inputs: vec![a, b],
        differentiable: vec![true, true],
    };
    let one = |kind, name, a| OpCase {
        name,
        kind,
        inputs: vec![a],
        differentiable: vec![true],
    };
    match name {
        "matmul" => two(
            OpKind::MatMul,
            "matmul",
            rand_tensor(rng, &[m, k], -1.0, 1.0),
            rand_tensor(rng, &[k, n], -1.0, 1.0),
        ),
        "add" => two(
            OpKind::Add,
            "add",
            rand_tensor(rng, &[m, n], -1.0, 1.0),
            rand_tensor(rng, &[m, n], -1.0, 1.0),
        ),
        "add_row" => two(
            OpKind::Add,
            "add_row",
            rand_tensor(rng, &[m, n], -1.0, 1.0),
            rand_tensor(rng, &[1, n], -1.0, 1.0),
        ),
        "add_col" => two(
            OpKind::Add,
            "add_col",
            rand_tensor(rng, &[m, n], -1.0, 1.0),
            rand_tensor(rng, &[m, 1], -1.0, 1.0),
        ),
        "sub" => two(
            OpKind::Sub,
            "sub",
            rand_tensor(rng, &[m, n], -1.0, 1.0),
            rand_tensor(rng, &[m, n], -1.0, 1.0),
        ),
        "mul" => two(
            OpKind::Mul,
            "mul",
            rand_tensor(rng, &[m, n], -1.0, 1.0),
            rand_tensor(rng, &[m, n], -1.0, 1.0),
        ),
        "mul_row" => two(
            OpKind::Mul,
            "mul_row",
            rand_tensor(rng, &[m, n], -1.0, 1.0),
            rand_tensor(rng, &[n], -1.0, 1.0),
        ),
        "scale" => {
            let c = rng.gen_range(-2.0f32..2.0);
            one(OpKind::Scale(c), "scale", rand_tensor(rng, &[m, n], -1.0, 1.0))
        }
        "tanh" => one(OpKind::Tanh, "tanh", rand_tensor(rng, &[m, n], -2.0, 2.0)),
        "sigmoid" => one(OpKind::Sigmoid, "sigmoid", rand_tensor(rng, &[m, n], -3.0, 3.0)),
        "relu" => one(OpKind::Relu, "relu", rand_away_from_zero(rng, &[m, n])),
        "softmax" => one(OpKind::Softmax, "softmax", rand_tensor(rng, &[m, n + 1], -2.0, 2.0)),
        "log" => one(OpKind::Log, "log", rand_tensor(rng, &[m, n], 0.2, 3.0)),
        "gather" => {
            let vocab = k + 1;
            let len = rng.gen_range(1..=5);
            let idx = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
            one(OpKind::Gather(idx), "gather", rand_tensor(rng, &[vocab, n], -1.0, 1.0))
        }
        "concat" => two(
            OpKind::Concat,
            "concat",
            rand_tensor(rng, &[m, k], -1.0, 1.0),
            rand_tensor(rng, &[m, n], -1.0, 1.0),
        ),
        "slice_cols" => {
            let width = k + n;
            let start = rng.gen_range(0..width);
            let len = rng.gen_range(1..=width - start);
            one(
                OpKind::SliceCols { start, len },
                "slice_cols",
                rand_tensor(rng, &[m, width], -1.0, 1.0),
            )
        }
        "reshape" => one(
            OpKind::Reshape(vec![n, m]),
            "reshape",
            rand_tensor(rng, &[m, n], -1.0, 1.0),
        ),
        "sum_groups" => {
            let g = rng.gen_range(1..=3);
            one(
                OpKind::SumGroups(g),
                "sum_groups",
                rand_tensor(rng, &[g * m, n], -1.0, 1.0),
            )
        }
        "sum" => one(OpKind::Sum, "sum", rand_tensor(rng, &[m, n], -1.0, 1.0)),
        "mean" => one(OpKind::Mean, "mean", rand_tensor(rng, &[m, n], -1.0, 1.0)),
        "cross_entropy" => {
            let classes = n + 1;
            let probs = rand_tensor(rng, &[m, classes], 0.1, 1.0);
            let targets = (0..m).map(|_| rng.gen_range(0..classes)).collect();
            let weights = (0..m).map(|_| rng.gen_range(0.0f32..1.0)).collect();
            one(OpKind::CrossEntropy { targets, weights }, "cross_entropy", probs)
        }
        "straight_through" => {
            let soft = rand_tensor(rng, &[m, n], 0.0, 1.0);
            let hard = rand_tensor(rng, &[m, n], 0.0, 1.0);
            OpCase {
                name: "straight_through",
                kind: OpKind::StraightThrough,
                inputs: vec![soft, hard],
                differentiable: vec![true, false],
            }
        }
        other => panic!("no random case for op `{other}`"),
    }
}

struct Arr {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Arr {
    fn last(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
    fn rows(&self) -> usize {
        self.data.len() / self.last().max(1)
    }
}

fn bin(x: &Arr, y: &Arr, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let cols = x.last();
    x.data
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let b = if y.data.len() == x.data.len() {
                y.data[i]
            } else if y.data.len() == 1 {
                y.data[0]
            } else if y.data.len() == cols && y.last() == cols {
                y.data[i % cols]
            } else {
                y.data[i / cols]
            };
            f(a, b)
        })
        .collect()
}

/// Reference forward in f64. For `StraightThrough` this is the relaxed
/// identity on the soft input, which is the function whose derivative the
/// estimator passes back.
fn reference_forward(kind: &OpKind, xs: &[Arr]) -> Vec<f64> {
    let x = &xs[0];
    match kind {
        OpKind::MatMul => {
            let y = &xs[1];
            let (m, k, n) = (x.shape[0], x.shape[1], y.shape[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] = (0..k).map(|p| x.data[i * k + p] * y.data[p * n + j]).sum();
                }
            }
            out
        }
        OpKind::Add => bin(x, &xs[1], |a, b| a + b),
        OpKind::Sub => bin(x, &xs[1], |a, b| a - b),
        OpKind::Mul => bin(x, &xs[1], |a, b| a * b),
        OpKind::Scale(c) => x.data.iter().map(|v| v * f64::from(*c)).collect(),
        OpKind::Tanh => x.data.iter().map(|v| v.tanh()).collect(),
        OpKind::Sigmoid => x.data.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
        OpKind::Relu => x.data.iter().map(|v| v.max(0.0)).collect(),
        OpKind::Log => x.data.iter().map(|v| v.ln()).collect(),
        OpKind::Softmax => {
            let c = x.last();
            let mut out = Vec::with_capacity(x.data.len());
            for r in 0..x.rows() {
                let row = &x.data[r * c..(r + 1) * c];
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                out.extend(row.iter().map(|v| v.exp() / z));
            }
            out
        }
        OpKind::Gather(idx) => {
            let d = x.shape[1];
            idx.iter()
                .flat_map(|&i| x.data[i * d..(i + 1) * d].iter().copied())
                .collect()
        }
        OpKind::Concat => {
            let rows = x.rows();
            let mut out = Vec::new();
            for r in 0..rows {
                for a in xs {
                    let w = a.last();
                    out.extend_from_slice(&a.data[r * w..(r + 1) * w]);
                }
            }
            out
        }
        OpKind::SliceCols { start, len } => {
            let w = x.last();
            (0..x.rows())
                .flat_map(|r| x.data[r * w + start..r * w + start + len].iter().copied())
                .collect()
        }
        OpKind::Reshape(_) => x.data.clone(),
        OpKind::SumGroups(g) => {
            let w = x.last();
            let mut out = vec![0.0; x.rows() / g * w];
            for r in 0..x.rows() {
                for c in 0..w {
                    out[(r / g) * w + c] += x.data[r * w + c];
                }
            }
            out
        }
        OpKind::Sum => vec![x.data.iter().sum()],
        OpKind::Mean => vec![x.data.iter().sum::<f64>() / x.data.len() as f64],
        OpKind::CrossEntropy { targets, weights } => {
            let c = x.last();
            let l = targets
                .iter()
                .zip(weights)
                .enumerate()
                .map(|(r, (&t, &w))| -f64::from(w) * x.data[r * c + t].ln())
                .sum();
            vec![l]
        }
        OpKind::StraightThrough => x.data.clone(),
    }
}

/// Runs one finite-difference check of `case` with central step `step`.
pub fn check_case<R: Rng>(case: &OpCase, step: f64, rng: &mut R) -> Result<CheckReport> {
    let mut tape = Tape::new();
    let mut vars = Vec::new();
    for (i, (t, &d)) in case.inputs.iter().zip(&case.differentiable).enumerate() {
        vars.push(if d {
            tape.param(&format!("in{i}"), t.clone())?
        } else {
            tape.constant(t.clone())
        });
    }
    let y = tape.forward_op(case.kind.clone(), &vars)?;
    let out_shape = tape.value(y).shape().to_vec();
    let out_len = tape.value(y).len();
    let weights: Vec<f32> = (0..out_len).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let c = tape.constant(Tensor::new(out_shape, weights.clone())?);
    let prod = tape.mul(y, c)?;
    let loss = tape.sum(prod)?;
    let grads = tape.backward(loss)?;

    let base: Vec<Arr> = case
        .inputs
        .iter()
        .map(|t| Arr {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| f64::from(v)).collect(),
        })
        .collect();
    let objective = |xs: &[Arr]| -> f64 {
        reference_forward(&case.kind, xs)
            .iter()
            .zip(&weights)
            .map(|(v, &w)| v * f64::from(w))
            .sum()
    };

    let mut max_diff = 0.0f64;
    let mut max_num = 0.0f64;
    let mut coordinates = 0;
    let mut work: Vec<Arr> = base
        .iter()
        .map(|a| Arr {
            shape: a.shape.clone(),
            data: a.data.clone(),
        })
        .collect();
    for (i, &d) in case.differentiable.iter().enumerate() {
        if !d {
            continue;
        }
        let analytic = grads.get(&format!("in{i}")).expect("input gradient");
        for j in 0..base[i].data.len() {
            let orig = base[i].data[j];
            work[i].data[j] = orig + step;
            let up = objective(&work);
            work[i].data[j] = orig - step;
            let down = objective(&work);
            work[i].data[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = f64::from(analytic.data()[j]);
            max_diff = max_diff.max((a - numeric).abs());
            max_num = max_num.max(numeric.abs());
            coordinates += 1;
        }
    }
    Ok(CheckReport {
        name: case.name,
        max_rel_error: max_diff / max_num.max(1e-6),
        coordinates,
    })
}
