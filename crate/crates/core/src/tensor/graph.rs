//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op evaluates eagerly when it is recorded, so a [`Graph`] built from a
//! set of leaf bindings *is* the forward evaluation. Node values are never
//! mutated after they are recorded; replaying a model under another execution
//! context means building a fresh graph.

use std::collections::BTreeMap;

use super::{matmul_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { trainable: bool },
    Constant,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sqrt(Var),
    Square(Var),
    Abs(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Broadcast(Var),
    SliceCols(Var, usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "multiply",
            Op::Div(..) => "divide",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softplus(..) => "softplus",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Abs(..) => "abs",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Broadcast(..) => "broadcast",
            Op::SliceCols(..) => "slice_cols",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// A computation graph over [`Tensor`] values.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, Var>,
}

/// Gradients of a scalar output with respect to every trainable leaf, by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.by_name
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a graph whose leaves are the given bindings, all trainable.
    pub fn with_bindings<'a>(bindings: impl IntoIterator<Item = (&'a String, &'a Tensor)>) -> Result<Self> {
        let mut g = Self::new();
        for (name, t) in bindings {
            g.leaf(name, t.clone(), true)?;
        }
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a named input. Gradients are reported for trainable leaves only.
    pub fn leaf(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<Var> {
        if self.leaves.contains_key(name) {
            return Err(Error::Contract(format!("duplicate leaf name {name:?}")));
        }
        if !value.is_finite() {
            return Err(Error::Numeric {
                context: format!("leaf {name:?}"),
                detail: "non-finite binding".into(),
            });
        }
        let v = self.push(
            Op::Leaf { trainable },
            value,
        );
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn leaf_var(&self, name: &str) -> Option<Var> {
        self.leaves.get(name).copied()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric {
                context: format!("{} (node {})", op.name(), self.nodes.len()),
                detail: "non-finite intermediate value".into(),
            });
        }
        Ok(self.push(op, value))
    }

    fn dim_err(&self, op: &'static str, detail: String) -> Error {
        Error::Dimension {
            op,
            node: self.nodes.len(),
            detail,
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err(
                op,
                format!("operands {:?} and {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.dim_err("matmul", format!("{sa:?} · {sb:?}")));
        }
        let v = matmul_raw(self.value(a).data(), self.value(b).data(), sa[0], sa[1], sb[1]);
        self.record(Op::MatMul(a, b), v)
    }

    /// `a · bᵀ` for `m×k` and `n×k` operands, the layout of a dense layer.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(self.dim_err("matmul_t", format!("{sa:?} · {sb:?}ᵀ")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.record(Op::MatMulT(a, b), t)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let v = self.value(a).zip_map(self.value(b), f)?;
        self.record(op, v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let v = self.value(a).map(f);
        self.record(op, v)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// Row-wise log-softmax of a `B×K` matrix.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(self.dim_err("log_softmax", format!("expects a matrix, got {:?}", t.shape())));
        }
        let k = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        self.record(Op::LogSoftmax(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.record(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a).mean();
        self.record(Op::Mean(a), Tensor::scalar(m))
    }

    /// Broadcasts a scalar to any shape, or a length-`n` vector across the rows
    /// of a `B×n` matrix (bias-add over the batch axis).
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let n: usize = shape.iter().product();
        let data = match src.shape() {
            [] => vec![src.item(); n],
            s if s == shape => src.data().to_vec(),
            [c] if shape.len() == 2 && shape[1] == *c => {
                let mut d = Vec::with_capacity(n);
                for _ in 0..shape[0] {
                    d.extend_from_slice(src.data());
                }
                d
            }
            s => return Err(self.dim_err("broadcast", format!("{s:?} → {shape:?}"))),
        };
        let v = Tensor::new(shape.to_vec(), data)?;
        self.record(Op::Broadcast(a), v)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || start >= end || end > t.cols() {
            return Err(self.dim_err(
                "slice_cols",
                format!("columns {start}..{end} of {:?}", t.shape()),
            ));
        }
        let c = t.cols();
        let mut d = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            d.extend_from_slice(&t.data()[r * c + start..r * c + end]);
        }
        let v = Tensor::new(vec![t.rows(), end - start], d)?;
        self.record(Op::SliceCols(a, start, end), v)
    }

    /// Reverse sweep from a scalar output.
    ///
    /// Trainable leaves that do not influence `output` receive zero gradients.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = node.value.data();
            match &node.op {
                Op::Leaf { .. } | Op::Constant => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let mut ga = vec![0.0; m * k];
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        for c in 0..n {
                            let gv = g[r * n + c];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[r * k + p] += gv * bv[p * n + c];
                                gb[p * n + c] += av[r * k + p] * gv;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[0]);
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let mut ga = vec![0.0; m * k];
                    let mut gb = vec![0.0; n * k];
                    for r in 0..m {
                        for c in 0..n {
                            let gv = g[r * n + c];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[r * k + p] += gv * bv[c * k + p];
                                gb[c * k + p] += gv * av[r * k + p];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.iter().map(|v| -v).collect());
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    accumulate(&mut grads, *a, zip3(&g, bv, |gv, b| gv * b));
                    accumulate(&mut grads, *b, zip3(&g, av, |gv, a| gv * a));
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b).data();
                    let ga = zip3(&g, bv, |gv, b| gv / b);
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(y)
                        .zip(bv)
                        .map(|((gv, yv), b)| -gv * yv / b)
                        .collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Neg(a) => accumulate(&mut grads, *a, g.iter().map(|v| -v).collect()),
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.iter().map(|v| c * v).collect()),
                Op::Offset(a) => accumulate(&mut grads, *a, g),
                Op::Tanh(a) => accumulate(&mut grads, *a, zip3(&g, y, |gv, t| gv * (1.0 - t * t))),
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    accumulate(&mut grads, *a, zip3(&g, x, |gv, x| if x > 0.0 { gv } else { 0.0 }))
                }
                Op::Exp(a) => accumulate(&mut grads, *a, zip3(&g, y, |gv, e| gv * e)),
                Op::Log(a) => {
                    let x = self.value(*a).data();
                    accumulate(&mut grads, *a, zip3(&g, x, |gv, x| gv / x))
                }
                Op::Softplus(a) => {
                    let x = self.value(*a).data();
                    accumulate(&mut grads, *a, zip3(&g, x, |gv, x| gv * sigmoid(x)))
                }
                // Subgradient 0 where the root is exactly 0.
                Op::Sqrt(a) => accumulate(
                    &mut grads,
                    *a,
                    zip3(&g, y, |gv, s| if s > 0.0 { gv / (2.0 * s) } else { 0.0 }),
                ),
                Op::Square(a) => {
                    let x = self.value(*a).data();
                    accumulate(&mut grads, *a, zip3(&g, x, |gv, x| 2.0 * gv * x))
                }
                Op::Abs(a) => {
                    let x = self.value(*a).data();
                    accumulate(&mut grads, *a, zip3(&g, x, |gv, x| gv * sign(x)))
                }
                Op::LogSoftmax(a) => {
                    let k = node.value.cols();
                    let mut ga = vec![0.0; g.len()];
                    for ((grow, yrow), out) in g.chunks(k).zip(y.chunks(k)).zip(ga.chunks_mut(k)) {
                        let gs: f64 = grow.iter().sum();
                        for j in 0..k {
                            out[j] = grow[j] - yrow[j].exp() * gs;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut grads, *a, vec![g[0] / n as f64; n]);
                }
                Op::Broadcast(a) => {
                    let src = self.value(*a);
                    let ga = match src.shape() {
                        [] => vec![g.iter().sum()],
                        s if s == node.value.shape() => g,
                        _ => {
                            let c = src.len();
                            let mut acc = vec![0.0; c];
                            for row in g.chunks(c) {
                                acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                            }
                            acc
                        }
                    };
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start, end) => {
                    let src = self.value(*a);
                    let c = src.cols();
                    let w = end - start;
                    let mut ga = vec![0.0; src.len()];
                    for r in 0..src.rows() {
                        ga[r * c + start..r * c + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }

        let mut by_name = BTreeMap::new();
        for (name, var) in &self.leaves {
            let Op::Leaf { trainable, .. } = &self.nodes[var.0].op else {
                unreachable!()
            };
            if !trainable {
                continue;
            }
            let shape = self.shape(*var).to_vec();
            let g = grads
                .get(var.0)
                .and_then(|g| g.clone())
                .map(|d| Tensor::new(shape.clone(), d))
                .transpose()?
                .unwrap_or_else(|| Tensor::zeros(&shape));
            by_name.insert(name.clone(), g);
        }
        Ok(Gradients { by_name })
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip3(g: &[f64], other: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    g.iter().zip(other).map(|(&a, &b)| f(a, b)).collect()
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}
