//! Minimal reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Graph`] is a tape: every primitive application appends a node holding
//! its value, and nodes that depend on a trainable leaf also keep a record of
//! the primitive, its parents and whatever local partials the backward pass
//! needs. Because nodes are created in evaluation order, walking the tape in
//! reverse creation order is a valid topological order for backpropagation.
//!
//! Broadcasting is limited to a rank-1 right operand that matches the trailing
//! dimension of a rank-2 left operand (a bias added to every row of a batch).
//! Anything else is a shape error.

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&s| s == 0) {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} must be non-empty with positive sizes"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        Tensor::new(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidTensor("ragged rows".into()));
        }
        Tensor::matrix(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::matrix(n, n, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Number of rows of a matrix (the leading dimension for any rank).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a matrix; 1 for vectors.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Gathers the given rows of a matrix into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= self.rows() {
                return Err(Error::InvalidArgument(format!(
                    "row {i} out of range for {} rows",
                    self.rows()
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::matrix(indices.len(), c, data)
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// The supported differentiable primitives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    /// Multiplication by a constant scalar.
    Scale(f64),
    MatMul,
    Transpose,
    Relu,
    Tanh,
    Exp,
    Log,
    LogSumExp { axis: usize },
    Mean,
    ReduceSum { axis: Option<usize> },
    /// Pairwise Euclidean distances between the rows of two matrices.
    L2NormOfDifference,
    Max { axis: usize },
    /// `max(x, floor)` elementwise; the gradient is zero where clamped.
    ClampMin(f64),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scalar_mul",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Relu => "relu",
            Primitive::Tanh => "tanh",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::LogSumExp { .. } => "log_sum_exp",
            Primitive::Mean => "reduce_mean",
            Primitive::ReduceSum { .. } => "reduce_sum",
            Primitive::L2NormOfDifference => "l2_norm_of_difference",
            Primitive::Max { .. } => "max",
            Primitive::ClampMin(_) => "clamp_min",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::MatMul
            | Primitive::L2NormOfDifference => 2,
            _ => 1,
        }
    }
}

#[derive(Debug)]
enum Cache {
    None,
    /// Right operand was broadcast over the leading batch dimension.
    Broadcast,
    /// Per-output argmax position within the reduced axis.
    Argmax(Vec<usize>),
    /// Softmax weights along the reduced axis.
    Softmax(Vec<f64>),
}

/// Record of one primitive application on the tape.
#[derive(Debug)]
struct Record {
    kind: Primitive,
    parents: Vec<usize>,
    cache: Cache,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    record: Option<Record>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A tape of tensor computations supporting reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a trainable leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let n = value.len();
        self.push(Node {
            value,
            record: None,
            requires_grad: true,
            grad: Some(vec![0.0; n]),
        })
    }

    /// Adds a value that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            record: None,
            requires_grad: false,
            grad: None,
        })
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf; `None` for constants and
    /// intermediate nodes.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Parents of a recorded node, in operand order.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0]
            .record
            .as_ref()
            .map(|r| r.parents.iter().map(|&p| Var(p)).collect())
            .unwrap_or_default()
    }

    /// All leaves created with [`Graph::leaf`], in creation order.
    pub fn trainable_leaves(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.record.is_none() && n.requires_grad)
            .map(|(i, _)| Var(i))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    /// Applies a primitive to the given operands and appends the result.
    pub fn apply(&mut self, kind: Primitive, operands: &[Var]) -> Result<Var> {
        if operands.len() != kind.arity() {
            return Err(Error::InvalidArgument(format!(
                "{} takes {} operands, got {}",
                kind.name(),
                kind.arity(),
                operands.len()
            )));
        }
        let (value, cache) = {
            let vals: Vec<&Tensor> = operands.iter().map(|v| &self.nodes[v.0].value).collect();
            forward(kind, &vals)?
        };
        let requires_grad = operands.iter().any(|v| self.nodes[v.0].requires_grad);
        let record = requires_grad.then(|| Record {
            kind,
            parents: operands.iter().map(|v| v.0).collect(),
            cache,
        });
        Ok(self.push(Node {
            value,
            record,
            requires_grad,
            grad: None,
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }

    pub fn log_sum_exp(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::LogSumExp { axis }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::ReduceSum { axis: None }, &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::ReduceSum { axis: Some(axis) }, &[a])
    }

    pub fn l2_norm_of_difference(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::L2NormOfDifference, &[a, b])
    }

    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Max { axis }, &[a])
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.apply(Primitive::ClampMin(floor), &[a])
    }

    /// Accumulates `d(root)/d(leaf)` into every trainable leaf reachable from
    /// `root`. Repeated calls add to the existing gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut upstream: Vec<Option<Vec<f64>>> = Vec::new();
        upstream.resize_with(root.0 + 1, || None);
        upstream[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let Some(g) = upstream[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            match &node.record {
                None => {
                    if let Some(acc) = self.nodes[id].grad.as_mut() {
                        acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                }
                Some(record) => {
                    let parents: Vec<&Tensor> =
                        record.parents.iter().map(|&p| &self.nodes[p].value).collect();
                    let grads = local_backward(record, &parents, &node.value, &g);
                    for (&p, pg) in record.parents.iter().zip(grads) {
                        if !self.nodes[p].requires_grad {
                            continue;
                        }
                        match upstream[p].as_mut() {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => upstream[p] = Some(pg),
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn shape_error(kind: Primitive, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        primitive: kind.name(),
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Whether `b` combines with `a` elementwise, possibly broadcast over the
/// leading batch dimension of `a`.
fn elementwise_layout(kind: Primitive, a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.shape() == b.shape() {
        Ok(false)
    } else if a.rank() == 2 && b.rank() == 1 && b.shape()[0] == a.shape()[1] {
        Ok(true)
    } else {
        Err(shape_error(kind, a, b))
    }
}

/// (outer, len, inner, output shape) for a reduction along `axis`.
fn reduce_layout(
    kind: Primitive,
    shape: &[usize],
    axis: usize,
) -> Result<(usize, usize, usize, Vec<usize>)> {
    if axis >= shape.len() {
        return Err(Error::Domain {
            primitive: kind.name(),
            message: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &s)| s)
        .collect();
    if out.is_empty() {
        out.push(1);
    }
    Ok((outer, shape[axis], inner, out))
}

fn forward(kind: Primitive, ops: &[&Tensor]) -> Result<(Tensor, Cache)> {
    let a = ops[0];
    let unary = |f: &dyn Fn(f64) -> f64| (a.map(f), Cache::None);
    Ok(match kind {
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let b = ops[1];
            let broadcast = elementwise_layout(kind, a, b)?;
            let bl = b.len();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = b.data()[if broadcast { i % bl } else { i }];
                    match kind {
                        Primitive::Add => x + y,
                        Primitive::Sub => x - y,
                        _ => x * y,
                    }
                })
                .collect();
            let cache = if broadcast { Cache::Broadcast } else { Cache::None };
            (Tensor::new(a.shape().to_vec(), data)?, cache)
        }
        Primitive::Scale(c) => unary(&|x| c * x),
        Primitive::MatMul => {
            let b = ops[1];
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_error(kind, a, b));
            }
            (matmul(a, b), Cache::None)
        }
        Primitive::Transpose => {
            if a.rank() != 2 {
                return Err(Error::ShapeMismatch {
                    primitive: kind.name(),
                    lhs: a.shape().to_vec(),
                    rhs: vec![],
                });
            }
            (transpose(a), Cache::None)
        }
        Primitive::Relu => unary(&|x| if x > 0.0 { x } else { 0.0 }),
        Primitive::Tanh => unary(&f64::tanh),
        Primitive::Exp => unary(&f64::exp),
        Primitive::Log => {
            if let Some(bad) = a.data().iter().find(|&&x| !(x > 0.0)) {
                return Err(Error::Domain {
                    primitive: kind.name(),
                    message: format!("log of non-positive value {bad}"),
                });
            }
            unary(&f64::ln)
        }
        Primitive::ClampMin(floor) => unary(&|x| if x > floor { x } else { floor }),
        Primitive::Mean => (
            Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64),
            Cache::None,
        ),
        Primitive::ReduceSum { axis: None } => {
            (Tensor::scalar(a.data().iter().sum()), Cache::None)
        }
        Primitive::ReduceSum { axis: Some(axis) } => {
            let (outer, len, inner, shape) = reduce_layout(kind, a.shape(), axis)?;
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += a.data()[(o * len + l) * inner + i];
                    }
                }
            }
            (Tensor::new(shape, out)?, Cache::None)
        }
        Primitive::LogSumExp { axis } => {
            let (outer, len, inner, shape) = reduce_layout(kind, a.shape(), axis)?;
            let mut out = vec![0.0; outer * inner];
            let mut weights = vec![0.0; a.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let m = (0..len)
                        .map(|l| a.data()[idx(l)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for l in 0..len {
                        let e = (a.data()[idx(l)] - m).exp();
                        weights[idx(l)] = e;
                        s += e;
                    }
                    for l in 0..len {
                        weights[idx(l)] /= s;
                    }
                    out[o * inner + i] = m + s.ln();
                }
            }
            (Tensor::new(shape, out)?, Cache::Softmax(weights))
        }
        Primitive::Max { axis } => {
            let (outer, len, inner, shape) = reduce_layout(kind, a.shape(), axis)?;
            let mut out = vec![0.0; outer * inner];
            let mut argmax = vec![0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = 0;
                    for l in 1..len {
                        if a.data()[(o * len + l) * inner + i] > a.data()[(o * len + best) * inner + i]
                        {
                            best = l;
                        }
                    }
                    argmax[o * inner + i] = best;
                    out[o * inner + i] = a.data()[(o * len + best) * inner + i];
                }
            }
            (Tensor::new(shape, out)?, Cache::Argmax(argmax))
        }
        Primitive::L2NormOfDifference => {
            let b = ops[1];
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
                return Err(shape_error(kind, a, b));
            }
            let (n, m) = (a.rows(), b.rows());
            let mut out = Vec::with_capacity(n * m);
            for i in 0..n {
                for j in 0..m {
                    let s: f64 = a
                        .row(i)
                        .iter()
                        .zip(b.row(j))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    out.push(s.sqrt());
                }
            }
            (Tensor::matrix(n, m, out)?, Cache::None)
        }
    })
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a.data[i * k + t] * b.data[t * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    Tensor {
        shape: vec![n, m],
        data: out,
    }
}

fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Tensor {
        shape: vec![c, r],
        data: out,
    }
}

/// Sums a gradient of shape `[n, k]` over its rows to match a broadcast `[k]` operand.
fn unbroadcast(g: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k];
    for (i, x) in g.iter().enumerate() {
        out[i % k] += x;
    }
    out
}

fn local_backward(record: &Record, parents: &[&Tensor], out: &Tensor, g: &[f64]) -> Vec<Vec<f64>> {
    let a = parents[0];
    let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..g.len()).map(f).collect() };
    match record.kind {
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let b = parents[1];
            let broadcast = matches!(record.cache, Cache::Broadcast);
            let bl = b.len();
            let bval = |i: usize| b.data()[if broadcast { i % bl } else { i }];
            let (ga, gb): (Vec<f64>, Vec<f64>) = match record.kind {
                Primitive::Add => (g.to_vec(), g.to_vec()),
                Primitive::Sub => (g.to_vec(), g.iter().map(|x| -x).collect()),
                _ => (
                    elementwise(&|i| g[i] * bval(i)),
                    elementwise(&|i| g[i] * a.data()[i]),
                ),
            };
            let gb = if broadcast { unbroadcast(&gb, bl) } else { gb };
            vec![ga, gb]
        }
        Primitive::Scale(c) => vec![g.iter().map(|x| c * x).collect()],
        Primitive::MatMul => {
            let b = parents[1];
            let gt = Tensor {
                shape: out.shape().to_vec(),
                data: g.to_vec(),
            };
            let ga = matmul(&gt, &transpose(b));
            let gb = matmul(&transpose(a), &gt);
            vec![ga.data, gb.data]
        }
        Primitive::Transpose => {
            let gt = Tensor {
                shape: out.shape().to_vec(),
                data: g.to_vec(),
            };
            vec![transpose(&gt).data]
        }
        Primitive::Relu => vec![elementwise(&|i| if a.data()[i] > 0.0 { g[i] } else { 0.0 })],
        Primitive::Tanh => vec![elementwise(&|i| g[i] * (1.0 - out.data()[i] * out.data()[i]))],
        Primitive::Exp => vec![elementwise(&|i| g[i] * out.data()[i])],
        Primitive::Log => vec![elementwise(&|i| g[i] / a.data()[i])],
        Primitive::ClampMin(floor) => {
            vec![elementwise(&|i| if a.data()[i] > floor { g[i] } else { 0.0 })]
        }
        Primitive::Mean => vec![vec![g[0] / a.len() as f64; a.len()]],
        Primitive::ReduceSum { axis: None } => vec![vec![g[0]; a.len()]],
        Primitive::ReduceSum { axis: Some(axis) } | Primitive::LogSumExp { axis } => {
            let (outer, len, inner, _) =
                reduce_layout(record.kind, a.shape(), axis).expect("validated in forward");
            let mut ga = vec![0.0; a.len()];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        let idx = (o * len + l) * inner + i;
                        let w = match &record.cache {
                            Cache::Softmax(w) => w[idx],
                            _ => 1.0,
                        };
                        ga[idx] = g[o * inner + i] * w;
                    }
                }
            }
            vec![ga]
        }
        Primitive::Max { axis } => {
            let (outer, len, inner, _) =
                reduce_layout(record.kind, a.shape(), axis).expect("validated in forward");
            let Cache::Argmax(argmax) = &record.cache else {
                unreachable!("max records its argmax")
            };
            let mut ga = vec![0.0; a.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let l = argmax[o * inner + i];
                    ga[(o * len + l) * inner + i] = g[o * inner + i];
                }
            }
            vec![ga]
        }
        Primitive::L2NormOfDifference => {
            let b = parents[1];
            let (n, m, d) = (a.rows(), b.rows(), a.cols());
            let mut ga = vec![0.0; a.len()];
            let mut gb = vec![0.0; b.len()];
            for i in 0..n {
                for j in 0..m {
                    let dist = out.data()[i * m + j];
                    if dist == 0.0 {
                        continue;
                    }
                    let coef = g[i * m + j] / dist;
                    for c in 0..d {
                        let diff = a.data()[i * d + c] - b.data()[j * d + c];
                        ga[i * d + c] += coef * diff;
                        gb[j * d + c] -= coef * diff;
                    }
                }
            }
            vec![ga, gb]
        }
    }
}

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_abs_discrepancy: f64,
    pub max_rel_discrepancy: f64,
    /// (point index, coordinate) of the worst relative discrepancy.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub error: Option<String>,
}

/// Absolute tolerance below which a coordinate passes regardless of `rel_tol`.
pub const GRAD_CHECK_ABS_FLOOR: f64 = 1e-8;

/// Compares analytic and numeric gradients coordinate by coordinate.
pub fn compare_gradients(analytic: &[Vec<f64>], numeric: &[Vec<f64>], rel_tol: f64) -> GradCheckReport {
    let mut report = GradCheckReport {
        passed: true,
        max_abs_discrepancy: 0.0,
        max_rel_discrepancy: 0.0,
        worst: None,
        checked: 0,
        error: None,
    };
    for (p, (an, nu)) in analytic.iter().zip(numeric).enumerate() {
        for (c, (&a, &n)) in an.iter().zip(nu).enumerate() {
            report.checked += 1;
            let abs = (a - n).abs();
            let scale = a.abs().max(n.abs());
            let rel = if scale > 0.0 { abs / scale } else { 0.0 };
            report.max_abs_discrepancy = report.max_abs_discrepancy.max(abs);
            let ok = abs.is_finite() && (abs <= GRAD_CHECK_ABS_FLOOR || rel <= rel_tol);
            if abs > GRAD_CHECK_ABS_FLOOR && rel > report.max_rel_discrepancy {
                report.max_rel_discrepancy = rel;
                report.worst = Some((p, c));
            }
            if !ok {
                report.passed = false;
            }
        }
    }
    report
}

fn evaluate<F>(f: &F, points: &[Tensor], trainable: bool) -> Result<(Graph, Var, Vec<Var>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points
        .iter()
        .map(|p| {
            if trainable {
                g.leaf(p.clone())
            } else {
                g.constant(p.clone())
            }
        })
        .collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::NonScalarRoot(g.value(out).shape().to_vec()));
    }
    Ok((g, out, vars))
}

/// Central finite-difference gradient of a scalar function of several tensors.
pub fn numeric_gradient<F>(f: &F, points: &[Tensor], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = points.to_vec();
    let mut out = Vec::with_capacity(points.len());
    for p in 0..points.len() {
        let mut grad = vec![0.0; points[p].len()];
        for (c, slot) in grad.iter_mut().enumerate() {
            let x0 = points[p].data()[c];
            work[p].data_mut()[c] = x0 + h;
            let (g, v, _) = evaluate(f, &work, false)?;
            let plus = g.value(v).item();
            work[p].data_mut()[c] = x0 - h;
            let (g, v, _) = evaluate(f, &work, false)?;
            let minus = g.value(v).item();
            work[p].data_mut()[c] = x0;
            *slot = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Reverse-mode gradient of a scalar function of several tensors.
pub fn analytic_gradient<F>(f: &F, points: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut g, out, vars) = evaluate(f, points, true)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect())
}

/// Checks reverse-mode gradients of `f` against central finite differences
/// with step `h`, for a function of several tensor arguments.
pub fn grad_check_many<F>(f: F, points: &[Tensor], h: f64, rel_tol: f64) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let run = || -> Result<GradCheckReport> {
        if !(h > 0.0) {
            return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
        }
        let analytic = analytic_gradient(&f, points)?;
        let numeric = numeric_gradient(&f, points, h)?;
        Ok(compare_gradients(&analytic, &numeric, rel_tol))
    };
    run().unwrap_or_else(|e| GradCheckReport {
        passed: false,
        max_abs_discrepancy: f64::NAN,
        max_rel_discrepancy: f64::NAN,
        worst: None,
        checked: 0,
        error: Some(e.to_string()),
    })
}

/// Single-argument form of [`grad_check_many`].
pub fn grad_check<F>(f: F, point: &Tensor, h: f64, rel_tol: f64) -> GradCheckReport
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(point), h, rel_tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(3).unwrap());
        let a = Tensor::matrix(3, 3, (0..9).map(|x| x as f64 * 0.7 - 2.0).collect()).unwrap();
        let av = g.constant(a.clone());
        let p = g.matmul(i, av).unwrap();
        assert_eq!(g.value(p), &a);
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 2.0]).unwrap());
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn log_sum_exp_is_shifted() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1000.0, 1000.0]).unwrap());
        let y = g.log_sum_exp(x, 0).unwrap();
        assert!(close(g.value(y).item(), 1000.0 + 2f64.ln(), 1e-9));
        assert!((g.value(y).item() - 1000.693147).abs() < 1e-6);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn relu_subgradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![-1.0, 2.0]).unwrap());
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_at_zero_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let r = g.relu(x).unwrap();
        g.backward(r).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn backward_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[12.0]);
        g.zero_grad();
        assert_eq!(g.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn shape_error_names_primitive_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[4]).unwrap());
        let err = g.add(a, c).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[4]"), "{err}");
    }

    #[test]
    fn log_domain_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 0.0]).unwrap());
        assert!(matches!(g.log(a), Err(Error::Domain { .. })));
        let b = g.constant(Tensor::vector(vec![-2.0]).unwrap());
        assert!(matches!(g.log(b), Err(Error::Domain { .. })));
    }

    #[test]
    fn bias_broadcast_over_batch() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.leaf(Tensor::vector(vec![10.0, 20.0]).unwrap());
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn constants_record_nothing() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.exp(a).unwrap();
        assert!(!g.requires_grad(b));
        assert!(g.parents(b).is_empty());
        assert!(g.grad(a).is_none());
    }

    #[test]
    fn records_point_to_earlier_nodes() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.3, -0.2]).unwrap());
        let t = g.tanh(x).unwrap();
        let e = g.exp(t).unwrap();
        let s = g.mul(e, t).unwrap();
        for v in [t, e, s] {
            assert!(g.parents(v).iter().all(|p| p.id() < v.id()));
        }
    }

    #[test]
    fn pairwise_distance_values() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap());
        let d = g.l2_norm_of_difference(a, b).unwrap();
        assert_eq!(g.value(d).data(), &[5.0, 0.0]);
    }

    #[test]
    fn grad_check_square_passes() {
        let report = grad_check(|g, x| g.mul(x, x), &Tensor::scalar(1.0), 1e-5, 1e-4);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let f = |g: &mut Graph, v: &[Var]| {
            let t = g.tanh(v[0])?;
            let s = g.mul(t, v[0])?;
            g.sum(s)
        };
        let p = vec![Tensor::vector(vec![0.4, -1.3, 2.2]).unwrap()];
        let mut analytic = analytic_gradient(&f, &p).unwrap();
        let numeric = numeric_gradient(&f, &p, 1e-5).unwrap();
        assert!(compare_gradients(&analytic, &numeric, 1e-4).passed);
        analytic[0].iter_mut().for_each(|x| *x *= 1.1);
        let report = compare_gradients(&analytic, &numeric, 1e-4);
        assert!(!report.passed);
        assert!(report.max_rel_discrepancy > 0.05);
    }

    #[test]
    fn grad_check_reports_errors() {
        let report = grad_check(|g, x| g.log(x), &Tensor::scalar(-1.0), 1e-5, 1e-4);
        assert!(!report.passed);
        assert!(report.error.is_some());
    }

    #[test]
    fn reductions_along_axes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, 5.0, 3.0, 4.0, 2.0, 6.0]).unwrap());
        let m0 = g.max_axis(x, 0).unwrap();
        let m1 = g.max_axis(x, 1).unwrap();
        let s0 = g.sum_axis(x, 0).unwrap();
        let s1 = g.sum_axis(x, 1).unwrap();
        assert_eq!(g.value(m0).data(), &[4.0, 5.0, 6.0]);
        assert_eq!(g.value(m1).data(), &[5.0, 6.0]);
        assert_eq!(g.value(s0).data(), &[5.0, 7.0, 9.0]);
        assert_eq!(g.value(s1).data(), &[9.0, 12.0]);
    }
}
