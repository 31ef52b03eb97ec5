//! Tape-based reverse-mode automatic differentiation over tensors.
//!
//! Operations are recorded in creation order, so walking the tape
//! backwards visits every node in reverse topological order exactly once.
//! The tape carries a seeded RNG so stochastic forward passes (completion
//! sampling) stay reproducible.

use std::cell::RefCell;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::params::ParameterMap;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("backward root must be a scalar, got {numel} elements")]
    NonScalarRoot { numel: usize },
    #[error("gather index {index} out of bounds for {bound} columns")]
    IndexOutOfBounds { index: usize, bound: usize },
    #[error("parameter {0} missing from map")]
    MissingParameter(String),
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f32),
    Matmul(usize, usize),
    /// rows of a [B,n] matrix plus a length-n bias row
    AddRow(usize, usize),
    Tanh(usize),
    Exp(usize),
    Clamp(usize, f32, f32),
    Minimum(usize, usize),
    LogSoftmaxRows(usize),
    /// out[b] = a[b, idx[b]]
    GatherRows(usize, Vec<usize>),
    /// out[b, :] = table[ids[b], :]
    EmbedRows(usize, Vec<usize>),
    Sum(usize),
    MulConst(usize, Tensor),
}

struct Node {
    value: Tensor,
    grad: Vec<f32>,
    op: Op,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    rng: RefCell<ChaCha8Rng>,
}

impl Tape {
    pub fn new() -> Self {
        Self::seeded(0)
    }

    pub fn seeded(seed: u64) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn with_rng<T>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> T) -> T {
        f(&mut self.rng.borrow_mut())
    }

    fn push(&self, value: Tensor, op: Op) -> Value {
        let mut nodes = self.nodes.borrow_mut();
        let grad = vec![0.0; value.numel()];
        nodes.push(Node { value, grad, op });
        Value(nodes.len() - 1)
    }

    /// Record a differentiable leaf (a parameter).
    pub fn leaf(&self, t: Tensor) -> Value {
        self.push(t, Op::Leaf)
    }

    /// Record a non-differentiated input. Gradients still flow through the
    /// node's slot but are simply never read back.
    pub fn constant(&self, t: Tensor) -> Value {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Value) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn scalar_value(&self, v: Value) -> f32 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn grad(&self, v: Value) -> Tensor {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        Tensor::new(node.value.shape().to_vec(), node.grad.clone())
            .expect("gradient buffer matches value shape")
    }

    fn binary(
        &self,
        a: Value,
        b: Value,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor, TensorError>,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Value, AutodiffError> {
        let out = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)?
        };
        Ok(self.push(out, op(a.0, b.0)))
    }

    pub fn add(&self, a: Value, b: Value) -> Result<Value, AutodiffError> {
        self.binary(a, b, |x, y| x.add(y), Op::Add)
    }

    pub fn sub(&self, a: Value, b: Value) -> Result<Value, AutodiffError> {
        self.binary(a, b, |x, y| x.sub(y), Op::Sub)
    }

    pub fn mul(&self, a: Value, b: Value) -> Result<Value, AutodiffError> {
        self.binary(
            a,
            b,
            |x, y| {
                if x.shape() != y.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "mul",
                        left: x.shape().to_vec(),
                        right: y.shape().to_vec(),
                    });
                }
                Tensor::new(
                    x.shape().to_vec(),
                    x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect(),
                )
            },
            Op::Mul,
        )
    }

    pub fn matmul(&self, a: Value, b: Value) -> Result<Value, AutodiffError> {
        self.binary(a, b, |x, y| x.matmul(y), Op::Matmul)
    }

    pub fn neg(&self, a: Value) -> Value {
        let out = self.nodes.borrow()[a.0].value.scale(-1.0);
        self.push(out, Op::Neg(a.0))
    }

    pub fn scale(&self, a: Value, c: f32) -> Value {
        let out = self.nodes.borrow()[a.0].value.scale(c);
        self.push(out, Op::Scale(a.0, c))
    }

    /// Broadcast-add a length-n row vector to every row of a [B, n] matrix.
    pub fn add_row(&self, a: Value, row: Value) -> Result<Value, AutodiffError> {
        let out = {
            let nodes = self.nodes.borrow();
            let m = &nodes[a.0].value;
            let r = &nodes[row.0].value;
            let (bsz, n) = m.matrix_dims("add_row")?;
            if r.shape() != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "add_row",
                    left: m.shape().to_vec(),
                    right: r.shape().to_vec(),
                }
                .into());
            }
            let mut data = Vec::with_capacity(bsz * n);
            for i in 0..bsz {
                for j in 0..n {
                    data.push(m.data()[i * n + j] + r.data()[j]);
                }
            }
            Tensor::new(vec![bsz, n], data)?
        };
        Ok(self.push(out, Op::AddRow(a.0, row.0)))
    }

    pub fn tanh(&self, a: Value) -> Result<Value, AutodiffError> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|&v| v.tanh()).collect(),
            )?
        };
        Ok(self.push(out, Op::Tanh(a.0)))
    }

    pub fn exp(&self, a: Value) -> Result<Value, AutodiffError> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|&v| v.exp()).collect(),
            )?
        };
        Ok(self.push(out, Op::Exp(a.0)))
    }

    pub fn clamp(&self, a: Value, lo: f32, hi: f32) -> Result<Value, AutodiffError> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|&v| v.clamp(lo, hi)).collect(),
            )?
        };
        Ok(self.push(out, Op::Clamp(a.0, lo, hi)))
    }

    /// Elementwise minimum; ties route the gradient to the first argument.
    pub fn minimum(&self, a: Value, b: Value) -> Result<Value, AutodiffError> {
        self.binary(
            a,
            b,
            |x, y| {
                if x.shape() != y.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "minimum",
                        left: x.shape().to_vec(),
                        right: y.shape().to_vec(),
                    });
                }
                Tensor::new(
                    x.shape().to_vec(),
                    x.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&p, &q)| if p <= q { p } else { q })
                        .collect(),
                )
            },
            Op::Minimum,
        )
    }

    /// Row-wise log-softmax of a [B, V] matrix (numerically stabilized).
    pub fn log_softmax_rows(&self, a: Value) -> Result<Value, AutodiffError> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let (bsz, v) = x.matrix_dims("log_softmax_rows")?;
            let mut data = Vec::with_capacity(bsz * v);
            for i in 0..bsz {
                let row = &x.data()[i * v..(i + 1) * v];
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut lse = 0.0f64;
                for &r in row {
                    lse += ((r - max) as f64).exp();
                }
                let lse = lse.ln() as f32 + max;
                for &r in row {
                    data.push(r - lse);
                }
            }
            Tensor::new(vec![bsz, v], data)?
        };
        Ok(self.push(out, Op::LogSoftmaxRows(a.0)))
    }

    /// out[b] = a[b, idx[b]] with out shape [B].
    pub fn gather_rows(&self, a: Value, idx: &[usize]) -> Result<Value, AutodiffError> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let (bsz, v) = x.matrix_dims("gather_rows")?;
            assert_eq!(idx.len(), bsz, "one index per row");
            let mut data = Vec::with_capacity(bsz);
            for (i, &j) in idx.iter().enumerate() {
                if j >= v {
                    return Err(AutodiffError::IndexOutOfBounds { index: j, bound: v });
                }
                data.push(x.data()[i * v + j]);
            }
            Tensor::new(vec![bsz], data)?
        };
        Ok(self.push(out, Op::GatherRows(a.0, idx.to_vec())))
    }

    /// out[b, :] = table[ids[b], :] for a [V, E] table.
    pub fn embed_rows(&self, table: Value, ids: &[usize]) -> Result<Value, AutodiffError> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.0].value;
            let (v, e) = t.matrix_dims("embed_rows")?;
            let mut data = Vec::with_capacity(ids.len() * e);
            for &id in ids {
                if id >= v {
                    return Err(AutodiffError::IndexOutOfBounds { index: id, bound: v });
                }
                data.extend_from_slice(&t.data()[id * e..(id + 1) * e]);
            }
            Tensor::new(vec![ids.len(), e], data)?
        };
        Ok(self.push(out, Op::EmbedRows(table.0, ids.to_vec())))
    }

    /// Sum of all elements, f64 accumulated, as a [1] tensor.
    pub fn sum(&self, a: Value) -> Result<Value, AutodiffError> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let mut acc = 0.0f64;
            for &v in x.data() {
                acc += v as f64;
            }
            Tensor::new(vec![1], vec![acc as f32])?
        };
        Ok(self.push(out, Op::Sum(a.0)))
    }

    /// Elementwise product with a fixed tensor (weights, advantages).
    pub fn mul_const(&self, a: Value, c: &Tensor) -> Result<Value, AutodiffError> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if x.shape() != c.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "mul_const",
                    left: x.shape().to_vec(),
                    right: c.shape().to_vec(),
                }
                .into());
            }
            Tensor::new(
                x.shape().to_vec(),
                x.data().iter().zip(c.data()).map(|(&p, &q)| p * q).collect(),
            )?
        };
        Ok(self.push(out, Op::MulConst(a.0, c.clone())))
    }

    /// Reverse pass from a scalar root. Clears old gradients first.
    pub fn backward(&self, root: Value) -> Result<(), AutodiffError> {
        let mut nodes = self.nodes.borrow_mut();
        let numel = nodes[root.0].value.numel();
        if numel != 1 {
            return Err(AutodiffError::NonScalarRoot { numel });
        }
        for node in nodes.iter_mut() {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        nodes[root.0].grad[0] = 1.0;

        for i in (0..=root.0).rev() {
            // Detach this node's grad and op so the arms below can mutate
            // other nodes' slots without aliasing.
            let grad = std::mem::take(&mut nodes[i].grad);
            let op = std::mem::replace(&mut nodes[i].op, Op::Leaf);
            match &op {
                Op::Leaf => {}
                &Op::Add(a, b) => {
                    for (k, &g) in grad.iter().enumerate() {
                        nodes[a].grad[k] += g;
                    }
                    for (k, &g) in grad.iter().enumerate() {
                        nodes[b].grad[k] += g;
                    }
                }
                &Op::Sub(a, b) => {
                    for (k, &g) in grad.iter().enumerate() {
                        nodes[a].grad[k] += g;
                    }
                    for (k, &g) in grad.iter().enumerate() {
                        nodes[b].grad[k] -= g;
                    }
                }
                &Op::Mul(a, b) => {
                    let bv: Vec<f32> = nodes[b].value.data().to_vec();
                    let av: Vec<f32> = nodes[a].value.data().to_vec();
                    for (k, &g) in grad.iter().enumerate() {
                        nodes[a].grad[k] += g * bv[k];
                    }
                    for (k, &g) in grad.iter().enumerate() {
                        nodes[b].grad[k] += g * av[k];
                    }
                }
                &Op::Neg(a) => {
                    for (k, &g) in grad.iter().enumerate() {
                        nodes[a].grad[k] -= g;
                    }
                }
                &Op::Scale(a, c) => {
                    for (k, &g) in grad.iter().enumerate() {
                        nodes[a].grad[k] += g * c;
                    }
                }
                &Op::Matmul(a, b) => {
                    let (m, k_dim) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
                    let n = nodes[b].value.shape()[1];
                    let av = nodes[a].value.data().to_vec();
                    let bv = nodes[b].value.data().to_vec();
                    // dA = G B^T
                    for r in 0..m {
                        for c in 0..k_dim {
                            let mut acc = 0.0f64;
                            for j in 0..n {
                                acc += grad[r * n + j] as f64 * bv[c * n + j] as f64;
                            }
                            nodes[a].grad[r * k_dim + c] += acc as f32;
                        }
                    }
                    // dB = A^T G
                    for r in 0..k_dim {
                        for c in 0..n {
                            let mut acc = 0.0f64;
                            for j in 0..m {
                                acc += av[j * k_dim + r] as f64 * grad[j * n + c] as f64;
                            }
                            nodes[b].grad[r * n + c] += acc as f32;
                        }
                    }
                }
                &Op::AddRow(a, row) => {
                    let n = nodes[row].value.numel();
                    for (k, &g) in grad.iter().enumerate() {
                        nodes[a].grad[k] += g;
                    }
                    for (k, &g) in grad.iter().enumerate() {
                        nodes[row].grad[k % n] += g;
                    }
                }
                &Op::Tanh(a) => {
                    let yv = nodes[i].value.data().to_vec();
                    for (k, &g) in grad.iter().enumerate() {
                        nodes[a].grad[k] += g * (1.0 - yv[k] * yv[k]);
                    }
                }
                &Op::Exp(a) => {
                    let yv = nodes[i].value.data().to_vec();
                    for (k, &g) in grad.iter().enumerate() {
                        nodes[a].grad[k] += g * yv[k];
                    }
                }
                &Op::Clamp(a, lo, hi) => {
                    let xv = nodes[a].value.data().to_vec();
                    for (k, &g) in grad.iter().enumerate() {
                        if xv[k] > lo && xv[k] < hi {
                            nodes[a].grad[k] += g;
                        }
                    }
                }
                &Op::Minimum(a, b) => {
                    let av = nodes[a].value.data().to_vec();
                    let bv = nodes[b].value.data().to_vec();
                    for (k, &g) in grad.iter().enumerate() {
                        if av[k] <= bv[k] {
                            nodes[a].grad[k] += g;
                        } else {
                            nodes[b].grad[k] += g;
                        }
                    }
                }
                &Op::LogSoftmaxRows(a) => {
                    let (bsz, v) = (nodes[i].value.shape()[0], nodes[i].value.shape()[1]);
                    let yv = nodes[i].value.data().to_vec();
                    for r in 0..bsz {
                        let mut gsum = 0.0f64;
                        for j in 0..v {
                            gsum += grad[r * v + j] as f64;
                        }
                        for j in 0..v {
                            let soft = (yv[r * v + j] as f64).exp();
                            nodes[a].grad[r * v + j] +=
                                (grad[r * v + j] as f64 - soft * gsum) as f32;
                        }
                    }
                }
                Op::GatherRows(a, idx) => {
                    let a = *a;
                    let v = nodes[a].value.shape()[1];
                    for (b, &j) in idx.iter().enumerate() {
                        nodes[a].grad[b * v + j] += grad[b];
                    }
                }
                Op::EmbedRows(table, ids) => {
                    let table = *table;
                    let e = nodes[table].value.shape()[1];
                    for (b, &id) in ids.iter().enumerate() {
                        for j in 0..e {
                            nodes[table].grad[id * e + j] += grad[b * e + j];
                        }
                    }
                }
                &Op::Sum(a) => {
                    let g = grad[0];
                    for slot in nodes[a].grad.iter_mut() {
                        *slot += g;
                    }
                }
                Op::MulConst(a, c) => {
                    let a = *a;
                    for (k, &g) in grad.iter().enumerate() {
                        nodes[a].grad[k] += g * c.data()[k];
                    }
                }
            }
            nodes[i].grad = grad;
            nodes[i].op = op;
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient of a scalar-valued computation with respect to every tensor in
/// a parameter map. Returns (loss value, per-parameter gradients).
pub fn grad<F>(params: &ParameterMap, f: F) -> Result<(f64, ParameterMap), AutodiffError>
where
    F: FnOnce(&Tape, &std::collections::BTreeMap<String, Value>) -> Result<Value, AutodiffError>,
{
    let tape = Tape::new();
    let mut handles = std::collections::BTreeMap::new();
    for (name, t) in params.iter() {
        handles.insert(name.to_string(), tape.leaf(t.clone()));
    }
    let root = f(&tape, &handles)?;
    tape.backward(root)?;
    let loss = tape.scalar_value(root) as f64;
    let mut grads = ParameterMap::new();
    for (name, handle) in &handles {
        grads.insert(name.clone(), tape.grad(*handle));
    }
    Ok((loss, grads))
}
