//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, so the node list is
//! already a topological order and backward is a single reverse sweep.
//! Parameters are not copied into the graph: a parameter node refers to the
//! borrowed [`ParamStore`], and gradients come back as an owned
//! [`Gradients`] value that the caller folds into the store afterwards.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

const LOG_CLAMP: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node of one particular graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug)]
enum Value {
    Owned(Tensor),
    Param(ParamId),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Abs(usize),
    AddBias { x: usize, bias: usize, cols: usize },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { x: usize, rows: usize, cols: usize },
    Softmax { x: usize, outer: usize, len: usize, inner: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, cols: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embedding { table: usize, ids: Vec<usize>, dim: usize },
    Dropout { x: usize, mask: Vec<f64> },
    Gelu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    Gather { x: usize, indices: Vec<usize> },
    Concat { inputs: Vec<usize>, outer: usize, widths: Vec<usize> },
    Slice { x: usize, outer: usize, in_width: usize, offset: usize, width: usize },
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// One computation graph. Not shared across threads while being built.
pub struct Graph<'p> {
    id: u64,
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, usize>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph<'static> {
    /// A graph without parameter access; inputs are plain tensors.
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            store: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }
}

impl<'p> Graph<'p> {
    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            store: Some(store),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "node {} does not belong to graph {}",
                v.index, self.id
            )));
        }
        Ok(v.index)
    }

    fn tensor(&self, index: usize) -> &Tensor {
        match &self.nodes[index].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .store
                .expect("parameter node without a parameter store")
                .value(*id),
        }
    }

    /// Value held by `v`.
    ///
    /// Panics if `v` was created by a different graph.
    pub fn value(&self, v: Var) -> &Tensor {
        let index = self.check(v).unwrap_or_else(|e| panic!("{e}"));
        self.tensor(index)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{name} produced a non-finite value")));
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn grad_of(&self, indices: &[usize]) -> bool {
        indices.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "input")
    }

    /// Node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| Error::Graph("graph was built without a parameter store".into()))?;
        if id.index() >= store.len() {
            return Err(Error::Index(format!("parameter {} not in store", id.index())));
        }
        if let Some(&index) = self.param_nodes.get(&id) {
            return Ok(Var { graph: self.id, index });
        }
        if !store.value(id).is_finite() {
            return Err(Error::Numeric(format!(
                "parameter {} holds a non-finite value",
                store.get(id).name
            )));
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: true,
        });
        let index = self.nodes.len() - 1;
        self.param_nodes.insert(id, index);
        Ok(Var { graph: self.id, index })
    }

    fn same_shape(&self, a: usize, b: usize, op: &str) -> Result<()> {
        let (sa, sb) = (self.tensor(a).shape(), self.tensor(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{op}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.same_shape(a, b, name)?;
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok((a, b, Tensor::new(ta.shape().to_vec(), data)?))
    }

    fn map(&self, x: usize, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.tensor(x);
        let data = t.data().iter().map(|v| f(*v)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("map preserves shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, out) = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.grad_of(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, out) = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.grad_of(&[a, b]);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, out) = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.grad_of(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let a = self.check(a)?;
        let out = self.map(a, |v| v * factor);
        let rg = self.grad_of(&[a]);
        self.push(out, Op::Scale(a, factor), rg, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let a = self.check(a)?;
        let out = self.map(a, |v| v + c);
        let rg = self.grad_of(&[a]);
        self.push(out, Op::AddScalar(a), rg, "add_scalar")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        let out = self.map(a, f64::abs);
        let rg = self.grad_of(&[a]);
        self.push(out, Op::Abs(a), rg, "abs")
    }

    /// Adds a vector along the last axis of `x` (row-wise bias).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (x, bias) = (self.check(x)?, self.check(bias)?);
        let (tx, tb) = (self.tensor(x), self.tensor(bias));
        let cols = *tx.shape().last().unwrap_or(&1);
        if tb.rank() != 1 || tb.len() != cols || tx.rank() == 0 {
            return Err(Error::Dimension(format!(
                "add_bias: bias {:?} does not match last axis of {:?}",
                tb.shape(),
                tx.shape()
            )));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.grad_of(&[x, bias]);
        self.push(out, Op::AddBias { x, bias, cols }, rg, "add_bias")
    }

    /// Matrix product. Rank-1 operands act as a row (left) or column (right)
    /// vector and the corresponding output axis is dropped.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        let (m, k, a_vec) = match ta.shape() {
            [k] => (1, *k, true),
            [m, k] => (*m, *k, false),
            s => return Err(Error::Dimension(format!("matmul: left operand has shape {s:?}"))),
        };
        let (k2, n, b_vec) = match tb.shape() {
            [k] => (*k, 1, true),
            [k, n] => (*k, *n, false),
            s => return Err(Error::Dimension(format!("matmul: right operand has shape {s:?}"))),
        };
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner dimensions differ ({:?} x {:?})",
                ta.shape(),
                tb.shape()
            )));
        }
        let (ad, bd) = (ta.data(), tb.data());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut data[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let b_row = &bd[p * n..(p + 1) * n];
                for (o, bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
        let shape = match (a_vec, b_vec) {
            (false, false) => vec![m, n],
            (true, false) => vec![n],
            (false, true) => vec![m],
            (true, true) => vec![],
        };
        let out = Tensor::new(shape, data)?;
        let rg = self.grad_of(&[a, b]);
        self.push(out, Op::MatMul { a, b, m, k, n }, rg, "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let t = self.tensor(x);
        let [rows, cols] = *t.shape() else {
            return Err(Error::Dimension(format!("transpose needs a matrix, found {:?}", t.shape())));
        };
        let d = t.data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = d[r * cols + c];
            }
        }
        let out = Tensor::new(vec![cols, rows], data)?;
        let rg = self.grad_of(&[x]);
        self.push(out, Op::Transpose { x, rows, cols }, rg, "transpose")
    }

    fn axis_split(shape: &[usize], axis: usize, op: &str) -> Result<(usize, usize, usize)> {
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("{op}: axis {axis} invalid for shape {shape:?}")));
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        Ok((outer, shape[axis], inner))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let x = self.check(x)?;
        let t = self.tensor(x);
        let (outer, len, inner) = Self::axis_split(t.shape(), axis, "softmax")?;
        if len == 0 {
            return Err(Error::Dimension("softmax over an empty axis".into()));
        }
        let d = t.data();
        let mut data = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let max = (0..len).map(|l| d[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (d[at(l)] - max).exp();
                    data[at(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    data[at(l)] /= sum;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.grad_of(&[x]);
        self.push(out, Op::Softmax { x, outer, len, inner }, rg, "softmax")
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (x, gain, bias) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let t = self.tensor(x);
        let cols = match t.shape().last() {
            Some(&c) if c > 0 => c,
            _ => {
                return Err(Error::Dimension(format!(
                    "layer_norm: empty normalization extent in {:?}",
                    t.shape()
                )))
            }
        };
        let (g, b) = (self.tensor(gain), self.tensor(bias));
        if g.shape() != [cols] || b.shape() != [cols] {
            return Err(Error::Dimension(format!(
                "layer_norm: gain {:?} / bias {:?} do not match extent {cols}",
                g.shape(),
                b.shape()
            )));
        }
        let rows = t.len() / cols;
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; t.len()];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                data[r * cols + c] = h * g.data()[c] + b.data()[c];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.grad_of(&[x, gain, bias]);
        self.push(out, Op::LayerNorm { x, gain, bias, cols, xhat, inv_std }, rg, "layer_norm")
    }

    /// Gathers rows of a `V x d` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let table = self.check(table)?;
        let t = self.tensor(table);
        let [vocab, dim] = *t.shape() else {
            return Err(Error::Dimension(format!("embedding table must be a matrix, found {:?}", t.shape())));
        };
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!("embedding id {id} out of range for {vocab} rows")));
            }
            data.extend_from_slice(&t.data()[id * dim..(id + 1) * dim]);
        }
        let out = Tensor::new(vec![ids.len(), dim], data)?;
        let rg = self.grad_of(&[table]);
        self.push(out, Op::Embedding { table, ids: ids.to_vec(), dim }, rg, "embedding")
    }

    /// Inverted dropout. Outside training, or with `p == 0`, returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        let xi = self.check(x)?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.tensor(xi);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.grad_of(&[xi]);
        self.push(out, Op::Dropout { x: xi, mask }, rg, "dropout")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let out = self.map(x, |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        let rg = self.grad_of(&[x]);
        self.push(out, Op::Gelu(x), rg, "gelu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let out = self.map(x, sigmoid);
        let rg = self.grad_of(&[x]);
        self.push(out, Op::Sigmoid(x), rg, "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let out = self.map(x, f64::tanh);
        let rg = self.grad_of(&[x]);
        self.push(out, Op::Tanh(x), rg, "tanh")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let out = self.map(x, f64::exp);
        let rg = self.grad_of(&[x]);
        self.push(out, Op::Exp(x), rg, "exp")
    }

    /// Natural log of `max(x, 1e-12)`; zero gradient inside the clamp.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let out = self.map(x, |v| v.max(LOG_CLAMP).ln());
        let rg = self.grad_of(&[x]);
        self.push(out, Op::Log(x), rg, "log")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let total = self.tensor(x).data().iter().sum();
        let rg = self.grad_of(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let t = self.tensor(x);
        if t.is_empty() {
            return Err(Error::Dimension("mean of an empty tensor".into()));
        }
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.grad_of(&[x]);
        self.push(Tensor::scalar(mean), Op::Mean(x), rg, "mean")
    }

    /// Picks elements by flat index into a rank-1 result.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let x = self.check(x)?;
        let t = self.tensor(x);
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices {
            let v = t
                .data()
                .get(i)
                .ok_or_else(|| Error::Index(format!("gather index {i} out of range for {} values", t.len())))?;
            data.push(*v);
        }
        let rg = self.grad_of(&[x]);
        self.push(Tensor::vector(data), Op::Gather { x, indices: indices.to_vec() }, rg, "gather")
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let indices = parts.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let base = self.tensor(self.check(first)?).shape().to_vec();
        let (outer, _, inner) = Self::axis_split(&base, axis, "concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut axis_total = 0;
        for &i in &indices {
            let s = self.tensor(i).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::Dimension(format!("concat: shape {s:?} incompatible with {base:?} on axis {axis}")));
            }
            axis_total += s[axis];
            widths.push(s[axis] * inner);
        }
        let total_width: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total_width);
        for o in 0..outer {
            for (&i, &w) in indices.iter().zip(&widths) {
                data.extend_from_slice(&self.tensor(i).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_total;
        let out = Tensor::new(shape, data)?;
        let rg = self.grad_of(&indices);
        self.push(out, Op::Concat { inputs: indices, outer, widths }, rg, "concat")
    }

    /// Keeps `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let x = self.check(x)?;
        let t = self.tensor(x);
        let (outer, len, inner) = Self::axis_split(t.shape(), axis, "slice")?;
        if start > end || end > len {
            return Err(Error::Index(format!("slice {start}..{end} out of range for extent {len}")));
        }
        let (in_width, offset, width) = (len * inner, start * inner, (end - start) * inner);
        let mut data = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = o * in_width + offset;
            data.extend_from_slice(&t.data()[base..base + width]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = end - start;
        let out = Tensor::new(shape, data)?;
        let rg = self.grad_of(&[x]);
        self.push(out, Op::Slice { x, outer, in_width, offset, width }, rg, "slice")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let x = self.check(x)?;
        let t = self.tensor(x);
        let out = Tensor::new(shape.to_vec(), t.data().to_vec())
            .map_err(|_| Error::Dimension(format!("cannot reshape {:?} to {shape:?}", t.shape())))?;
        let rg = self.grad_of(&[x]);
        self.push(out, Op::Reshape(x), rg, "reshape")
    }

    /// Row `i` of a matrix as a rank-1 tensor.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let cols = match self.shape(x) {
            [_, cols] => *cols,
            s => return Err(Error::Dimension(format!("row needs a matrix, found {s:?}"))),
        };
        let r = self.slice(x, 0, i, i + 1)?;
        self.reshape(r, &[cols])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        if self.tensor(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, found shape {:?}",
                self.tensor(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        let mut leaves = Vec::new();
        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                leaves.push(i);
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let mut out = Gradients {
            graph: self.id,
            inputs: HashMap::new(),
            params: Vec::new(),
        };
        for i in leaves.into_iter().rev() {
            let shape = self.tensor(i).shape().to_vec();
            let data = grads[i].take().unwrap_or_else(|| vec![0.0; self.tensor(i).len()]);
            let t = Tensor::new(shape, data)?;
            match self.nodes[i].op {
                Op::Param(id) => out.params.push((id, t)),
                _ => {
                    out.inputs.insert(i, t);
                }
            }
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Runs the body with node `$j`'s gradient buffer, when it wants one.
        macro_rules! with_slot {
            ($j:expr, |$s:ident| $body:block) => {{
                let j = $j;
                if nodes[j].requires_grad {
                    let len = self.tensor(j).len();
                    let $s: &mut Vec<f64> = grads[j].get_or_insert_with(|| vec![0.0; len]);
                    $body
                }
            }};
        }
        let y = self.tensor(i).data();
        match &nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                with_slot!(*a, |s| { add_into(s, g) });
                with_slot!(*b, |s| { add_into(s, g) });
            }
            Op::Sub(a, b) => {
                with_slot!(*a, |s| { add_into(s, g) });
                with_slot!(*b, |s| {
                    for (s, g) in s.iter_mut().zip(g) {
                        *s -= g;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.tensor(*a).data(), self.tensor(*b).data());
                with_slot!(*a, |s| {
                    for ((s, g), b) in s.iter_mut().zip(g).zip(bv) {
                        *s += g * b;
                    }
                });
                with_slot!(*b, |s| {
                    for ((s, g), a) in s.iter_mut().zip(g).zip(av) {
                        *s += g * a;
                    }
                });
            }
            Op::Scale(a, c) => with_slot!(*a, |s| {
                for (s, g) in s.iter_mut().zip(g) {
                    *s += c * g;
                }
            }),
            Op::AddScalar(a) | Op::Reshape(a) => with_slot!(*a, |s| { add_into(s, g) }),
            Op::Abs(a) => {
                let av = self.tensor(*a).data();
                with_slot!(*a, |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(av) {
                        let sign = if *x > 0.0 {
                            1.0
                        } else if *x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *s += g * sign;
                    }
                });
            }
            Op::AddBias { x, bias, cols } => {
                with_slot!(*x, |s| { add_into(s, g) });
                with_slot!(*bias, |s| {
                    for row in g.chunks(*cols) {
                        add_into(s, row);
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.tensor(*a).data(), self.tensor(*b).data());
                with_slot!(*a, |s| {
                    for r in 0..m {
                        let g_row = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let b_row = &bd[p * n..(p + 1) * n];
                            s[r * k + p] += g_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                with_slot!(*b, |s| {
                    for r in 0..m {
                        let g_row = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = ad[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, gv) in s[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                                *o += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose { x, rows, cols } => with_slot!(*x, |s| {
                for r in 0..*rows {
                    for c in 0..*cols {
                        s[r * cols + c] += g[c * rows + r];
                    }
                }
            }),
            Op::Softmax { x, outer, len, inner } => with_slot!(*x, |s| {
                let (len, inner) = (*len, *inner);
                for o in 0..*outer {
                    for c in 0..inner {
                        let at = |l: usize| o * len * inner + l * inner + c;
                        let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            s[at(l)] += y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
            }),
            Op::LayerNorm { x, gain, bias, cols, xhat, inv_std } => {
                let cols = *cols;
                let gv = self.tensor(*gain).data();
                with_slot!(*gain, |s| {
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((s, g), h) in s.iter_mut().zip(gr).zip(hr) {
                            *s += g * h;
                        }
                    }
                });
                with_slot!(*bias, |s| {
                    for gr in g.chunks(cols) {
                        add_into(s, gr);
                    }
                });
                with_slot!(*x, |s| {
                    let n = cols as f64;
                    for (r, (gr, hr)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(g, w)| g * w).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n;
                        let mean_dh_h = dh.iter().zip(hr).map(|(d, h)| d * h).sum::<f64>() / n;
                        for c in 0..cols {
                            s[r * cols + c] += inv_std[r] * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Embedding { table, ids, dim } => with_slot!(*table, |s| {
                for (row, &id) in g.chunks(*dim).zip(ids) {
                    add_into(&mut s[id * dim..(id + 1) * dim], row);
                }
            }),
            Op::Dropout { x, mask } => with_slot!(*x, |s| {
                for ((s, g), m) in s.iter_mut().zip(g).zip(mask) {
                    *s += g * m;
                }
            }),
            Op::Gelu(x) => {
                let xv = self.tensor(*x).data();
                with_slot!(*x, |s| {
                    for ((s, g), v) in s.iter_mut().zip(g).zip(xv) {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *s += g * d;
                    }
                });
            }
            Op::Sigmoid(x) => with_slot!(*x, |s| {
                for ((s, g), y) in s.iter_mut().zip(g).zip(y) {
                    *s += g * y * (1.0 - y);
                }
            }),
            Op::Tanh(x) => with_slot!(*x, |s| {
                for ((s, g), y) in s.iter_mut().zip(g).zip(y) {
                    *s += g * (1.0 - y * y);
                }
            }),
            Op::Exp(x) => with_slot!(*x, |s| {
                for ((s, g), y) in s.iter_mut().zip(g).zip(y) {
                    *s += g * y;
                }
            }),
            Op::Log(x) => {
                let xv = self.tensor(*x).data();
                with_slot!(*x, |s| {
                    for ((s, g), v) in s.iter_mut().zip(g).zip(xv) {
                        if *v > LOG_CLAMP {
                            *s += g / v;
                        }
                    }
                });
            }
            Op::Sum(x) => with_slot!(*x, |s| {
                for s in s.iter_mut() {
                    *s += g[0];
                }
            }),
            Op::Mean(x) => with_slot!(*x, |s| {
                let share = g[0] / s.len() as f64;
                for s in s.iter_mut() {
                    *s += share;
                }
            }),
            Op::Gather { x, indices } => with_slot!(*x, |s| {
                for (&idx, g) in indices.iter().zip(g) {
                    s[idx] += g;
                }
            }),
            Op::Concat { inputs, outer, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&input, &w) in inputs.iter().zip(widths) {
                    with_slot!(input, |s| {
                        for o in 0..*outer {
                            add_into(&mut s[o * w..(o + 1) * w], &g[o * total + offset..o * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice { x, outer, in_width, offset, width } => with_slot!(*x, |s| {
                for o in 0..*outer {
                    let base = o * in_width + offset;
                    add_into(&mut s[base..base + width], &g[o * width..(o + 1) * width]);
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Gradients produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    graph: u64,
    inputs: HashMap<usize, Tensor>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient of an input leaf created with [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.inputs.get(&v.index)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, t)| (*id, t.data()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn vec_of(g: &Graph, v: Var) -> Vec<f64> {
        g.value(v).data().to_vec()
    }

    #[test]
    fn add_identity() {
        let mut g = Graph::new();
        let a = g.input(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let c = g.add(a, b).unwrap();
        assert_eq!(vec_of(&g, c), [1.0, 2.0]);
    }

    #[test]
    fn abs_subgradient() {
        let mut g = Graph::new();
        let a = g.input(Tensor::vector(vec![-3.0, 3.0, 0.0])).unwrap();
        let b = g.abs(a).unwrap();
        assert_eq!(vec_of(&g, b), [3.0, 3.0, 0.0]);
        let loss = g.sum(b).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(a).unwrap().data(), &[-1.0, 1.0, 0.0]);
    }

    #[test]
    fn mul_product_rule() {
        let mut g = Graph::new();
        let a = g.input(Tensor::vector(vec![2.0, 3.0])).unwrap();
        let b = g.input(Tensor::vector(vec![4.0, 5.0])).unwrap();
        let c = g.mul(a, b).unwrap();
        assert_eq!(vec_of(&g, c), [8.0, 15.0]);
        let loss = g.sum(c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(a).unwrap().data(), &[4.0, 5.0]);
        assert_eq!(grads.wrt(b).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = g.input(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap()).unwrap();
        let m = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap()).unwrap();
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(vec_of(&g, p), [1.0, 2.0, 3.0, 4.0]);

        let proj = g.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap()).unwrap();
        let col = g.constant(Tensor::from_rows(&[[5.0], [7.0]]).unwrap()).unwrap();
        let r = g.matmul(proj, col).unwrap();
        assert_eq!(g.shape(r), &[2, 1]);
        assert_eq!(vec_of(&g, r), [5.0, 0.0]);

        let bad = g.constant(Tensor::zeros(vec![3, 1])).unwrap();
        assert!(matches!(g.matmul(m, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let s = g.softmax(z, 0).unwrap();
        assert_eq!(vec_of(&g, s), [0.5, 0.5]);

        let big = g.constant(Tensor::vector(vec![1000.0, 1000.0])).unwrap();
        let s = g.softmax(big, 0).unwrap();
        assert_eq!(vec_of(&g, s), [0.5, 0.5]);

        // Reference from 40-digit arithmetic.
        let expected = [0.090_030_573_170_380_46, 0.244_728_471_054_797_65, 0.665_240_955_774_821_9];
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let s = g.softmax(x, 0).unwrap();
        for (got, want) in vec_of(&g, s).iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }

        let empty = g.constant(Tensor::zeros(vec![2, 0])).unwrap();
        assert!(matches!(g.softmax(empty, 1), Err(Error::Dimension(_))));
        assert!(matches!(g.softmax(x, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[0.0, 5.0], [0.0, 5.0]]).unwrap()).unwrap();
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(vec_of(&g, s), [0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::full(vec![2], 1.0)).unwrap();
        let bias = g.constant(Tensor::zeros(vec![2])).unwrap();
        let flat = g.constant(Tensor::from_rows(&[[4.0, 4.0]]).unwrap()).unwrap();
        let y = g.layer_norm(flat, gain, bias, 1e-5).unwrap();
        assert_eq!(vec_of(&g, y), [0.0, 0.0]);

        let x = g.constant(Tensor::from_rows(&[[1.0, 3.0]]).unwrap()).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-300).unwrap();
        let v = vec_of(&g, y);
        assert!((v[0] + 1.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);

        let empty = g.constant(Tensor::zeros(vec![1, 0])).unwrap();
        assert!(matches!(g.layer_norm(empty, gain, bias, 1e-5), Err(Error::Dimension(_))));
    }

    #[test]
    fn layer_norm_moments() {
        use rand::Rng;
        let mut rng = stream(3, Purpose::Init);
        let row: Vec<f64> = (0..16).map(|_| rng.random_range(-20.0..20.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 16], row).unwrap()).unwrap();
        let gain = g.constant(Tensor::full(vec![16], 1.0)).unwrap();
        let bias = g.constant(Tensor::zeros(vec![16])).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let v = vec_of(&g, y);
        let mean = v.iter().sum::<f64>() / 16.0;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn embedding_scatter_adds_repeats() {
        let table = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let mut g = Graph::new();
        let t = g.input(table).unwrap();
        let first = g.embedding(t, &[0]).unwrap();
        assert_eq!(vec_of(&g, first), [1.0, 2.0]);

        let rep = g.embedding(t, &[2, 2]).unwrap();
        let w = g.constant(Tensor::from_rows(&[[1.0, 10.0], [100.0, 1000.0]]).unwrap()).unwrap();
        let prod = g.mul(rep, w).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(t).unwrap().data(), &[0.0, 0.0, 0.0, 0.0, 101.0, 1010.0]);

        let none = g.embedding(t, &[]).unwrap();
        assert_eq!(g.shape(none), &[0, 2]);

        let msg = g.embedding(t, &[3]).unwrap_err().to_string();
        assert!(msg.contains("id 3"), "{msg}");
    }

    #[test]
    fn dropout_contract() {
        let mut rng = stream(1, Purpose::Dropout);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![100_000], 1.0)).unwrap();
        assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.7, false, &mut rng).unwrap(), x);
        assert!(matches!(g.dropout(x, 1.0, true, &mut rng), Err(Error::Config(_))));

        let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
        let v = vec_of(&g, y);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
    }

    #[test]
    fn backward_contracts() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0]);

        assert!(matches!(g.backward(sq), Err(Error::Contract(_))));

        let c = g.constant(Tensor::scalar(3.0)).unwrap();
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 0.0]);

        let other = Graph::new();
        assert!(matches!(other.backward(loss), Err(Error::Graph(_))));
    }

    #[test]
    fn repeated_backward_accumulates_in_store() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![1.0, -2.0])).unwrap();
        let grads = {
            let mut g = Graph::with_params(&store);
            let p = g.param(w).unwrap();
            let sq = g.mul(p, p).unwrap();
            let loss = g.sum(sq).unwrap();
            g.backward(loss).unwrap()
        };
        store.accumulate(&grads);
        store.accumulate(&grads);
        assert_eq!(store.get(w).grad.data(), &[4.0, -8.0]);
        store.zero_grads();
        assert_eq!(store.get(w).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1000.0])).unwrap();
        assert!(matches!(g.exp(x), Err(Error::Numeric(_))));
        assert!(g.constant(Tensor::vector(vec![f64::NAN])).is_err());
    }

    #[test]
    fn log_is_clamped() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![0.0])).unwrap();
        let l = g.log(x).unwrap();
        let v = g.value(l).data()[0];
        assert!(v.is_finite() && (v - 1e-12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap()).unwrap();
        let b = g.input(Tensor::from_rows(&[[5.0], [6.0]]).unwrap()).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(vec_of(&g, c), [1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = g.slice(c, 1, 2, 3).unwrap();
        assert_eq!(vec_of(&g, back), [5.0, 6.0]);
        let r = g.row(a, 1).unwrap();
        assert_eq!(g.shape(r), &[2]);
        assert_eq!(vec_of(&g, r), [3.0, 4.0]);
    }
}
