//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! The op set is deliberately small: exactly what the attention layers,
//! prompt generators, and losses need. Shapes must match exactly — there
//! is no broadcasting. A [`Tape`] records one step's forward pass;
//! [`Tape::backward`] replays it in reverse and accumulates gradients
//! additively into each leaf.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: invalid slice {start}..{end} along axis {axis} of shape {shape:?}")]
    InvalidSlice {
        op: &'static str,
        axis: usize,
        start: usize,
        end: usize,
        shape: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: expected scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("{op}: expected rank-2 tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
}

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor {
            shape: vec![r, c],
            data,
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element of a rank-2 tensor.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// s * x + c with constant s, c; only the scale matters in backward.
    Affine(Var, f64),
    Softmax(Var, usize),
    Relu(Var),
    Concat(Var, Var, usize),
    Slice(Var, usize, usize, usize),
    Reshape(Var),
    MeanAxis(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Abs(Var),
    Ln(Var),
    PowConst(Var, f64),
    Sigmoid(Var),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records one forward pass; replaying it backward yields gradients for
/// every leaf registered with `requires_grad`.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients accumulated by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, zero if `v` never influenced it.
    pub fn grad(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(self.shapes[v.0].clone(), g.clone()).unwrap(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a leaf. Gradient is tracked iff the tensor
    /// was marked `with_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Register a constant leaf regardless of the tensor's grad flag.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone()).unwrap()
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Element of a rank-2 value.
    pub fn at(&self, v: Var, i: usize, j: usize) -> f64 {
        let node = &self.nodes[v.0];
        debug_assert_eq!(node.shape.len(), 2);
        node.data[i * node.shape[1] + j]
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 {
            return Err(TensorError::NotMatrix {
                op: "matmul",
                shape: sa.clone(),
            });
        }
        if sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let da = &self.nodes[a.0].data;
            let db = &self.nodes[b.0].data;
            matmul_into(da, db, &mut out, m, k, n);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::Matmul(a, b), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let sa = &self.nodes[a.0].shape;
        if sa.len() != 2 {
            return Err(TensorError::NotMatrix {
                op: "transpose",
                shape: sa.clone(),
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let da = &self.nodes[a.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = da[i * c + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn zip(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        node_op: Op,
    ) -> Result<Var, TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, node_op, needs))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// Elementwise `s * x + c`.
    pub fn affine(&mut self, a: Var, s: f64, c: f64) -> Var {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|x| s * x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a);
        self.push(shape, out, Op::Affine(a, s), needs)
    }

    /// Numerically stable softmax along `axis`; lanes sum to 1.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let da = &self.nodes[a.0].data;
        let mut out = vec![0.0; da.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for k in 0..len {
                    mx = mx.max(da[idx(k)]);
                }
                let mut sum = 0.0;
                for k in 0..len {
                    let e = (da[idx(k)] - mx).exp();
                    out[idx(k)] = e;
                    sum += e;
                }
                for k in 0..len {
                    out[idx(k)] /= sum;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(shape, out, Op::Softmax(a, axis), needs))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a);
        self.push(shape, out, Op::Relu(a), needs)
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var, TensorError> {
        let (sa, sb) = (
            self.nodes[a.0].shape.clone(),
            self.nodes[b.0].shape.clone(),
        );
        if axis >= sa.len() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                shape: sa,
            });
        }
        let compatible = sa.len() == sb.len()
            && sa
                .iter()
                .zip(&sb)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut shape = sa.clone();
        shape[axis] = sa[axis] + sb[axis];
        let (outer, _, inner) = axis_split(&sa, axis);
        let (la, lb) = (sa[axis], sb[axis]);
        let mut out = vec![0.0; outer * (la + lb) * inner];
        {
            let da = &self.nodes[a.0].data;
            let db = &self.nodes[b.0].data;
            for o in 0..outer {
                let dst = o * (la + lb) * inner;
                out[dst..dst + la * inner]
                    .copy_from_slice(&da[o * la * inner..(o + 1) * la * inner]);
                out[dst + la * inner..dst + (la + lb) * inner]
                    .copy_from_slice(&db[o * lb * inner..(o + 1) * lb * inner]);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::Concat(a, b, axis), needs))
    }

    /// Contiguous range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let sa = self.nodes[a.0].shape.clone();
        if axis >= sa.len() {
            return Err(TensorError::InvalidAxis {
                op: "slice",
                axis,
                shape: sa,
            });
        }
        if start > end || end > sa[axis] {
            return Err(TensorError::InvalidSlice {
                op: "slice",
                axis,
                start,
                end,
                shape: sa,
            });
        }
        let (outer, len, inner) = axis_split(&sa, axis);
        let w = end - start;
        let mut shape = sa.clone();
        shape[axis] = w;
        let mut out = vec![0.0; outer * w * inner];
        {
            let da = &self.nodes[a.0].data;
            for o in 0..outer {
                let src = (o * len + start) * inner;
                let dst = o * w * inner;
                out[dst..dst + w * inner].copy_from_slice(&da[src..src + w * inner]);
            }
        }
        let needs = self.needs(a);
        Ok(self.push(shape, out, Op::Slice(a, axis, start, end), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.nodes[a.0].data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: self.nodes[a.0].data.len(),
            });
        }
        let data = self.nodes[a.0].data.clone();
        let needs = self.needs(a);
        Ok(self.push(shape, data, Op::Reshape(a), needs))
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let sa = self.nodes[a.0].shape.clone();
        if axis >= sa.len() {
            return Err(TensorError::InvalidAxis {
                op: "mean_axis",
                axis,
                shape: sa,
            });
        }
        let (outer, len, inner) = axis_split(&sa, axis);
        let da = &self.nodes[a.0].data;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += da[(o * len + k) * inner + i];
                }
            }
        }
        let inv = 1.0 / len as f64;
        for v in &mut out {
            *v *= inv;
        }
        let mut shape = sa.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let needs = self.needs(a);
        Ok(self.push(shape, out, Op::MeanAxis(a, axis), needs))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let needs = self.needs(a);
        self.push(vec![1], vec![s], Op::SumAll(a), needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len().max(1);
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let needs = self.needs(a);
        self.push(vec![1], vec![s / n as f64], Op::MeanAll(a), needs)
    }

    /// Elementwise |x|; subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.abs()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a);
        self.push(shape, out, Op::Abs(a), needs)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a);
        self.push(shape, out, Op::Ln(a), needs)
    }

    /// Elementwise x^p for constant p (callers keep x ≥ 0 for fractional p).
    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.powf(p)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a);
        self.push(shape, out, Op::PowConst(a, p), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a);
        self.push(shape, out, Op::Sigmoid(a), needs)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// when a value feeds multiple ops.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let node = &self.nodes[loss.0];
        if node.data.len() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: node.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            slot => *slot = Some(delta.to_vec()),
        }
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match self.nodes[id].op.clone() {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let sa = &self.nodes[a.0].shape;
                let sb = &self.nodes[b.0].shape;
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(a) {
                    // dA = dC · Bᵀ
                    let db = &self.nodes[b.0].data;
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * db[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    self.accumulate(grads, a, &da);
                }
                if self.needs(b) {
                    // dB = Aᵀ · dC
                    let da = &self.nodes[a.0].data;
                    let mut dbg = vec![0.0; k * n];
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += da[i * k + p] * g[i * n + j];
                            }
                            dbg[p * n + j] = s;
                        }
                    }
                    self.accumulate(grads, b, &dbg);
                }
            }
            Op::Transpose(a) => {
                let sa = &self.nodes[a.0].shape;
                let (r, c) = (sa[0], sa[1]);
                let mut da = vec![0.0; r * c];
                for j in 0..c {
                    for i in 0..r {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                self.accumulate(grads, a, &da);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g);
                self.accumulate(grads, b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accumulate(grads, b, &neg);
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(gi, bi)| gi * bi)
                        .collect();
                    self.accumulate(grads, a, &da);
                }
                if self.needs(b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(gi, ai)| gi * ai)
                        .collect();
                    self.accumulate(grads, b, &db);
                }
            }
            Op::Affine(a, s) => {
                let da: Vec<f64> = g.iter().map(|gi| gi * s).collect();
                self.accumulate(grads, a, &da);
            }
            Op::Softmax(a, axis) => {
                // dx = y ⊙ (dy − Σ dy⊙y) per lane
                let y = &self.nodes[id].data;
                let (outer, len, inner) = axis_split(&self.nodes[id].shape, axis);
                let mut da = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let mut dot = 0.0;
                        for k in 0..len {
                            dot += g[idx(k)] * y[idx(k)];
                        }
                        for k in 0..len {
                            da[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, a, &da);
            }
            Op::Relu(a) => {
                let x = &self.nodes[a.0].data;
                let da: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, a, &da);
            }
            Op::Concat(a, b, axis) => {
                let sa = &self.nodes[a.0].shape;
                let sb = &self.nodes[b.0].shape;
                let (outer, _, inner) = axis_split(sa, axis);
                let (la, lb) = (sa[axis], sb[axis]);
                if self.needs(a) {
                    let mut da = vec![0.0; self.nodes[a.0].data.len()];
                    for o in 0..outer {
                        let src = o * (la + lb) * inner;
                        da[o * la * inner..(o + 1) * la * inner]
                            .copy_from_slice(&g[src..src + la * inner]);
                    }
                    self.accumulate(grads, a, &da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; self.nodes[b.0].data.len()];
                    for o in 0..outer {
                        let src = o * (la + lb) * inner + la * inner;
                        db[o * lb * inner..(o + 1) * lb * inner]
                            .copy_from_slice(&g[src..src + lb * inner]);
                    }
                    self.accumulate(grads, b, &db);
                }
            }
            Op::Slice(a, axis, start, end) => {
                let sa = &self.nodes[a.0].shape;
                let (outer, len, inner) = axis_split(sa, axis);
                let w = end - start;
                let mut da = vec![0.0; self.nodes[a.0].data.len()];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    da[dst..dst + w * inner].copy_from_slice(&g[o * w * inner..(o + 1) * w * inner]);
                }
                self.accumulate(grads, a, &da);
            }
            Op::Reshape(a) => {
                self.accumulate(grads, a, g);
            }
            Op::MeanAxis(a, axis) => {
                let sa = &self.nodes[a.0].shape;
                let (outer, len, inner) = axis_split(sa, axis);
                let inv = 1.0 / len as f64;
                let mut da = vec![0.0; self.nodes[a.0].data.len()];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            da[(o * len + k) * inner + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                self.accumulate(grads, a, &da);
            }
            Op::SumAll(a) => {
                let da = vec![g[0]; self.nodes[a.0].data.len()];
                self.accumulate(grads, a, &da);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].data.len().max(1);
                let da = vec![g[0] / n as f64; self.nodes[a.0].data.len()];
                self.accumulate(grads, a, &da);
            }
            Op::Abs(a) => {
                let x = &self.nodes[a.0].data;
                let da: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gi, xi)| gi * sign_zero(*xi))
                    .collect();
                self.accumulate(grads, a, &da);
            }
            Op::Ln(a) => {
                let x = &self.nodes[a.0].data;
                let da: Vec<f64> = g.iter().zip(x).map(|(gi, xi)| gi / xi).collect();
                self.accumulate(grads, a, &da);
            }
            Op::PowConst(a, p) => {
                let x = &self.nodes[a.0].data;
                let da: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gi, xi)| gi * p * xi.powf(p - 1.0))
                    .collect();
                self.accumulate(grads, a, &da);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].data;
                let da: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
                self.accumulate(grads, a, &da);
            }
        }
    }
}

/// sgn with sgn(0) = 0.
pub fn sign_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                dst[j] += av * row[j];
            }
        }
    }
}
