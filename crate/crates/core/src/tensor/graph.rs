use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a tensor recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

/// Keys the dropout generator. Every dropout call draws from a stream
/// determined by `(seed, step, op_index)`, where `op_index` counts dropout
/// calls made on this graph so far.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub step: u64,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Scatter(Var, Vec<usize>),
    Dropout(Var, Vec<T>),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed operations (the compute graph).
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
    dropout_key: DropoutKey,
    dropout_ops: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn c<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

const GELU_K: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_C: f64 = 0.797_884_560_802_865_4;

fn gelu<T: Scalar>(x: T) -> T {
    let inner = c::<T>(GELU_C) * (x + c::<T>(GELU_K) * x * x * x);
    c::<T>(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let inner = c::<T>(GELU_C) * (x + c::<T>(GELU_K) * x * x * x);
    let t = inner.tanh();
    let dinner = c::<T>(GELU_C) * (T::one() + c::<T>(3.0 * GELU_K) * x * x);
    c::<T>(0.5) * (T::one() + t) + c::<T>(0.5) * x * (T::one() - t * t) * dinner
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self::with_dropout_key(DropoutKey::default())
    }

    pub fn with_dropout_key(key: DropoutKey) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            dropout_key: key,
            dropout_ops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_with(value, op, needs_grad)
    }

    fn push_with(&mut self, mut value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        value.requires_grad = needs_grad;
        value.grad = None;
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it participates in backward iff `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs = tensor.requires_grad;
        self.push_with(tensor, Op::Leaf, needs)
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.push_with(tensor, Op::Leaf, true)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push_with(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Value of `v` with its gradient slot filled from the last backward pass.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor<T> {
        let mut t = self.nodes[v.0].value.clone();
        t.grad = self.grads[v.0].clone();
        t
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    fn vals(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value.values
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].value.shape, &self.nodes[b.0].value.shape);
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.clone(),
                right: sb.clone(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.vals(a), (k as isize, 1), self.vals(b), (n as isize, 1), T::zero(), &mut out);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let src = self.vals(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::matrix(n, m, out)?;
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let values = self.vals(a).iter().zip(self.vals(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.nodes[a.0].value.shape.clone(), values)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        let t = Tensor::new(src.shape.clone(), src.values.iter().map(|&x| x * factor).collect())?;
        Ok(self.push(t, Op::Scale(a, factor), &[a]))
    }

    /// Adds a `1×n` bias row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let (br, bn) = self.dims(bias)?;
        if br != 1 || bn != n {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: vec![m, n],
                right: vec![br, bn],
            });
        }
        let bv = self.vals(bias);
        let values = self
            .vals(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &b)| x + b))
            .collect();
        let t = Tensor::matrix(m, n, values)?;
        Ok(self.push(t, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Gelu => self.gelu(a),
            Activation::Relu => self.relu(a),
        }
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        let t = Tensor::new(src.shape.clone(), src.values.iter().map(|&x| gelu(x)).collect())?;
        Ok(self.push(t, Op::Gelu(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        let t = Tensor::new(src.shape.clone(), src.values.iter().map(|&x| x.max(T::zero())).collect())?;
        Ok(self.push(t, Op::Relu(a), &[a]))
    }

    /// Row-wise layer normalization with learned `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        for p in [gamma, beta] {
            let d = self.dims(p)?;
            if d != (1, n) {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    left: vec![m, n],
                    right: vec![d.0, d.1],
                });
            }
        }
        let nf = T::from_usize(n).unwrap();
        let (g, b) = (self.vals(gamma), self.vals(beta));
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in self.vals(x).chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Concatenates matrices with equal row counts along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_cols", "no inputs"))?;
        let (m, _) = self.dims(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, w) = self.dims(p)?;
            if r != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![m],
                    right: vec![r, w],
                });
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.vals(p)[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::matrix(m, total, out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let (_, n) = self.dims(first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, w) = self.dims(p)?;
            if w != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![n],
                    right: vec![r, w],
                });
            }
            rows += r;
            out.extend_from_slice(self.vals(p));
        }
        let t = Tensor::matrix(rows, n, out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if width == 0 || start + width > n {
            return Err(Error::invalid("slice_cols", format!("columns {start}..{} of {n}", start + width)));
        }
        let src = self.vals(a);
        let out = (0..m).flat_map(|i| src[i * n + start..i * n + start + width].iter().copied()).collect();
        let t = Tensor::matrix(m, width, out)?;
        Ok(self.push(t, Op::SliceCols(a, start), &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if count == 0 || start + count > m {
            return Err(Error::invalid("slice_rows", format!("rows {start}..{} of {m}", start + count)));
        }
        let out = self.vals(a)[start * n..(start + count) * n].to_vec();
        let t = Tensor::matrix(count, n, out)?;
        Ok(self.push(t, Op::SliceRows(a, start), &[a]))
    }

    /// Selects rows by index (embedding lookup, separator fetch).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if indices.is_empty() {
            return Err(Error::invalid("gather_rows", "empty index list"));
        }
        let src = self.vals(a);
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(Error::IdOutOfRange {
                    table: "gather_rows",
                    id: i,
                    size: m,
                });
            }
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let t = Tensor::matrix(indices.len(), n, out)?;
        Ok(self.push(t, Op::GatherRows(a, indices.to_vec()), &[a]))
    }

    /// Writes element `p` of `a` to flat position `positions[p]` of a fresh
    /// `rows×cols` matrix whose other entries hold `fill`.
    pub fn scatter(&mut self, a: Var, rows: usize, cols: usize, positions: &[usize], fill: T) -> Result<Var> {
        let src = self.vals(a);
        if positions.len() != src.len() {
            return Err(Error::ShapeMismatch {
                op: "scatter",
                left: self.nodes[a.0].value.shape.clone(),
                right: vec![positions.len()],
            });
        }
        let mut out = vec![fill; rows * cols];
        for (&p, &v) in positions.iter().zip(src) {
            if p >= out.len() {
                return Err(Error::IdOutOfRange {
                    table: "scatter",
                    id: p,
                    size: out.len(),
                });
            }
            out[p] = v;
        }
        let t = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(t, Op::Scatter(a, positions.to_vec()), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[a.0].value.clone().reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Inverted dropout. In evaluation mode (or with `p == 0`) the input
    /// handle is returned untouched.
    pub fn dropout(&mut self, a: Var, p: f64, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("rate {p} outside [0, 1)")));
        }
        let op_index = self.dropout_ops;
        self.dropout_ops += 1;
        if !train || p == 0.0 {
            return Ok(a);
        }
        let key = self.dropout_key;
        let mut rng = ChaCha8Rng::seed_from_u64(key.seed ^ op_index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(key.step);
        let keep = c::<T>(1.0 / (1.0 - p));
        let src = &self.nodes[a.0].value;
        let mask: Vec<T> = (0..src.values.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let values = src.values.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let t = Tensor::new(src.shape.clone(), values)?;
        Ok(self.push(t, Op::Dropout(a, mask), &[a]))
    }

    /// Row-wise softmax. Columns with `key_mask[j] == false` get probability
    /// exactly zero, as if their logits were -inf.
    pub fn softmax_rows(&mut self, a: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if let Some(mask) = key_mask {
            if mask.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "softmax_rows",
                    left: vec![m, n],
                    right: vec![mask.len()],
                });
            }
        }
        let valid = |j: usize| key_mask.is_none_or(|mk| mk[j]);
        let mut out = vec![T::zero(); m * n];
        for (i, row) in self.vals(a).chunks(n).enumerate() {
            let max = (0..n).filter(|&j| valid(j)).map(|j| row[j]).fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                return Err(Error::AllMasked { row: i });
            }
            let mut z = T::zero();
            for j in (0..n).filter(|&j| valid(j)) {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                z = z + e;
            }
            for v in &mut out[i * n..(i + 1) * n] {
                *v = *v / z;
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    ///
    /// `valid`, when given, is a row-major `n×K` mask; masked classes are
    /// treated as -inf logits whatever their stored value.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], valid: Option<&[bool]>) -> Result<Var> {
        let (n, k) = self.dims(logits)?;
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: vec![n, k],
                right: vec![targets.len()],
            });
        }
        if let Some(v) = valid {
            if v.len() != n * k {
                return Err(Error::ShapeMismatch {
                    op: "cross_entropy",
                    left: vec![n, k],
                    right: vec![v.len()],
                });
            }
        }
        let ok = |i: usize, j: usize| valid.is_none_or(|v| v[i * k + j]);
        let x = self.vals(logits);
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            if t >= k {
                return Err(Error::IdOutOfRange {
                    table: "cross_entropy classes",
                    id: t,
                    size: k,
                });
            }
            let row = &x[i * k..(i + 1) * k];
            let live = |j: usize| ok(i, j) && row[j] != T::neg_infinity();
            if (0..k).all(|j| !live(j)) {
                return Err(Error::AllMasked { row: i });
            }
            if !live(t) {
                return Err(Error::TargetMasked { row: i, class: t });
            }
            let max = (0..k).filter(|&j| live(j)).map(|j| row[j]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in (0..k).filter(|&j| live(j)) {
                let e = (row[j] - max).exp();
                probs[i * k + j] = e;
                z = z + e;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p = *p / z;
            }
            total = total + (z.ln() + max - row[t]);
        }
        let nf = T::from_usize(n).unwrap();
        let t = Tensor::scalar(total / nf);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.vals(a).iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let shape = &self.nodes[loss.0].value.shape;
        if self.nodes[loss.0].value.values.len() != 1 {
            return Err(Error::NotScalar(shape.clone()));
        }
        self.consumed = true;
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g)?;
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.values.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
    }

    fn add_into(&mut self, v: Var, g: impl IntoIterator<Item = T>) {
        if let Some(dst) = self.acc(v) {
            for (d, x) in dst.iter_mut().zip(g) {
                *d = *d + x;
            }
        }
    }

    fn propagate(&mut self, idx: usize, g: &[T]) -> Result<()> {
        // Take the op out so inputs can be borrowed mutably; restored below.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a)?;
                let (_, n) = self.dims(*b)?;
                if self.nodes[a.0].needs_grad {
                    let len = m * k;
                    let bv = &self.nodes[b.0].value.values;
                    let da = self.grads[a.0].get_or_insert_with(|| vec![T::zero(); len]);
                    // dA += dC · Bᵀ
                    T::gemm(m, n, k, T::one(), g, (n as isize, 1), bv, (1, n as isize), T::one(), da);
                }
                if self.nodes[b.0].needs_grad {
                    let len = k * n;
                    let av = &self.nodes[a.0].value.values;
                    let db = self.grads[b.0].get_or_insert_with(|| vec![T::zero(); len]);
                    // dB += Aᵀ · dC
                    T::gemm(k, m, n, T::one(), av, (1, k as isize), g, (n as isize, 1), T::one(), db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims(*a)?;
                if let Some(da) = self.acc(*a) {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = da[i * n + j] + g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.add_into(*a, g.iter().copied());
                self.add_into(*b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.add_into(*a, g.iter().copied());
                self.add_into(*b, g.iter().map(|&x| -x));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].needs_grad {
                    let upd: Vec<T> = g.iter().zip(self.vals(b)).map(|(&x, &y)| x * y).collect();
                    self.add_into(a, upd);
                }
                if self.nodes[b.0].needs_grad {
                    let upd: Vec<T> = g.iter().zip(self.vals(a)).map(|(&x, &y)| x * y).collect();
                    self.add_into(b, upd);
                }
            }
            Op::Scale(a, f) => {
                let f = *f;
                self.add_into(*a, g.iter().map(|&x| x * f));
            }
            Op::AddRow(a, bias) => {
                self.add_into(*a, g.iter().copied());
                let n = self.nodes[bias.0].value.values.len();
                if let Some(db) = self.acc(*bias) {
                    for row in g.chunks(n) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d = *d + x;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let upd: Vec<T> = g.iter().zip(self.vals(*a)).map(|(&d, &x)| d * gelu_grad(x)).collect();
                self.add_into(*a, upd);
            }
            Op::Relu(a) => {
                let upd: Vec<T> = g
                    .iter()
                    .zip(self.vals(*a))
                    .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
                    .collect();
                self.add_into(*a, upd);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = self.dims(*x)?;
                let nf = T::from_usize(n).unwrap();
                let gv = self.vals(*gamma).to_vec();
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![T::zero(); m * n];
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dxhat: Vec<T> = g[r.clone()].iter().zip(&gv).map(|(&d, &w)| d * w).collect();
                        let mean_d = dxhat.iter().copied().sum::<T>() / nf;
                        let mean_dx = dxhat.iter().zip(&xhat[r.clone()]).map(|(&d, &h)| d * h).sum::<T>() / nf;
                        for j in 0..n {
                            dx[i * n + j] = inv_std[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
                        }
                    }
                    self.add_into(*x, dx);
                }
                if let Some(dg) = self.acc(*gamma) {
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] = dg[j] + g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if let Some(db) = self.acc(*beta) {
                    for row in g.chunks(n) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d = *d + x;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[idx].value.cols();
                let m = self.nodes[idx].value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    if let Some(dp) = self.acc(p) {
                        for i in 0..m {
                            for j in 0..w {
                                dp[i * w + j] = dp[i * w + j] + g[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.values.len();
                    self.add_into(p, g[offset..offset + len].iter().copied());
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let n = self.nodes[a.0].value.cols();
                let w = self.nodes[idx].value.cols();
                let start = *start;
                if let Some(da) = self.acc(*a) {
                    for (i, row) in g.chunks(w).enumerate() {
                        for (j, &x) in row.iter().enumerate() {
                            da[i * n + start + j] = da[i * n + start + j] + x;
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let n = self.nodes[a.0].value.cols();
                let start = *start;
                if let Some(da) = self.acc(*a) {
                    for (d, &x) in da[start * n..].iter_mut().zip(g) {
                        *d = *d + x;
                    }
                }
            }
            Op::GatherRows(a, indices) => {
                let n = self.nodes[a.0].value.cols();
                if let Some(da) = self.acc(*a) {
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..n {
                            da[i * n + j] = da[i * n + j] + g[r * n + j];
                        }
                    }
                }
            }
            Op::Scatter(a, positions) => {
                let upd: Vec<T> = positions.iter().map(|&p| g[p]).collect();
                self.add_into(*a, upd);
            }
            Op::Dropout(a, mask) => {
                self.add_into(*a, g.iter().zip(mask).map(|(&d, &m)| d * m));
            }
            Op::Softmax(a) => {
                let n = self.nodes[idx].value.cols();
                let y = &self.nodes[idx].value.values;
                let mut dx = vec![T::zero(); y.len()];
                for (i, (yr, gr)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &d)| p * d).sum();
                    for j in 0..n {
                        dx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.add_into(*a, dx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let k = self.nodes[logits.0].value.cols();
                let n = targets.len();
                let scale = g[0] / T::from_usize(n).unwrap();
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dx[i * k + t] = dx[i * k + t] - scale;
                }
                self.add_into(*logits, dx);
            }
            Op::Sum(a) => {
                let g0 = g[0];
                let n = self.nodes[a.0].value.values.len();
                self.add_into(*a, std::iter::repeat_n(g0, n));
            }
            Op::Reshape(a) => {
                self.add_into(*a, g.iter().copied());
            }
        }
        self.nodes[idx].op = op;
        Ok(())
    }
}
