//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order. Because a
//! node can only reference nodes created before it, creation order is already
//! a topological order, and [`Graph::backward`] walks the tape once in
//! reverse, visiting each node exactly once.
//!
//! Parameters are not copied into the tape: a graph borrows a [`ParamStore`]
//! and parameter nodes read straight from it. Gradients come back as a
//! separate [`Gradients`] value so the store can be mutated by an optimizer
//! once the graph is dropped.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SumRows(Var),
    SumAll(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Nll {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Cosine(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    inputs: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.index()).and_then(Option::as_ref)
    }

    /// Gradient of a leaf created with [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.params.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Adds `other` into `self` parameter-wise.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (i, g) in other.params.iter().enumerate() {
            let Some(g) = g else { continue };
            match &mut self.params[i] {
                Some(mine) => mine
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
        .expect("shape preserved")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("shape preserved")
}

/// Row-wise softmax with an optional keep-mask (`true` = position may receive
/// probability). Masked entries are exactly zero; a fully masked row is all
/// zeros.
pub fn softmax_rows(x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let (r, c) = x.dims()?;
    if let Some(m) = mask {
        if m.len() != r * c {
            return Err(TensorError::BadShape {
                op: "softmax",
                expected: "mask with one entry per element",
                got: vec![m.len()],
            });
        }
    }
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let mut out = vec![0.0; r * c];
    for row in 0..r {
        let base = row * c;
        let mut max = f64::NEG_INFINITY;
        for j in 0..c {
            if keep(base + j) {
                max = max.max(x.data()[base + j]);
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut sum = 0.0;
        for j in 0..c {
            if keep(base + j) {
                let e = (x.data()[base + j] - max).exp();
                out[base + j] = e;
                sum += e;
            }
        }
        for v in &mut out[base..base + c] {
            *v /= sum;
        }
    }
    Tensor::matrix(r, c, out)
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Graph<'s> {
    /// A graph without parameters; only constants and inputs are available.
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self
                .store
                .expect("parameter node without a store")
                .get(*id),
            _ => unreachable!("node without a value"),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.param_vars.get(&id) {
            return Ok(*v);
        }
        let store = self.store.ok_or(TensorError::NoParamStore)?;
        if id.index() >= store.len() {
            return Err(TensorError::IndexOutOfRange {
                op: "param",
                index: id.index(),
                len: store.len(),
            });
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims()?;
        let (n, k2) = tb.dims()?;
        if k != k2 {
            return Err(mismatch("matmul_bt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_into(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBt(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `[1, n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (r, c) = ta.dims()?;
        if tr.shape() != [1, c] {
            return Err(mismatch("add_row", ta, tr));
        }
        let mut out = ta.data().to_vec();
        for i in 0..r {
            for (o, b) in out[i * c..(i + 1) * c].iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::AddRow(a, row), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `alpha * a + beta`
    pub fn affine(&mut self, a: Var, alpha: f64, beta: f64) -> Var {
        let out = map(self.value(a), |x| alpha * x + beta);
        let rg = self.rg(&[a]);
        self.push(out, Op::Affine(a, alpha), rg)
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        self.affine(a, alpha, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::tanh);
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// Row-wise softmax; see [`softmax_rows`] for mask semantics.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let out = softmax_rows(self.value(a), mask)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Row-wise layer normalisation with `[1, n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (r, c) = tx.dims()?;
        if tg.shape() != [1, c] || tb.shape() != [1, c] {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::matrix(r, c, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Embedding lookup: one output row per id.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n, c) = t.dims()?;
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    len: n,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::matrix(ids.len(), c, out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Column sums, `[r, c] -> [1, c]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims()?;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::row_vector(out), Op::SumRows(a), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<f64>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims()?;
            if pr != r {
                return Err(mismatch("concat_cols", self.value(parts[0]), self.value(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for i in 0..r {
                out[i * total + off..i * total + off + w].copy_from_slice(t.row(i));
            }
            off += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::matrix(r, total, out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims()?;
        if start > end || end > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                len: c,
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..end]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(r, w, out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            let (pr, pc) = t.dims()?;
            if pc != c {
                return Err(mismatch("concat_rows", self.value(parts[0]), t));
            }
            out.extend_from_slice(t.data());
            rows += pr;
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::matrix(rows, c, out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims()?;
        if start > end || end > r {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                len: r,
            });
        }
        let out = t.data()[start * c..end * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(end - start, c, out)?,
            Op::SliceRows { x, start },
            rg,
        ))
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Rows whose target is `None` are ignored (padding).
    pub fn nll(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let (r, c) = t.dims()?;
        if targets.len() != r {
            return Err(TensorError::BadShape {
                op: "nll",
                expected: "one target per logit row",
                got: vec![targets.len()],
            });
        }
        let probs = softmax_rows(t, None)?.into_data();
        let mut loss = 0.0;
        for (i, tgt) in targets.iter().enumerate() {
            if let Some(k) = *tgt {
                if k >= c {
                    return Err(TensorError::IndexOutOfRange {
                        op: "nll",
                        index: k,
                        len: c,
                    });
                }
                // log-sum-exp form keeps tiny probabilities finite
                let row = t.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                loss += lse - row[k];
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Nll {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Inverted dropout with keep probability `keep`; identity when `keep >= 1`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, keep: f64, rng: &mut R) -> Var {
        if keep >= 1.0 {
            return x;
        }
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let t = self.value(x);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        )
        .expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    /// Cosine similarity of two same-shaped tensors, as a scalar.
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        self.same_shape("cosine", u, v)?;
        let c = cosine_similarity(self.value(u).data(), self.value(v).data())?;
        let rg = self.rg(&[u, v]);
        Ok(self.push(Tensor::scalar(c), Op::Cosine(u, v), rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        let n_params = self.store.map_or(0, ParamStore::len);
        let mut out = Gradients {
            params: vec![None; n_params],
            inputs: HashMap::new(),
        };
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let y = self.value(Var(i));
            match &node.op {
                Op::Leaf => {
                    out.inputs
                        .insert(Var(i), Tensor::new(y.shape().to_vec(), g)?);
                }
                Op::Param(id) => {
                    out.params[id.index()] = Some(Tensor::new(y.shape().to_vec(), g)?);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = ta.dims()?;
                    let n = tb.cols();
                    self.acc(&mut grads, *a, |da| matmul_bt_into(&g, tb.data(), da, m, n, k));
                    self.acc(&mut grads, *b, |db| matmul_at_into(ta.data(), &g, db, m, k, n));
                }
                Op::MatMulBt(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = ta.dims()?;
                    let n = tb.rows();
                    self.acc(&mut grads, *a, |da| matmul_into(&g, tb.data(), da, m, n, k));
                    self.acc(&mut grads, *b, |db| matmul_at_into(&g, ta.data(), db, m, n, k));
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, |d| add_into(d, &g));
                    self.acc(&mut grads, *b, |d| add_into(d, &g));
                }
                Op::AddRow(a, row) => {
                    self.acc(&mut grads, *a, |d| add_into(d, &g));
                    let c = y.cols();
                    self.acc(&mut grads, *row, |d| {
                        for chunk in g.chunks(c) {
                            add_into(d, chunk);
                        }
                    });
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, |d| add_into(d, &g));
                    self.acc(&mut grads, *b, |d| d.iter_mut().zip(&g).for_each(|(x, gv)| *x -= gv));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, *a, |d| {
                        for ((x, gv), bv) in d.iter_mut().zip(&g).zip(tb.data()) {
                            *x += gv * bv;
                        }
                    });
                    self.acc(&mut grads, *b, |d| {
                        for ((x, gv), av) in d.iter_mut().zip(&g).zip(ta.data()) {
                            *x += gv * av;
                        }
                    });
                }
                Op::Affine(a, alpha) => {
                    self.acc(&mut grads, *a, |d| {
                        d.iter_mut().zip(&g).for_each(|(x, gv)| *x += alpha * gv)
                    });
                }
                Op::Sigmoid(a) => self.acc(&mut grads, *a, |d| {
                    for ((x, gv), yv) in d.iter_mut().zip(&g).zip(y.data()) {
                        *x += gv * yv * (1.0 - yv);
                    }
                }),
                Op::Tanh(a) => self.acc(&mut grads, *a, |d| {
                    for ((x, gv), yv) in d.iter_mut().zip(&g).zip(y.data()) {
                        *x += gv * (1.0 - yv * yv);
                    }
                }),
                Op::Relu(a) => {
                    let ta = self.value(*a);
                    self.acc(&mut grads, *a, |d| {
                        for ((x, gv), av) in d.iter_mut().zip(&g).zip(ta.data()) {
                            if *av > 0.0 {
                                *x += gv;
                            }
                        }
                    })
                }
                Op::Softmax(a) => {
                    let c = y.cols();
                    self.acc(&mut grads, *a, |d| {
                        for ((drow, grow), yrow) in
                            d.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c))
                        {
                            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for ((x, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                                *x += yv * (gv - dot);
                            }
                        }
                    })
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let c = y.cols();
                    let tg = self.value(*gamma);
                    self.acc(&mut grads, *x, |d| {
                        for (r, is) in inv_std.iter().enumerate() {
                            let grow = &g[r * c..(r + 1) * c];
                            let hrow = &xhat[r * c..(r + 1) * c];
                            let dh: Vec<f64> =
                                grow.iter().zip(tg.data()).map(|(a, b)| a * b).collect();
                            let mean_dh = dh.iter().sum::<f64>() / c as f64;
                            let mean_dh_h =
                                dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                            for j in 0..c {
                                d[r * c + j] += is * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                            }
                        }
                    });
                    self.acc(&mut grads, *gamma, |d| {
                        for (gchunk, hchunk) in g.chunks(c).zip(xhat.chunks(c)) {
                            for ((x, gv), hv) in d.iter_mut().zip(gchunk).zip(hchunk) {
                                *x += gv * hv;
                            }
                        }
                    });
                    self.acc(&mut grads, *beta, |d| {
                        for gchunk in g.chunks(c) {
                            add_into(d, gchunk);
                        }
                    });
                }
                Op::Gather { table, ids } => {
                    let c = y.cols();
                    self.acc(&mut grads, *table, |d| {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut d[id * c..(id + 1) * c], &g[r * c..(r + 1) * c]);
                        }
                    });
                }
                Op::SumRows(a) => {
                    let c = y.cols();
                    self.acc(&mut grads, *a, |d| {
                        for chunk in d.chunks_mut(c) {
                            add_into(chunk, &g);
                        }
                    });
                }
                Op::SumAll(a) => {
                    let g0 = g[0];
                    self.acc(&mut grads, *a, |d| d.iter_mut().for_each(|x| *x += g0));
                }
                Op::ConcatCols(parts) => {
                    let total = y.cols();
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        self.acc(&mut grads, p, |d| {
                            for (r, chunk) in d.chunks_mut(w).enumerate() {
                                add_into(chunk, &g[r * total + off..r * total + off + w]);
                            }
                        });
                        off += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let w = y.cols();
                    let c = self.value(*x).cols();
                    self.acc(&mut grads, *x, |d| {
                        for (r, chunk) in g.chunks(w).enumerate() {
                            add_into(&mut d[r * c + start..r * c + start + w], chunk);
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        self.acc(&mut grads, p, |d| add_into(d, &g[off..off + n]));
                        off += n;
                    }
                }
                Op::SliceRows { x, start } => {
                    let c = y.cols();
                    self.acc(&mut grads, *x, |d| {
                        add_into(&mut d[start * c..start * c + g.len()], &g)
                    });
                }
                Op::Nll {
                    logits,
                    targets,
                    probs,
                } => {
                    let c = self.value(*logits).cols();
                    let g0 = g[0];
                    self.acc(&mut grads, *logits, |d| {
                        for (r, tgt) in targets.iter().enumerate() {
                            if let Some(k) = *tgt {
                                for j in 0..c {
                                    d[r * c + j] += g0 * probs[r * c + j];
                                }
                                d[r * c + k] -= g0;
                            }
                        }
                    });
                }
                Op::Dropout { x, mask } => self.acc(&mut grads, *x, |d| {
                    for ((a, gv), m) in d.iter_mut().zip(&g).zip(mask) {
                        *a += gv * m;
                    }
                }),
                Op::Cosine(u, v) => {
                    let (tu, tv) = (self.value(*u).data(), self.value(*v).data());
                    let nu = tu.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nv = tv.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let cval = y.data()[0];
                    let g0 = g[0];
                    self.acc(&mut grads, *u, |d| {
                        for ((x, a), b) in d.iter_mut().zip(tu).zip(tv) {
                            *x += g0 * (b / (nu * nv) - cval * a / (nu * nu));
                        }
                    });
                    self.acc(&mut grads, *v, |d| {
                        for ((x, a), b) in d.iter_mut().zip(tu).zip(tv) {
                            *x += g0 * (a / (nu * nv) - cval * b / (nv * nv));
                        }
                    });
                }
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).numel()]);
        f(slot);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `⟨u, v⟩ / (‖u‖ ‖v‖)`, clamped to `[-1, 1]` against rounding.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 || !nu.is_finite() || !nv.is_finite() {
        return Err(TensorError::DegenerateVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}
