//! Layers built from graph operations. Each layer owns [`ParamId`]s into a
//! [`ParamStore`]; the names it registers are `<prefix>.<field>`.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Linear {
            w: store.add_glorot(format!("{name}.w"), d_in, d_out, rng)?,
            b: store.add_filled(format!("{name}.b"), 1, d_out, 0.0)?,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w)?;
        let b = g.param(self.b)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add_filled(format!("{name}.gamma"), 1, d, 1.0)?,
            beta: store.add_filled(format!("{name}.beta"), 1, d, 0.0)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = (1.0 / dim as f64).sqrt();
        Ok(Embedding {
            table: store.add_uniform(name, vocab, dim, bound, rng)?,
            vocab,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let t = g.param(self.table)?;
        g.gather_rows(t, ids)
    }
}

/// Position-wise two-layer ReLU network.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FeedForward {
            inner: Linear::new(store, &format!("{name}.inner"), d_model, d_ff, rng)?,
            outer: Linear::new(store, &format!("{name}.outer"), d_ff, d_model, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, x)?;
        let h = g.relu(h);
        self.outer.forward(g, h)
    }
}

/// Keys and values projected once from an attention memory.
#[derive(Clone, Copy, Debug)]
pub struct AttnMemory {
    pub keys: Var,
    pub values: Var,
    pub len: usize,
}

/// Scaled dot-product attention over `heads` heads, scale `1/sqrt(d_head)`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(TensorError::BadShape {
                op: "multi_head_attention",
                expected: "d_model divisible by heads",
                got: vec![d_model, heads],
            });
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng)?,
            key: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng)?,
            value: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng)?,
            output: Linear::new(store, &format!("{name}.o"), d_model, d_model, rng)?,
            heads,
        })
    }

    pub fn project_memory(&self, g: &mut Graph, memory: Var) -> Result<AttnMemory> {
        let len = g.value(memory).rows();
        Ok(AttnMemory {
            keys: self.key.forward(g, memory)?,
            values: self.value.forward(g, memory)?,
            len,
        })
    }

    /// `mask`, when given, is row-major `[queries × memory.len]` with `true`
    /// where attention is allowed.
    pub fn attend(
        &self,
        g: &mut Graph,
        queries: Var,
        memory: &AttnMemory,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let q = self.query.forward(g, queries)?;
        let d_model = g.value(q).cols();
        let d_head = d_model / self.heads;
        let scale = 1.0 / (d_head as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * d_head, (h + 1) * d_head);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(memory.keys, lo, hi)?;
            let vh = g.slice_cols(memory.values, lo, hi)?;
            let scores = g.matmul_bt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let weights = g.softmax(scores, mask)?;
            outs.push(g.matmul(weights, vh)?);
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        self.output.forward(g, joined)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        queries: Var,
        memory: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let mem = self.project_memory(g, memory)?;
        self.attend(g, queries, &mem, mask)
    }
}

/// Keep-mask letting query `i` see keys `0..=i`.
pub fn causal_mask(len: usize) -> Vec<bool> {
    let mut m = vec![false; len * len];
    for i in 0..len {
        for j in 0..=i {
            m[i * len + j] = true;
        }
    }
    m
}

/// Standard sinusoidal position table, `[len, d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(len, d, data).expect("sized above")
}

/// Gated recurrent unit cell.
///
/// ```text
/// z  = σ(x·Wz + h·Uz + bz)
/// r  = σ(x·Wr + h·Ur + br)
/// h~ = tanh(x·Wh + (r ⊙ h)·Uh + bh)
/// h' = (1 − z) ⊙ h + z ⊙ h~
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_update: ParamId,
    pub u_update: ParamId,
    pub b_update: ParamId,
    pub w_reset: ParamId,
    pub u_reset: ParamId,
    pub b_reset: ParamId,
    pub w_cand: ParamId,
    pub u_cand: ParamId,
    pub b_cand: ParamId,
    pub d_in: usize,
    pub d_hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut w = |s: &mut ParamStore, field: &str, rows: usize| {
            s.add_glorot(format!("{name}.{field}"), rows, d_hidden, rng)
        };
        let w_update = w(store, "w_update", d_in)?;
        let u_update = w(store, "u_update", d_hidden)?;
        let w_reset = w(store, "w_reset", d_in)?;
        let u_reset = w(store, "u_reset", d_hidden)?;
        let w_cand = w(store, "w_cand", d_in)?;
        let u_cand = w(store, "u_cand", d_hidden)?;
        Ok(GruCell {
            w_update,
            u_update,
            b_update: store.add_filled(format!("{name}.b_update"), 1, d_hidden, 0.0)?,
            w_reset,
            u_reset,
            b_reset: store.add_filled(format!("{name}.b_reset"), 1, d_hidden, 0.0)?,
            w_cand,
            u_cand,
            b_cand: store.add_filled(format!("{name}.b_cand"), 1, d_hidden, 0.0)?,
            d_in,
            d_hidden,
        })
    }

    fn gate(&self, g: &mut Graph, x: Var, h: Var, w: ParamId, u: ParamId, b: ParamId) -> Result<Var> {
        let (w, u, b) = (g.param(w)?, g.param(u)?, g.param(b)?);
        let xw = g.matmul(x, w)?;
        let hu = g.matmul(h, u)?;
        let s = g.add(xw, hu)?;
        g.add_row(s, b)
    }

    /// One recurrence step; `h` is `[1, d_hidden]`, `x` is `[1, d_in]`.
    pub fn step(&self, g: &mut Graph, h: Var, x: Var) -> Result<Var> {
        let (hs, xs) = (g.value(h).shape().to_vec(), g.value(x).shape().to_vec());
        if hs != [1, self.d_hidden] || xs != [1, self.d_in] {
            return Err(TensorError::ShapeMismatch {
                op: "gru_step",
                lhs: hs,
                rhs: xs,
            });
        }
        let z = self.gate(g, x, h, self.w_update, self.u_update, self.b_update)?;
        let z = g.sigmoid(z);
        let r = self.gate(g, x, h, self.w_reset, self.u_reset, self.b_reset)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h)?;
        let cand = self.gate(g, x, rh, self.w_cand, self.u_cand, self.b_cand)?;
        let cand = g.tanh(cand);
        let keep = g.affine(z, -1.0, 1.0);
        let old = g.mul(keep, h)?;
        let new = g.mul(z, cand)?;
        g.add(old, new)
    }

    /// Folds `step` over `inputs`; an empty sequence returns `h0` unchanged.
    pub fn run(&self, g: &mut Graph, h0: Var, inputs: &[Var]) -> Result<Var> {
        inputs.iter().try_fold(h0, |h, &x| self.step(g, h, x))
    }
}
