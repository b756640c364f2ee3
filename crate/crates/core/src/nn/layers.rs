//! Parameterised building blocks: dense, temporal convolution, LSTM,
//! bidirectional LSTM and multi-head attention.

use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Padding, Value};
use super::params::{orthogonal, xavier_uniform, Binding, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.add(
            format!("{name}.w"),
            xavier_uniform(rng, in_dim, out_dim, in_dim, out_dim),
        )?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(1, out_dim))?)
        } else {
            None
        };
        Ok(Linear {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Value) -> Result<Value> {
        let y = g.matmul(x, p.get(self.w))?;
        match self.b {
            Some(b) => g.add(y, p.get(b)),
            None => Ok(y),
        }
    }

    pub fn flops(&self, rows: usize) -> u64 {
        2 * (rows * self.in_dim * self.out_dim) as u64
    }
}

/// Temporal convolution applied independently to `groups` interleaved series.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub padding: Padding,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        padding: Padding,
    ) -> Result<Self> {
        if kernel == 0 {
            return Err(Error::InvalidParameter("conv kernel must be >= 1".into()));
        }
        let w = store.add(
            format!("{name}.w"),
            xavier_uniform(rng, kernel * in_ch, out_ch, kernel * in_ch, kernel * out_ch),
        )?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, out_ch))?;
        Ok(Conv1d {
            w,
            b,
            kernel,
            padding,
            in_ch,
            out_ch,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Value, groups: usize) -> Result<Value> {
        g.conv1d(
            x,
            p.get(self.w),
            Some(p.get(self.b)),
            groups,
            self.kernel,
            self.padding,
        )
    }

    pub fn flops(&self, t: usize, groups: usize) -> u64 {
        2 * (t * groups * self.kernel * self.in_ch * self.out_ch) as u64
    }
}

/// Single-direction LSTM with gate order (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        let wx = store.add(
            format!("{name}.wx"),
            xavier_uniform(rng, in_dim, 4 * hidden, in_dim, 4 * hidden),
        )?;
        let mut wh = Tensor::zeros(hidden, 4 * hidden);
        for gate in 0..4 {
            let q = orthogonal(rng, hidden);
            for r in 0..hidden {
                for c in 0..hidden {
                    wh.set(r, gate * hidden + c, q.get(r, c));
                }
            }
        }
        let wh = store.add(format!("{name}.wh"), wh)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, 4 * hidden))?;
        Ok(Lstm {
            wx,
            wh,
            b,
            in_dim,
            hidden,
        })
    }

    /// Runs over `seq: T×in`, returning hidden states `T×H` in input time order.
    /// With `reverse` the recurrence starts at the last frame.
    pub fn forward(&self, g: &mut Graph, p: &Binding, seq: Value, reverse: bool) -> Result<Value> {
        let (t_len, in_dim) = g.shape(seq);
        if in_dim != self.in_dim {
            return Err(Error::shape("lstm", (t_len, in_dim), (t_len, self.in_dim)));
        }
        let xw = g.matmul(seq, p.get(self.wx))?;
        let xw = g.add(xw, p.get(self.b))?;
        let mut h = g.constant(Tensor::zeros(1, self.hidden));
        let mut c = g.constant(Tensor::zeros(1, self.hidden));
        let mut outs = vec![h; t_len];
        for step in 0..t_len {
            let t = if reverse { t_len - 1 - step } else { step };
            let x_t = g.slice_rows(xw, t, 1)?;
            (h, c) = lstm_cell(g, x_t, h, c, p.get(self.wh), self.hidden)?;
            outs[t] = h;
        }
        g.concat_rows(&outs)
    }

    pub fn flops(&self, t: usize) -> u64 {
        // input and recurrent projections plus roughly ten elementwise ops per unit
        2 * (t * (self.in_dim + self.hidden) * 4 * self.hidden) as u64
            + 10 * (t * self.hidden) as u64
    }
}

/// One recurrence step. `x_proj` is the input projection `x·Wx + b` (`1×4H`).
pub fn lstm_cell(
    g: &mut Graph,
    x_proj: Value,
    h: Value,
    c: Value,
    wh: Value,
    hidden: usize,
) -> Result<(Value, Value)> {
    let rec = g.matmul(h, wh)?;
    let gates = g.add(x_proj, rec)?;
    let i = g.slice_cols(gates, 0, hidden)?;
    let f = g.slice_cols(gates, hidden, hidden)?;
    let cand = g.slice_cols(gates, 2 * hidden, hidden)?;
    let o = g.slice_cols(gates, 3 * hidden, hidden)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let cand = g.tanh(cand);
    let o = g.sigmoid(o);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}

#[derive(Clone, Debug)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(BiLstm {
            fwd: Lstm::new(store, rng, &format!("{name}.fwd"), in_dim, hidden)?,
            bwd: Lstm::new(store, rng, &format!("{name}.bwd"), in_dim, hidden)?,
        })
    }

    /// `T×in → T×2H`: forward states then time-reversed states.
    pub fn forward(&self, g: &mut Graph, p: &Binding, seq: Value) -> Result<Value> {
        let f = self.fwd.forward(g, p, seq, false)?;
        let b = self.bwd.forward(g, p, seq, true)?;
        g.concat_cols(&[f, b])
    }

    pub fn out_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    pub fn flops(&self, t: usize) -> u64 {
        self.fwd.flops(t) + self.bwd.flops(t)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs (self-attention when both are the same value).
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub heads: usize,
    pub q_dim: usize,
    pub kv_dim: usize,
    pub model_dim: usize,
    pub out_dim: usize,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
        model_dim: usize,
        out_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::HeadDivisibility {
                dim: model_dim,
                heads,
            });
        }
        let mut dense = |suffix: &str, i: usize, o: usize| {
            store.add(format!("{name}.{suffix}"), xavier_uniform(rng, i, o, i, o))
        };
        let wq = dense("wq", q_dim, model_dim)?;
        let wk = dense("wk", kv_dim, model_dim)?;
        let wv = dense("wv", kv_dim, model_dim)?;
        let wo = dense("wo", model_dim, out_dim)?;
        let bo = store.add(format!("{name}.bo"), Tensor::zeros(1, out_dim))?;
        Ok(MultiHeadAttention {
            wq,
            wk,
            wv,
            wo,
            bo,
            heads,
            q_dim,
            kv_dim,
            model_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, q_in: Value, kv_in: Value) -> Result<Value> {
        let q = g.matmul(q_in, p.get(self.wq))?;
        let k = g.matmul(kv_in, p.get(self.wk))?;
        let v = g.matmul(kv_in, p.get(self.wv))?;
        let head_dim = self.model_dim / self.heads;
        let ctx = multi_head_attention(g, q, k, v, self.heads, 1.0 / (head_dim as f64).sqrt())?;
        let y = g.matmul(ctx, p.get(self.wo))?;
        g.add(y, p.get(self.bo))
    }

    pub fn flops(&self, tq: usize, tk: usize) -> u64 {
        let proj = 2 * (tq * self.q_dim + 2 * tk * self.kv_dim) * self.model_dim;
        let scores = 2 * 2 * tq * tk * self.model_dim;
        let out = 2 * tq * self.model_dim * self.out_dim;
        (proj + scores + out) as u64
    }
}

/// Splits already-projected `q`, `k`, `v` into heads along columns, applies
/// `softmax(scale·q·kᵀ)·v` per head and concatenates the heads.
pub fn multi_head_attention(
    g: &mut Graph,
    q: Value,
    k: Value,
    v: Value,
    heads: usize,
    scale: f64,
) -> Result<Value> {
    let (tq, d) = g.shape(q);
    let (tk, dk) = g.shape(k);
    if dk != d || g.shape(v) != (tk, d) {
        return Err(Error::shape("attention", (tq, d), (tk, dk)));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::HeadDivisibility { dim: d, heads });
    }
    let hd = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * hd, hd)?;
        let kh = g.slice_cols(k, h * hd, hd)?;
        let vh = g.slice_cols(v, h * hd, hd)?;
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let w = g.softmax(scores);
        outs.push(g.matmul(w, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}
