//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only arena of nodes. Each node stores its forward
//! value and the operation that produced it; since parents always precede
//! children in the arena, walking the node list backwards is a valid
//! topological order for the backward sweep. Gradients of shared
//! subexpressions accumulate additively.
//!
//! ```
//! use dslnet::nn::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let w = g.param(Tensor::from_vec(1, 2, vec![1.0, -3.0]).unwrap());
//! let sq = g.mul(w, w).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(w).unwrap().data(), &[2.0, -6.0]);
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Value(usize);

impl Value {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train mode enables dropout; eval mode makes every op deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How the right operand of a binary op is expanded to the left operand's shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

impl Broadcast {
    fn resolve(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Result<Self> {
        match rhs {
            r if r == lhs => Ok(Broadcast::Same),
            (1, 1) => Ok(Broadcast::Scalar),
            (1, c) if c == lhs.1 => Ok(Broadcast::Row),
            (r, 1) if r == lhs.0 => Ok(Broadcast::Col),
            _ => Err(Error::shape(op, lhs, rhs)),
        }
    }

    #[inline]
    fn index(self, r: usize, c: usize, cols: usize) -> usize {
        match self {
            Broadcast::Same => r * cols + c,
            Broadcast::Row => c,
            Broadcast::Col => r,
            Broadcast::Scalar => 0,
        }
    }

    /// Sum a full-shape gradient down to the broadcast operand's shape.
    fn reduce(self, g: &Tensor, target: (usize, usize)) -> Tensor {
        if self == Broadcast::Same {
            return g.clone();
        }
        let mut out = Tensor::zeros(target.0, target.1);
        let cols = g.cols();
        for r in 0..g.rows() {
            for c in 0..cols {
                out.data_mut()[self.index(r, c, cols)] += g.get(r, c);
            }
        }
        out
    }
}

/// Zero-padding placement for temporal convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    /// Output at `t` sees inputs `t-k+1 ..= t` only.
    Causal,
    /// Centred kernel; output length equals input length.
    Same,
}

impl Padding {
    pub fn left(self, kernel: usize) -> usize {
        match self {
            Padding::Causal => kernel - 1,
            Padding::Same => (kernel - 1) / 2,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Value, Value, Broadcast),
    Sub(Value, Value, Broadcast),
    Mul(Value, Value, Broadcast),
    Div(Value, Value, Broadcast),
    Scale(Value, f64),
    Shift(Value),
    MatMul(Value, Value),
    Transpose(Value),
    Tanh(Value),
    Sigmoid(Value),
    Relu(Value),
    Softplus(Value),
    Exp(Value),
    Ln(Value),
    Sqrt(Value),
    Softmax(Value),
    LogSoftmax(Value),
    LayerNorm { x: Value, inv_std: Vec<f64> },
    SliceCols { x: Value, start: usize },
    SliceRows { x: Value, start: usize },
    ConcatCols(Vec<Value>),
    ConcatRows(Vec<Value>),
    Sum(Value),
    MeanRows(Value),
    SumCols(Value),
    GroupMean { x: Value, group: usize },
    GatherMax { x: Value, argmax: Vec<usize> },
    Conv(ConvOp),
    Dropout { x: Value, mask: Vec<f64> },
    PowExp { base: Vec<f64>, exponent: Value },
    RowCosine { a: Value, b: Value },
    Select { x: Value, row: usize, col: usize },
}

#[derive(Debug)]
struct ConvOp {
    x: Value,
    w: Value,
    b: Option<Value>,
    groups: usize,
    kernel: usize,
    pad_left: usize,
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Sum(..) => "sum",
            Op::MeanRows(..) => "mean_rows",
            Op::SumCols(..) => "sum_cols",
            Op::GroupMean { .. } => "group_mean",
            Op::GatherMax { .. } => "gather_max",
            Op::Conv(..) => "conv1d",
            Op::Dropout { .. } => "dropout",
            Op::PowExp { .. } => "pow_exp",
            Op::RowCosine { .. } => "row_cosine",
            Op::Select { .. } => "select",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    mode: Mode,
    rng: ChaCha8Rng,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_mode(Mode::Eval, 0)
    }

    /// A graph whose dropout masks are drawn from `seed`.
    pub fn with_mode(mode: Mode, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Value {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Value(self.nodes.len() - 1)
    }

    fn rg(&self, v: Value) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Value {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Value {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Value) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Value) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn op_tag(&self, v: Value) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    // ---------------------------------------------------------------- binary

    fn binary(
        &mut self,
        op: &'static str,
        a: Value,
        b: Value,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Broadcast)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bc = Broadcast::resolve(op, sa, sb)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let mut out = Tensor::zeros(sa.0, sa.1);
        for r in 0..sa.0 {
            for c in 0..sa.1 {
                let i = r * sa.1 + c;
                out.data_mut()[i] = f(av.data()[i], bv[bc.index(r, c, sa.1)]);
            }
        }
        Ok((out, bc))
    }

    /// Orders commutative operands so that the broadcast one is on the right.
    fn commute(&self, a: Value, b: Value) -> (Value, Value) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 * sa.1 < sb.0 * sb.1 {
            (b, a)
        } else {
            (a, b)
        }
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let (a, b) = self.commute(a, b);
        let (out, bc) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b, bc), rg))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        let (out, bc) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b, bc), rg))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (a, b) = self.commute(a, b);
        let (out, bc) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b, bc), rg))
    }

    pub fn div(&mut self, a: Value, b: Value) -> Result<Value> {
        let (out, bc) = self.binary("div", a, b, |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Div(a, b, bc), rg))
    }

    pub fn scale(&mut self, a: Value, s: f64) -> Value {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Value, s: f64) -> Value {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(out, Op::Shift(a), rg)
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Value) -> Value {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    // ----------------------------------------------------------------- unary

    fn unary(&mut self, a: Value, op: Op, f: impl Fn(f64) -> f64) -> Value {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn tanh(&mut self, a: Value) -> Value {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Value) -> Value {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Value) -> Value {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn softplus(&mut self, a: Value) -> Value {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn exp(&mut self, a: Value) -> Value {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Value) -> Value {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Value) -> Value {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Value) -> Value {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Value) -> Value {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    /// Per-row standardisation to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Value, eps: f64) -> Value {
        let mut out = self.value(a).clone();
        let n = out.cols() as f64;
        let mut inv_std = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm { x: a, inv_std }, rg)
    }

    // ------------------------------------------------------------- structure

    pub fn slice_cols(&mut self, a: Value, start: usize, len: usize) -> Result<Value> {
        let (rows, cols) = self.shape(a);
        if start + len > cols {
            return Err(Error::shape("slice_cols", (rows, cols), (start, len)));
        }
        let src = self.value(a);
        let mut out = Tensor::zeros(rows, len);
        for r in 0..rows {
            out.row_mut(r)
                .copy_from_slice(&src.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols { x: a, start }, rg))
    }

    pub fn slice_rows(&mut self, a: Value, start: usize, len: usize) -> Result<Value> {
        let (rows, cols) = self.shape(a);
        if start + len > rows {
            return Err(Error::shape("slice_rows", (rows, cols), (start, len)));
        }
        let data = self.value(a).data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::from_vec(len, cols, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows { x: a, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Value]) -> Result<Value> {
        let rows = parts.first().map_or(0, |&p| self.shape(p).0);
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(Error::shape("concat_cols", (rows, cols), s));
            }
            cols += s.1;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let src = self.value(p);
            let w = src.cols();
            for r in 0..rows {
                out.row_mut(r)[off..off + w].copy_from_slice(src.row(r));
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Value]) -> Result<Value> {
        let cols = parts.first().map_or(0, |&p| self.shape(p).1);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.1 != cols {
                return Err(Error::shape("concat_rows", (rows, cols), s));
            }
            rows += s.0;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    // ------------------------------------------------------------- reduction

    /// Sum of all elements, as a 1×1 value.
    pub fn sum(&mut self, a: Value) -> Value {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    /// Mean over rows: `r×c → 1×c`.
    pub fn mean_rows(&mut self, a: Value) -> Value {
        let src = self.value(a);
        let (rows, cols) = src.shape();
        let mut out = Tensor::zeros(1, cols);
        for r in 0..rows {
            for (o, x) in out.data_mut().iter_mut().zip(src.row(r)) {
                *o += x;
            }
        }
        out.scale_assign(1.0 / rows as f64);
        let rg = self.rg(a);
        self.push(out, Op::MeanRows(a), rg)
    }

    /// Sum over columns: `r×c → r×1`.
    pub fn sum_cols(&mut self, a: Value) -> Value {
        let src = self.value(a);
        let data = (0..src.rows()).map(|r| src.row(r).iter().sum()).collect();
        let out = Tensor::from_vec(src.rows(), 1, data).expect("row sums");
        let rg = self.rg(a);
        self.push(out, Op::SumCols(a), rg)
    }

    /// Mean over consecutive blocks of `group` rows: `(n·group)×c → n×c`.
    pub fn group_mean(&mut self, a: Value, group: usize) -> Result<Value> {
        let (rows, cols) = self.shape(a);
        if group == 0 || rows % group != 0 {
            return Err(Error::shape("group_mean", (rows, cols), (group, 1)));
        }
        let n = rows / group;
        let src = self.value(a);
        let mut out = Tensor::zeros(n, cols);
        for r in 0..rows {
            let o = out.row_mut(r / group);
            for (ov, x) in o.iter_mut().zip(src.row(r)) {
                *ov += x;
            }
        }
        out.scale_assign(1.0 / group as f64);
        let rg = self.rg(a);
        Ok(self.push(out, Op::GroupMean { x: a, group }, rg))
    }

    /// Channel-wise max over a neighbour set: `out[i, c] = max_{j ∈ nbrs[i]} x[j, c]`.
    ///
    /// `neighbors` holds `k` source rows for each output row. Ties resolve to
    /// the first listed neighbour.
    pub fn gather_max(&mut self, a: Value, neighbors: &[usize], k: usize) -> Result<Value> {
        let (rows, cols) = self.shape(a);
        if k == 0 || neighbors.len() % k != 0 || neighbors.iter().any(|&j| j >= rows) {
            return Err(Error::shape(
                "gather_max",
                (rows, cols),
                (neighbors.len(), k),
            ));
        }
        let out_rows = neighbors.len() / k;
        let src = self.value(a);
        let mut out = Tensor::zeros(out_rows, cols);
        let mut argmax = vec![0usize; out_rows * cols];
        for i in 0..out_rows {
            let nb = &neighbors[i * k..(i + 1) * k];
            let orow = &mut out.data_mut()[i * cols..(i + 1) * cols];
            let arow = &mut argmax[i * cols..(i + 1) * cols];
            orow.copy_from_slice(src.row(nb[0]));
            arow.fill(nb[0]);
            for &j in &nb[1..] {
                for ((o, am), &x) in orow.iter_mut().zip(arow.iter_mut()).zip(src.row(j)) {
                    if x > *o {
                        *o = x;
                        *am = j;
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::GatherMax { x: a, argmax }, rg))
    }

    /// Temporal convolution over time-major rows.
    ///
    /// `x` is `(T·groups) × C_in` with row `t·groups + n`; every group `n` is
    /// convolved independently with shared weights `w: (kernel·C_in) × C_out`
    /// (tap-major). Output has the same number of rows as the input.
    pub fn conv1d(
        &mut self,
        x: Value,
        w: Value,
        b: Option<Value>,
        groups: usize,
        kernel: usize,
        padding: Padding,
    ) -> Result<Value> {
        let (rows, cin) = self.shape(x);
        let (wr, cout) = self.shape(w);
        if kernel == 0 || groups == 0 || rows % groups != 0 || wr != kernel * cin {
            return Err(Error::shape("conv1d", (rows, cin), (wr, cout)));
        }
        if let Some(b) = b {
            if self.shape(b) != (1, cout) {
                return Err(Error::shape("conv1d bias", (1, cout), self.shape(b)));
            }
        }
        let t_len = rows / groups;
        let pad_left = padding.left(kernel);
        let mut out = Tensor::zeros(rows, cout);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for tap in 0..kernel {
                let shift = tap as isize - pad_left as isize;
                let (t0, t1) = tap_range(t_len, shift);
                if t0 >= t1 {
                    continue;
                }
                let src_t0 = (t0 as isize + shift) as usize;
                let m = (t1 - t0) * groups;
                gemm_nn(
                    &xv[src_t0 * groups * cin..(src_t0 * groups + m) * cin],
                    &wv[tap * cin * cout..(tap + 1) * cin * cout],
                    &mut out.data_mut()[t0 * groups * cout..(t0 * groups + m) * cout],
                    m,
                    cin,
                    cout,
                );
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for r in 0..rows {
                    for (o, bb) in out.row_mut(r).iter_mut().zip(bv) {
                        *o += bb;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv(ConvOp {
                x,
                w,
                b,
                groups,
                kernel,
                pad_left,
            }),
            rg,
        ))
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, a: Value, p: f64) -> Value {
        if self.mode == Mode::Eval || p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mut out = self.value(a).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let rg = self.rg(a);
        self.push(out, Op::Dropout { x: a, mask }, rg)
    }

    /// Elementwise `base^exponent` for a constant nonnegative base and a
    /// learnable 1×1 exponent, with `0^e := 0`.
    pub fn pow_exp(&mut self, base: &Tensor, exponent: Value) -> Result<Value> {
        if self.shape(exponent) != (1, 1) {
            return Err(Error::shape("pow_exp", (1, 1), self.shape(exponent)));
        }
        let e = self.value(exponent).item();
        let out = base.map(|b| if b > 0.0 { (e * b.ln()).exp() } else { 0.0 });
        let rg = self.rg(exponent);
        Ok(self.push(
            out,
            Op::PowExp {
                base: base.data().to_vec(),
                exponent,
            },
            rg,
        ))
    }

    /// Cosine similarity between every row of `a` (`r×d`) and the single row
    /// `b` (`1×d`), giving `r×1`. A zero-norm operand yields 0.
    pub fn row_cosine(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.0 != 1 || sa.1 != sb.1 {
            return Err(Error::shape("row_cosine", sa, sb));
        }
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = norm(bv);
        let data = (0..sa.0)
            .map(|r| cosine_with_norms(av.row(r), bv, norm(av.row(r)), nb))
            .collect();
        let out = Tensor::from_vec(sa.0, 1, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::RowCosine { a, b }, rg))
    }

    /// Picks a single element as a 1×1 value.
    pub fn select(&mut self, a: Value, row: usize, col: usize) -> Result<Value> {
        let s = self.shape(a);
        if row >= s.0 || col >= s.1 {
            return Err(Error::shape("select", s, (row, col)));
        }
        let out = Tensor::scalar(self.value(a).get(row, col));
        let rg = self.rg(a);
        Ok(self.push(out, Op::Select { x: a, row, col }, rg))
    }

    // -------------------------------------------------------------- backward

    fn accumulate(&mut self, v: Value, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Clears any stored gradients so `backward` can be run again.
    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Propagates d`output`/d(node) to every node that requires gradients,
    /// seeding the output gradient with ones.
    pub fn backward(&mut self, output: Value) -> Result<()> {
        let (r, c) = self.shape(output);
        self.grads[output.0] = Some(Tensor::filled(r, c, 1.0));
        for id in (0..=output.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            let contributions = self.node_backward(id, &g);
            self.grads[id] = Some(g);
            for (v, t) in contributions {
                self.accumulate(v, t);
            }
        }
        Ok(())
    }

    fn node_backward(&self, id: usize, g: &Tensor) -> Vec<(Value, Tensor)> {
        let node = &self.nodes[id];
        let y = &node.value;
        let val = |v: Value| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                if self.rg(*a) {
                    out.push((*a, g.clone()));
                }
                if self.rg(*b) {
                    out.push((*b, bc.reduce(g, self.shape(*b))));
                }
            }
            Op::Sub(a, b, bc) => {
                if self.rg(*a) {
                    out.push((*a, g.clone()));
                }
                if self.rg(*b) {
                    out.push((*b, bc.reduce(&g.map(|x| -x), self.shape(*b))));
                }
            }
            Op::Mul(a, b, bc) => {
                let (av, bv) = (val(*a), val(*b));
                let cols = g.cols();
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for r in 0..g.rows() {
                        for c in 0..cols {
                            ga.data_mut()[r * cols + c] *= bv.data()[bc.index(r, c, cols)];
                        }
                    }
                    out.push((*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = g.clone();
                    for (x, a) in gb.data_mut().iter_mut().zip(av.data()) {
                        *x *= a;
                    }
                    out.push((*b, bc.reduce(&gb, self.shape(*b))));
                }
            }
            Op::Div(a, b, bc) => {
                let bv = val(*b);
                let cols = g.cols();
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for r in 0..g.rows() {
                        for c in 0..cols {
                            ga.data_mut()[r * cols + c] /= bv.data()[bc.index(r, c, cols)];
                        }
                    }
                    out.push((*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = g.clone();
                    for r in 0..g.rows() {
                        for c in 0..cols {
                            let i = r * cols + c;
                            gb.data_mut()[i] *= -y.data()[i] / bv.data()[bc.index(r, c, cols)];
                        }
                    }
                    out.push((*b, bc.reduce(&gb, self.shape(*b))));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.map(|x| x * s))),
            Op::Shift(a) => out.push((*a, g.clone())),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = av.shape();
                let n = bv.cols();
                if self.rg(*a) {
                    let mut ga = Tensor::zeros(m, k);
                    gemm_nt(g.data(), bv.data(), ga.data_mut(), m, n, k);
                    out.push((*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(k, n);
                    gemm_tn(av.data(), g.data(), gb.data_mut(), m, k, n);
                    out.push((*b, gb));
                }
            }
            Op::Transpose(a) => out.push((*a, g.transpose())),
            Op::Tanh(a) => out.push((*a, zip_map(g, y, |g, y| g * (1.0 - y * y)))),
            Op::Sigmoid(a) => out.push((*a, zip_map(g, y, |g, y| g * y * (1.0 - y)))),
            Op::Relu(a) => out.push((*a, zip_map(g, y, |g, y| if y > 0.0 { g } else { 0.0 }))),
            Op::Softplus(a) => out.push((*a, zip_map(g, val(*a), |g, x| g * sigmoid(x)))),
            Op::Exp(a) => out.push((*a, zip_map(g, y, |g, y| g * y))),
            Op::Ln(a) => out.push((*a, zip_map(g, val(*a), |g, x| g / x))),
            Op::Sqrt(a) => out.push((*a, zip_map(g, y, |g, y| g / (2.0 * y)))),
            Op::Softmax(a) => {
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                out.push((*a, ga));
            }
            Op::LogSoftmax(a) => {
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let gsum: f64 = gr.iter().sum();
                    for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = gv - yv.exp() * gsum;
                    }
                }
                out.push((*a, ga));
            }
            Op::LayerNorm { x, inv_std } => {
                let n = y.cols() as f64;
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let gm = gr.iter().sum::<f64>() / n;
                    let gym = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = inv_std[r] * (gv - gm - yv * gym);
                    }
                }
                out.push((*x, ga));
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.shape(*x);
                let mut ga = Tensor::zeros(rows, cols);
                let w = g.cols();
                for r in 0..rows {
                    ga.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                }
                out.push((*x, ga));
            }
            Op::SliceRows { x, start } => {
                let (rows, cols) = self.shape(*x);
                let mut ga = Tensor::zeros(rows, cols);
                ga.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                out.push((*x, ga));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, w) = self.shape(p);
                    if self.rg(p) {
                        let mut gp = Tensor::zeros(rows, w);
                        for r in 0..rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        out.push((p, gp));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    let n = rows * cols;
                    if self.rg(p) {
                        let gp = Tensor::from_vec(rows, cols, g.data()[off..off + n].to_vec())
                            .expect("concat_rows split");
                        out.push((p, gp));
                    }
                    off += n;
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                out.push((*a, Tensor::filled(r, c, g.item())));
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                let inv = 1.0 / rows as f64;
                for r in 0..rows {
                    for (o, gv) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *o = gv * inv;
                    }
                }
                out.push((*a, ga));
            }
            Op::SumCols(a) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    ga.row_mut(r).fill(g.data()[r]);
                }
                out.push((*a, ga));
            }
            Op::GroupMean { x, group } => {
                let (rows, cols) = self.shape(*x);
                let mut ga = Tensor::zeros(rows, cols);
                let inv = 1.0 / *group as f64;
                for r in 0..rows {
                    for (o, gv) in ga.row_mut(r).iter_mut().zip(g.row(r / group)) {
                        *o = gv * inv;
                    }
                }
                out.push((*x, ga));
            }
            Op::GatherMax { x, argmax } => {
                let (rows, cols) = self.shape(*x);
                let mut ga = Tensor::zeros(rows, cols);
                for (i, (&src, &gv)) in argmax.iter().zip(g.data()).enumerate() {
                    ga.data_mut()[src * cols + i % cols] += gv;
                }
                out.push((*x, ga));
            }
            Op::Conv(conv) => out.extend(self.conv_backward(conv, g)),
            Op::Dropout { x, mask } => {
                let mut ga = g.clone();
                for (o, m) in ga.data_mut().iter_mut().zip(mask) {
                    *o *= m;
                }
                out.push((*x, ga));
            }
            Op::PowExp { base, exponent } => {
                let d: f64 = base
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .filter(|((b, _), _)| **b > 0.0)
                    .map(|((b, yv), gv)| gv * yv * b.ln())
                    .sum();
                out.push((*exponent, Tensor::scalar(d)));
            }
            Op::RowCosine { a, b } => {
                let (av, bv) = (val(*a), val(*b).data());
                let (rows, d) = av.shape();
                let nb = norm(bv);
                let mut ga = Tensor::zeros(rows, d);
                let mut gb = Tensor::zeros(1, d);
                for r in 0..rows {
                    let ar = av.row(r);
                    let na = norm(ar);
                    if na == 0.0 || nb == 0.0 {
                        continue;
                    }
                    let cos = y.data()[r];
                    let gr = g.data()[r];
                    let inv = 1.0 / (na * nb);
                    for (i, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = gr * (bv[i] * inv - cos * ar[i] / (na * na));
                    }
                    for (i, o) in gb.data_mut().iter_mut().enumerate() {
                        *o += gr * (ar[i] * inv - cos * bv[i] / (nb * nb));
                    }
                }
                if self.rg(*a) {
                    out.push((*a, ga));
                }
                if self.rg(*b) {
                    out.push((*b, gb));
                }
            }
            Op::Select { x, row, col } => {
                let (rows, cols) = self.shape(*x);
                let mut ga = Tensor::zeros(rows, cols);
                ga.set(*row, *col, g.item());
                out.push((*x, ga));
            }
        }
        out
    }

    fn conv_backward(&self, conv: &ConvOp, g: &Tensor) -> Vec<(Value, Tensor)> {
        let xv = self.value(conv.x);
        let wv = self.value(conv.w);
        let (rows, cin) = xv.shape();
        let cout = wv.cols();
        let groups = conv.groups;
        let t_len = rows / groups;
        let need_x = self.rg(conv.x);
        let need_w = self.rg(conv.w);
        let mut gx = Tensor::zeros(rows, cin);
        let mut gw = Tensor::zeros(wv.rows(), cout);
        for tap in 0..conv.kernel {
            let shift = tap as isize - conv.pad_left as isize;
            let (t0, t1) = tap_range(t_len, shift);
            if t0 >= t1 {
                continue;
            }
            let src_t0 = (t0 as isize + shift) as usize;
            let m = (t1 - t0) * groups;
            let g_blk = &g.data()[t0 * groups * cout..(t0 * groups + m) * cout];
            let w_blk = &wv.data()[tap * cin * cout..(tap + 1) * cin * cout];
            if need_x {
                gemm_nt(
                    g_blk,
                    w_blk,
                    &mut gx.data_mut()[src_t0 * groups * cin..(src_t0 * groups + m) * cin],
                    m,
                    cout,
                    cin,
                );
            }
            if need_w {
                gemm_tn(
                    &xv.data()[src_t0 * groups * cin..(src_t0 * groups + m) * cin],
                    g_blk,
                    &mut gw.data_mut()[tap * cin * cout..(tap + 1) * cin * cout],
                    m,
                    cin,
                    cout,
                );
            }
        }
        let mut out = Vec::new();
        if need_x {
            out.push((conv.x, gx));
        }
        if need_w {
            out.push((conv.w, gw));
        }
        if let Some(b) = conv.b.filter(|&b| self.rg(b)) {
            let mut gb = Tensor::zeros(1, cout);
            for r in 0..rows {
                for (o, gv) in gb.data_mut().iter_mut().zip(g.row(r)) {
                    *o += gv;
                }
            }
            out.push((b, gb));
        }
        out
    }
}

/// Output time range `[t0, t1)` whose source `t + shift` lies inside `[0, len)`.
fn tap_range(len: usize, shift: isize) -> (usize, usize) {
    let t0 = (-shift).max(0) as usize;
    let t1 = (len as isize - shift).clamp(0, len as isize) as usize;
    (t0.min(len), t1)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine_with_norms(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Cosine similarity of two plain vectors, 0 when either has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    cosine_with_norms(a, b, norm(a), norm(b))
}
