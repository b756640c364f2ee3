//! Morphology stream: per-frame k-NN edge convolutions with temporal
//! convolutions, multi-scale aggregation, joint pooling, a BiLSTM and
//! self-attention over time.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::params::xavier_uniform;
use crate::nn::{
    BiLstm, Binding, Conv1d, Graph, MultiHeadAttention, Padding, ParamId, ParamStore, Tensor, Value,
};
use crate::skel_data::NUM_HAND_JOINTS;

/// Neighbour lists for every frame: `neighbors[(t·n + i)·k + r]` is the
/// `r`-th nearest joint to joint `i` at frame `t`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnGraph {
    pub k: usize,
    pub num_frames: usize,
    pub num_points: usize,
    pub neighbors: Vec<usize>,
}

impl KnnGraph {
    pub fn frame(&self, t: usize) -> &[usize] {
        let n = self.num_points * self.k;
        &self.neighbors[t * n..(t + 1) * n]
    }

    /// Neighbour indices into the flattened `(T·n)`-row layout.
    pub fn global_indices(&self) -> Vec<usize> {
        let per_frame = self.num_points * self.k;
        self.neighbors
            .iter()
            .enumerate()
            .map(|(i, &j)| (i / per_frame) * self.num_points + j)
            .collect()
    }
}

/// Euclidean k nearest neighbours of every point (self excluded), nearest
/// first, ties broken by the lower index. `points` is `n × dims` row-major.
pub fn knn_graph(points: &[f64], dims: usize, k: usize) -> Result<Vec<usize>> {
    let n = points.len() / dims.max(1);
    if dims == 0 || points.len() != n * dims {
        return Err(Error::shape("knn_graph", (points.len(), 1), (n, dims)));
    }
    let max = n.saturating_sub(1);
    if k == 0 || k > max {
        return Err(Error::KOutOfRange { k, max });
    }
    let mut out = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let p = &points[i * dims..(i + 1) * dims];
        cand.clear();
        for j in (0..n).filter(|&j| j != i) {
            let q = &points[j * dims..(j + 1) * dims];
            let d2: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            cand.push((d2, j));
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.extend(cand[..k].iter().map(|&(_, j)| j));
    }
    Ok(out)
}

/// Per-frame graphs over a `(T·n) × D` time-major point stream.
pub fn build_knn_graphs(stream: &Tensor, num_points: usize, k: usize) -> Result<KnnGraph> {
    let (rows, dims) = stream.shape();
    if num_points == 0 || rows % num_points != 0 {
        return Err(Error::shape(
            "build_knn_graphs",
            (rows, dims),
            (num_points, dims),
        ));
    }
    let num_frames = rows / num_points;
    let per_frame = num_points * dims;
    let mut neighbors = Vec::with_capacity(rows * k);
    for t in 0..num_frames {
        neighbors.extend(knn_graph(
            &stream.data()[t * per_frame..(t + 1) * per_frame],
            dims,
            k,
        )?);
    }
    Ok(KnnGraph {
        k,
        num_frames,
        num_points,
        neighbors,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TssnConfig {
    pub k: usize,
    pub channels: Vec<usize>,
    pub temporal_kernel: usize,
    pub lstm_hidden: usize,
    pub attn_heads: usize,
    pub out_dim: usize,
    /// Layer normalisation of the pooled per-frame features.
    pub layer_norm: bool,
}

impl Default for TssnConfig {
    fn default() -> Self {
        TssnConfig {
            k: 4,
            channels: vec![32, 64, 128],
            temporal_kernel: 3,
            lstm_hidden: 64,
            attn_heads: 4,
            out_dim: 64,
            layer_norm: true,
        }
    }
}

impl TssnConfig {
    pub fn num_blocks(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k >= NUM_HAND_JOINTS {
            return Err(Error::KOutOfRange {
                k: self.k,
                max: NUM_HAND_JOINTS - 1,
            });
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::InvalidParameter(
                "tssn needs at least one block with nonzero channels".into(),
            ));
        }
        if self.temporal_kernel == 0 || self.lstm_hidden == 0 || self.out_dim == 0 {
            return Err(Error::InvalidParameter(
                "tssn kernel, lstm_hidden and out_dim must be >= 1".into(),
            ));
        }
        if self.attn_heads == 0 || self.out_dim % self.attn_heads != 0 {
            return Err(Error::HeadDivisibility {
                dim: self.out_dim,
                heads: self.attn_heads,
            });
        }
        Ok(())
    }
}

/// Edge convolution `max_j (W·[h_i, h_j − h_i] + b)` followed by ReLU and a
/// same-padded temporal convolution (ReLU) per joint.
#[derive(Clone, Debug)]
pub struct StgcBlock {
    /// `(2·C_in) × C_out`; the top half acts on `h_i`, the bottom on `h_j − h_i`.
    pub edge_w: ParamId,
    pub edge_b: ParamId,
    pub temporal: Conv1d,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl StgcBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    ) -> Result<Self> {
        let edge_w = store.add(
            format!("{name}.edge.w"),
            xavier_uniform(rng, 2 * in_ch, out_ch, 2 * in_ch, out_ch),
        )?;
        let edge_b = store.add(format!("{name}.edge.b"), Tensor::zeros(1, out_ch))?;
        let temporal = Conv1d::new(
            store,
            rng,
            &format!("{name}.tconv"),
            out_ch,
            out_ch,
            kernel,
            Padding::Same,
        )?;
        Ok(StgcBlock {
            edge_w,
            edge_b,
            temporal,
            in_ch,
            out_ch,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Binding,
        x: Value,
        graph: &KnnGraph,
        neighbors: &[usize],
    ) -> Result<Value> {
        let spatial = edge_conv(
            g,
            x,
            p.get(self.edge_w),
            p.get(self.edge_b),
            neighbors,
            graph.k,
        )?;
        let h = g.relu(spatial);
        let h = self.temporal.forward(g, p, h, graph.num_points)?;
        Ok(g.relu(h))
    }

    pub fn flops(&self, t: usize) -> u64 {
        let rows = (t * NUM_HAND_JOINTS) as u64;
        4 * rows * (self.in_ch * self.out_ch) as u64 + self.temporal.flops(t, NUM_HAND_JOINTS)
    }
}

/// `out_i = max_{j ∈ N(i)} (h_i·W_self + (h_j − h_i)·W_edge) + b`, evaluated as
/// `h_i·(W_self − W_edge) + max_j (h_j·W_edge) + b`.
pub fn edge_conv(
    g: &mut Graph,
    x: Value,
    w: Value,
    b: Value,
    neighbors: &[usize],
    k: usize,
) -> Result<Value> {
    let c_in = g.shape(x).1;
    if g.shape(w).0 != 2 * c_in {
        return Err(Error::shape("edge_conv", g.shape(x), g.shape(w)));
    }
    let w_self = g.slice_rows(w, 0, c_in)?;
    let w_edge = g.slice_rows(w, c_in, c_in)?;
    let own = g.matmul(x, w_self)?;
    let proj = g.matmul(x, w_edge)?;
    let nb = g.gather_max(proj, neighbors, k)?;
    let centre = g.sub(own, proj)?;
    let y = g.add(centre, nb)?;
    g.add(y, b)
}

/// Channel-wise concatenation of block outputs in block order.
pub fn aggregate_multiscale(g: &mut Graph, outputs: &[Value]) -> Result<Value> {
    match outputs {
        [] => Err(Error::InvalidParameter(
            "no block outputs to aggregate".into(),
        )),
        [one] => Ok(*one),
        many => g.concat_cols(many),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TssnOutput {
    /// `T × d_s`
    pub seq: Value,
    /// `1 × d_s` temporal mean of `seq`.
    pub pooled: Value,
}

#[derive(Clone, Debug)]
pub struct Tssn {
    pub config: TssnConfig,
    pub blocks: Vec<StgcBlock>,
    pub lstm: BiLstm,
    pub attn: MultiHeadAttention,
}

impl Tssn {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dims: usize,
        config: &TssnConfig,
    ) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.num_blocks());
        let mut c_in = in_dims;
        for (i, &c_out) in config.channels.iter().enumerate() {
            blocks.push(StgcBlock::new(
                store,
                rng,
                &format!("{name}.block{i}"),
                c_in,
                c_out,
                config.temporal_kernel,
            )?);
            c_in = c_out;
        }
        let total: usize = config.channels.iter().sum();
        let lstm = BiLstm::new(
            store,
            rng,
            &format!("{name}.lstm"),
            total,
            config.lstm_hidden,
        )?;
        let attn = MultiHeadAttention::new(
            store,
            rng,
            &format!("{name}.attn"),
            lstm.out_dim(),
            lstm.out_dim(),
            config.out_dim,
            config.out_dim,
            config.attn_heads,
        )?;
        Ok(Tssn {
            config: config.clone(),
            blocks,
            lstm,
            attn,
        })
    }

    /// Runs the stream on a `(T·21) × D` wrist-frame shape stream.
    pub fn forward(&self, g: &mut Graph, p: &Binding, shape_stream: &Tensor) -> Result<TssnOutput> {
        let graph = build_knn_graphs(shape_stream, NUM_HAND_JOINTS, self.config.k)?;
        self.forward_with_graph(g, p, shape_stream, &graph)
    }

    pub fn forward_with_graph(
        &self,
        g: &mut Graph,
        p: &Binding,
        shape_stream: &Tensor,
        graph: &KnnGraph,
    ) -> Result<TssnOutput> {
        let neighbors = graph.global_indices();
        let mut h = g.constant(shape_stream.clone());
        let mut outs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            h = block.forward(g, p, h, graph, &neighbors)?;
            outs.push(h);
        }
        let multi = aggregate_multiscale(g, &outs)?;
        let mut frames = g.group_mean(multi, NUM_HAND_JOINTS)?;
        if self.config.layer_norm {
            frames = g.layer_norm(frames, 1e-5);
        }
        let lstm = self.lstm.forward(g, p, frames)?;
        let seq = self.attn.forward(g, p, lstm, lstm)?;
        let pooled = g.mean_rows(seq);
        Ok(TssnOutput { seq, pooled })
    }

    pub fn flops(&self, t: usize) -> u64 {
        self.blocks.iter().map(|b| b.flops(t)).sum::<u64>()
            + self.lstm.flops(t)
            + self.attn.flops(t, t)
    }
}
