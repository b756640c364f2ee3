//! Stream fusion: bidirectional cross-attention, entropic optimal-transport
//! alignment of the trajectory sequence to the global shape feature, the
//! linear classifier and the composite loss.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{cosine, Binding, Graph, Linear, MultiHeadAttention, ParamStore, Tensor, Value};

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub attn_heads: usize,
    pub epsilon_ot: f64,
    pub max_sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
    pub lambda_time: f64,
    pub lambda_feat: f64,
    pub proj_dim: usize,
    pub alpha_loss: f64,
    pub num_classes: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            attn_heads: 4,
            epsilon_ot: 0.1,
            max_sinkhorn_iters: 200,
            sinkhorn_tol: 1e-6,
            lambda_time: 0.1,
            lambda_feat: 1.0,
            proj_dim: 32,
            alpha_loss: 0.5,
            num_classes: 10,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |x: f64| x >= 0.0 && x.is_finite();
        if !nonneg(self.lambda_time)
            || !nonneg(self.lambda_feat)
            || self.lambda_time + self.lambda_feat <= 0.0
        {
            return Err(Error::InvalidParameter(format!(
                "need lambda_feat, lambda_time >= 0 with a positive sum, got {} and {}",
                self.lambda_feat, self.lambda_time
            )));
        }
        if !(self.epsilon_ot > 0.0) || !(self.sinkhorn_tol > 0.0) || self.max_sinkhorn_iters == 0 {
            return Err(Error::InvalidParameter(
                "epsilon_ot, sinkhorn_tol and max_sinkhorn_iters must be positive".into(),
            ));
        }
        if !nonneg(self.alpha_loss) {
            return Err(Error::InvalidParameter(format!(
                "alpha_loss = {}",
                self.alpha_loss
            )));
        }
        if self.proj_dim == 0 || self.num_classes < 2 || self.attn_heads == 0 {
            return Err(Error::InvalidParameter(
                "proj_dim, attn_heads >= 1 and num_classes >= 2 required".into(),
            ));
        }
        Ok(())
    }
}

/// Shape queries trajectory and trajectory queries shape.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub shape_from_traj: MultiHeadAttention,
    pub traj_from_shape: MultiHeadAttention,
}

impl CrossAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_s: usize,
        d_t: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(CrossAttention {
            shape_from_traj: MultiHeadAttention::new(
                store,
                rng,
                &format!("{name}.s2t"),
                d_s,
                d_t,
                d_s,
                d_s,
                heads,
            )?,
            traj_from_shape: MultiHeadAttention::new(
                store,
                rng,
                &format!("{name}.t2s"),
                d_t,
                d_s,
                d_t,
                d_t,
                heads,
            )?,
        })
    }

    /// Returns `(F_s_attn: 1 × d_s, F_t_attn: T × d_t)`; the enhanced shape
    /// sequence is averaged over time.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Binding,
        shape_seq: Value,
        traj_seq: Value,
    ) -> Result<(Value, Value)> {
        let (ts, tt) = (g.shape(shape_seq).0, g.shape(traj_seq).0);
        if ts != tt {
            return Err(Error::shape(
                "cross_attend",
                g.shape(shape_seq),
                g.shape(traj_seq),
            ));
        }
        let s = self.shape_from_traj.forward(g, p, shape_seq, traj_seq)?;
        let t = self.traj_from_shape.forward(g, p, traj_seq, shape_seq)?;
        Ok((g.mean_rows(s), t))
    }

    pub fn flops(&self, t: usize) -> u64 {
        self.shape_from_traj.flops(t, t) + self.traj_from_shape.flops(t, t)
    }
}

/// `((j/(T−1)) − 0.5)²` per frame; zero for a single frame.
pub fn temporal_prior(t_len: usize) -> Vec<f64> {
    if t_len < 2 {
        return vec![0.0; t_len];
    }
    (0..t_len)
        .map(|j| (j as f64 / (t_len - 1) as f64 - 0.5).powi(2))
        .collect()
}

/// Plain cost `λ_feat·(1 − cos(F_s_attn, F_t_attn(j))) + λ_time·prior_j`.
pub fn ot_cost(
    shape_feat: &[f64],
    traj_feats: &Tensor,
    lambda_feat: f64,
    lambda_time: f64,
) -> Result<Tensor> {
    let (t_len, d) = traj_feats.shape();
    if shape_feat.len() != d {
        return Err(Error::shape("ot_cost", (1, shape_feat.len()), (t_len, d)));
    }
    let prior = temporal_prior(t_len);
    let data = (0..t_len)
        .map(|j| {
            lambda_feat * (1.0 - cosine(shape_feat, traj_feats.row(j))) + lambda_time * prior[j]
        })
        .collect();
    Tensor::from_vec(1, t_len, data)
}

/// Differentiable counterpart of [`ot_cost`], returned as a `T × 1` column.
pub fn ot_cost_graph(
    g: &mut Graph,
    shape_feat: Value,
    traj_feats: Value,
    lambda_feat: f64,
    lambda_time: f64,
) -> Result<Value> {
    let t_len = g.shape(traj_feats).0;
    let cos = g.row_cosine(traj_feats, shape_feat)?;
    let sim = g.scale(cos, -lambda_feat);
    let sim = g.shift(sim, lambda_feat);
    if lambda_time == 0.0 {
        return Ok(sim);
    }
    let prior = Tensor::from_vec(
        t_len,
        1,
        temporal_prior(t_len)
            .into_iter()
            .map(|x| lambda_time * x)
            .collect(),
    )?;
    let prior = g.constant(prior);
    g.add(sim, prior)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    /// `n × m` coupling.
    pub gamma: Tensor,
    pub cost: Tensor,
    pub epsilon_ot: f64,
    pub iterations_used: usize,
    /// Sum of absolute source-marginal deviations at exit.
    pub marginal_residual: f64,
    pub converged: bool,
}

impl TransportPlan {
    /// Shannon entropy `−Σ γ log γ` (with `0 log 0 = 0`).
    pub fn entropy(&self) -> f64 {
        -self
            .gamma
            .data()
            .iter()
            .filter(|&&x| x > 0.0)
            .map(|&x| x * x.ln())
            .sum::<f64>()
    }

    pub fn transport_cost(&self) -> f64 {
        self.gamma
            .data()
            .iter()
            .zip(self.cost.data())
            .map(|(g, c)| g * c)
            .sum()
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Solves `H d = r` for the semi-dual Hessian
/// `H = (diag(P1) − P diag(1/b) Pᵀ)/ε`, whose null direction (constant
/// shifts) is removed by adding the all-ones outer product.
fn newton_direction(p: &Tensor, r: &[f64], b: &[f64], epsilon_ot: f64) -> Option<Vec<f64>> {
    let (n, m) = p.shape();
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..=i {
            let cross: f64 = (0..m).map(|j| p.get(i, j) * p.get(k, j) / b[j]).sum();
            let diag = if i == k {
                p.row(i).iter().sum::<f64>()
            } else {
                0.0
            };
            let v = (diag - cross) / epsilon_ot + 1.0 / n as f64;
            h[i * n + k] = v;
            h[k * n + i] = v;
        }
    }
    // Cholesky factorisation in place (lower triangle)
    for j in 0..n {
        let d = h[j * n + j] - (0..j).map(|k| h[j * n + k].powi(2)).sum::<f64>();
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        h[j * n + j] = d;
        for i in j + 1..n {
            let s = h[i * n + j] - (0..j).map(|k| h[i * n + k] * h[j * n + k]).sum::<f64>();
            h[i * n + j] = s / d;
        }
    }
    let mut x = r.to_vec();
    for i in 0..n {
        x[i] = (x[i] - (0..i).map(|k| h[i * n + k] * x[k]).sum::<f64>()) / h[i * n + i];
    }
    for i in (0..n).rev() {
        x[i] = (x[i] - (i + 1..n).map(|k| h[k * n + i] * x[k]).sum::<f64>()) / h[i * n + i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Entropic OT between uniform marginals.
///
/// A single source row has the closed form `γ = softmax(−cost/ε)` (only the
/// source mass is constrained). Larger problems use log-domain Sinkhorn
/// scaling until the source marginal residual drops below `tol`; a plan
/// that has not converged is still returned, flagged.
pub fn sinkhorn_align(
    cost: &Tensor,
    epsilon_ot: f64,
    max_iters: usize,
    tol: f64,
) -> Result<TransportPlan> {
    let (n, m) = cost.shape();
    let a = vec![1.0 / n as f64; n];
    let b = vec![1.0 / m as f64; m];
    if n == 1 {
        if !cost.all_finite() || !(epsilon_ot > 0.0) {
            return Err(Error::InvalidParameter(
                "sinkhorn needs finite costs and epsilon_ot > 0".into(),
            ));
        }
        let mut row: Vec<f64> = cost.data().iter().map(|c| -c / epsilon_ot).collect();
        crate::nn::softmax_in_place(&mut row);
        let residual = (row.iter().sum::<f64>() - 1.0).abs();
        return Ok(TransportPlan {
            gamma: Tensor::from_vec(1, m, row)?,
            cost: cost.clone(),
            epsilon_ot,
            iterations_used: 0,
            marginal_residual: residual,
            converged: true,
        });
    }
    sinkhorn(cost, &a, &b, epsilon_ot, max_iters, tol)
}

/// Balanced log-domain Sinkhorn with marginals `a` (rows) and `b` (columns).
///
/// Each scaling sweep is followed by a safeguarded Newton step on the row
/// potentials, which keeps convergence fast when `ε` is small against the
/// cost gaps.
pub fn sinkhorn(
    cost: &Tensor,
    a: &[f64],
    b: &[f64],
    epsilon_ot: f64,
    max_iters: usize,
    tol: f64,
) -> Result<TransportPlan> {
    let (n, m) = cost.shape();
    if a.len() != n || b.len() != m {
        return Err(Error::shape("sinkhorn", (n, m), (a.len(), b.len())));
    }
    if !cost.all_finite() || !(epsilon_ot > 0.0) || a.iter().chain(b).any(|&x| !(x > 0.0)) {
        return Err(Error::InvalidParameter(
            "sinkhorn needs finite costs, epsilon_ot > 0 and positive marginals".into(),
        ));
    }
    let (la, lb): (Vec<f64>, Vec<f64>) = (
        a.iter().map(|x| x.ln()).collect(),
        b.iter().map(|x| x.ln()).collect(),
    );
    let mut f = vec![0.0; n];
    let mut gp = vec![0.0; m];
    let plan = |f: &[f64], gp: &[f64]| {
        let mut p = Tensor::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                p.set(i, j, ((f[i] + gp[j] - cost.get(i, j)) / epsilon_ot).exp());
            }
        }
        p
    };
    let column_update = |f: &[f64], gp: &mut [f64]| {
        for j in 0..m {
            let lse = log_sum_exp((0..n).map(|i| (f[i] - cost.get(i, j)) / epsilon_ot));
            gp[j] = epsilon_ot * (lb[j] - lse);
        }
    };
    let row_gap = |p: &Tensor| -> Vec<f64> {
        (0..n)
            .map(|i| a[i] - p.row(i).iter().sum::<f64>())
            .collect()
    };
    let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>();
    let mut residual = f64::INFINITY;
    let mut iters = 0;
    while iters < max_iters {
        iters += 1;
        for i in 0..n {
            let lse = log_sum_exp((0..m).map(|j| (gp[j] - cost.get(i, j)) / epsilon_ot));
            f[i] = epsilon_ot * (la[i] - lse);
        }
        column_update(&f, &mut gp);

        // Newton step on the row potentials with columns kept exact.
        let p = plan(&f, &gp);
        let r = row_gap(&p);
        if let Some(step) = newton_direction(&p, &r, b, epsilon_ot) {
            let base = norm(&r);
            let mut t = 1.0;
            for _ in 0..30 {
                let trial: Vec<f64> = f.iter().zip(&step).map(|(x, d)| x + t * d).collect();
                let mut trial_g = gp.clone();
                column_update(&trial, &mut trial_g);
                if norm(&row_gap(&plan(&trial, &trial_g))) < base {
                    f = trial;
                    gp = trial_g;
                    break;
                }
                t *= 0.5;
            }
        }

        residual = row_gap(&plan(&f, &gp)).iter().map(|x| x.abs()).sum();
        if residual < tol {
            break;
        }
    }
    Ok(TransportPlan {
        gamma: plan(&f, &gp),
        cost: cost.clone(),
        epsilon_ot,
        iterations_used: iters,
        marginal_residual: residual,
        converged: residual < tol,
    })
}

/// Differentiable 1×T plan `softmax(−cost/ε)` from a `T × 1` cost column.
pub fn ot_plan_graph(g: &mut Graph, cost: Value, epsilon_ot: f64) -> Value {
    let row = g.transpose(cost);
    let logits = g.scale(row, -1.0 / epsilon_ot);
    g.softmax(logits)
}

/// `Σ_j γ_j F_t_attn(j)`: `(1 × T)·(T × d_t)`.
pub fn align_trajectory(g: &mut Graph, gamma: Value, traj_feats: Value) -> Result<Value> {
    g.matmul(gamma, traj_feats)
}

/// `(γ, F_t_aligned)` for a global shape feature and a trajectory sequence.
pub fn geo_ot_align(
    g: &mut Graph,
    shape_feat: Value,
    traj_feats: Value,
    config: &FusionConfig,
) -> Result<(Value, Value)> {
    let cost = ot_cost_graph(
        g,
        shape_feat,
        traj_feats,
        config.lambda_feat,
        config.lambda_time,
    )?;
    let gamma = ot_plan_graph(g, cost, config.epsilon_ot);
    let aligned = align_trajectory(g, gamma, traj_feats)?;
    Ok((gamma, aligned))
}

/// Linear head over the concatenated fused feature.
pub fn classify(g: &mut Graph, p: &Binding, head: &Linear, features: &[Value]) -> Result<Value> {
    let x = match features {
        [one] => *one,
        many => g.concat_cols(many)?,
    };
    head.forward(g, p, x)
}

/// Projection heads `f_m`, `f_a` for the geometric consistency term.
#[derive(Clone, Debug)]
pub struct GeoProjection {
    pub shape: Linear,
    pub traj: Linear,
}

impl GeoProjection {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_s: usize,
        d_t: usize,
        proj_dim: usize,
    ) -> Result<Self> {
        Ok(GeoProjection {
            shape: Linear::new(store, rng, &format!("{name}.fm"), d_s, proj_dim, true)?,
            traj: Linear::new(store, rng, &format!("{name}.fa"), d_t, proj_dim, true)?,
        })
    }

    pub fn project(
        &self,
        g: &mut Graph,
        p: &Binding,
        shape_feat: Value,
        traj_feat: Value,
    ) -> Result<(Value, Value)> {
        Ok((
            self.shape.forward(g, p, shape_feat)?,
            self.traj.forward(g, p, traj_feat)?,
        ))
    }
}

/// `−log softmax(logits)[label]` for a `1 × C` logit row.
pub fn cross_entropy(g: &mut Graph, logits: Value, label: usize) -> Result<Value> {
    let classes = g.shape(logits).1;
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let lp = g.log_softmax(logits);
    let picked = g.select(lp, 0, label)?;
    Ok(g.scale(picked, -1.0))
}

/// `1 − cos(f_m, f_a)`, in `[0, 2]`.
pub fn geo_loss(g: &mut Graph, f_m: Value, f_a: Value) -> Result<Value> {
    let cos = g.row_cosine(f_m, f_a)?;
    let neg = g.scale(cos, -1.0);
    Ok(g.shift(neg, 1.0))
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Value,
    pub ce: Value,
    pub geo: Value,
}

/// `CE + alpha_loss·(1 − cos(f_m, f_a))`.
pub fn loss_total(
    g: &mut Graph,
    logits: Value,
    label: usize,
    f_m: Value,
    f_a: Value,
    alpha_loss: f64,
) -> Result<LossParts> {
    let ce = cross_entropy(g, logits, label)?;
    let geo = geo_loss(g, f_m, f_a)?;
    let weighted = g.scale(geo, alpha_loss);
    let total = g.add(ce, weighted)?;
    Ok(LossParts { total, ce, geo })
}

#[cfg(test)]
mod tests;
