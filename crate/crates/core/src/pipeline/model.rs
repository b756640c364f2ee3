use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{AblationMode, TrainConfig};
use crate::error::{Error, Result};
use crate::ftde::Ftde;
use crate::fusion::{
    classify, cross_entropy, geo_loss, geo_ot_align, CrossAttention, FusionConfig, GeoProjection,
};
use crate::nn::{Binding, Graph, Linear, ParamStore, Value};
use crate::ref_frames::DualFrameInput;
use crate::tssn::Tssn;

/// The two streams, their fusion and the classifier, wired per ablation mode.
#[derive(Clone, Debug)]
pub struct Model {
    pub mode: AblationMode,
    pub tssn: Option<Tssn>,
    pub ftde: Option<Ftde>,
    pub cross: Option<CrossAttention>,
    pub geo: Option<GeoProjection>,
    pub head: Linear,
    pub fusion: FusionConfig,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `1 × C`
    pub logits: Value,
    /// `1 × d` pre-classifier feature.
    pub features: Value,
    /// `1 × T` transport plan, in the optimal-transport modes.
    pub gamma: Option<Value>,
    /// Shape-side and trajectory-side features fed to the projection heads.
    pub pair: Option<(Value, Value)>,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelLoss {
    pub total: Value,
    pub ce: Value,
    pub geo: Option<Value>,
}

impl Model {
    /// Registers parameters in `store`, initialised from `config.seed`.
    pub fn new(store: &mut ParamStore, config: &TrainConfig, dims: usize) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x1A17_5EED);
        let mode = config.mode;
        let tssn = match mode.uses_shape() {
            true => Some(Tssn::new(store, &mut rng, "tssn", dims, &config.tssn)?),
            false => None,
        };
        let ftde = match mode.uses_traj() {
            true => Some(Ftde::new(store, &mut rng, "ftde", dims, &config.ftde)?),
            false => None,
        };
        let (d_s, d_t) = (config.tssn.out_dim, config.ftde.out_dim());
        let heads = config.fusion.attn_heads;
        let cross = match mode.uses_cross_attention() {
            true => Some(CrossAttention::new(
                store, &mut rng, "cross", d_s, d_t, heads,
            )?),
            false => None,
        };
        let geo = match mode.is_dual() {
            true => Some(GeoProjection::new(
                store,
                &mut rng,
                "geo",
                d_s,
                d_t,
                config.fusion.proj_dim,
            )?),
            false => None,
        };
        let feat_dim = match (mode.uses_shape(), mode.uses_traj()) {
            (true, true) => d_s + d_t,
            (true, false) => d_s,
            _ => d_t,
        };
        let head = Linear::new(
            store,
            &mut rng,
            "head",
            feat_dim,
            config.fusion.num_classes,
            true,
        )?;
        Ok(Model {
            mode,
            tssn,
            ftde,
            cross,
            geo,
            head,
            fusion: config.fusion.clone(),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.head.in_dim
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Binding,
        input: &DualFrameInput,
    ) -> Result<ModelOutput> {
        let shape = match &self.tssn {
            Some(t) => Some(t.forward(g, p, &input.shape_stream)?),
            None => None,
        };
        let traj = match &self.ftde {
            Some(f) => Some(f.forward(g, p, &input.traj_stream)?.features),
            None => None,
        };
        let (features, gamma, pair) = match (shape, traj) {
            (Some(s), Some(t)) => {
                let (fs, ft, gamma) = match &self.cross {
                    Some(cross) => {
                        let (fs_attn, ft_attn) = cross.forward(g, p, s.seq, t)?;
                        if self.mode.uses_ot() {
                            let (gamma, aligned) = geo_ot_align(g, fs_attn, ft_attn, &self.fusion)?;
                            (fs_attn, aligned, Some(gamma))
                        } else {
                            (fs_attn, g.mean_rows(ft_attn), None)
                        }
                    }
                    None => (s.pooled, g.mean_rows(t), None),
                };
                (g.concat_cols(&[fs, ft])?, gamma, Some((fs, ft)))
            }
            (Some(s), None) => (s.pooled, None, None),
            (None, Some(t)) => (g.mean_rows(t), None, None),
            (None, None) => return Err(Error::Config("model has no stream".into())),
        };
        let logits = classify(g, p, &self.head, &[features])?;
        Ok(ModelOutput {
            logits,
            features,
            gamma,
            pair,
        })
    }

    /// Cross-entropy, plus the weighted geometric consistency term when both
    /// streams are present.
    pub fn loss(
        &self,
        g: &mut Graph,
        p: &Binding,
        out: &ModelOutput,
        label: usize,
    ) -> Result<ModelLoss> {
        let ce = cross_entropy(g, out.logits, label)?;
        match (&self.geo, out.pair) {
            (Some(geo), Some((fs, ft))) => {
                let (fm, fa) = geo.project(g, p, fs, ft)?;
                let geo = geo_loss(g, fm, fa)?;
                let weighted = g.scale(geo, self.fusion.alpha_loss);
                let total = g.add(ce, weighted)?;
                Ok(ModelLoss {
                    total,
                    ce,
                    geo: Some(geo),
                })
            }
            _ => Ok(ModelLoss {
                total: ce,
                ce,
                geo: None,
            }),
        }
    }

    /// Analytic forward-pass FLOPs for a `t`-frame sequence.
    pub fn flops(&self, t: usize) -> u64 {
        let mut total = self.head.flops(1);
        total += self.tssn.as_ref().map_or(0, |m| m.flops(t));
        total += self.ftde.as_ref().map_or(0, |m| m.flops(t));
        total += self.cross.as_ref().map_or(0, |m| m.flops(t));
        if self.mode.uses_ot() {
            let d = self.head.in_dim as u64 / 2;
            // feature cost, softmax and the weighted sum over frames
            total += t as u64 * (3 * d + 3) + 2 * t as u64 * d;
        }
        total
    }
}
