use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{AblationMode, DataSource, SynthDataSpec, TrainConfig};
use super::data::{load_data, model_input, Dataset, Sample};
use super::model::Model;
use super::train::{evaluate, train_on, Trained};
use crate::error::{Error, Result};
use crate::ftde::FtdeConfig;
use crate::fusion::FusionConfig;
use crate::nn::{grad_check, jitter_params, GradCheckReport, Graph, ParamStore};
use crate::skel_data::{synth_generate, SynthClassSpec};
use crate::tssn::TssnConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: AblationMode,
    /// One accuracy per seed, in seed order.
    pub accuracies: Vec<f64>,
}

impl AblationRow {
    pub fn median(&self) -> f64 {
        median(&self.accuracies)
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Trains every ablation mode on the same data for each configured seed.
pub fn ablate(config: &TrainConfig) -> Result<Vec<AblationRow>> {
    ablate_modes(config, &AblationMode::ALL)
}

pub fn ablate_modes(config: &TrainConfig, modes: &[AblationMode]) -> Result<Vec<AblationRow>> {
    if config.ablation_seeds.is_empty() {
        return Err(Error::Config("ablation.seeds is empty".into()));
    }
    let mut rows: Vec<AblationRow> = modes
        .iter()
        .map(|&mode| AblationRow {
            mode,
            accuracies: Vec::new(),
        })
        .collect();
    for &seed in &config.ablation_seeds {
        let (train, test) = load_data(&config.data, seed)?;
        for row in &mut rows {
            let cfg = TrainConfig {
                mode: row.mode,
                seed,
                ..config.clone()
            };
            let (_, report) = train_on(&cfg, &train, &test)?;
            row.accuracies.push(report.test_accuracy);
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow], seeds: &[u64]) -> String {
    let mut s = String::from("mode");
    for seed in seeds {
        let _ = write!(s, ",seed_{seed}");
    }
    s.push_str(",median\n");
    for row in rows {
        s.push_str(row.mode.as_str());
        for a in &row.accuracies {
            let _ = write!(s, ",{a:.2}");
        }
        let _ = writeln!(s, ",{:.2}", row.median());
    }
    s
}

/// Accuracy of a trained model at each frame-dropout rate.
pub fn robustness(
    trained: &Trained,
    test: &Dataset,
    rates: &[f64],
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    rates
        .iter()
        .map(|&r| Ok((r, evaluate(trained, test, r, seed)?.accuracy)))
        .collect()
}

pub fn robustness_csv(rows: &[(f64, f64)]) -> String {
    let mut s = String::from("dropout_rate,accuracy\n");
    for (r, a) in rows {
        let _ = writeln!(s, "{r:.2},{a:.2}");
    }
    s
}

/// Analytic forward-pass FLOPs of the model `config` describes, for `t` frames.
pub fn flop_estimate(config: &TrainConfig, t: usize) -> Result<u64> {
    let mut store = ParamStore::new();
    Ok(Model::new(&mut store, config, 2)?.flops(t))
}

/// Pre-classifier features of every sample, as CSV with header
/// `f0,…,f{d-1},label`.
pub fn features_csv(trained: &Trained, data: &Dataset) -> Result<String> {
    let d = trained.model.feature_dim();
    let mut s = (0..d)
        .map(|i| format!("f{i}"))
        .collect::<Vec<_>>()
        .join(",");
    s.push_str(",label\n");
    for Sample { seq, label } in &data.samples {
        let input = model_input(seq, trained.config.mode, trained.config.frame_epsilon)?;
        let (_, feat) = trained.predict(&input)?;
        for x in feat {
            let _ = write!(s, "{x:?},");
        }
        let _ = writeln!(s, "{label}");
    }
    Ok(s)
}

pub fn export_features(trained: &Trained, data: &Dataset, path: &Path) -> Result<()> {
    let csv = features_csv(trained, data)?;
    std::fs::write(path, csv).map_err(|e| Error::io(path, e))
}

/// Mean wall-clock milliseconds per eval-mode forward pass over `data`.
pub fn inference_ms(trained: &Trained, data: &Dataset) -> Result<f64> {
    let inputs: Vec<_> = data
        .samples
        .iter()
        .map(|s| model_input(&s.seq, trained.config.mode, trained.config.frame_epsilon))
        .collect::<Result<_>>()?;
    if inputs.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let start = Instant::now();
    for input in &inputs {
        trained.predict(input)?;
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / inputs.len() as f64)
}

/// Small full model used for gradient checks: every component enabled,
/// widths of a few units.
pub fn grad_check_config(num_classes: usize) -> TrainConfig {
    TrainConfig {
        data: DataSource::Synthetic(SynthDataSpec {
            shapes: num_classes,
            trajs: 1,
            frames: 8,
            ..SynthDataSpec::default()
        }),
        tssn: TssnConfig {
            k: 3,
            channels: vec![3, 4],
            temporal_kernel: 3,
            lstm_hidden: 3,
            attn_heads: 2,
            out_dim: 4,
            layer_norm: true,
        },
        ftde: FtdeConfig {
            conv_channels: vec![3, 4],
            conv_kernel: 2,
            lstm_hidden: 2,
            phi_hidden: 4,
            ..FtdeConfig::default()
        },
        fusion: FusionConfig {
            attn_heads: 2,
            proj_dim: 3,
            num_classes,
            ..FusionConfig::default()
        },
        ..TrainConfig::default()
    }
}

/// Finite-difference check of the full composite loss, averaged over a
/// two-sample batch of a two-class `T = 8` task.
pub fn grad_check_full_model(seed: u64, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let config = TrainConfig {
        seed,
        ..grad_check_config(2)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch: Vec<_> = (0..2)
        .map(|label| {
            let spec = SynthClassSpec {
                shape_id: label,
                traj_id: label,
                duration_frames: 8,
            };
            let seq = synth_generate(&spec, 0.01, rng.random())?;
            Ok((model_input(&seq, config.mode, config.frame_epsilon)?, label))
        })
        .collect::<Result<_>>()?;
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, &config, 2)?;
    jitter_params(&mut store, seed, 0.05);
    grad_check(&store, eps, tol, |g: &mut Graph, p| {
        let mut total = None;
        for (input, label) in &batch {
            let out = model.forward(g, p, input)?;
            let loss = model.loss(g, p, &out, *label)?.total;
            total = Some(match total {
                None => loss,
                Some(t) => g.add(t, loss)?,
            });
        }
        let total = total.expect("non-empty batch");
        Ok(g.scale(total, 0.5))
    })
}
