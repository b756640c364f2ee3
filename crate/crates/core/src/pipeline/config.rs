use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ftde::{FtdeConfig, Modulation};
use crate::fusion::FusionConfig;
use crate::nn::AdamWConfig;
use crate::ref_frames::DEFAULT_EPSILON;
use crate::skel_data::{AugmentSpec, NUM_SHAPES, NUM_TRAJS};
use crate::tssn::TssnConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationMode {
    DualGeoOt,
    DualCrossAttn,
    DualConcat,
    TssnOnly,
    FtdeOnly,
    GlobalNorm,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        AblationMode::DualGeoOt,
        AblationMode::DualCrossAttn,
        AblationMode::DualConcat,
        AblationMode::TssnOnly,
        AblationMode::FtdeOnly,
        AblationMode::GlobalNorm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::DualGeoOt => "dual_geo_ot",
            AblationMode::DualCrossAttn => "dual_cross_attn",
            AblationMode::DualConcat => "dual_concat",
            AblationMode::TssnOnly => "tssn_only",
            AblationMode::FtdeOnly => "ftde_only",
            AblationMode::GlobalNorm => "global_norm",
        }
    }

    pub fn uses_shape(self) -> bool {
        self != AblationMode::FtdeOnly
    }

    pub fn uses_traj(self) -> bool {
        self != AblationMode::TssnOnly
    }

    /// Both streams present, so the geometric consistency term applies.
    pub fn is_dual(self) -> bool {
        self.uses_shape() && self.uses_traj()
    }

    pub fn uses_cross_attention(self) -> bool {
        matches!(
            self,
            AblationMode::DualGeoOt | AblationMode::DualCrossAttn | AblationMode::GlobalNorm
        )
    }

    pub fn uses_ot(self) -> bool {
        matches!(self, AblationMode::DualGeoOt | AblationMode::GlobalNorm)
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

/// Synthetic benchmark: `shapes × trajs` classes on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataSpec {
    pub shapes: usize,
    pub trajs: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub frames: usize,
    pub noise: f64,
    /// Amplitude of the whole-scene camera sway, in scene units.
    pub sway: f64,
}

impl Default for SynthDataSpec {
    fn default() -> Self {
        SynthDataSpec {
            shapes: 5,
            trajs: 2,
            train_per_class: 40,
            test_per_class: 10,
            frames: 40,
            noise: 0.002,
            sway: 0.15,
        }
    }
}

impl SynthDataSpec {
    pub fn num_classes(&self) -> usize {
        self.shapes * self.trajs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SynthDataSpec),
    Manifest {
        train: PathBuf,
        test: PathBuf,
        num_classes: usize,
    },
}

impl DataSource {
    pub fn num_classes(&self) -> usize {
        match self {
            DataSource::Synthetic(s) => s.num_classes(),
            DataSource::Manifest { num_classes, .. } => *num_classes,
        }
    }
}

/// Training-time augmentation ranges. A zero spread disables a component.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub rotation: f64,
    pub scale: f64,
    pub noise: f64,
    pub stretch: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            rotation: 0.1,
            scale: 0.1,
            noise: 0.001,
            stretch: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn spec(&self, seed: u64) -> Result<AugmentSpec> {
        AugmentSpec::new(
            self.rotation,
            (1.0 - self.scale, 1.0 + self.scale),
            self.noise,
            (1.0 - self.stretch, 1.0 + self.stretch),
            seed,
        )
    }
}

/// Complete record of a run; serialised as `key = value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: AblationMode,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub adamw: AdamWConfig,
    pub grad_clip: f64,
    pub frame_epsilon: f64,
    pub data: DataSource,
    pub augment: AugmentConfig,
    pub tssn: TssnConfig,
    pub ftde: FtdeConfig,
    pub fusion: FusionConfig,
    /// Seeds used by the ablation experiment.
    pub ablation_seeds: Vec<u64>,
    pub robustness_rates: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let data = SynthDataSpec::default();
        TrainConfig {
            mode: AblationMode::DualGeoOt,
            seed: 0,
            epochs: 30,
            batch_size: 16,
            lr_max: 3e-3,
            lr_min: 1e-4,
            adamw: AdamWConfig::default(),
            grad_clip: 5.0,
            frame_epsilon: DEFAULT_EPSILON,
            fusion: FusionConfig {
                num_classes: data.num_classes(),
                ..FusionConfig::default()
            },
            data: DataSource::Synthetic(data),
            augment: AugmentConfig::default(),
            tssn: TssnConfig::default(),
            ftde: FtdeConfig::default(),
            ablation_seeds: vec![0, 1, 2],
            robustness_rates: vec![0.0, 0.05, 0.10, 0.15],
        }
    }
}

impl TrainConfig {
    /// Compact model sized for single-core runs of the synthetic benchmark.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 15,
            tssn: TssnConfig {
                k: 4,
                channels: vec![8, 16, 16],
                temporal_kernel: 3,
                lstm_hidden: 16,
                attn_heads: 2,
                out_dim: 32,
                layer_norm: true,
            },
            ftde: FtdeConfig {
                conv_channels: vec![16, 16],
                lstm_hidden: 16,
                ..FtdeConfig::default()
            },
            fusion: FusionConfig {
                attn_heads: 2,
                proj_dim: 16,
                ..TrainConfig::default().fusion
            },
            ..TrainConfig::default()
        }
    }

    pub fn num_classes(&self) -> usize {
        self.data.num_classes()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.tssn.validate().map_err(cfg)?;
        self.ftde.validate().map_err(cfg)?;
        self.fusion.validate().map_err(cfg)?;
        if self.fusion.num_classes != self.num_classes() {
            return Err(Error::Config(format!(
                "fusion.num_classes = {} but the dataset has {} classes",
                self.fusion.num_classes,
                self.num_classes()
            )));
        }
        if self.mode.uses_cross_attention() {
            for (name, d) in [
                ("tssn.out_dim", self.tssn.out_dim),
                ("ftde width", self.ftde.out_dim()),
            ] {
                if d % self.fusion.attn_heads != 0 {
                    return Err(Error::Config(format!(
                        "{name} = {d} is not divisible by fusion.heads = {}",
                        self.fusion.attn_heads
                    )));
                }
            }
        }
        if self.mode.uses_ot() && self.tssn.out_dim != self.ftde.out_dim() {
            return Err(Error::Config(format!(
                "transport cost compares features: tssn.out_dim = {} must equal 2·ftde.lstm_hidden = {}",
                self.tssn.out_dim,
                self.ftde.out_dim()
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr_max > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr_max {
            return Err(Error::Config(format!(
                "need 0 <= lr_min <= lr_max, lr_max > 0 (got {} / {})",
                self.lr_min, self.lr_max
            )));
        }
        if !(self.grad_clip > 0.0) || !(self.frame_epsilon > 0.0) {
            return Err(Error::Config(
                "grad_clip and frame.epsilon must be > 0".into(),
            ));
        }
        if self.augment.scale >= 1.0 || self.augment.stretch >= 1.0 {
            return Err(Error::Config(
                "augment.scale and augment.stretch must be < 1".into(),
            ));
        }
        self.augment.spec(0).map_err(cfg)?;
        if let DataSource::Synthetic(s) = &self.data {
            if s.shapes == 0 || s.shapes > NUM_SHAPES || s.trajs == 0 || s.trajs > NUM_TRAJS {
                return Err(Error::Config(format!(
                    "synth grid {}x{} exceeds the {NUM_SHAPES}x{NUM_TRAJS} generator",
                    s.shapes, s.trajs
                )));
            }
            if s.num_classes() < 2 || s.frames < 2 || s.train_per_class == 0 {
                return Err(Error::Config(
                    "synthetic data needs >= 2 classes, >= 2 frames and training samples".into(),
                ));
            }
        }
        if self
            .robustness_rates
            .iter()
            .any(|r| !(0.0..1.0).contains(r))
        {
            return Err(Error::Config("robustness rates must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let list = |xs: &[usize]| {
            xs.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        kv("mode", self.mode.to_string());
        kv("seed", self.seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr_max", format!("{:?}", self.lr_max));
        kv("lr_min", format!("{:?}", self.lr_min));
        kv("adamw.beta1", format!("{:?}", self.adamw.beta1));
        kv("adamw.beta2", format!("{:?}", self.adamw.beta2));
        kv("adamw.eps", format!("{:?}", self.adamw.eps));
        kv(
            "adamw.weight_decay",
            format!("{:?}", self.adamw.weight_decay),
        );
        kv("grad_clip", format!("{:?}", self.grad_clip));
        kv("frame.epsilon", format!("{:?}", self.frame_epsilon));
        match &self.data {
            DataSource::Synthetic(d) => {
                kv("data.source", "synthetic".into());
                kv("synth.shapes", d.shapes.to_string());
                kv("synth.trajs", d.trajs.to_string());
                kv("synth.train_per_class", d.train_per_class.to_string());
                kv("synth.test_per_class", d.test_per_class.to_string());
                kv("synth.frames", d.frames.to_string());
                kv("synth.noise", format!("{:?}", d.noise));
                kv("synth.sway", format!("{:?}", d.sway));
            }
            DataSource::Manifest {
                train,
                test,
                num_classes,
            } => {
                kv("data.source", "manifest".into());
                kv("data.train_manifest", train.display().to_string());
                kv("data.test_manifest", test.display().to_string());
                kv("data.num_classes", num_classes.to_string());
            }
        }
        kv("augment.enabled", self.augment.enabled.to_string());
        kv("augment.rotation", format!("{:?}", self.augment.rotation));
        kv("augment.scale", format!("{:?}", self.augment.scale));
        kv("augment.noise", format!("{:?}", self.augment.noise));
        kv("augment.stretch", format!("{:?}", self.augment.stretch));
        kv("tssn.k", self.tssn.k.to_string());
        kv("tssn.channels", list(&self.tssn.channels));
        kv("tssn.kernel", self.tssn.temporal_kernel.to_string());
        kv("tssn.lstm_hidden", self.tssn.lstm_hidden.to_string());
        kv("tssn.heads", self.tssn.attn_heads.to_string());
        kv("tssn.out_dim", self.tssn.out_dim.to_string());
        kv("tssn.layer_norm", self.tssn.layer_norm.to_string());
        kv("ftde.channels", list(&self.ftde.conv_channels));
        kv("ftde.kernel", self.ftde.conv_kernel.to_string());
        kv("ftde.lstm_hidden", self.ftde.lstm_hidden.to_string());
        kv("ftde.phi_hidden", self.ftde.phi_hidden.to_string());
        kv(
            "ftde.epsilon_energy",
            format!("{:?}", self.ftde.epsilon_energy),
        );
        kv(
            "ftde.modulation",
            match self.ftde.modulation {
                Modulation::Lstm => "lstm",
                Modulation::Conv => "conv",
            }
            .into(),
        );
        kv("fusion.heads", self.fusion.attn_heads.to_string());
        kv("fusion.epsilon_ot", format!("{:?}", self.fusion.epsilon_ot));
        kv(
            "fusion.sinkhorn_iters",
            self.fusion.max_sinkhorn_iters.to_string(),
        );
        kv(
            "fusion.sinkhorn_tol",
            format!("{:?}", self.fusion.sinkhorn_tol),
        );
        kv(
            "fusion.lambda_time",
            format!("{:?}", self.fusion.lambda_time),
        );
        kv(
            "fusion.lambda_feat",
            format!("{:?}", self.fusion.lambda_feat),
        );
        kv("fusion.proj_dim", self.fusion.proj_dim.to_string());
        kv("fusion.alpha_loss", format!("{:?}", self.fusion.alpha_loss));
        kv(
            "ablation.seeds",
            self.ablation_seeds
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv(
            "robustness.rates",
            self.robustness_rates
                .iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        s
    }

    /// Parses `key = value` lines on top of [`TrainConfig::default`]. Blank
    /// lines and `#` comments are ignored; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        TrainConfig::default().with_overrides(text)
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn with_overrides(mut self, text: &str) -> Result<Self> {
        let mut synth = match &self.data {
            DataSource::Synthetic(s) => s.clone(),
            DataSource::Manifest { .. } => SynthDataSpec::default(),
        };
        let (mut source, mut train_m, mut test_m, mut manifest_classes) = match &self.data {
            DataSource::Synthetic(_) => ("synthetic".to_string(), None, None, None),
            DataSource::Manifest {
                train,
                test,
                num_classes,
            } => (
                "manifest".to_string(),
                Some(train.clone()),
                Some(test.clone()),
                Some(*num_classes),
            ),
        };
        let mut classes_set = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || {
                Error::Config(format!(
                    "line {}: invalid value `{value}` for `{key}`",
                    n + 1
                ))
            };
            let num = |_: ()| {
                value.parse::<f64>().map_err(|_| bad()).and_then(|x| {
                    if x.is_finite() {
                        Ok(x)
                    } else {
                        Err(bad())
                    }
                })
            };
            let int = |_: ()| value.parse::<usize>().map_err(|_| bad());
            let boolean = |_: ()| value.parse::<bool>().map_err(|_| bad());
            let ints = |_: ()| -> Result<Vec<usize>> {
                value
                    .split(',')
                    .map(|x| x.trim().parse::<usize>().map_err(|_| bad()))
                    .collect()
            };
            match key {
                "mode" => self.mode = value.parse()?,
                "seed" => self.seed = value.parse().map_err(|_| bad())?,
                "epochs" => self.epochs = int(())?,
                "batch_size" => self.batch_size = int(())?,
                "lr_max" => self.lr_max = num(())?,
                "lr_min" => self.lr_min = num(())?,
                "adamw.beta1" => self.adamw.beta1 = num(())?,
                "adamw.beta2" => self.adamw.beta2 = num(())?,
                "adamw.eps" => self.adamw.eps = num(())?,
                "adamw.weight_decay" => self.adamw.weight_decay = num(())?,
                "grad_clip" => self.grad_clip = num(())?,
                "frame.epsilon" => self.frame_epsilon = num(())?,
                "data.source" => {
                    if value != "synthetic" && value != "manifest" {
                        return Err(bad());
                    }
                    source = value.to_string();
                }
                "data.train_manifest" => train_m = Some(PathBuf::from(value)),
                "data.test_manifest" => test_m = Some(PathBuf::from(value)),
                "data.num_classes" => manifest_classes = Some(int(())?),
                "synth.shapes" => synth.shapes = int(())?,
                "synth.trajs" => synth.trajs = int(())?,
                "synth.train_per_class" => synth.train_per_class = int(())?,
                "synth.test_per_class" => synth.test_per_class = int(())?,
                "synth.frames" => synth.frames = int(())?,
                "synth.noise" => synth.noise = num(())?,
                "synth.sway" => synth.sway = num(())?,
                "augment.enabled" => self.augment.enabled = boolean(())?,
                "augment.rotation" => self.augment.rotation = num(())?,
                "augment.scale" => self.augment.scale = num(())?,
                "augment.noise" => self.augment.noise = num(())?,
                "augment.stretch" => self.augment.stretch = num(())?,
                "tssn.k" => self.tssn.k = int(())?,
                "tssn.channels" => self.tssn.channels = ints(())?,
                "tssn.kernel" => self.tssn.temporal_kernel = int(())?,
                "tssn.lstm_hidden" => self.tssn.lstm_hidden = int(())?,
                "tssn.heads" => self.tssn.attn_heads = int(())?,
                "tssn.out_dim" => self.tssn.out_dim = int(())?,
                "tssn.layer_norm" => self.tssn.layer_norm = boolean(())?,
                "ftde.channels" => self.ftde.conv_channels = ints(())?,
                "ftde.kernel" => self.ftde.conv_kernel = int(())?,
                "ftde.lstm_hidden" => self.ftde.lstm_hidden = int(())?,
                "ftde.phi_hidden" => self.ftde.phi_hidden = int(())?,
                "ftde.epsilon_energy" => self.ftde.epsilon_energy = num(())?,
                "ftde.modulation" => {
                    self.ftde.modulation = match value {
                        "lstm" => Modulation::Lstm,
                        "conv" => Modulation::Conv,
                        _ => return Err(bad()),
                    }
                }
                "fusion.heads" => self.fusion.attn_heads = int(())?,
                "fusion.epsilon_ot" => self.fusion.epsilon_ot = num(())?,
                "fusion.sinkhorn_iters" => self.fusion.max_sinkhorn_iters = int(())?,
                "fusion.sinkhorn_tol" => self.fusion.sinkhorn_tol = num(())?,
                "fusion.lambda_time" => self.fusion.lambda_time = num(())?,
                "fusion.lambda_feat" => self.fusion.lambda_feat = num(())?,
                "fusion.proj_dim" => self.fusion.proj_dim = int(())?,
                "fusion.alpha_loss" => self.fusion.alpha_loss = num(())?,
                "fusion.num_classes" => {
                    self.fusion.num_classes = int(())?;
                    classes_set = true;
                }
                "ablation.seeds" => {
                    self.ablation_seeds = value
                        .split(',')
                        .map(|x| x.trim().parse::<u64>().map_err(|_| bad()))
                        .collect::<Result<_>>()?
                }
                "robustness.rates" => {
                    self.robustness_rates = value
                        .split(',')
                        .map(|x| x.trim().parse::<f64>().map_err(|_| bad()))
                        .collect::<Result<_>>()?
                }
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key `{other}`",
                        n + 1
                    )))
                }
            }
        }
        self.data = if source == "manifest" {
            let missing = |k: &str| Error::Config(format!("data.source = manifest requires {k}"));
            DataSource::Manifest {
                train: train_m.ok_or_else(|| missing("data.train_manifest"))?,
                test: test_m.ok_or_else(|| missing("data.test_manifest"))?,
                num_classes: manifest_classes.ok_or_else(|| missing("data.num_classes"))?,
            }
        } else {
            DataSource::Synthetic(synth)
        };
        if !classes_set {
            self.fusion.num_classes = self.num_classes();
        }
        self.validate()?;
        Ok(self)
    }
}
