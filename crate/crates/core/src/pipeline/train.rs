use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::TrainConfig;
use super::data::{load_data, model_input, Dataset, Sample};
use super::model::{Model, ModelOutput};
use crate::error::{Error, Result};
use crate::nn::{adamw_step, cosine_lr, Graph, Mode, ParamStore, ScheduleSpec};
use crate::ref_frames::DualFrameInput;
use crate::skel_data::{augment, drop_frames};

const TRAIN_SALT: u64 = 0x7EA1_0000_0000_0001;
const EVAL_SALT: u64 = 0xE7A1_0000_0000_0002;

/// Percentage rounded to two decimals.
pub fn percent(correct: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    (10_000.0 * correct as f64 / total as f64).round() / 100.0
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy on the (augmented) training samples seen during the epoch.
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub mode: String,
    pub seed: u64,
    pub epochs: Vec<EpochStats>,
    pub test_accuracy: f64,
    pub dropout_rate: f64,
    pub num_test: usize,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub num_params: usize,
    pub flops_per_sample: u64,
    pub flops_frames: usize,
    /// Wall-clock time; only filled by benchmarking so that the report is
    /// otherwise reproducible byte for byte.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inference_ms_per_sample: Option<f64>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialise");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// A model with its parameters and the configuration that built it.
#[derive(Clone, Debug)]
pub struct Trained {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub model: Model,
}

impl Trained {
    /// Fresh, untrained model for `config`.
    pub fn init(config: &TrainConfig, dims: usize) -> Result<Trained> {
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, config, dims)?;
        Ok(Trained {
            config: config.clone(),
            store,
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path, &self.config.to_text())
    }

    pub fn load(path: &Path) -> Result<Trained> {
        let (saved, text) = ParamStore::load(path)?;
        let config = TrainConfig::from_text(&text)?;
        let dims = infer_dims(&saved)?;
        let mut trained = Trained::init(&config, dims)?;
        trained.store.load_values_from(&saved)?;
        Ok(trained)
    }

    pub fn forward(&self, g: &mut Graph, input: &DualFrameInput) -> Result<ModelOutput> {
        let p = self.store.bind(g);
        self.model.forward(g, &p, input)
    }

    /// Eval-mode prediction and the `1 × d` pre-classifier feature.
    pub fn predict(&self, input: &DualFrameInput) -> Result<(usize, Vec<f64>)> {
        let mut g = Graph::with_mode(Mode::Eval, 0);
        let out = self.forward(&mut g, input)?;
        let pred = g.value(out.logits).argmax_rows()[0];
        Ok((pred, g.value(out.features).data().to_vec()))
    }

    pub fn flops(&self, t: usize) -> u64 {
        self.model.flops(t)
    }
}

/// Coordinate dimensionality from the first layer that consumes raw points.
fn infer_dims(store: &ParamStore) -> Result<usize> {
    if let Some(p) = store.by_name("ftde.finsler.phi.hidden.w") {
        return Ok(p.value.rows() / 2);
    }
    if let Some(p) = store.by_name("tssn.block0.edge.w") {
        return Ok(p.value.rows() / 2);
    }
    Err(Error::Format("checkpoint has no input layer".into()))
}

fn dims_of(data: &Dataset) -> Result<usize> {
    data.samples
        .first()
        .map(|s| s.seq.dims())
        .ok_or_else(|| Error::Dataset("empty dataset".into()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

/// Eval-mode accuracy after dropping `⌊rate·T⌋` random frames per sequence.
/// The drop pattern is seeded by `seed` and the sample order.
pub fn evaluate(
    trained: &Trained,
    data: &Dataset,
    dropout_rate: f64,
    seed: u64,
) -> Result<Evaluation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_SALT);
    let classes = trained.config.num_classes();
    let mut confusion = vec![vec![0; classes]; classes];
    let mut predictions = Vec::with_capacity(data.len());
    let mut correct = 0;
    for s in &data.samples {
        let seq = drop_frames(&s.seq, dropout_rate, &mut rng)?;
        let input = model_input(&seq, trained.config.mode, trained.config.frame_epsilon)?;
        let (pred, _) = trained.predict(&input)?;
        if s.label >= classes {
            return Err(Error::LabelOutOfRange {
                label: s.label,
                classes,
            });
        }
        confusion[s.label][pred] += 1;
        correct += usize::from(pred == s.label);
        predictions.push(pred);
    }
    Ok(Evaluation {
        accuracy: percent(correct, data.len()),
        confusion,
        predictions,
    })
}

fn check_finite(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { epoch, step, loss })
    }
}

/// Trains on `train`, evaluates on `test`, returns the model and its report.
pub fn train_on(
    config: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<(Trained, MetricsReport)> {
    config.validate()?;
    if train.num_classes != config.num_classes() || test.num_classes != config.num_classes() {
        return Err(Error::Dataset(format!(
            "dataset has {} classes, config expects {}",
            train.num_classes,
            config.num_classes()
        )));
    }
    let dims = dims_of(train)?;
    let mut trained = Trained::init(config, dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ TRAIN_SALT);
    let eps = config.frame_epsilon;
    let clean: Vec<DualFrameInput> = match config.augment.enabled {
        true => Vec::new(),
        false => train
            .samples
            .iter()
            .map(|s| model_input(&s.seq, config.mode, eps))
            .collect::<Result<_>>()?,
    };
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let schedule = ScheduleSpec::new(
        config.lr_max,
        config.lr_min,
        (config.epochs * steps_per_epoch).max(1),
    )?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for batch in order.chunks(config.batch_size) {
            trained.store.zero_grads();
            for &i in batch {
                let Sample { seq, label } = &train.samples[i];
                let input = match config.augment.enabled {
                    true => model_input(
                        &augment(seq, &config.augment.spec(rng.random())?)?,
                        config.mode,
                        eps,
                    )?,
                    false => clean[i].clone(),
                };
                let mut g = Graph::with_mode(Mode::Train, rng.random());
                let p = trained.store.bind(&mut g);
                let out = trained.model.forward(&mut g, &p, &input)?;
                let loss = trained.model.loss(&mut g, &p, &out, *label)?;
                let value = g.value(loss.total).item();
                check_finite(value, epoch, step)?;
                loss_sum += value;
                correct += usize::from(g.value(out.logits).argmax_rows()[0] == *label);
                g.backward(loss.total)?;
                trained
                    .store
                    .accumulate_grads(&g, &p, 1.0 / batch.len() as f64);
            }
            let norm = trained.store.grad_norm();
            check_finite(norm, epoch, step)?;
            if norm > config.grad_clip {
                trained.store.scale_grads(config.grad_clip / norm);
            }
            adamw_step(
                &mut trained.store,
                cosine_lr(&schedule, step)?,
                &config.adamw,
            )?;
            step += 1;
        }
        epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: percent(correct, train.len()),
        });
    }
    let eval = evaluate(&trained, test, 0.0, config.seed)?;
    let report = MetricsReport::new(&trained, epochs, &eval, test, 0.0);
    Ok((trained, report))
}

impl MetricsReport {
    /// Report for an evaluation of `trained` on `test` at dropout `rate`.
    pub fn new(
        trained: &Trained,
        epochs: Vec<EpochStats>,
        eval: &Evaluation,
        test: &Dataset,
        rate: f64,
    ) -> MetricsReport {
        let frames = test.samples.first().map_or(0, |s| s.seq.num_frames());
        MetricsReport {
            mode: trained.config.mode.to_string(),
            seed: trained.config.seed,
            epochs,
            test_accuracy: eval.accuracy,
            dropout_rate: rate,
            num_test: test.len(),
            confusion: eval.confusion.clone(),
            num_params: trained.store.num_scalars(),
            flops_per_sample: trained.flops(frames),
            flops_frames: frames,
            inference_ms_per_sample: None,
        }
    }
}

/// Resolves the configured dataset, trains and evaluates.
pub fn train(config: &TrainConfig) -> Result<(Trained, MetricsReport)> {
    config.validate()?;
    let (train, test) = load_data(&config.data, config.seed)?;
    train_on(config, &train, &test)
}
