//! `dslnet` command-line interface: synthetic data generation, training,
//! evaluation, ablation and robustness sweeps, benchmarking, gradient checks
//! and feature export.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dslnet::pipeline::{
    ablate, ablation_csv, evaluate, export_features, grad_check_full_model, inference_ms,
    load_data, robustness, robustness_csv, synthetic_benchmark, train, DataSource, MetricsReport,
    TrainConfig, Trained,
};
use dslnet::Error;

#[derive(Parser)]
#[command(
    name = "dslnet",
    version,
    about = "Dual-stream skeleton sign recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark as sequence files and manifests.
    GenData(Common),
    /// Train a model; writes metrics.json and checkpoint.ckpt.
    Train(Common),
    /// Evaluate a checkpoint on the test split; writes metrics.json.
    Eval(WithCheckpoint),
    /// Train every ablation mode over the configured seeds; writes ablation.csv.
    Ablate(Common),
    /// Accuracy under frame dropout; writes robustness.csv.
    Robustness(WithCheckpoint),
    /// FLOPs and per-sample inference time; writes metrics.json.
    Bench(WithCheckpoint),
    /// Finite-difference check of the full model's gradients.
    GradCheck(Common),
    /// Dump pre-classifier features as CSV; writes features.csv.
    ExportFeatures(WithCheckpoint),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Compact model for single-core runs.
    Desk,
    /// Full-width model.
    Full,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
}

#[derive(Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Trained checkpoint; `robustness` and `bench` train one when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Frame-dropout rate for `eval`.
    #[arg(long, default_value_t = 0.0)]
    dropout_rate: f64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::InvalidParameter(_)
        | Error::HeadDivisibility { .. }
        | Error::KOutOfRange { .. } => 2,
        Error::Dataset(_)
        | Error::Io { .. }
        | Error::Format(_)
        | Error::DegenerateInput(_)
        | Error::InvalidSequence(_)
        | Error::TooFewFrames { .. }
        | Error::TooShort(_)
        | Error::LabelOutOfRange { .. } => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

fn load_config(c: &Common) -> dslnet::Result<TrainConfig> {
    let mut config = match c.preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Full => TrainConfig::default(),
    };
    if let Some(path) = &c.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config = config.with_overrides(&text)?;
        if let DataSource::Manifest { train, test, .. } = &mut config.data {
            let base = path.parent().unwrap_or(Path::new("."));
            *train = base.join(&*train);
            *test = base.join(&*test);
        }
    }
    if let Some(seed) = c.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(c: &Common) -> dslnet::Result<&Path> {
    fs::create_dir_all(&c.out).map_err(|e| Error::Io {
        path: c.out.clone(),
        source: e,
    })?;
    Ok(&c.out)
}

fn write(path: &Path, text: &str) -> dslnet::Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Loads `--checkpoint`, or trains from the config when none is given.
fn trained_model(args: &WithCheckpoint) -> dslnet::Result<Trained> {
    match &args.checkpoint {
        Some(path) => {
            let mut t = Trained::load(path)?;
            if let Some(seed) = args.common.seed {
                t.config.seed = seed;
            }
            Ok(t)
        }
        None => {
            let config = load_config(&args.common)?;
            eprintln!("training {} (seed {})", config.mode, config.seed);
            Ok(train(&config)?.0)
        }
    }
}

fn run(cli: Cli) -> dslnet::Result<ExitCode> {
    match cli.command {
        Command::GenData(c) => {
            let config = load_config(&c)?;
            let DataSource::Synthetic(spec) = &config.data else {
                return Err(Error::Config(
                    "gen-data needs data.source = synthetic".into(),
                ));
            };
            let (train, test) = synthetic_benchmark(spec, config.seed)?;
            let out = out_dir(&c)?;
            train.write(out, "train")?;
            test.write(out, "test")?;
            println!(
                "wrote {} train and {} test sequences to {}",
                train.len(),
                test.len(),
                out.display()
            );
        }
        Command::Train(c) => {
            let config = load_config(&c)?;
            let (trained, report) = train(&config)?;
            let out = out_dir(&c)?;
            trained.save(&out.join("checkpoint.ckpt"))?;
            write(&out.join("config.txt"), &config.to_text())?;
            report.write(&out.join("metrics.json"))?;
            for e in &report.epochs {
                println!(
                    "epoch {:>3}  loss {:.4}  train acc {:.2}",
                    e.epoch, e.train_loss, e.train_accuracy
                );
            }
            println!("test accuracy {:.2}", report.test_accuracy);
        }
        Command::Eval(args) => {
            let path = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("eval needs --checkpoint".into()))?;
            let mut trained = Trained::load(path)?;
            if let Some(seed) = args.common.seed {
                trained.config.seed = seed;
            }
            let (_, test) = load_data(&trained.config.data, trained.config.seed)?;
            let eval = evaluate(&trained, &test, args.dropout_rate, trained.config.seed)?;
            let report = MetricsReport::new(&trained, Vec::new(), &eval, &test, args.dropout_rate);
            report.write(&out_dir(&args.common)?.join("metrics.json"))?;
            println!(
                "test accuracy {:.2} at dropout {:.2}",
                eval.accuracy, args.dropout_rate
            );
        }
        Command::Ablate(c) => {
            let config = load_config(&c)?;
            let rows = ablate(&config)?;
            let csv = ablation_csv(&rows, &config.ablation_seeds);
            write(&out_dir(&c)?.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Robustness(args) => {
            let trained = trained_model(&args)?;
            let (_, test) = load_data(&trained.config.data, trained.config.seed)?;
            let rows = robustness(
                &trained,
                &test,
                &trained.config.robustness_rates,
                trained.config.seed,
            )?;
            let csv = robustness_csv(&rows);
            write(&out_dir(&args.common)?.join("robustness.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Bench(args) => {
            let trained = trained_model(&args)?;
            let (_, test) = load_data(&trained.config.data, trained.config.seed)?;
            let eval = evaluate(&trained, &test, 0.0, trained.config.seed)?;
            let mut report = MetricsReport::new(&trained, Vec::new(), &eval, &test, 0.0);
            report.inference_ms_per_sample = Some(inference_ms(&trained, &test)?);
            report.write(&out_dir(&args.common)?.join("metrics.json"))?;
            println!(
                "{} FLOPs/sample at T={}, {:.3} ms/sample, {} parameters",
                report.flops_per_sample,
                report.flops_frames,
                report.inference_ms_per_sample.unwrap_or(f64::NAN),
                report.num_params
            );
        }
        Command::GradCheck(c) => {
            let seed = c.seed.unwrap_or(0);
            let report = grad_check_full_model(seed, 1e-5, 1e-4)?;
            for p in &report.params {
                println!("{:<40} {:.3e}", p.name, p.max_rel_err);
            }
            println!("max relative error {:.3e}", report.max_rel_err());
            if !report.passed() {
                eprintln!("gradient check failed");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::ExportFeatures(args) => {
            let path = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("export-features needs --checkpoint".into()))?;
            let trained = Trained::load(path)?;
            let (_, test) = load_data(&trained.config.data, trained.config.seed)?;
            let out = out_dir(&args.common)?.join("features.csv");
            export_features(&trained, &test, &out)?;
            println!("wrote {} rows to {}", test.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
