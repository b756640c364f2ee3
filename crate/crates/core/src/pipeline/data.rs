use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{AblationMode, DataSource, SynthDataSpec};
use crate::error::{Error, Result};
use crate::ref_frames::{build_dual_input, build_global_input, DualFrameInput};
use crate::skel_data::{
    apply_camera_sway, load_manifest, load_sequence, save_sequence, synth_generate, write_manifest,
    SkeletonSequence, SynthClassSpec,
};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub seq: SkeletonSequence,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Writes one sequence file per sample plus a manifest at `dir/<name>.txt`.
    pub fn write(&self, dir: &Path, name: &str) -> Result<()> {
        let seq_dir = dir.join(name);
        fs::create_dir_all(&seq_dir).map_err(|e| Error::io(&seq_dir, e))?;
        let mut entries = Vec::with_capacity(self.len());
        for (i, s) in self.samples.iter().enumerate() {
            let rel = format!("{name}/{i:05}.skel");
            save_sequence(&s.seq, &dir.join(&rel))?;
            entries.push((rel, s.label));
        }
        write_manifest(&dir.join(format!("{name}.txt")), &entries)
    }
}

/// Train and test splits of the synthetic grid benchmark. Class
/// `shape·trajs + traj`; every sample gets its own generator seed and camera
/// sway drawn from `seed`.
pub fn synthetic_benchmark(spec: &SynthDataSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_DA7A);
    let mut split = |per_class: usize| -> Result<Dataset> {
        let mut samples = Vec::with_capacity(per_class * spec.num_classes());
        for _ in 0..per_class {
            for shape_id in 0..spec.shapes {
                for traj_id in 0..spec.trajs {
                    let class = SynthClassSpec {
                        shape_id,
                        traj_id,
                        duration_frames: spec.frames,
                    };
                    let label = class.class_id(spec.trajs);
                    let seq = synth_generate(&class, spec.noise, rng.random())?;
                    let mut seq = apply_camera_sway(&seq, spec.sway, rng.random())?;
                    seq.class_id = Some(label);
                    samples.push(Sample { seq, label });
                }
            }
        }
        Ok(Dataset {
            samples,
            num_classes: spec.num_classes(),
        })
    };
    let train = split(spec.train_per_class)?;
    let test = split(spec.test_per_class)?;
    Ok((train, test))
}

/// Loads every sequence listed in a manifest; any failure is a dataset error.
pub fn load_dataset(manifest: &Path, num_classes: usize) -> Result<Dataset> {
    let data_err = |e: Error| Error::Dataset(format!("{}: {e}", manifest.display()));
    let entries = load_manifest(manifest).map_err(data_err)?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::with_capacity(entries.len());
    for (path, label) in entries {
        if label >= num_classes {
            return Err(Error::Dataset(format!(
                "{}: label {label} >= {num_classes} classes",
                path.display()
            )));
        }
        let seq = load_sequence(&base.join(&path)).map_err(data_err)?;
        samples.push(Sample { seq, label });
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: empty manifest",
            manifest.display()
        )));
    }
    Ok(Dataset {
        samples,
        num_classes,
    })
}

pub fn load_data(source: &DataSource, seed: u64) -> Result<(Dataset, Dataset)> {
    match source {
        DataSource::Synthetic(spec) => synthetic_benchmark(spec, seed),
        DataSource::Manifest {
            train,
            test,
            num_classes,
        } => Ok((
            load_dataset(train, *num_classes)?,
            load_dataset(test, *num_classes)?,
        )),
    }
}

/// Model input for a sequence under `mode`.
pub fn model_input(
    seq: &SkeletonSequence,
    mode: AblationMode,
    epsilon: f64,
) -> Result<DualFrameInput> {
    match mode {
        AblationMode::GlobalNorm => build_global_input(seq, epsilon),
        _ => build_dual_input(seq, epsilon),
    }
}
