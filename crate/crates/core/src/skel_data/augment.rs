use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{SkeletonSequence, NUM_JOINTS};
use crate::error::{Error, Result};

/// Random rotation, scaling, coordinate noise and temporal stretching.
///
/// Every range contains its identity value, so the identity augmentation is
/// always expressible.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    pub rotation_max_rad: f64,
    pub scale_range: (f64, f64),
    pub noise_sigma: f64,
    pub time_stretch_range: (f64, f64),
    pub rng_seed: u64,
}

impl AugmentSpec {
    pub fn new(
        rotation_max_rad: f64,
        scale_range: (f64, f64),
        noise_sigma: f64,
        time_stretch_range: (f64, f64),
        rng_seed: u64,
    ) -> Result<Self> {
        let range_ok = |(lo, hi): (f64, f64)| 0.0 < lo && lo <= 1.0 && 1.0 <= hi && hi.is_finite();
        if !(rotation_max_rad >= 0.0) || !(noise_sigma >= 0.0) {
            return Err(Error::InvalidParameter(
                "rotation_max_rad and noise_sigma must be >= 0".into(),
            ));
        }
        if !range_ok(scale_range) || !range_ok(time_stretch_range) {
            return Err(Error::InvalidParameter(format!(
                "ranges must satisfy 0 < lo <= 1 <= hi: scale {scale_range:?}, stretch {time_stretch_range:?}"
            )));
        }
        Ok(AugmentSpec {
            rotation_max_rad,
            scale_range,
            noise_sigma,
            time_stretch_range,
            rng_seed,
        })
    }

    pub fn identity(rng_seed: u64) -> Self {
        AugmentSpec {
            rotation_max_rad: 0.0,
            scale_range: (1.0, 1.0),
            noise_sigma: 0.0,
            time_stretch_range: (1.0, 1.0),
            rng_seed,
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo < hi {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn centroid(seq: &SkeletonSequence) -> Vec<f64> {
    let d = seq.dims();
    let mut c = vec![0.0; d];
    for p in seq.coords().chunks_exact(d) {
        for k in 0..d {
            c[k] += p[k];
        }
    }
    let n = (seq.coords().len() / d) as f64;
    c.iter().map(|x| x / n).collect()
}

/// Rotation (in the x–y plane) and scaling about the sequence centroid,
/// additive Gaussian noise, then linear-interpolation resampling in time.
/// Components at their identity value are skipped, so the identity spec
/// returns the input bit-for-bit.
pub fn augment(seq: &SkeletonSequence, spec: &AugmentSpec) -> Result<SkeletonSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let angle = if spec.rotation_max_rad > 0.0 {
        rng.random_range(-spec.rotation_max_rad..=spec.rotation_max_rad)
    } else {
        0.0
    };
    let scale = draw(&mut rng, spec.scale_range);
    let stretch = draw(&mut rng, spec.time_stretch_range);

    let mut out = seq.clone();
    if angle != 0.0 || scale != 1.0 {
        let c = centroid(seq);
        let (sin, cos) = angle.sin_cos();
        out.map_points(|_, _, p| {
            let (x, y) = (p[0] - c[0], p[1] - c[1]);
            p[0] = c[0] + scale * (cos * x - sin * y);
            p[1] = c[1] + scale * (sin * x + cos * y);
            for k in 2..p.len() {
                p[k] = c[k] + scale * (p[k] - c[k]);
            }
        });
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        out.map_points(|_, _, p| {
            for x in p.iter_mut() {
                *x += normal.sample(&mut rng);
            }
        });
    }
    if stretch != 1.0 {
        out = time_stretch(&out, stretch)?;
    }
    out.validate()?;
    Ok(out)
}

/// Resamples to `round(T·factor)` frames (at least 2) by linear
/// interpolation; first and last frames are preserved exactly.
pub fn time_stretch(seq: &SkeletonSequence, factor: f64) -> Result<SkeletonSequence> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::InvalidParameter(format!("stretch factor {factor}")));
    }
    let t_in = seq.num_frames();
    let t_out = ((t_in as f64 * factor).round() as usize).max(2);
    let n = NUM_JOINTS * seq.dims();
    let mut coords = Vec::with_capacity(t_out * n);
    for t in 0..t_out {
        let pos = t as f64 * (t_in - 1) as f64 / (t_out - 1) as f64;
        let i0 = (pos.floor() as usize).min(t_in - 1);
        let frac = pos - i0 as f64;
        let a = seq.frame(i0);
        if frac == 0.0 || i0 + 1 >= t_in {
            coords.extend_from_slice(a);
        } else {
            let b = seq.frame(i0 + 1);
            coords.extend(a.iter().zip(b).map(|(x, y)| x + frac * (y - x)));
        }
    }
    seq.with_coords(coords, t_out)
}

/// Removes `⌊rate·T⌋` uniformly chosen frames and keeps the rest in order.
pub fn drop_frames(
    seq: &SkeletonSequence,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SkeletonSequence> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidParameter(format!(
            "dropout rate {rate} not in [0, 1)"
        )));
    }
    let t = seq.num_frames();
    let n_drop = (rate * t as f64).floor() as usize;
    if n_drop == 0 {
        return Ok(seq.clone());
    }
    let remaining = t - n_drop;
    if remaining < 2 {
        return Err(Error::TooFewFrames { remaining });
    }
    let mut dropped = vec![false; t];
    for i in sample(rng, t, n_drop) {
        dropped[i] = true;
    }
    let keep: Vec<usize> = (0..t).filter(|&i| !dropped[i]).collect();
    seq.select_frames(&keep)
}

/// Whole-scene per-frame translation following a smooth random sway
/// (one sinusoid per axis, amplitudes up to `amplitude`). Every joint,
/// including the face, moves together.
pub fn apply_camera_sway(
    seq: &SkeletonSequence,
    amplitude: f64,
    seed: u64,
) -> Result<SkeletonSequence> {
    if amplitude <= 0.0 {
        return Ok(seq.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = seq.dims();
    let axes: Vec<(f64, f64, f64)> = (0..d.min(2))
        .map(|_| {
            (
                rng.random_range(0.0..amplitude),
                rng.random_range(0.5..1.5),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let t_len = seq.num_frames();
    let mut out = seq.clone();
    out.map_points(|t, _, p| {
        let u = t as f64 / (t_len - 1) as f64;
        for (k, &(amp, freq, phase)) in axes.iter().enumerate() {
            p[k] += amp * (std::f64::consts::TAU * freq * u + phase).sin();
        }
    });
    Ok(out)
}
