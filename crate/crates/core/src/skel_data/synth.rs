//! Parametric gesture generator: a rigid hand pose carried along a wrist
//! curve laid out relative to a static face.
//!
//! Scene units: the mouth is `0.1·k` wide for a per-sequence camera scale
//! `k`. Hand geometry and wrist curves are expressed in mouth widths, so the
//! facial frame sees the same curve regardless of `k`.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    SkeletonSequence, LOWER_LIP, MOUTH_LEFT, MOUTH_RIGHT, NOSE, NUM_HAND_JOINTS, NUM_JOINTS,
    UPPER_LIP,
};
use crate::error::{Error, Result};

/// fist, open palm, point, pinch, V, Y
pub const NUM_SHAPES: usize = 6;
/// circle, horizontal sweep, vertical sweep, figure-eight, diagonal
pub const NUM_TRAJS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthClassSpec {
    pub shape_id: usize,
    pub traj_id: usize,
    pub duration_frames: usize,
}

impl SynthClassSpec {
    /// Class index on a `shapes × num_trajs` grid.
    pub fn class_id(&self, num_trajs: usize) -> usize {
        self.shape_id * num_trajs + self.traj_id
    }

    pub fn from_class_id(class_id: usize, num_trajs: usize, duration_frames: usize) -> Self {
        SynthClassSpec {
            shape_id: class_id / num_trajs,
            traj_id: class_id % num_trajs,
            duration_frames,
        }
    }
}

// Finger base offsets from the wrist, extension directions and segment
// lengths, in mouth widths. Order: thumb, index, middle, ring, pinky.
const BASES: [(f64, f64); 5] = [
    (-0.5, 0.5),
    (-0.45, 1.9),
    (-0.1, 2.0),
    (0.25, 1.9),
    (0.55, 1.65),
];
const DIRS: [(f64, f64); 5] = [
    (-0.8, 0.6),
    (-0.15, 1.0),
    (0.0, 1.0),
    (0.1, 1.0),
    (0.25, 1.0),
];
const SEGMENTS: [[f64; 3]; 5] = [
    [0.7, 0.55, 0.45],
    [0.9, 0.55, 0.45],
    [1.0, 0.6, 0.5],
    [0.95, 0.55, 0.45],
    [0.7, 0.45, 0.4],
];

/// Per-finger curl in degrees for each shape.
const CURLS: [[f64; 5]; NUM_SHAPES] = [
    [60.0, 75.0, 75.0, 75.0, 75.0], // fist
    [0.0, 0.0, 0.0, 0.0, 0.0],      // open palm
    [60.0, 0.0, 75.0, 75.0, 75.0],  // point
    [30.0, 45.0, 0.0, 0.0, 0.0],    // pinch
    [60.0, 0.0, 0.0, 75.0, 75.0],   // V
    [0.0, 75.0, 75.0, 75.0, 0.0],   // Y
];

/// Hand joint offsets from the wrist for a shape, in mouth widths.
fn hand_pose(shape_id: usize) -> Result<[(f64, f64); NUM_HAND_JOINTS]> {
    let curls = CURLS.get(shape_id).ok_or(Error::UnknownShapeId(shape_id))?;
    let mut pts = [(0.0, 0.0); NUM_HAND_JOINTS];
    for f in 0..5 {
        let (dx, dy) = DIRS[f];
        let n = (dx * dx + dy * dy).sqrt();
        let (dx, dy) = (dx / n, dy / n);
        // fold toward the palm centre
        let side = if f == 0 { -1.0 } else { 1.0 };
        let (px, py) = (side * -dy, side * dx);
        let theta = curls[f].to_radians();
        let mut p = BASES[f];
        pts[1 + 4 * f] = p;
        for (k, len) in SEGMENTS[f].iter().enumerate() {
            let a = (k + 1) as f64 * theta;
            let along = len * a.cos();
            let across = 0.25 * len * a.sin();
            p = (
                p.0 + along * dx + across * px,
                p.1 + along * dy + across * py,
            );
            pts[2 + 4 * f + k] = p;
        }
    }
    Ok(pts)
}

/// Wrist curve at phase `u ∈ [0, 1]` relative to the motion anchor, unit amplitude.
fn traj_point(traj_id: usize, u: f64, phase: f64) -> Result<(f64, f64)> {
    let a = TAU * u + phase;
    Ok(match traj_id {
        0 => (a.cos(), a.sin()),
        1 => (a.sin(), 0.0),
        2 => (0.0, a.sin()),
        3 => (a.sin(), 0.5 * (2.0 * a).sin()),
        4 => (a.sin() / 2f64.sqrt(), a.sin() / 2f64.sqrt()),
        other => return Err(Error::UnknownTrajId(other)),
    })
}

/// Facial landmark offsets from the mouth centre, in mouth widths.
const FACE: [(usize, (f64, f64)); 5] = [
    (NOSE, (0.0, 0.8)),
    (MOUTH_LEFT, (-0.5, 0.0)),
    (MOUTH_RIGHT, (0.5, 0.0)),
    (UPPER_LIP, (0.0, 0.15)),
    (LOWER_LIP, (0.0, -0.15)),
];

/// Anchor of the wrist motion relative to the facial centroid, mouth widths.
const MOTION_ANCHOR: (f64, f64) = (0.0, -3.0);
const BASE_AMPLITUDE: f64 = 1.5;

// Hand offsets and wrist positions sit on dyadic grids, so `wrist + offset`
// is exact and subtracting the wrist recovers the offset bit-for-bit.
const HAND_GRID: f64 = (1u64 << 30) as f64;
const WRIST_GRID: f64 = (1u64 << 20) as f64;

fn snap(x: f64, grid: f64) -> f64 {
    (x * grid).round() / grid
}

/// Deterministic 2-D gesture for `spec`.
///
/// All per-sequence nuisances (face placement, camera scale, hand tilt,
/// amplitude, phase) are drawn from `seed` before anything depends on the
/// class, so two specs sharing a seed share them.
pub fn synth_generate(
    spec: &SynthClassSpec,
    noise_sigma: f64,
    seed: u64,
) -> Result<SkeletonSequence> {
    if spec.duration_frames < 2 {
        return Err(Error::InvalidSequence(format!(
            "T = {} < 2",
            spec.duration_frames
        )));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "noise_sigma = {noise_sigma}"
        )));
    }
    let pose = hand_pose(spec.shape_id)?;
    traj_point(spec.traj_id, 0.0, 0.0)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mouth = (rng.random_range(-0.2..0.2), rng.random_range(0.2..0.4));
    let k = rng.random_range(0.8..1.25);
    let tilt: f64 = rng.random_range(-0.2..0.2);
    let amplitude = BASE_AMPLITUDE * rng.random_range(0.85..1.15);
    let phase = rng.random_range(0.0..TAU);
    let w = 0.1 * k;

    let face: Vec<(usize, (f64, f64))> = FACE
        .iter()
        .map(|&(j, (x, y))| (j, (mouth.0 + w * x, mouth.1 + w * y)))
        .collect();
    let centroid = face.iter().fold((0.0, 0.0), |acc, &(_, p)| {
        (acc.0 + p.0 / 5.0, acc.1 + p.1 / 5.0)
    });
    let (sin, cos) = tilt.sin_cos();
    let hand: Vec<(f64, f64)> = pose
        .iter()
        .map(|&(x, y)| {
            (
                snap(w * (cos * x - sin * y), HAND_GRID),
                snap(w * (sin * x + cos * y), HAND_GRID),
            )
        })
        .collect();

    let t_len = spec.duration_frames;
    let mut coords = vec![0.0; t_len * NUM_JOINTS * 2];
    for t in 0..t_len {
        let u = t as f64 / (t_len - 1) as f64;
        let (cx, cy) = traj_point(spec.traj_id, u, phase)?;
        let wrist = (
            snap(
                centroid.0 + w * (MOTION_ANCHOR.0 + amplitude * cx),
                WRIST_GRID,
            ),
            snap(
                centroid.1 + w * (MOTION_ANCHOR.1 + amplitude * cy),
                WRIST_GRID,
            ),
        );
        let base = t * NUM_JOINTS * 2;
        for (j, &(hx, hy)) in hand.iter().enumerate() {
            coords[base + 2 * j] = wrist.0 + hx;
            coords[base + 2 * j + 1] = wrist.1 + hy;
        }
        for &(j, (x, y)) in &face {
            coords[base + 2 * j] = x;
            coords[base + 2 * j + 1] = y;
        }
    }
    if noise_sigma > 0.0 {
        let normal =
            Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        for x in &mut coords {
            *x += normal.sample(&mut rng);
        }
    }
    SkeletonSequence::new(coords, t_len, 2, None)
}
