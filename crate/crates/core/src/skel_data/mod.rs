//! Skeleton sequences: the 26-keypoint data model, text file format,
//! coordinate normalisation, augmentation and a synthetic gesture generator.
//!
//! Joint layout: `0` wrist, `1..=20` the four joints of thumb, index, middle,
//! ring and pinky fingers, `21` nose and `22..=25` the four mouth corners
//! (left, right, upper, lower).

mod augment;
mod synth;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use augment::{apply_camera_sway, augment, drop_frames, time_stretch, AugmentSpec};
pub use synth::{synth_generate, SynthClassSpec, NUM_SHAPES, NUM_TRAJS};

pub const NUM_HAND_JOINTS: usize = 21;
pub const NUM_FACE_JOINTS: usize = 5;
pub const NUM_JOINTS: usize = NUM_HAND_JOINTS + NUM_FACE_JOINTS;
pub const WRIST: usize = 0;
pub const NOSE: usize = 21;
pub const MOUTH_LEFT: usize = 22;
pub const MOUTH_RIGHT: usize = 23;
pub const UPPER_LIP: usize = 24;
pub const LOWER_LIP: usize = 25;
pub const FACE_JOINTS: std::ops::Range<usize> = NUM_HAND_JOINTS..NUM_JOINTS;

pub const DEFAULT_FPS: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Finger {
    Thumb,
    Index,
    Middle,
    Ring,
    Pinky,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JointRole {
    Wrist,
    /// Joint `segment` (0 = base, 3 = tip) of a finger.
    Finger {
        finger: Finger,
        segment: u8,
    },
    Nose,
    MouthLeft,
    MouthRight,
    UpperLip,
    LowerLip,
}

/// Standard role list for the 26-joint layout.
pub fn joint_roles() -> Vec<JointRole> {
    use Finger::*;
    let mut roles = vec![JointRole::Wrist];
    for finger in [Thumb, Index, Middle, Ring, Pinky] {
        for segment in 0..4 {
            roles.push(JointRole::Finger { finger, segment });
        }
    }
    roles.extend([
        JointRole::Nose,
        JointRole::MouthLeft,
        JointRole::MouthRight,
        JointRole::UpperLip,
        JointRole::LowerLip,
    ]);
    roles
}

/// `T × 26 × D` keypoints, stored frame-major then joint then coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    coords: Vec<f64>,
    num_frames: usize,
    dims: usize,
    joint_roles: Vec<JointRole>,
    /// Frames whose facial landmarks were not detected; their face
    /// coordinates are placeholders.
    face_missing: Vec<bool>,
    pub fps: f64,
    pub class_id: Option<usize>,
}

impl SkeletonSequence {
    pub fn new(
        coords: Vec<f64>,
        num_frames: usize,
        dims: usize,
        class_id: Option<usize>,
    ) -> Result<Self> {
        let seq = SkeletonSequence {
            face_missing: vec![false; num_frames],
            coords,
            num_frames,
            dims,
            joint_roles: joint_roles(),
            fps: DEFAULT_FPS,
            class_id,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims != 2 && self.dims != 3 {
            return Err(Error::InvalidSequence(format!(
                "D = {} not in {{2, 3}}",
                self.dims
            )));
        }
        if self.num_frames < 2 {
            return Err(Error::InvalidSequence(format!(
                "T = {} < 2",
                self.num_frames
            )));
        }
        if self.coords.len() != self.num_frames * NUM_JOINTS * self.dims {
            return Err(Error::InvalidSequence(format!(
                "{} coordinates for T={} J={} D={}",
                self.coords.len(),
                self.num_frames,
                NUM_JOINTS,
                self.dims
            )));
        }
        if self.joint_roles.len() != NUM_JOINTS || self.face_missing.len() != self.num_frames {
            return Err(Error::InvalidSequence(
                "joint roles or face mask mis-sized".into(),
            ));
        }
        if let Some(i) = self.coords.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidSequence(format!(
                "non-finite coordinate at flat index {i}"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    #[inline]
    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn joint_roles(&self) -> &[JointRole] {
        &self.joint_roles
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    #[inline]
    pub fn point(&self, t: usize, j: usize) -> &[f64] {
        let i = (t * NUM_JOINTS + j) * self.dims;
        &self.coords[i..i + self.dims]
    }

    #[inline]
    pub fn point_mut(&mut self, t: usize, j: usize) -> &mut [f64] {
        let i = (t * NUM_JOINTS + j) * self.dims;
        &mut self.coords[i..i + self.dims]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = NUM_JOINTS * self.dims;
        &self.coords[t * n..(t + 1) * n]
    }

    pub fn face_missing(&self, t: usize) -> bool {
        self.face_missing[t]
    }

    pub fn set_face_missing(&mut self, t: usize, missing: bool) {
        self.face_missing[t] = missing;
    }

    /// Applies `f` to every point in place.
    pub fn map_points(&mut self, mut f: impl FnMut(usize, usize, &mut [f64])) {
        let d = self.dims;
        for (i, p) in self.coords.chunks_exact_mut(d).enumerate() {
            f(i / NUM_JOINTS, i % NUM_JOINTS, p);
        }
    }

    /// New sequence built from selected frames of this one (in the given order).
    pub fn select_frames(&self, frames: &[usize]) -> Result<Self> {
        let mut coords = Vec::with_capacity(frames.len() * NUM_JOINTS * self.dims);
        for &t in frames {
            coords.extend_from_slice(self.frame(t));
        }
        let mut out = SkeletonSequence::new(coords, frames.len(), self.dims, self.class_id)?;
        out.fps = self.fps;
        out.face_missing = frames.iter().map(|&t| self.face_missing[t]).collect();
        Ok(out)
    }

    pub(crate) fn with_coords(&self, coords: Vec<f64>, num_frames: usize) -> Result<Self> {
        let mut out = SkeletonSequence::new(coords, num_frames, self.dims, self.class_id)?;
        out.fps = self.fps;
        if num_frames == self.num_frames {
            out.face_missing = self.face_missing.clone();
        }
        Ok(out)
    }

    /// Text serialisation: a `SKELSEQ v1` header then one line per frame.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "SKELSEQ v1 T={} J={} D={} class={}\n",
            self.num_frames,
            NUM_JOINTS,
            self.dims,
            self.class_id.map_or(-1, |c| c as i64)
        );
        for t in 0..self.num_frames {
            let line: Vec<String> = self.frame(t).iter().map(|x| format!("{x:?}")).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty file".into()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("SKELSEQ") || parts.next() != Some("v1") {
            return Err(Error::Format(format!("bad header `{header}`")));
        }
        let mut field = |key: &str| -> Result<i64> {
            let tok = parts
                .next()
                .ok_or_else(|| Error::Format(format!("header lacks {key}")))?;
            tok.strip_prefix(key)
                .and_then(|v| v.strip_prefix('='))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| {
                    Error::Format(format!("bad header field `{tok}`, expected {key}=<int>"))
                })
        };
        let t = field("T")?;
        let j = field("J")?;
        let d = field("D")?;
        let class = field("class")?;
        if j != NUM_JOINTS as i64 {
            return Err(Error::Format(format!("J = {j}, expected {NUM_JOINTS}")));
        }
        if t < 2 || !(d == 2 || d == 3) || class < -1 {
            return Err(Error::Format(format!(
                "invalid header values T={t} D={d} class={class}"
            )));
        }
        let (t, d) = (t as usize, d as usize);
        let per_line = NUM_JOINTS * d;
        let mut coords = Vec::with_capacity(t * per_line);
        for (i, line) in lines.by_ref().take(t).enumerate() {
            let before = coords.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::Format(format!("frame {i}: bad number `{tok}`")))?;
                if !v.is_finite() {
                    return Err(Error::Format(format!("frame {i}: non-finite value")));
                }
                coords.push(v);
            }
            if coords.len() - before != per_line {
                return Err(Error::Format(format!(
                    "frame {i}: {} values, expected {per_line}",
                    coords.len() - before
                )));
            }
        }
        if coords.len() != t * per_line {
            return Err(Error::Format(format!("expected {t} frame lines")));
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(Error::Format("trailing data after frames".into()));
        }
        let class_id = (class >= 0).then_some(class as usize);
        SkeletonSequence::new(coords, t, d, class_id).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn load_sequence(path: &Path) -> Result<SkeletonSequence> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SkeletonSequence::from_text(&text)
}

pub fn save_sequence(seq: &SkeletonSequence, path: &Path) -> Result<()> {
    std::fs::write(path, seq.to_text()).map_err(|e| Error::io(path, e))
}

/// Reads a manifest of `relative/path<TAB>class_id` lines; paths resolve
/// against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<(PathBuf, usize)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (rel, class) = line
            .rsplit_once('\t')
            .ok_or_else(|| Error::Format(format!("manifest line {}: missing tab", i + 1)))?;
        let class = class
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("manifest line {}: bad class `{class}`", i + 1)))?;
        out.push((base.join(rel), class));
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[(String, usize)]) -> Result<()> {
    let mut s = String::new();
    for (rel, class) in entries {
        let _ = writeln!(s, "{rel}\t{class}");
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Per-sequence, per-dimension min/max mapping onto `[-1, 1]`.
/// Dimensions with zero extent map to 0.
pub fn normalize_coords(seq: &SkeletonSequence) -> Result<SkeletonSequence> {
    let d = seq.dims();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for p in seq.coords().chunks_exact(d) {
        for k in 0..d {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    if (0..d).all(|k| hi[k] - lo[k] == 0.0) {
        return Err(Error::DegenerateInput(
            "every coordinate dimension has zero extent".into(),
        ));
    }
    let coords = seq
        .coords()
        .chunks_exact(d)
        .flat_map(|p| {
            (0..d)
                .map(|k| {
                    let extent = hi[k] - lo[k];
                    if extent == 0.0 {
                        0.0
                    } else {
                        (2.0 * (p[k] - lo[k]) / extent - 1.0).clamp(-1.0, 1.0)
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();
    seq.with_coords(coords, seq.num_frames())
}

#[cfg(test)]
mod tests;
