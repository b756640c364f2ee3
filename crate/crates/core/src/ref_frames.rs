//! Dual reference frames: a wrist-centred frame for hand morphology and a
//! face-anchored, face-scaled frame for the wrist trajectory.

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::skel_data::{
    normalize_coords, SkeletonSequence, FACE_JOINTS, MOUTH_LEFT, MOUTH_RIGHT, NUM_HAND_JOINTS,
    WRIST,
};

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Paired streams fed to the two encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct DualFrameInput {
    /// `(T·21) × D`, time-major: row `t·21 + i` is hand joint `i` at frame `t`.
    pub shape_stream: Tensor,
    /// `T × D` wrist positions in the facial frame.
    pub traj_stream: Tensor,
    pub epsilon: f64,
}

impl DualFrameInput {
    pub fn num_frames(&self) -> usize {
        self.traj_stream.rows()
    }

    pub fn dims(&self) -> usize {
        self.traj_stream.cols()
    }

    /// Checks the structural invariants: matching sizes, a zero wrist row in
    /// every frame and finite values.
    pub fn validate(&self) -> Result<()> {
        let (t, d) = self.traj_stream.shape();
        if self.shape_stream.shape() != (t * NUM_HAND_JOINTS, d) {
            return Err(Error::shape(
                "dual input",
                self.shape_stream.shape(),
                (t * NUM_HAND_JOINTS, d),
            ));
        }
        if !self.shape_stream.all_finite() || !self.traj_stream.all_finite() {
            return Err(Error::InvalidSequence(
                "non-finite dual-frame stream".into(),
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "epsilon = {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Hand joints of frame `t` as a `21 × D` slice.
    pub fn frame_points(&self, t: usize) -> &[f64] {
        let n = NUM_HAND_JOINTS * self.dims();
        &self.shape_stream.data()[t * n..(t + 1) * n]
    }
}

/// `h_i(t) − h_w(t)` for every hand joint.
pub fn to_wrist_frame(seq: &SkeletonSequence) -> Result<Tensor> {
    seq.validate()?;
    let (t_len, d) = (seq.num_frames(), seq.dims());
    let mut out = Vec::with_capacity(t_len * NUM_HAND_JOINTS * d);
    for t in 0..t_len {
        let wrist = seq.point(t, WRIST);
        for i in 0..NUM_HAND_JOINTS {
            out.extend(seq.point(t, i).iter().zip(wrist).map(|(h, w)| h - w));
        }
    }
    Tensor::from_vec(t_len * NUM_HAND_JOINTS, d, out)
}

/// Facial centroid and mouth width at frame `t`.
pub fn face_anchor(seq: &SkeletonSequence, t: usize) -> (Vec<f64>, f64) {
    let d = seq.dims();
    let mut c = vec![0.0; d];
    for j in FACE_JOINTS {
        for (ck, x) in c.iter_mut().zip(seq.point(t, j)) {
            *ck += x;
        }
    }
    let n = FACE_JOINTS.len() as f64;
    c.iter_mut().for_each(|x| *x /= n);
    let s = seq
        .point(t, MOUTH_LEFT)
        .iter()
        .zip(seq.point(t, MOUTH_RIGHT))
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    (c, s)
}

/// `(h_w(t) − c_f(t)) / (s_f(t) + ε)` per frame. Frames without facial
/// landmarks reuse the most recent valid anchor.
pub fn to_facial_frame(seq: &SkeletonSequence, epsilon: f64) -> Result<Tensor> {
    seq.validate()?;
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!("epsilon = {epsilon}")));
    }
    if seq.face_missing(0) {
        return Err(Error::InvalidSequence(
            "facial landmarks missing in the first frame".into(),
        ));
    }
    let (t_len, d) = (seq.num_frames(), seq.dims());
    let mut out = Vec::with_capacity(t_len * d);
    let mut anchor = face_anchor(seq, 0);
    for t in 0..t_len {
        if !seq.face_missing(t) {
            anchor = face_anchor(seq, t);
        }
        let (c, s) = &anchor;
        let denom = s + epsilon;
        out.extend(
            seq.point(t, WRIST)
                .iter()
                .zip(c)
                .map(|(w, c)| (w - c) / denom),
        );
    }
    Tensor::from_vec(t_len, d, out)
}

pub fn build_dual_input(seq: &SkeletonSequence, epsilon: f64) -> Result<DualFrameInput> {
    let input = DualFrameInput {
        shape_stream: to_wrist_frame(seq)?,
        traj_stream: to_facial_frame(seq, epsilon)?,
        epsilon,
    };
    input.validate()?;
    Ok(input)
}

/// Single global frame: whole-sequence min/max normalisation, raw hand
/// joints as the shape stream and the normalised wrist as the trajectory.
pub fn build_global_input(seq: &SkeletonSequence, epsilon: f64) -> Result<DualFrameInput> {
    let norm = normalize_coords(seq)?;
    let (t_len, d) = (norm.num_frames(), norm.dims());
    let mut shape = Vec::with_capacity(t_len * NUM_HAND_JOINTS * d);
    let mut traj = Vec::with_capacity(t_len * d);
    for t in 0..t_len {
        shape.extend_from_slice(&norm.frame(t)[..NUM_HAND_JOINTS * d]);
        traj.extend_from_slice(norm.point(t, WRIST));
    }
    let input = DualFrameInput {
        shape_stream: Tensor::from_vec(t_len * NUM_HAND_JOINTS, d, shape)?,
        traj_stream: Tensor::from_vec(t_len, d, traj)?,
        epsilon,
    };
    input.validate()?;
    Ok(input)
}
