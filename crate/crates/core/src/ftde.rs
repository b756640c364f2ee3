//! Trajectory stream: finite-difference kinematics, a learnable Finsler
//! energy per frame, and a causal convolution + BiLSTM encoder whose output
//! is reweighted by the normalised energy.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    BiLstm, Binding, Conv1d, Graph, Linear, Padding, ParamId, ParamStore, Tensor, Value,
};

/// Directions of slower motion are reported as the zero vector.
pub const MIN_SPEED: f64 = 1e-9;
pub const DEFAULT_EPSILON_ENERGY: f64 = 1e-6;
pub const DEFAULT_PHI_HIDDEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Kinematics {
    /// `T × D` velocity per frame.
    pub velocity: Tensor,
    /// `T × 1` speed `‖v‖`.
    pub speed: Tensor,
    /// `T × D` unit direction, zero where the speed is below [`MIN_SPEED`].
    pub direction: Tensor,
}

/// Central differences in the interior, one-sided differences at both ends
/// (unit frame spacing).
pub fn velocity(traj: &Tensor) -> Result<Kinematics> {
    let (t_len, d) = traj.shape();
    if t_len < 2 {
        return Err(Error::TooShort(t_len));
    }
    let mut v = Tensor::zeros(t_len, d);
    for t in 0..t_len {
        let (lo, hi, span) = match t {
            0 => (0, 1, 1.0),
            t if t == t_len - 1 => (t - 1, t, 1.0),
            t => (t - 1, t + 1, 2.0),
        };
        for k in 0..d {
            v.set(t, k, (traj.get(hi, k) - traj.get(lo, k)) / span);
        }
    }
    let mut speed = Tensor::zeros(t_len, 1);
    let mut dir = Tensor::zeros(t_len, d);
    for t in 0..t_len {
        let s = v.row(t).iter().map(|x| x * x).sum::<f64>().sqrt();
        speed.set(t, 0, s);
        if s > MIN_SPEED {
            for k in 0..d {
                dir.set(t, k, v.get(t, k) / s);
            }
        }
    }
    Ok(Kinematics {
        velocity: v,
        speed,
        direction: dir,
    })
}

/// `φ_θ` (a tanh MLP with a softplus output), the exponent `α = softplus(α_raw)`
/// and the normalisation guard `ε`.
#[derive(Clone, Debug)]
pub struct FinslerParams {
    pub phi_hidden: Linear,
    pub phi_out: Linear,
    pub alpha_raw: ParamId,
    pub epsilon_energy: f64,
}

impl FinslerParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dims: usize,
        hidden: usize,
        epsilon_energy: f64,
    ) -> Result<Self> {
        if !(epsilon_energy > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "epsilon_energy = {epsilon_energy}"
            )));
        }
        let phi_hidden = Linear::new(
            store,
            rng,
            &format!("{name}.phi.hidden"),
            2 * dims,
            hidden,
            true,
        )?;
        let phi_out = Linear::new(store, rng, &format!("{name}.phi.out"), hidden, 1, true)?;
        // softplus(ln(e − 1)) = 1
        let alpha_raw = store.add(
            format!("{name}.alpha"),
            Tensor::scalar((1f64.exp() - 1.0).ln()),
        )?;
        Ok(FinslerParams {
            phi_hidden,
            phi_out,
            alpha_raw,
            epsilon_energy,
        })
    }

    pub fn alpha(&self, g: &mut Graph, p: &Binding) -> Value {
        g.softplus(p.get(self.alpha_raw))
    }

    /// Sets `φ ≡ 1` by zeroing the output weights and placing the output bias
    /// at `softplus⁻¹(1)`.
    pub fn freeze_phi_to_one(&self, store: &mut ParamStore) {
        let w = &mut store.get_mut(self.phi_out.w).value;
        *w = Tensor::zeros(w.rows(), w.cols());
        if let Some(b) = self.phi_out.b {
            store.get_mut(b).value = Tensor::scalar((1f64.exp() - 1.0).ln());
        }
    }

    pub fn flops(&self, t: usize) -> u64 {
        self.phi_hidden.flops(t) + self.phi_out.flops(t)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Energy {
    /// `T × 1` raw energy `e_t = φ(p_t, v̂_t)·‖ṗ_t‖^α`.
    pub raw: Value,
    /// `T × 1` normalised weights `E_t = e_t / (Σe + ε)`.
    pub weights: Value,
}

pub fn finsler_energy(
    g: &mut Graph,
    p: &Binding,
    fp: &FinslerParams,
    traj: &Tensor,
) -> Result<Energy> {
    let kin = velocity(traj)?;
    finsler_energy_from(g, p, fp, traj, &kin)
}

fn finsler_energy_from(
    g: &mut Graph,
    p: &Binding,
    fp: &FinslerParams,
    traj: &Tensor,
    kin: &Kinematics,
) -> Result<Energy> {
    let (t_len, d) = traj.shape();
    let mut phi_in = Tensor::zeros(t_len, 2 * d);
    for t in 0..t_len {
        phi_in.row_mut(t)[..d].copy_from_slice(traj.row(t));
        phi_in.row_mut(t)[d..].copy_from_slice(kin.direction.row(t));
    }
    let x = g.constant(phi_in);
    let h = fp.phi_hidden.forward(g, p, x)?;
    let h = g.tanh(h);
    let phi = fp.phi_out.forward(g, p, h)?;
    let phi = g.softplus(phi);
    let alpha = fp.alpha(g, p);
    let powed = g.pow_exp(&kin.speed, alpha)?;
    let raw = g.mul(phi, powed)?;
    let total = g.sum(raw);
    let denom = g.shift(total, fp.epsilon_energy);
    let weights = g.div(raw, denom)?;
    Ok(Energy { raw, weights })
}

/// Where the energy reweighting is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modulation {
    /// Scale the BiLSTM output (default).
    Lstm,
    /// Scale the causal convolution output before the BiLSTM.
    Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FtdeConfig {
    pub conv_channels: Vec<usize>,
    pub conv_kernel: usize,
    pub lstm_hidden: usize,
    pub phi_hidden: usize,
    pub epsilon_energy: f64,
    pub modulation: Modulation,
}

impl Default for FtdeConfig {
    fn default() -> Self {
        FtdeConfig {
            conv_channels: vec![32, 64],
            conv_kernel: 3,
            lstm_hidden: 32,
            phi_hidden: DEFAULT_PHI_HIDDEN,
            epsilon_energy: DEFAULT_EPSILON_ENERGY,
            modulation: Modulation::Lstm,
        }
    }
}

impl FtdeConfig {
    /// Feature width `d_t` (both LSTM directions).
    pub fn out_dim(&self) -> usize {
        2 * self.lstm_hidden
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_kernel == 0 || self.conv_channels.contains(&0) {
            return Err(Error::InvalidParameter(
                "ftde kernels and channels must be >= 1".into(),
            ));
        }
        if self.lstm_hidden == 0 || self.phi_hidden == 0 {
            return Err(Error::InvalidParameter(
                "ftde lstm_hidden and phi_hidden must be >= 1".into(),
            ));
        }
        if !(self.epsilon_energy > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "epsilon_energy = {}",
                self.epsilon_energy
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FtdeOutput {
    /// `T × d_t` modulated features.
    pub features: Value,
    pub energy: Energy,
    /// Causal convolution stack output, before any modulation.
    pub conv: Value,
}

#[derive(Clone, Debug)]
pub struct Ftde {
    pub config: FtdeConfig,
    pub convs: Vec<Conv1d>,
    pub lstm: BiLstm,
    pub finsler: FinslerParams,
    pub in_dim: usize,
}

impl Ftde {
    /// Encoder for `dims`-dimensional trajectories. The convolution stack
    /// sees `[p_t, p_t − p_{t−1}]` per frame.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dims: usize,
        config: &FtdeConfig,
    ) -> Result<Self> {
        config.validate()?;
        let in_dim = 2 * dims;
        let mut convs = Vec::with_capacity(config.conv_channels.len());
        let mut c_in = in_dim;
        for (i, &c_out) in config.conv_channels.iter().enumerate() {
            convs.push(Conv1d::new(
                store,
                rng,
                &format!("{name}.conv{i}"),
                c_in,
                c_out,
                config.conv_kernel,
                Padding::Causal,
            )?);
            c_in = c_out;
        }
        let lstm = BiLstm::new(
            store,
            rng,
            &format!("{name}.lstm"),
            c_in,
            config.lstm_hidden,
        )?;
        let finsler = FinslerParams::new(
            store,
            rng,
            &format!("{name}.finsler"),
            dims,
            config.phi_hidden,
            config.epsilon_energy,
        )?;
        Ok(Ftde {
            config: config.clone(),
            convs,
            lstm,
            finsler,
            in_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, traj: &Tensor) -> Result<FtdeOutput> {
        let kin = velocity(traj)?;
        let (t_len, d) = traj.shape();
        if 2 * d != self.in_dim {
            return Err(Error::shape("ftde", traj.shape(), (t_len, self.in_dim / 2)));
        }
        let energy = finsler_energy_from(g, p, &self.finsler, traj, &kin)?;
        // backward differences keep the convolution input causal
        let mut x = Tensor::zeros(t_len, 2 * d);
        for t in 0..t_len {
            x.row_mut(t)[..d].copy_from_slice(traj.row(t));
            if t > 0 {
                for k in 0..d {
                    x.set(t, d + k, traj.get(t, k) - traj.get(t - 1, k));
                }
            }
        }
        let mut h = g.constant(x);
        for conv in &self.convs {
            h = conv.forward(g, p, h, 1)?;
            h = g.relu(h);
        }
        let conv = h;
        let scale = g.scale(energy.weights, t_len as f64);
        let scale = g.shift(scale, 1.0);
        let features = match self.config.modulation {
            Modulation::Lstm => {
                let y = self.lstm.forward(g, p, conv)?;
                g.mul(y, scale)?
            }
            Modulation::Conv => {
                let m = g.mul(conv, scale)?;
                self.lstm.forward(g, p, m)?
            }
        };
        Ok(FtdeOutput {
            features,
            energy,
            conv,
        })
    }

    pub fn flops(&self, t: usize) -> u64 {
        self.convs.iter().map(|c| c.flops(t, 1)).sum::<u64>()
            + self.lstm.flops(t)
            + self.finsler.flops(t)
    }
}
