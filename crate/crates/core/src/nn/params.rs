//! Named parameters with AdamW state, deterministic initialisation and the
//! binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "DSLNET-CKPT v1\n"
//! u64 config length, config bytes (UTF-8 key=value text)
//! u64 parameter count
//! per parameter:
//!   u32 name length, name bytes
//!   u64 rows, u64 cols
//!   rows·cols f64 values, rows·cols f64 first moment, rows·cols f64 second moment
//!   u64 optimizer step count
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::graph::{Graph, Value};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8] = b"DSLNET-CKPT v1\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

/// Graph leaves for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding(Vec<Value>);

impl Binding {
    #[inline]
    pub fn get(&self, id: ParamId) -> Value {
        self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidParameter(format!(
                "duplicate parameter `{name}`"
            )));
        }
        let (r, c) = value.shape();
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.clone(),
            value,
            grad: None,
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
            step: 0,
        });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Inserts every parameter into `g` as a gradient-receiving leaf.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        Binding(
            self.params
                .iter()
                .map(|p| g.param(p.value.clone()))
                .collect(),
        )
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `scale · ∂/∂p` from a graph on which `backward` has run.
    /// Parameters that the graph never reached receive an explicit zero.
    pub fn accumulate_grads(&mut self, g: &Graph, binding: &Binding, scale: f64) {
        for (p, &v) in self.params.iter_mut().zip(&binding.0) {
            let (r, c) = p.value.shape();
            let acc = p.grad.get_or_insert_with(|| Tensor::zeros(r, c));
            if let Some(gr) = g.grad(v) {
                for (a, b) in acc.data_mut().iter_mut().zip(gr.data()) {
                    *a += scale * b;
                }
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, s: f64) {
        for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
            g.scale_assign(s);
        }
    }

    pub fn save(&self, path: &Path, config_text: &str) -> Result<()> {
        let bytes = self.to_bytes(config_text);
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(ParamStore, String)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self, config_text: &str) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(config_text.len() as u64).to_le_bytes());
        out.extend_from_slice(config_text.as_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(p.value.cols() as u64).to_le_bytes());
            for t in [&p.value, &p.m, &p.v] {
                for x in t.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            out.extend_from_slice(&p.step.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(ParamStore, String)> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing DSLNET-CKPT v1 header".into()));
        }
        let cfg_len = r.u64()? as usize;
        let config = String::from_utf8(r.take(cfg_len)?.to_vec())
            .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
        let count = r.u64()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Format("parameter shape overflows".into()))?;
            let value = Tensor::from_vec(rows, cols, r.f64s(n)?)?;
            let m = Tensor::from_vec(rows, cols, r.f64s(n)?)?;
            let v = Tensor::from_vec(rows, cols, r.f64s(n)?)?;
            let step = r.u64()?;
            let id = store.add(name, value)?;
            let p = store.get_mut(id);
            p.m = m;
            p.v = v;
            p.step = step;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok((store, config))
    }

    /// Copies values (not optimizer state) from `other` for every matching name.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .by_name(&p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{}`", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "`{}` has shape {:?} in checkpoint, expected {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
            p.m = src.m.clone();
            p.v = src.v.clone();
            p.step = src.step;
        }
        Ok(())
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

// ------------------------------------------------------------------ init

/// Xavier/Glorot uniform over `U(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

/// `n×n` orthogonal matrix from Gram–Schmidt on a Gaussian draw.
pub fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    loop {
        let mut cols: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let d: f64 = (0..n).map(|r| cols[i][r] * cols[j][r]).sum();
                for r in 0..n {
                    cols[i][r] -= d * cols[j][r];
                }
            }
            let nrm = cols[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            if nrm < 1e-8 {
                ok = false;
                break;
            }
            for x in &mut cols[i] {
                *x /= nrm;
            }
        }
        if ok {
            let mut t = Tensor::zeros(n, n);
            for (c, col) in cols.iter().enumerate() {
                for (r, &x) in col.iter().enumerate() {
                    t.set(r, c, x);
                }
            }
            return t;
        }
    }
}
