use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor2;
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 8] = b"LTGNCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Handle to a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    name: String,
    value: Tensor2,
    m: Tensor2,
    v: Tensor2,
}

/// Named parameters with Adam moments and a global step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
    step: u64,
}

/// One gradient tensor per parameter, shaped like the store.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(Vec<Tensor2>);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Uniform Xavier/Glorot initialization for a `fan_in x fan_out` weight.
pub fn xavier_uniform<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor2 {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor2::from_vec(fan_in, fan_out, data).expect("positive shape")
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor2) -> Result<ParamId> {
        if self.slots.iter().any(|s| s.name == name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        let (r, c) = value.shape();
        self.slots.push(Slot {
            name: name.to_string(),
            value,
            m: Tensor2::zeros(r, c),
            v: Tensor2::zeros(r, c),
        });
        Ok(ParamId(self.slots.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.slots[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.slots[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(
            self.slots
                .iter()
                .map(|s| Tensor2::zeros(s.value.rows(), s.value.cols()))
                .collect(),
        )
    }

    /// One bias-corrected Adam update. Any non-finite gradient aborts before anything
    /// is modified.
    pub fn adam_step(&mut self, grads: &Grads, cfg: &AdamConfig) -> Result<()> {
        if grads.0.len() != self.slots.len() {
            return Err(Error::contract(format!(
                "{} gradients for {} parameters",
                grads.0.len(),
                self.slots.len()
            )));
        }
        for (slot, g) in self.slots.iter().zip(&grads.0) {
            if g.shape() != slot.value.shape() {
                return Err(Error::contract(format!(
                    "gradient for {} has shape {:?}, parameter has {:?}",
                    slot.name,
                    g.shape(),
                    slot.value.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for parameter {}", slot.name)));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for (slot, g) in self.slots.iter_mut().zip(&grads.0) {
            let (value, m, v) = (slot.value.as_mut_slice(), slot.m.as_mut_slice(), slot.v.as_mut_slice());
            for i in 0..value.len() {
                let gi = g.as_slice()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Writes all parameters, moments and the step counter as little-endian `f64`,
    /// preceded by a free-form metadata string.
    pub fn save(&self, path: &Path, meta: &str) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        write_bytes(&mut w, meta.as_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.slots.len() as u32).to_le_bytes())?;
        for s in &self.slots {
            write_bytes(&mut w, s.name.as_bytes())?;
            w.write_all(&(s.value.rows() as u32).to_le_bytes())?;
            w.write_all(&(s.value.cols() as u32).to_le_bytes())?;
            for t in [&s.value, &s.m, &s.v] {
                for x in t.as_slice() {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(ParamStore, String)> {
        let file = File::open(path).map_err(|e| Error::file(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let meta = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|_| Error::format("checkpoint metadata is not UTF-8"))?;
        let mut step = [0u8; 8];
        read_exact(&mut r, &mut step)?;
        let mut store = ParamStore {
            slots: Vec::new(),
            step: u64::from_le_bytes(step),
        };
        let count = read_u32(&mut r)?;
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(&mut r)?)
                .map_err(|_| Error::format("parameter name is not UTF-8"))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut read_tensor = || -> Result<Tensor2> {
                let mut data = vec![0.0; rows * cols];
                let mut buf = [0u8; 8];
                for x in &mut data {
                    read_exact(&mut r, &mut buf)?;
                    *x = f64::from_le_bytes(buf);
                }
                Tensor2::from_vec(rows, cols, data).map_err(|_| Error::format(format!("bad shape for {name}")))
            };
            let value = read_tensor()?;
            let m = read_tensor()?;
            let v = read_tensor()?;
            if store.find(&name).is_some() {
                return Err(Error::format(format!("duplicate parameter {name:?} in checkpoint")));
            }
            store.slots.push(Slot { name, value, m, v });
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::format("trailing bytes after checkpoint body"));
        }
        Ok((store, meta))
    }
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.0[id.0]
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.0 {
            t.as_mut_slice().iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn zero(&mut self) {
        for t in &mut self.0 {
            t.fill(0.0);
        }
    }
}

fn write_bytes(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

pub(crate) fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format("file is truncated"),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    Ok(buf)
}
