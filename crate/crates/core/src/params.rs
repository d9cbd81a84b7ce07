//! Named parameter tensors with Adam state, plus the binary checkpoint format.

use crate::error::{CheckpointError, TensorError};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

/// One trainable tensor with its optimizer state.
#[derive(Debug, Clone)]
pub struct ParamEntry<S: Scalar = f32> {
    pub tensor: Tensor<S>,
    pub m: Tensor<S>,
    pub v: Tensor<S>,
    pub step: u64,
}

/// Ordered map from parameter path to tensor + Adam moments.
///
/// A frozen store binds into graphs as constants: no gradients are
/// accumulated for its parameters and `adam_step` refuses to touch it.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar = f32> {
    entries: Vec<(String, ParamEntry<S>)>,
    index: HashMap<String, usize>,
    frozen: bool,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new(), frozen: false }
    }

    /// Registers a parameter; names must be unique.
    pub fn insert(&mut self, name: &str, tensor: Tensor<S>) {
        let entry = ParamEntry {
            m: Tensor::zeros(tensor.shape()),
            v: Tensor::zeros(tensor.shape()),
            step: 0,
            tensor,
        };
        self.insert_entry(name, entry);
    }

    /// Registers a parameter with existing optimizer state.
    pub fn insert_entry(&mut self, name: &str, entry: ParamEntry<S>) {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), entry));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.entries[i].1.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].1.tensor)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<S>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<S>)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, e)| e.tensor.numel()).sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Bitwise equality of parameter values (optimizer state ignored).
    pub fn params_equal(&self, other: &ParamStore<S>) -> bool {
        self.entries.len() == other.entries.len()
            && self.iter().zip(other.iter()).all(|((na, ea), (nb, eb))| {
                na == nb
                    && ea.tensor.shape() == eb.tensor.shape()
                    && ea
                        .tensor
                        .data()
                        .iter()
                        .zip(eb.tensor.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, e) in self.iter() {
            out.insert(name, e.tensor.cast());
        }
        out.frozen = self.frozen;
        out
    }
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct GradMap<S: Scalar = f32> {
    map: HashMap<String, Tensor<S>>,
}

impl<S: Scalar> GradMap<S> {
    pub fn new() -> Self {
        GradMap { map: HashMap::new() }
    }

    pub fn insert(&mut self, name: String, grad: Tensor<S>) {
        self.map.insert(name, grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    /// Sums `other` into `self`, inserting missing entries.
    pub fn accumulate(&mut self, other: &GradMap<S>) -> Result<(), TensorError> {
        for (name, g) in &other.map {
            match self.map.get_mut(name) {
                Some(acc) => acc.add_assign(g)?,
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, k: S) {
        for g in self.map.values_mut() {
            g.scale_assign(k);
        }
    }

    /// Largest |g| across all entries; `0` for an empty map.
    pub fn max_abs(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .fold(0.0f64, |acc, v| acc.max(v.as_f64().abs()))
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamHp {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHp {
    /// GAN-friendly defaults used for the generator and discriminator.
    pub fn gan() -> Self {
        AdamHp { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }

    /// Defaults used for classifier pretraining.
    pub fn classifier() -> Self {
        AdamHp { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update.
///
/// Parameters named in `grads` are updated and their step counters advance;
/// parameters absent from `grads` are left untouched. Unknown gradient names
/// or shape mismatches are errors.
pub fn adam_step<S: Scalar>(
    store: &mut ParamStore<S>,
    grads: &GradMap<S>,
    hp: AdamHp,
) -> Result<(), TensorError> {
    assert!(!store.frozen, "adam_step on a frozen store");
    for name in grads.names() {
        if !store.index.contains_key(name) {
            return Err(TensorError::UnknownParam(name.to_string()));
        }
    }
    let (b1, b2) = (hp.beta1, hp.beta2);
    for (name, entry) in store.entries.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if g.shape() != entry.tensor.shape() {
            return Err(TensorError::GradMismatch {
                name: name.clone(),
                detail: format!("param {:?} vs grad {:?}", entry.tensor.shape(), g.shape()),
            });
        }
        entry.step += 1;
        let t = entry.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let theta = entry.tensor.data_mut();
        let m = entry.m.data_mut();
        let v = entry.v.data_mut();
        for i in 0..theta.len() {
            let gi = g.data()[i].as_f64();
            let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
            let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
            m[i] = S::from_f64(mi);
            v[i] = S::from_f64(vi);
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let delta = hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
            theta[i] = S::from_f64(theta[i].as_f64() - delta);
        }
    }
    Ok(())
}

const MAGIC: &[u8; 8] = b"CFCKPT01";

#[derive(Debug, Serialize, Deserialize)]
struct TensorDesc {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    m_offset: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    v_offset: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    adam_step: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Descriptor {
    tensors: Vec<TensorDesc>,
    optimizer_state: bool,
    training_step: u64,
    frozen: bool,
    meta: serde_json::Value,
}

/// Non-tensor payload recovered from a checkpoint.
#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub optimizer_state: bool,
    pub training_step: u64,
    pub meta: serde_json::Value,
}

/// Writes `store` in the binary checkpoint format.
///
/// Layout: 8-byte magic, u64 little-endian descriptor length, JSON
/// descriptor, then the raw little-endian f32 payload at the offsets the
/// descriptor declares. The write goes through a temp file and a rename so a
/// crash never leaves a half-written checkpoint behind.
pub fn save_checkpoint(
    store: &ParamStore<f32>,
    meta: serde_json::Value,
    with_optimizer: bool,
    training_step: u64,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut descs = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for (name, e) in store.iter() {
        let nbytes = (e.tensor.numel() * 4) as u64;
        let mut desc = TensorDesc {
            name: name.to_string(),
            shape: e.tensor.shape().to_vec(),
            dtype: "f32".to_string(),
            offset,
            m_offset: None,
            v_offset: None,
            adam_step: None,
        };
        offset += nbytes;
        if with_optimizer {
            desc.m_offset = Some(offset);
            offset += nbytes;
            desc.v_offset = Some(offset);
            offset += nbytes;
            desc.adam_step = Some(e.step);
        }
        descs.push(desc);
    }
    let descriptor = Descriptor {
        tensors: descs,
        optimizer_state: with_optimizer,
        training_step,
        frozen: store.is_frozen(),
        meta,
    };
    let desc_json = serde_json::to_vec(&descriptor)?;

    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&(desc_json.len() as u64).to_le_bytes())?;
        f.write_all(&desc_json)?;
        for (_, e) in store.iter() {
            write_f32s(&mut f, e.tensor.data())?;
            if with_optimizer {
                write_f32s(&mut f, e.m.data())?;
                write_f32s(&mut f, e.v.data())?;
            }
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint back; the inverse of [`save_checkpoint`], bit-exact.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore<f32>, CheckpointMeta), CheckpointError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let desc_len = u64::from_le_bytes(len_bytes) as usize;
    let mut desc_json = vec![0u8; desc_len];
    f.read_exact(&mut desc_json)?;
    let descriptor: Descriptor = serde_json::from_slice(&desc_json)?;

    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;

    let mut store = ParamStore::new();
    for d in &descriptor.tensors {
        if d.dtype != "f32" {
            return Err(CheckpointError::Corrupt(format!("unsupported dtype {}", d.dtype)));
        }
        let numel: usize = d.shape.iter().product();
        let tensor = Tensor::from_vec(&d.shape, read_f32s(&payload, d.offset, numel)?)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        store.insert(&d.name, tensor);
        if descriptor.optimizer_state {
            let (Some(mo), Some(vo)) = (d.m_offset, d.v_offset) else {
                return Err(CheckpointError::Corrupt(format!("{}: missing moment offsets", d.name)));
            };
            let i = store.entries.len() - 1;
            let e = &mut store.entries[i].1;
            e.m = Tensor::from_vec(&d.shape, read_f32s(&payload, mo, numel)?)
                .map_err(|err| CheckpointError::Corrupt(err.to_string()))?;
            e.v = Tensor::from_vec(&d.shape, read_f32s(&payload, vo, numel)?)
                .map_err(|err| CheckpointError::Corrupt(err.to_string()))?;
            e.step = d.adam_step.unwrap_or(0);
        }
    }
    if descriptor.frozen {
        store.freeze();
    }
    let meta = CheckpointMeta {
        optimizer_state: descriptor.optimizer_state,
        training_step: descriptor.training_step,
        meta: descriptor.meta,
    };
    Ok((store, meta))
}

fn write_f32s<W: Write>(w: &mut W, data: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_f32s(payload: &[u8], offset: u64, numel: usize) -> Result<Vec<f32>, CheckpointError> {
    let start = offset as usize;
    let end = start + numel * 4;
    if end > payload.len() {
        return Err(CheckpointError::Corrupt(format!(
            "payload too short: need {end} bytes, have {}",
            payload.len()
        )));
    }
    Ok(payload[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
