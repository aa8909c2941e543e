use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Real, Tape, Tensor, Var};
use crate::data_io::{read_bytes, write_bytes};
use crate::error::{Error, Result};

pub const CHECKPOINT_JSON: &str = "checkpoint.json";
pub const CHECKPOINT_BIN: &str = "checkpoint.bin";

/// Named trainable tensors with same-shaped gradient buffers, plus named
/// non-trainable buffers (batch-norm running statistics).
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real = f64> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Vec<T>>,
    buffers: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            buffers: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter; returns its position.
    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<usize> {
        if self.index.contains_key(name) || self.buffers.iter().any(|(n, _)| n == name) {
            return Err(Error::InvalidParams(format!("duplicate parameter name '{name}'")));
        }
        let id = self.values.len();
        self.grads.push(vec![T::zero(); value.len()]);
        self.values.push(value);
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn value(&self, id: usize) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.values[id]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn grad(&self, id: usize) -> &[T] {
        &self.grads[id]
    }

    pub fn grad_mut(&mut self, id: usize) -> &mut [T] {
        &mut self.grads[id]
    }

    /// Simultaneous access to parameter values and gradients.
    pub fn values_and_grads_mut(&mut self) -> (&mut [Tensor<T>], &[Vec<T>]) {
        (&mut self.values, &self.grads)
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.fill(T::zero());
        }
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidParams(format!("buffer name '{name}' collides with a parameter")));
        }
        match self.buffers.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = value,
            None => self.buffers.push((name.to_string(), value)),
        }
        Ok(())
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn buffers(&self) -> &[(String, Tensor<T>)] {
        &self.buffers
    }

    /// Records every parameter on the tape as a differentiable leaf, in store order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone().with_grad())).collect()
    }

    /// Adds the tape gradients of `vars` (as returned by [`bind`](Self::bind)) into the gradient buffers.
    pub fn accumulate(&mut self, tape: &Tape<T>, vars: &[Var]) {
        for (g, &v) in self.grads.iter_mut().zip(vars) {
            if let Some(tg) = tape.grad(v) {
                g.iter_mut().zip(tg).for_each(|(a, &b)| *a += b);
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            grads: self.values.iter().map(|v| vec![U::zero(); v.len()]).collect(),
            buffers: self.buffers.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
}

/// Manifest half of a checkpoint (`checkpoint.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub dtype: String,
    pub entries: Vec<CheckpointEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// Writes `checkpoint.json` and `checkpoint.bin` (little-endian payloads in manifest order) into `dir`.
pub fn save_checkpoint<T: Real>(dir: &Path, store: &ParamStore<T>, metadata: serde_json::Value) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload = Vec::with_capacity((store.num_scalars() + 64) * T::BYTES);
    let params = store.names.iter().zip(&store.values).map(|(n, t)| (n, t, EntryKind::Param));
    let buffers = store.buffers.iter().map(|(n, t)| (n, t, EntryKind::Buffer));
    for (name, t, kind) in params.chain(buffers) {
        entries.push(CheckpointEntry {
            name: name.clone(),
            kind,
            shape: t.shape().to_vec(),
        });
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let manifest = Checkpoint {
        dtype: T::DTYPE.to_string(),
        entries,
        metadata,
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serialises");
    write_bytes(&dir.join(CHECKPOINT_JSON), &json)?;
    write_bytes(&dir.join(CHECKPOINT_BIN), &payload)
}

fn decode<T: Real, S: Real>(bytes: &[u8]) -> Vec<T> {
    bytes
        .chunks_exact(S::BYTES)
        .map(|c| T::from_f64(S::read_le(c).to_f64().unwrap()).unwrap())
        .collect()
}

/// Reads a checkpoint written by [`save_checkpoint`], converting to `T` if the stored dtype differs.
pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<(ParamStore<T>, Checkpoint)> {
    let json_path = dir.join(CHECKPOINT_JSON);
    let bin_path = dir.join(CHECKPOINT_BIN);
    let manifest: Checkpoint = serde_json::from_slice(&read_bytes(&json_path)?).map_err(|e| Error::MalformedHeader {
        path: json_path.clone(),
        reason: e.to_string(),
    })?;
    let width = match manifest.dtype.as_str() {
        "f64" => 8,
        "f32" => 4,
        other => {
            return Err(Error::MalformedHeader {
                path: json_path,
                reason: format!("unknown dtype '{other}'"),
            })
        }
    };
    let payload = read_bytes(&bin_path)?;
    let declared: usize = manifest.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if declared * width != payload.len() {
        return Err(Error::LengthMismatch {
            path: bin_path,
            declared,
            found: payload.len() / width,
        });
    }
    let mut store = ParamStore::new();
    let mut off = 0;
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let bytes = &payload[off * width..(off + n) * width];
        off += n;
        let data = if width == 8 { decode::<T, f64>(bytes) } else { decode::<T, f32>(bytes) };
        let t = Tensor::new(&e.shape, data)?;
        match e.kind {
            EntryKind::Param => {
                store.add(&e.name, t)?;
            }
            EntryKind::Buffer => store.set_buffer(&e.name, t)?,
        }
    }
    Ok((store, manifest))
}
