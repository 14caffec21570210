//! Named parameter storage, per-pass graph binding, and the `OTCK`
//! checkpoint format.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use efh_numcore::{Graph, Gradients, Scalar, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry<T> {
    name: String,
    tensor: Tensor<T>,
    trainable: bool,
}

/// Ordered, named collection of model weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Entry {
            name,
            tensor,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Ids whose name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |&id| self.entries[id.0].name.starts_with(prefix))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(e.name.as_bytes());
            e.tensor.write_tnsr(&mut buf)?;
        }
        w.write_all(&buf).map_err(|e| Error::io("<checkpoint>", e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Overwrites every parameter from a checkpoint. The checkpoint must hold
    /// exactly this store's names with matching shapes.
    pub fn read_checkpoint<R: Read>(&mut self, r: &mut R) -> Result<()> {
        let records = read_checkpoint_records::<T, R>(r)?;
        if records.len() != self.entries.len() {
            return Err(Error::arg(format!(
                "checkpoint holds {} tensors, model expects {}",
                records.len(),
                self.entries.len()
            )));
        }
        let mut staged = Vec::with_capacity(records.len());
        for (name, t) in records {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::arg(format!("checkpoint tensor `{name}` is not a model parameter")))?;
            if t.shape() != self.get(id).shape() {
                return Err(Error::arg(format!(
                    "checkpoint tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    self.get(id).shape()
                )));
            }
            staged.push((id, t));
        }
        for (id, t) in staged {
            *self.get_mut(id) = t;
        }
        Ok(())
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.read_checkpoint(&mut bytes.as_slice()).map_err(|e| match e {
            Error::Tensor(t) => Error::format(path, t.to_string()),
            other => other,
        })
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Reads raw `(name, tensor)` records of an `OTCK` stream.
pub fn read_checkpoint_records<T: Scalar, R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<T>)>> {
    let bad = |m: &str| Error::format("<checkpoint>", m.to_string());
    let mut head = [0u8; 12];
    r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
    if &head[..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(|_| bad("truncated record"))?;
        let len = u32::from_le_bytes(len) as usize;
        if len > 1 << 16 {
            return Err(bad("name too long"));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
        out.push((name, Tensor::read_tnsr(r)?));
    }
    Ok(out)
}

/// One forward pass: a graph plus lazily bound parameters.
///
/// Trainable parameters are enrolled for differentiation when the session
/// was opened with `train = true`; otherwise everything is a constant.
pub struct Session<'a, T: Scalar> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    vars: Vec<Option<Var>>,
    train: bool,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>, train: bool) -> Self {
        Self {
            g: Graph::new(),
            store,
            vars: vec![None; store.len()],
            train,
        }
    }

    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Self::new(store, false)
    }

    pub fn training(store: &'a ParamStore<T>) -> Self {
        Self::new(store, true)
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let enroll = self.train && self.store.is_trainable(id);
        let v = self.g.leaf(self.store.get(id).clone(), enroll);
        self.vars[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.g.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.g.value(v)
    }

    /// Runs the reverse pass and returns gradients indexed by parameter id.
    /// Parameters the loss never touched come back as `None`.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Option<Tensor<T>>>> {
        let mut grads: Gradients<T> = self.g.backward(loss)?;
        Ok(self
            .vars
            .iter()
            .map(|v| v.and_then(|v| grads.take(v)))
            .collect())
    }
}
