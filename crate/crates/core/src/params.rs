//! Named parameter collections. Models hold [`ParamId`]s; the tensors live in a
//! [`ParamStore`] so one architecture description works for any element type.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{read_tensor, write_tensor, Init, Scalar, Tensor};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar = f32> {
    uid: u64,
    frozen: bool,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            frozen: false,
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Process-unique identity of this store (fresh for every clone-by-cast).
    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        for t in &mut self.tensors {
            t.set_requires_grad(false);
            t.zero_grad();
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(!self.frozen));
        id
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) -> ParamId {
        let t = Tensor::new(shape, Init::Normal { mean: 0.0, std, rng }).expect("valid parameter shape");
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::new(shape, Init::Ones).expect("valid parameter shape"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Copy with a different element type and a fresh uid.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            frozen: self.frozen,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Replaces the tensor of an existing parameter (checkpoint loading).
    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) -> Result<()> {
        if tensor.shape() != self.tensors[id.0].shape() {
            return Err(Error::shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                tensor.shape()
            )));
        }
        self.tensors[id.0] = tensor.with_requires_grad(!self.frozen);
        Ok(())
    }

    /// 64-bit fingerprint: leading bytes of SHA-256 over names, shapes and
    /// little-endian values in parameter order.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            buf.clear();
            buf.extend_from_slice(name.as_bytes());
            buf.push(0);
            t.hash_bytes(&mut buf);
            h.update(&buf);
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    /// Adds per-parameter gradients (as returned by
    /// [`Graph::param_grads`](crate::tensor::Graph::param_grads)) into the
    /// tensors' gradient buffers.
    pub fn accumulate_grads(&mut self, grads: &[Option<Vec<T>>]) -> Result<()> {
        if self.frozen {
            return Err(Error::contract("gradient accumulation into a frozen store"));
        }
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            if let Some(g) = g {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Writes `params.json` (name, shape, file per parameter) and one TNSR
    /// file per parameter under `dir/tensors/`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        let tdir = dir.join("tensors");
        fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
        let mut index = Vec::with_capacity(self.len());
        for (i, (name, t)) in self.names.iter().zip(&self.tensors).enumerate() {
            let file = format!("tensors/{i:04}.tnsr");
            write_tensor(&dir.join(&file), t)?;
            index.push(IndexEntry { name: name.clone(), shape: t.shape().to_vec(), file });
        }
        let p = dir.join("params.json");
        fs::write(&p, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&p, e))
    }

    /// Overwrites every parameter of this store from a directory written by
    /// [`save_dir`](Self::save_dir). Names and shapes must match exactly.
    pub fn load_dir(&mut self, dir: &Path) -> Result<()> {
        let p = dir.join("params.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let index: Vec<IndexEntry> = serde_json::from_str(&text)?;
        if index.len() != self.len() {
            return Err(Error::format(
                0,
                format!("{} holds {} parameters, expected {}", p.display(), index.len(), self.len()),
            ));
        }
        for e in index {
            let id = self
                .find(&e.name)
                .ok_or_else(|| Error::format(0, format!("unexpected parameter {} in {}", e.name, p.display())))?;
            let t: Tensor<T> = read_tensor(&dir.join(&e.file))?;
            if t.shape() != self.get(id).shape() {
                return Err(Error::format(
                    0,
                    format!("parameter {} has shape {:?}, expected {:?}", e.name, t.shape(), self.get(id).shape()),
                ));
            }
            self.tensors[id.0] = t.with_requires_grad(!self.frozen);
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

/// Sums per-sample gradient sets in order.
pub fn sum_grads<T: Scalar>(sets: Vec<Vec<Option<Vec<T>>>>) -> Vec<Option<Vec<T>>> {
    let mut it = sets.into_iter();
    let Some(mut acc) = it.next() else {
        return Vec::new();
    };
    for set in it {
        for (a, g) in acc.iter_mut().zip(set) {
            match (a.as_mut(), g) {
                (Some(buf), Some(g)) => buf.iter_mut().zip(&g).for_each(|(x, &y)| *x = *x + y),
                (None, Some(g)) => *a = Some(g),
                _ => {}
            }
        }
    }
    acc
}
