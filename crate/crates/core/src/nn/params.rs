use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{bail, DType, Device, Result, Tensor, Var};
use sha2::{Digest, Sha256};

/// What a stored tensor is for. Only weights and biases are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug)]
pub struct Param {
    var: Var,
    kind: ParamKind,
}

impl Param {
    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn is_trainable(&self) -> bool {
        self.kind != ParamKind::Buffer
    }
}

/// Named model state, ordered by name.
#[derive(Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> Result<()> {
        let var = Var::from_tensor(&value.to_dtype(DType::F32)?.contiguous()?)?;
        self.params.insert(name.into(), Param { var, kind });
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        match self.params.get(name) {
            Some(p) => Ok(p.var.as_tensor().clone()),
            None => bail!("parameter {name} not found"),
        }
    }

    /// Overwrite a value in place, keeping its shape.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        match self.params.get(name) {
            Some(p) => {
                if p.var.shape() != value.shape() {
                    bail!("shape mismatch for {name}: have {:?}, got {:?}", p.var.shape(), value.shape());
                }
                p.var.set(&value.to_dtype(DType::F32)?)
            }
            None => bail!("parameter {name} not found"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars among parameters accepted by `filter`.
    pub fn count_trainable(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.params
            .iter()
            .filter(|(k, p)| p.is_trainable() && filter(k))
            .map(|(_, p)| p.var.elem_count())
            .sum()
    }

    /// Copy every tensor into fresh storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new();
        for (k, p) in &self.params {
            out.insert(k.clone(), p.var.as_tensor().copy()?, p.kind)?;
        }
        Ok(out)
    }

    /// Hex SHA-256 over names, shapes and values of the accepted entries.
    pub fn checksum(&self, filter: impl Fn(&str) -> bool) -> Result<String> {
        let mut h = Sha256::new();
        for (k, p) in self.params.iter().filter(|(k, _)| filter(k)) {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            for d in p.var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.var.flatten_all()?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn to_map(&self) -> HashMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.var.as_tensor().clone()))
            .collect()
    }

    pub fn save_safetensors(&self, path: &Path) -> Result<()> {
        candle_core::safetensors::save(&self.to_map(), path)
    }

    pub fn read_safetensors(path: &Path) -> Result<HashMap<String, Tensor>> {
        candle_core::safetensors::load(path, &Device::Cpu)
    }

    /// Overwrite every entry accepted by `filter` with the tensor of the same
    /// name from `source`. Returns the names that were missing from `source`;
    /// a shape mismatch is an error.
    pub fn assign_from(
        &self,
        source: &HashMap<String, Tensor>,
        filter: impl Fn(&str) -> bool,
    ) -> Result<Vec<String>> {
        let mut missing = Vec::new();
        for (k, p) in self.params.iter().filter(|(k, _)| filter(k)) {
            match source.get(k) {
                Some(t) => {
                    if t.dims() != p.var.dims() {
                        bail!("shape mismatch for {k}: model {:?}, file {:?}", p.var.dims(), t.dims());
                    }
                    p.var.set(&t.to_dtype(DType::F32)?)?;
                }
                None => missing.push(k.clone()),
            }
        }
        Ok(missing)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_tracks_values_and_deep_clone_is_independent() {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::ones((2, 2), DType::F32, &Device::Cpu).unwrap(), ParamKind::Weight)
            .unwrap();
        s.insert("a.running_mean", Tensor::zeros(2, DType::F32, &Device::Cpu).unwrap(), ParamKind::Buffer)
            .unwrap();
        let before = s.checksum(|_| true).unwrap();
        let copy = s.deep_clone().unwrap();
        s.set("a.weight", &Tensor::zeros((2, 2), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert_ne!(s.checksum(|_| true).unwrap(), before);
        assert_eq!(copy.checksum(|_| true).unwrap(), before);
        assert_eq!(s.count_trainable(|_| true), 4);
    }

    #[test]
    fn safetensors_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        s.insert("w", Tensor::arange(0f32, 6.0, &Device::Cpu).unwrap().reshape((2, 3)).unwrap(), ParamKind::Weight)
            .unwrap();
        let p = dir.path().join("x.safetensors");
        s.save_safetensors(&p).unwrap();
        let mut t = ParamStore::new();
        t.insert("w", Tensor::zeros((2, 3), DType::F32, &Device::Cpu).unwrap(), ParamKind::Weight)
            .unwrap();
        let missing = t.assign_from(&ParamStore::read_safetensors(&p).unwrap(), |_| true).unwrap();
        assert!(missing.is_empty());
        assert_eq!(t.checksum(|_| true).unwrap(), s.checksum(|_| true).unwrap());
    }
}
