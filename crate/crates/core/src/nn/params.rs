//! Named parameter storage with deterministic initialization.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, make_rng};

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    /// He-normal for ReLU layers: `std = gain / sqrt(fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
}

/// Trainable variables plus non-trainable buffers, keyed by dotted path.
///
/// Keys iterate in sorted order, which fixes the optimizer and checkpoint
/// ordering.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            buffers: BTreeMap::new(),
            seed,
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Variables whose path starts with `prefix`.
    pub fn vars_under<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Var)> + 'a {
        self.vars.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn num_params_under(&self, prefix: &str) -> usize {
        self.vars_under(prefix).map(|(_, v)| v.elem_count()).sum()
    }

    fn make(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let std = match init {
            Init::Zeros => 0.0,
            Init::Ones => 1.0,
            Init::Normal(std) => std,
            Init::FanIn { fan_in, gain } => gain / (fan_in.max(1) as f64).sqrt(),
        };
        let values: Vec<f64> = match init {
            Init::Zeros | Init::Ones => vec![std; n],
            Init::Normal(_) | Init::FanIn { .. } => {
                let mut rng = make_rng(derive_seed(self.seed, name, 0));
                (0..n).map(|_| std * rng.normal()).collect()
            }
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Snapshot of every variable and buffer as plain tensors.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.vars {
            out.insert(format!("param.{k}"), v.as_tensor().copy().expect("cpu copy"));
        }
        for (k, v) in &self.buffers {
            out.insert(format!("buffer.{k}"), v.as_tensor().copy().expect("cpu copy"));
        }
        out
    }

    /// Overwrites variables and buffers from a snapshot produced by [`snapshot`](Self::snapshot).
    pub fn restore(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (prefix, map) in [("param.", &self.vars), ("buffer.", &self.buffers)] {
            for (k, var) in map {
                let key = format!("{prefix}{k}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
                if t.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch for `{key}`: {:?} vs {:?}",
                        t.dims(),
                        var.dims()
                    )));
                }
                var.set(&t.to_dtype(self.dtype)?)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: std::collections::HashMap<String, Tensor> = self.snapshot().into_iter().collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        let map = candle_core::safetensors::load(path, &self.device)?;
        self.restore(&map.into_iter().collect())
    }

    /// SHA-256 over names and values of every variable and buffer.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, t) in self.snapshot() {
            h.update(k.as_bytes());
            let v = t
                .to_dtype(DType::F64)
                .and_then(|t| t.flatten_all())
                .and_then(|t| t.to_vec1::<f64>())
                .expect("cpu tensor");
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A prefixed view into a [`ParamStore`] used while building modules.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn sub(&mut self, name: &str) -> Scope<'_> {
        Scope {
            prefix: self.path(name),
            store: self.store,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }

    /// Creates (or returns the existing) trainable variable at `name`.
    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let path = self.path(name);
        if let Some(v) = self.store.vars.get(&path) {
            return Ok(v.clone());
        }
        let var = Var::from_tensor(&self.store.make(&path, shape, init)?)?;
        self.store.vars.insert(path, var.clone());
        Ok(var)
    }

    /// Creates a non-trainable buffer (e.g. running statistics).
    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let path = self.path(name);
        if let Some(v) = self.store.buffers.get(&path) {
            return Ok(v.clone());
        }
        let var = Var::from_tensor(&self.store.make(&path, shape, init)?)?;
        self.store.buffers.insert(path, var.clone());
        Ok(var)
    }

    /// A constant tensor drawn from the store's seed, not registered anywhere.
    pub fn constant(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.make(&self.path(name), shape, init)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_on_name_not_order() {
        let mut a = ParamStore::new(1, DType::F64, Device::Cpu);
        let mut b = ParamStore::new(1, DType::F64, Device::Cpu);
        let xa = a.root().var("x", &[3], Init::Normal(1.0)).unwrap();
        let _ = b.root().var("y", &[3], Init::Normal(1.0)).unwrap();
        let xb = b.root().var("x", &[3], Init::Normal(1.0)).unwrap();
        assert_eq!(
            xa.to_vec1::<f64>().unwrap(),
            xb.to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn scopes_and_reuse() {
        let mut s = ParamStore::new(0, DType::F32, Device::Cpu);
        let v1 = s.root().sub("enc").sub("conv").var("w", &[2, 2], Init::Ones).unwrap();
        let v2 = s.root().sub("enc").sub("conv").var("w", &[2, 2], Init::Ones).unwrap();
        assert_eq!(v1.id(), v2.id());
        assert!(s.get("enc.conv.w").is_some());
        assert_eq!(s.num_params(), 4);
    }

    #[test]
    fn save_restore_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.safetensors");
        let mut s = ParamStore::new(3, DType::F64, Device::Cpu);
        s.root().var("a", &[4], Init::Normal(1.0)).unwrap();
        s.root().buffer("m", &[2], Init::Zeros).unwrap();
        let before = s.fingerprint();
        s.save(&p).unwrap();
        s.get("a").unwrap().set(&Tensor::zeros(4, DType::F64, &Device::Cpu).unwrap()).unwrap();
        assert_ne!(s.fingerprint(), before);
        s.load(&p).unwrap();
        assert_eq!(s.fingerprint(), before);
    }
}
