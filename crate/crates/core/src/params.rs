//! Named, deterministically initialised parameter storage.
//!
//! Every learnable tensor of the codec lives in a [`ParamStore`] under a
//! dotted module path (`analysis.stage0.down.weight`, ...). The store is the
//! unit of checkpointing, optimisation and per-image cloning.

use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    Uniform { lo: f64, hi: f64 },
    Normal { std: f64 },
}

impl Init {
    /// PyTorch-style default for linear/conv weights: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn fan_in(fan_in: usize) -> Init {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Init::Uniform {
            lo: -bound,
            hi: bound,
        }
    }
}

enum Mode {
    /// Missing parameters are created from the seeded generator.
    Create(ChaCha8Rng),
    /// Every requested parameter must already exist with a matching shape.
    Strict,
}

pub struct ParamStore {
    vars: Mutex<BTreeMap<String, Var>>,
    mode: Mutex<Mode>,
    device: Device,
    dtype: DType,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("len", &self.len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore {
            vars: Mutex::new(BTreeMap::new()),
            mode: Mutex::new(Mode::Create(ChaCha8Rng::seed_from_u64(seed))),
            device: Device::Cpu,
            dtype,
        }
    }

    /// Wraps already materialised tensors; building a model on top of this
    /// store fails if any parameter is missing or has the wrong shape.
    pub fn from_tensors(tensors: BTreeMap<String, Tensor>, dtype: DType) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in tensors {
            vars.insert(name, Var::from_tensor(&t.to_dtype(dtype)?)?);
        }
        Ok(ParamStore {
            vars: Mutex::new(vars),
            mode: Mutex::new(Mode::Strict),
            device: Device::Cpu,
            dtype,
        })
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.vars.lock().expect("param store poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn root(&self) -> ParamPath<'_> {
        ParamPath {
            store: self,
            prefix: String::new(),
        }
    }

    fn get_or_create(&self, name: &str, shape: Shape, init: Init) -> Result<Tensor> {
        let mut vars = self.vars.lock().expect("param store poisoned");
        if let Some(v) = vars.get(name) {
            if v.shape() != &shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    v.shape().dims(),
                    shape.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let mut mode = self.mode.lock().expect("param store poisoned");
        let rng = match &mut *mode {
            Mode::Create(rng) => rng,
            Mode::Strict => {
                return Err(Error::Checkpoint(format!("missing parameter {name}")));
            }
        };
        let n = shape.elem_count();
        let data: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform { lo, hi } => (0..n).map(|_| rng.random_range(lo..=hi)).collect(),
            Init::Normal { std } => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                })
                .collect(),
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// All parameters in name order.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .expect("param store poisoned")
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Parameters whose path starts with any of the given prefixes.
    pub fn vars_with_prefixes(&self, prefixes: &[&str]) -> Vec<Var> {
        self.named_vars()
            .into_iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v)
            .collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.named_vars().into_iter().map(|(_, v)| v).collect()
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.vars
            .lock()
            .expect("param store poisoned")
            .get(name)
            .map(|v| v.as_tensor().clone())
    }

    /// Snapshot of every parameter as plain (non-variable) tensors.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (k, v) in self.named_vars() {
            out.insert(k, v.as_tensor().detach().copy()?);
        }
        Ok(out)
    }

    /// Deep copy: the returned store owns fresh storage, so optimising one
    /// copy never touches the other.
    pub fn deep_clone(&self) -> Result<ParamStore> {
        ParamStore::from_tensors(self.snapshot()?, self.dtype)
    }

    /// Overwrites parameters in place from a snapshot (used to restore a best iterate).
    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        let vars = self.vars.lock().expect("param store poisoned");
        for (k, t) in snapshot {
            if let Some(v) = vars.get(k) {
                v.set(t)?;
            }
        }
        Ok(())
    }

    /// Converts every parameter to another dtype (e.g. f64 for gradient checks).
    pub fn to_dtype(&self, dtype: DType) -> Result<ParamStore> {
        ParamStore::from_tensors(self.snapshot()?, dtype)
    }
}

/// A cursor into the store at a module path.
#[derive(Clone)]
pub struct ParamPath<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> ParamPath<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> ParamPath<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamPath {
            store: self.store,
            prefix,
        }
    }

    pub fn get(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.get_or_create(&full, shape.into(), init)
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_init() {
        let a = ParamStore::new(7, DType::F32);
        let b = ParamStore::new(7, DType::F32);
        let ta = a.root().pp("x").get("w", (3, 4), Init::fan_in(4)).unwrap();
        let tb = b.root().pp("x").get("w", (3, 4), Init::fan_in(4)).unwrap();
        let va: Vec<f32> = ta.flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f32> = tb.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn strict_store_rejects_missing_and_misshapen() {
        let s = ParamStore::new(1, DType::F32);
        s.root().get("w", (2, 2), Init::Const(1.0)).unwrap();
        let strict = s.deep_clone().unwrap();
        assert!(strict.root().get("w", (2, 2), Init::Const(0.0)).is_ok());
        assert!(strict.root().get("w", (3, 2), Init::Const(0.0)).is_err());
        assert!(strict.root().get("v", (2, 2), Init::Const(0.0)).is_err());
    }

    #[test]
    fn deep_clone_is_independent() {
        let s = ParamStore::new(1, DType::F32);
        s.root().get("w", 3, Init::Const(1.0)).unwrap();
        let c = s.deep_clone().unwrap();
        let v = &c.all_vars()[0];
        v.set(&Tensor::new(&[5f32, 5., 5.], &Device::Cpu).unwrap())
            .unwrap();
        let orig: Vec<f32> = s.get("w").unwrap().to_vec1().unwrap();
        assert_eq!(orig, vec![1.0, 1.0, 1.0]);
    }
}
