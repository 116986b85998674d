//! Named, seeded parameter storage.
//!
//! Every trainable tensor lives in a [`ParamStore`] under a dotted name. Values
//! are drawn from a ChaCha generator seeded at construction, so building the
//! same model twice with the same seed yields bit-identical parameters.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` with fan-in taken from every
    /// dimension after the first.
    FanIn,
}

/// Host-side copy of a tensor, the unit stored in checkpoint files.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            shape: t.dims().to_vec(),
            data: t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?,
        })
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), self.shape.as_slice(), device)?.to_dtype(dtype)?)
    }
}

struct Inner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("n_vars", &self.lock().vars.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device: device.clone(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("parameter store poisoned")
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn scope(&self, prefix: &str) -> Scope {
        self.root().pp(prefix)
    }

    fn get_or_init(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut inner = self.lock();
        if let Some(v) = inner.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::ShapeMismatch(vec![format!(
                    "{name}: stored {:?}, requested {shape:?}",
                    v.dims()
                )]));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut inner.rng)).collect()
            }
            Init::FanIn => {
                let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n)
                    .map(|_| inner.rng.random_range(-bound..bound))
                    .collect()
            }
        };
        let t = Tensor::from_vec(values, Shape::from_dims(shape), &self.device)?
            .to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// All variables sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.lock()
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.lock()
            .vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.lock().vars.get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        self.lock().vars.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.lock().vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_elements(&self) -> usize {
        self.lock().vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrite a variable in place; every module holding it sees the update.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .var(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::ShapeMismatch(vec![format!(
                "{name}: stored {:?}, given {:?}",
                var.dims(),
                value.dims()
            )]));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn export(&self) -> Result<Vec<NamedTensor>> {
        self.vars()
            .iter()
            .map(|(name, v)| NamedTensor::from_tensor(name.clone(), v.as_tensor()))
            .collect()
    }

    /// Load values for every stored variable. Missing names or shape
    /// disagreements are reported together.
    pub fn import(&self, tensors: &[NamedTensor]) -> Result<()> {
        let by_name: BTreeMap<&str, &NamedTensor> =
            tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut problems = Vec::new();
        for (name, var) in self.vars() {
            match by_name.get(name.as_str()) {
                None => problems.push(format!("{name}: missing")),
                Some(t) if t.shape != var.dims() => problems.push(format!(
                    "{name}: stored {:?}, file {:?}",
                    var.dims(),
                    t.shape
                )),
                Some(_) => {}
            }
        }
        if !problems.is_empty() {
            return Err(Error::ShapeMismatch(problems));
        }
        for (name, var) in self.vars() {
            let t = by_name[name.as_str()];
            var.set(&t.to_tensor(self.dtype, &self.device)?)?;
        }
        Ok(())
    }
}

/// A prefix into a [`ParamStore`], used while constructing modules.
#[derive(Clone, Debug)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.get_or_init(&full, shape, init)
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values() {
        let a = ParamStore::new(3, DType::F32, &Device::Cpu);
        let b = ParamStore::new(3, DType::F32, &Device::Cpu);
        for s in [&a, &b] {
            s.root().pp("x").get(&[4, 3], "w", Init::FanIn).unwrap();
            s.root().pp("x").get(&[4], "b", Init::Zeros).unwrap();
        }
        assert_eq!(a.export().unwrap(), b.export().unwrap());
        assert_eq!(a.names(), vec!["x.b".to_string(), "x.w".to_string()]);
    }

    #[test]
    fn reget_checks_shape() {
        let s = ParamStore::new(0, DType::F32, &Device::Cpu);
        s.root().get(&[2], "p", Init::Zeros).unwrap();
        assert!(s.root().get(&[2], "p", Init::Zeros).is_ok());
        assert!(s.root().get(&[3], "p", Init::Zeros).is_err());
    }

    #[test]
    fn import_reports_mismatches() {
        let s = ParamStore::new(0, DType::F32, &Device::Cpu);
        s.root().get(&[2], "p", Init::Zeros).unwrap();
        let bad = vec![NamedTensor {
            name: "p".into(),
            shape: vec![3],
            data: vec![0.0; 3],
        }];
        assert!(matches!(s.import(&bad), Err(Error::ShapeMismatch(_))));
    }
}
