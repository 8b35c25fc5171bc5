//! Named parameter groups with seeded initialization and a freeze flag.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for linear and conv weights.
    FanIn(usize),
}

/// One parameter group (θ_G, θ_I, θ_S, a frozen captioner, ...).
///
/// Parameters are created lazily by [`Builder::param`]; a second builder pass
/// over the same names reuses the stored values, which is how snapshots are
/// loaded and how a frozen copy of a trained module is constructed.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    frozen: bool,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            frozen: false,
        }
    }

    pub fn from_tensors(dtype: DType, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut store = Self::new(dtype, 0);
        for (name, t) in tensors {
            let t = t.to_dtype(dtype)?;
            store.vars.insert(name, Var::from_tensor(&t)?);
        }
        Ok(store)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Mark the group frozen. Modules built afterwards receive detached
    /// tensors, and optimizers refuse the store.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn root(&mut self) -> Builder<'_> {
        Builder {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Trainable variables in name order. Errors on a frozen store.
    pub fn trainable(&self) -> Result<Vec<(String, Var)>> {
        if self.frozen {
            return Err(Error::Contract(
                "attempted to obtain trainable handles of a frozen parameter group".into(),
            ));
        }
        Ok(self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect())
    }

    /// Overwrite one parameter in place; refused when frozen.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        if self.frozen {
            return Err(Error::Contract(format!(
                "parameter `{name}` belongs to a frozen group"
            )));
        }
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Deep copies of every parameter; later updates do not show through.
    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// SHA-256 over names, shapes and raw values, as a hex string.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let flat = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?;
            for x in flat.to_vec1::<f64>()? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex(&h.finalize()))
    }

    fn init_tensor(&mut self, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    z * std
                })
                .collect(),
            Init::Uniform(b) => (0..n).map(|_| self.rng.random_range(-b..=b)).collect(),
            Init::FanIn(fan_in) => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-b..=b)).collect()
            }
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hierarchical name scope over a [`ParamStore`].
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Builder<'_> {
    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Builder {
            store: self.store,
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let var = match self.store.vars.get(&full) {
            Some(v) => {
                if v.dims() != shape {
                    return Err(Error::shape(format!(
                        "parameter `{full}` has shape {:?}, expected {shape:?}",
                        v.dims()
                    )));
                }
                v.clone()
            }
            None => {
                if self.store.frozen {
                    return Err(Error::Contract(format!(
                        "frozen group has no parameter `{full}`"
                    )));
                }
                let t = self.store.init_tensor(shape, init)?;
                let v = Var::from_tensor(&t)?;
                self.store.vars.insert(full, v.clone());
                v
            }
        };
        Ok(if self.store.frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values() {
        let mut a = ParamStore::new(DType::F32, 3);
        let mut b = ParamStore::new(DType::F32, 3);
        a.root()
            .sub("x")
            .param("w", &[4, 5], Init::FanIn(5))
            .unwrap();
        b.root()
            .sub("x")
            .param("w", &[4, 5], Init::FanIn(5))
            .unwrap();
        assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());
        assert!(a.get("x.w").is_some());
    }

    #[test]
    fn reuse_checks_shape() {
        let mut a = ParamStore::new(DType::F32, 0);
        a.root().param("w", &[2, 2], Init::Zeros).unwrap();
        assert!(a.root().param("w", &[2, 2], Init::Ones).is_ok());
        assert!(a.root().param("w", &[3, 2], Init::Zeros).is_err());
    }

    #[test]
    fn frozen_store_refuses_mutation() {
        let mut a = ParamStore::new(DType::F32, 0);
        a.root().param("w", &[2], Init::Zeros).unwrap();
        a.freeze();
        assert!(a.trainable().is_err());
        assert!(a
            .set("w", &Tensor::ones(2, DType::F32, &Device::Cpu).unwrap())
            .is_err());
        assert!(a.root().param("new", &[1], Init::Zeros).is_err());
        // frozen tensors are detached constants
        let t = a.root().param("w", &[2], Init::Zeros).unwrap();
        assert!(!t.is_variable());
    }
}
