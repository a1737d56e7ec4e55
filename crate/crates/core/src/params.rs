//! Named, seeded parameter storage.
//!
//! Every parameter is a [`Var`] keyed by a dotted name whose first segment is
//! its module group (`unet`, `refnet`, `driven_encoder`, `image_encoder`,
//! `temporal`, `codec`). Initial values are drawn from a generator seeded by
//! `(seed, name)`, so construction order never changes the values.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const GROUPS: [&str; 6] = [
    "driven_encoder",
    "unet",
    "refnet",
    "image_encoder",
    "temporal",
    "codec",
];

pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
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

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn root(&mut self, prefix: &str) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self,
            prefix: prefix.to_string(),
        }
    }

    fn name_rng(&self, name: &str) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(name.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    /// Creates (or returns, if it already exists) the named parameter.
    pub fn get_or_init(&mut self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        let shape = shape.into();
        if let Some(var) = self.vars.get(name) {
            if var.shape() != &shape {
                return Err(Error::Shape(format!(
                    "parameter {name} exists with shape {:?}, requested {:?}",
                    var.shape(),
                    shape
                )));
            }
            return Ok(var.as_tensor().clone());
        }
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let mut rng = self.name_rng(name);
                (0..n)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
                    .collect()
            }
            Init::Uniform(bound) => {
                let mut rng = self.name_rng(name);
                (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Swaps in a new variable, possibly of a different shape.
    pub fn replace(&mut self, name: &str, value: &Tensor) -> Result<Tensor> {
        if !self.vars.contains_key(name) {
            return Err(Error::Shape(format!("no parameter named {name}")));
        }
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Overwrites a parameter in place; the shape must match.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Shape(format!("no parameter named {name}")))?;
        if var.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{name}: expected {:?}, got {:?}",
                var.shape(),
                value.shape()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Redraws every all-zero parameter in `groups` as N(0, std^2).
    ///
    /// Zero-initialised output layers hide most of the network at init; tests
    /// that need every path live call this first. Returns the names touched.
    pub fn perturb_zeros(&self, groups: &[&str], std: f64) -> Result<Vec<String>> {
        let mut touched = Vec::new();
        for name in self.names_in_groups(groups) {
            let var = &self.vars[&name];
            let zero = var.as_tensor().abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()? == 0.0;
            if !zero {
                continue;
            }
            let mut rng = self.name_rng(&format!("{name}#perturb"));
            let values: Vec<f64> = (0..var.elem_count())
                .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
                .collect();
            let t = Tensor::from_vec(values, var.shape(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
            touched.push(name);
        }
        Ok(touched)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn groups_present(&self) -> BTreeSet<String> {
        self.vars.keys().map(|k| group_of(k).to_string()).collect()
    }

    pub fn names_in_groups(&self, groups: &[&str]) -> BTreeSet<String> {
        self.vars
            .keys()
            .filter(|k| groups.contains(&group_of(k)))
            .cloned()
            .collect()
    }

    pub fn vars_named<'a>(&self, names: impl IntoIterator<Item = &'a String>) -> Vec<Var> {
        names
            .into_iter()
            .filter_map(|n| self.vars.get(n).cloned())
            .collect()
    }

    pub fn hash(&self, name: &str) -> Result<String> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Shape(format!("no parameter named {name}")))?;
        hash_tensor(var.as_tensor())
    }

    pub fn hashes<'a>(
        &self,
        names: impl IntoIterator<Item = &'a String>,
    ) -> Result<BTreeMap<String, String>> {
        names
            .into_iter()
            .map(|n| Ok((n.clone(), self.hash(n)?)))
            .collect()
    }

    pub fn group_tensors(&self, group: &str) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(k, _)| group_of(k) == group)
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn save_group(&self, group: &str, path: &Path) -> Result<()> {
        let tensors = self.group_tensors(group);
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    /// Loads every tensor in a blob into existing parameters of the same name.
    pub fn load_blob(&self, path: &Path) -> Result<usize> {
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        for (name, t) in &tensors {
            self.set(name, t)?;
        }
        Ok(tensors.len())
    }
}

pub fn hash_tensor(t: &Tensor) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(format!("{:?}{:?}", t.dtype(), t.dims()).as_bytes());
    match t.dtype() {
        DType::F64 => {
            for v in t.flatten_all()?.to_vec1::<f64>()? {
                hasher.update(v.to_le_bytes());
            }
        }
        _ => {
            for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                hasher.update(v.to_le_bytes());
            }
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Prefix-scoped view used while building modules.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl ParamBuilder<'_> {
    pub fn pp(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            prefix,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn get(&mut self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        let full = format!("{}.{name}", self.prefix);
        self.store.get_or_init(&full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}
