use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Parameter initializers. Random ones draw from a stream keyed by the
/// parameter's full name, so values do not depend on construction order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform in `[-b, b]` with `b = gain / √fan_in`.
    Fan { fan_in: usize, gain: f64 },
    Normal(f64),
}

#[derive(Debug, Default)]
struct Inner {
    vars: BTreeMap<String, Var>,
}

/// Named parameter storage shared by every module built from it.
#[derive(Clone, Debug)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    seed: u64,
    frozen: bool,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            inner: Arc::default(),
            dtype,
            seed,
            frozen: false,
        }
    }

    /// Parameters handed out by a frozen store are detached constants.
    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn root(&self) -> ParamBuilder {
        ParamBuilder {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    /// All parameters in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("param store lock");
        inner.vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner.lock().expect("param store lock").vars.get(name).cloned()
    }

    pub fn num_params(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrites an existing parameter in place, keeping its shape.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::shape(format!(
                "parameter {name}: stored {:?}, given {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Replaces every parameter with fresh seeded noise; used to exercise
    /// paths that zero-initialization would leave inert.
    pub fn randomize(&self, seed: u64, std: f64) -> Result<()> {
        for (name, var) in self.vars() {
            let mut r = rng::stream(seed, &name, 1);
            let data: Vec<f64> = (0..var.elem_count())
                .map(|_| r.gen_range(-1.0..1.0) * std * 3f64.sqrt())
                .collect();
            let t = Tensor::from_vec(data, var.dims(), &Device::Cpu)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    fn get_or_create(&self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        let mut inner = self.inner.lock().expect("param store lock");
        if let Some(var) = inner.vars.get(name) {
            if var.dims() != dims {
                return Err(Error::shape(format!(
                    "parameter {name} requested as {dims:?}, stored as {:?}",
                    var.dims()
                )));
            }
            return Ok(self.expose(var));
        }
        let n: usize = dims.iter().product();
        let mut r = rng::stream(self.seed, name, 0);
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Fan { fan_in, gain } => {
                let b = gain / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| r.gen_range(-b..=b)).collect()
            }
            Init::Normal(std) => crate::rng::normal_vec(&mut r, n)
                .into_iter()
                .map(|v| v as f64 * std)
                .collect(),
        };
        let t = Tensor::from_vec(data, dims, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = self.expose(&var);
        inner.vars.insert(name.to_string(), var);
        Ok(out)
    }

    fn expose(&self, var: &Var) -> Tensor {
        if self.frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        }
    }
}

/// A cursor into a [`ParamStore`] that prefixes names with a dotted path.
#[derive(Clone, Debug)]
pub struct ParamBuilder {
    store: ParamStore,
    prefix: String,
}

impl ParamBuilder {
    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Self {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn get(&self, dims: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.get_or_create(&full, dims, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }
}
