//! Named parameter storage.
//!
//! Every parameter is registered under a dotted name. Trainable parameters are
//! candle [`Var`]s; frozen ones are plain tensors that never enter the
//! optimizer. Initialization is seeded per name, so the value a parameter gets
//! does not depend on construction order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
    /// He initialization scaled by output fan (`fan_out = shape[0] · receptive field`).
    KaimingFanOut,
    /// PyTorch's default layer init: uniform in ±1/√fan_in.
    FanInUniform,
}

impl Init {
    fn sample(self, shape: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n: usize = shape.iter().product();
        let receptive: usize = shape.iter().skip(2).product();
        let fan_in = shape.get(1).copied().unwrap_or(1) * receptive.max(1);
        let fan_out = shape.first().copied().unwrap_or(1) * receptive.max(1);
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::Uniform(bound) => {
                let d = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::KaimingFanOut => Init::Normal((2.0 / fan_out as f64).sqrt()).sample(shape, rng),
            Init::FanInUniform => Init::Uniform(1.0 / (fan_in as f64).sqrt()).sample(shape, rng),
        }
    }
}

#[derive(Clone)]
struct Entry {
    tensor: Tensor,
    var: Option<Var>,
}

struct Inner {
    dtype: DType,
    seed: u64,
    entries: BTreeMap<String, Entry>,
    preloaded: HashMap<String, Tensor>,
    loaded: BTreeSet<String>,
    mismatches: Vec<String>,
}

/// Shared handle to the parameter registry of one model.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                dtype,
                seed,
                entries: BTreeMap::new(),
                preloaded: HashMap::new(),
                loaded: BTreeSet::new(),
                mismatches: Vec::new(),
            })),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("parameter store poisoned")
    }

    pub fn dtype(&self) -> DType {
        self.lock().dtype
    }

    /// Values consulted before random initialization when a parameter is created.
    pub fn preload(&self, values: impl IntoIterator<Item = (String, Tensor)>) {
        self.lock().preloaded.extend(values);
    }

    pub fn root(&self) -> Params {
        Params { store: self.clone(), prefix: String::new(), frozen: false }
    }

    /// Fails with a load error listing every preloaded value whose shape did not
    /// match the parameter it was meant for.
    pub fn check_loaded(&self) -> Result<()> {
        let mut inner = self.lock();
        if inner.mismatches.is_empty() {
            return Ok(());
        }
        let list = std::mem::take(&mut inner.mismatches);
        Err(Error::Load(format!("incompatible weights: {}", list.join("; "))))
    }

    /// Registered parameters under `prefix` whose value did not come from a preload.
    pub fn not_preloaded(&self, prefix: &str) -> Vec<String> {
        let inner = self.lock();
        inner
            .entries
            .keys()
            .filter(|k| k.starts_with(prefix) && !inner.loaded.contains(*k))
            .cloned()
            .collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.lock().entries.keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.lock().entries.get(name).map(|e| e.tensor.clone())
    }

    pub fn is_frozen(&self, name: &str) -> Option<bool> {
        self.lock().entries.get(name).map(|e| e.var.is_none())
    }

    /// Trainable parameters in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.lock()
            .entries
            .iter()
            .filter_map(|(k, e)| e.var.clone().map(|v| (k.clone(), v)))
            .collect()
    }

    /// All parameters in name order with their frozen flag.
    pub fn all(&self) -> Vec<(String, Tensor, bool)> {
        self.lock()
            .entries
            .iter()
            .map(|(k, e)| (k.clone(), e.tensor.clone(), e.var.is_none()))
            .collect()
    }

    /// SHA-256 over the names and raw values of the selected parameters.
    pub fn checksum(&self, select: impl Fn(&str, bool) -> bool) -> Result<String> {
        let mut h = Sha256::new();
        for (name, t, frozen) in self.all() {
            if !select(&name, frozen) {
                continue;
            }
            h.update(name.as_bytes());
            for v in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn frozen_checksum(&self) -> Result<String> {
        self.checksum(|_, frozen| frozen)
    }

    /// Overwrites a registered parameter in place.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let inner = self.lock();
        let entry = inner
            .entries
            .get(name)
            .ok_or_else(|| Error::Load(format!("unknown parameter `{name}`")))?;
        if entry.tensor.dims() != value.dims() {
            return Err(Error::Load(format!(
                "`{name}`: expected shape {:?}, found {:?}",
                entry.tensor.dims(),
                value.dims()
            )));
        }
        let value = value.to_dtype(inner.dtype)?;
        match &entry.var {
            Some(var) => var.set(&value)?,
            None => {
                return Err(Error::Load(format!(
                    "`{name}` is frozen; frozen weights can only be supplied before the model is built"
                )));
            }
        }
        Ok(())
    }

    fn create(&self, name: String, dims: &[usize], init: Init, frozen: bool) -> Result<Tensor> {
        let mut inner = self.lock();
        if let Some(e) = inner.entries.get(&name) {
            if e.tensor.dims() != dims {
                return Err(Error::Shape(format!(
                    "parameter `{name}` re-registered with shape {dims:?} (was {:?})",
                    e.tensor.dims()
                )));
            }
            return Ok(e.tensor.clone());
        }
        let dtype = inner.dtype;
        let mut value = None;
        if let Some(t) = inner.preloaded.get(&name).cloned() {
            if t.dims() == dims {
                value = Some(t.to_dtype(dtype)?.contiguous()?.detach());
                inner.loaded.insert(name.clone());
            } else {
                let msg = format!("`{name}` expects {dims:?}, file has {:?}", t.dims());
                inner.mismatches.push(msg);
            }
        }
        let value = match value {
            Some(v) => v,
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(inner.seed ^ name_hash(&name));
                let data = init.sample(dims, &mut rng);
                Tensor::from_vec(data, dims, &Device::Cpu)?.to_dtype(dtype)?
            }
        };
        let entry = if frozen {
            Entry { tensor: value, var: None }
        } else {
            let var = Var::from_tensor(&value)?;
            Entry { tensor: var.as_tensor().clone(), var: Some(var) }
        };
        let t = entry.tensor.clone();
        inner.entries.insert(name, entry);
        Ok(t)
    }
}

/// A prefixed view into a [`ParamStore`], in the spirit of a var builder.
#[derive(Clone)]
pub struct Params {
    store: ParamStore,
    prefix: String,
    frozen: bool,
}

impl Params {
    pub fn pp(&self, name: impl AsRef<str>) -> Params {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        Params { store: self.store.clone(), prefix, frozen: self.frozen }
    }

    /// Parameters created through the returned view are excluded from training.
    pub fn freeze(&self, frozen: bool) -> Params {
        Params { frozen, ..self.clone() }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn get(&self, dims: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        self.store.create(full, dims, init, self.frozen)
    }
}
