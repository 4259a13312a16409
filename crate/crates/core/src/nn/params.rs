use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use super::tape::{Gradients, Tape, Var};
use super::tensor::{Result, Tensor, TensorError};

/// A named trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }
}

/// Derives a generator for one named parameter, so every tensor's initial
/// values depend only on `(seed, name)` and not on construction order.
pub fn named_rng(seed: u64, name: &str) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

/// Flat, name-ordered collection of model parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `name` with values drawn from uniform(−1/√fan_in, 1/√fan_in).
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, seed: u64) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = named_rng(seed, name);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::filled(shape, value));
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.params.insert(name.to_string(), Param::new(value));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
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

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds `grads` into the stored gradient buffers.
    pub fn accumulate(&mut self, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| TensorError::MissingParameter(name.clone()))?;
            if p.grad.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "accumulate",
                    left: p.grad.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            p.grad.add_assign(g);
        }
        Ok(())
    }

    /// Moves parameters whose names start with `prefix` into a new store.
    pub fn split_off_prefix(&mut self, prefix: &str) -> ParamStore {
        let keys: Vec<String> = self
            .params
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        let mut out = ParamStore::new();
        for k in keys {
            let p = self.params.remove(&k).expect("present");
            out.params.insert(k, p);
        }
        out
    }

    /// Copies every parameter of `other` into `self`, replacing same-named entries.
    pub fn merge(&mut self, other: &ParamStore) {
        for (k, p) in &other.params {
            self.params.insert(k.clone(), Param::new(p.value.clone()));
        }
    }

    /// SHA-256 over names, shapes and little-endian values, as lowercase hex.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, p) in &self.params {
            h.update(k.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// One forward pass: a fresh tape plus parameters bound lazily as leaves.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: HashMap<&'a str, Var>,
    trainable: bool,
}

impl<'a> Graph<'a> {
    /// `trainable = false` records parameters as constants, so backward never
    /// reaches them.
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
            trainable,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let (key, p) = self
            .store
            .params
            .get_key_value(name)
            .ok_or_else(|| TensorError::MissingParameter(name.to_string()))?;
        let v = self.tape.leaf(p.value.clone(), self.trainable);
        self.bound.insert(key.as_str(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Runs backward from `root` and returns gradients for every bound parameter
    /// reached, keyed by name.
    pub fn param_grads(&self, root: Var) -> Result<BTreeMap<String, Tensor>> {
        let mut grads: Gradients = self.tape.backward(root)?;
        let mut out = BTreeMap::new();
        for (name, v) in &self.bound {
            if let Some(g) = grads.take(*v) {
                out.insert(name.to_string(), g);
            }
        }
        Ok(out)
    }
}
