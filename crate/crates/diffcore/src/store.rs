use crate::error::{DiffError, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Reserved prefix used by checkpoints to serialize optimizer moments.
pub const RESERVED_PREFIX: &str = "adam.";

#[derive(Clone, Debug)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
    /// Non-trainable entries (running statistics) are checkpointed but
    /// never receive optimizer updates.
    pub trainable: bool,
}

/// Ordered, named parameter tensors. Iteration order is insertion order,
/// which makes every downstream reduction deterministic.
#[derive(Clone, Debug)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    rng_seed: u64,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
            rng_seed,
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(DiffError::ParamStore(format!("duplicate name '{name}'")));
        }
        if name.starts_with(RESERVED_PREFIX) {
            return Err(DiffError::ParamStore(format!(
                "name '{name}' uses the reserved prefix '{RESERVED_PREFIX}'"
            )));
        }
        if !tensor.all_finite() {
            return Err(DiffError::non_finite("param_store", name.to_string()));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
            trainable,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].tensor)
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Entry> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.all_finite())
    }

    /// First entry whose tensor contains a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| !e.tensor.all_finite())
            .map(|e| e.name.as_str())
    }

    // ── init helpers ───────────────────────────────────────────────────

    /// Uniform(-bound, bound) init; the caller owns the RNG so that
    /// construction order fully determines the values.
    pub fn insert_uniform(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        bound: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape, data)?, true)
    }

    /// Standard fan-in scaled init (1/sqrt(fan_in)).
    pub fn insert_fan_in(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.insert_uniform(name, shape, bound, rng)
    }

    pub fn insert_const(&mut self, name: &str, shape: Vec<usize>, value: f64, trainable: bool) -> Result<()> {
        self.insert(name, Tensor::full(shape, value), trainable)
    }
}
