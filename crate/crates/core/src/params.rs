//! Named, ownership-tagged parameters and their binding onto a tape.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

/// Which group of weights a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ownership {
    /// Pre-trained backbone weights.
    Base,
    Adapter,
    Head,
}

impl Ownership {
    pub fn as_str(self) -> &'static str {
        match self {
            Ownership::Base => "base",
            Ownership::Adapter => "adapter",
            Ownership::Head => "head",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "base" => Some(Ownership::Base),
            "adapter" => Some(Ownership::Adapter),
            "head" => Some(Ownership::Head),
            _ => None,
        }
    }
}

impl fmt::Display for Ownership {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    name: String,
    ownership: Ownership,
    value: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, ownership: Ownership, value: Tensor) -> Self {
        Self { name: name.into(), ownership, value }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn ownership(&self) -> Ownership {
        self.ownership
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

/// SHA-256 over parameter names, shapes and the exact bit patterns of their values.
pub fn digest_parameters<'a>(params: impl IntoIterator<Item = &'a Parameter>) -> String {
    let mut hasher = Sha256::new();
    for p in params {
        hasher.update(p.name.as_bytes());
        hasher.update([0]);
        for d in p.shape() {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

/// Seeded initializer. All draws are rounded to `f32` so that freshly
/// initialized weights survive the on-disk encoding unchanged.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Seed derived from a base seed and a label, so that independent
    /// components (adapters, heads) get stable, distinct streams.
    pub fn derived(seed: u64, label: &str) -> Self {
        let digest = Sha256::digest(label.as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        Self::new(seed ^ u64::from_le_bytes(bytes))
    }

    /// Normal(0, std) truncated at two standard deviations.
    pub fn truncated_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let numel = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let z: f64 = self.rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                data.push((z * std) as f32 as f64);
            }
        }
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Maps parameters onto tape leaves, deciding once per parameter whether it is trainable.
pub struct Binder<'p> {
    trainable: Box<dyn Fn(&Parameter) -> bool + 'p>,
    bound: HashMap<String, Var>,
    order: Vec<String>,
}

impl<'p> Binder<'p> {
    pub fn new(trainable: impl Fn(&Parameter) -> bool + 'p) -> Self {
        Self { trainable: Box::new(trainable), bound: HashMap::new(), order: Vec::new() }
    }

    /// Binder under which nothing receives a gradient.
    pub fn frozen() -> Self {
        Self::new(|_| false)
    }

    pub fn bind(&mut self, tape: &mut Tape, p: &Parameter) -> Var {
        if let Some(v) = self.bound.get(p.name()) {
            return *v;
        }
        let grad = (self.trainable)(p);
        let v = tape.leaf(p.value().clone().with_requires_grad(grad));
        self.bound.insert(p.name().to_string(), v);
        self.order.push(p.name().to_string());
        v
    }

    /// Bind `name` to an existing tape variable instead of a fresh leaf.
    pub fn alias(&mut self, name: &str, v: Var) {
        if self.bound.insert(name.to_string(), v).is_none() {
            self.order.push(name.to_string());
        }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }

    /// Bound parameters in first-use order.
    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.order.iter().map(|n| (n.as_str(), self.bound[n]))
    }
}
