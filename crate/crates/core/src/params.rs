//! Named parameter storage shared by the model and discriminators.
//!
//! Parameters live outside any computation graph. Each training step binds
//! them into a fresh [`Graph`] as gradient-tracked leaves, runs forward
//! and backward, then absorbs the leaf gradients back into the store.

use autodiff::{Graph, NodeId, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Entry {
    name: String,
    value: Tensor,
}

/// Flat collection of named, gradient-tracked tensors.
#[derive(Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique dotted name.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name,
            value: tensor.with_grad(),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.value.zero_grad();
        }
    }

    /// Zeroes the gradients of every parameter whose name fails the
    /// predicate, freezing those parameters for the next optimizer step.
    pub fn mask_grads(&mut self, keep: impl Fn(&str) -> bool) {
        for e in &mut self.entries {
            if !keep(&e.name) {
                e.value.zero_grad();
            }
        }
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        Binding {
            nodes: self.entries.iter().map(|e| g.leaf(&e.value)).collect(),
        }
    }

    /// Adds each bound leaf's gradient into the store.
    pub fn absorb_grads(&mut self, g: &Graph, binding: &Binding) {
        for (entry, &node) in self.entries.iter_mut().zip(&binding.nodes) {
            if let Some(grad) = g.grad(node) {
                entry.value.accumulate_grad(grad);
            }
        }
    }
}

/// Per-graph map from [`ParamId`] to leaf [`NodeId`].
#[derive(Debug)]
pub struct Binding {
    nodes: Vec<NodeId>,
}

impl Binding {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }
}

/// Standard normal sample via Box-Muller, deterministic given the rng.
pub fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Xavier-uniform initialization for a weight of the given shape.
pub fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, shape: Vec<usize>) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("xavier shape")
}

/// He-normal initialization, suited to rectifier stacks.
pub fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize, shape: Vec<usize>) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| sample_normal(rng) * std).collect();
    Tensor::new(shape, data).expect("he shape")
}

/// Small-scale normal initialization for embeddings.
pub fn normal_init(rng: &mut ChaCha8Rng, std: f64, shape: Vec<usize>) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| sample_normal(rng) * std).collect();
    Tensor::new(shape, data).expect("normal shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn bind_absorb_roundtrip() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let mut g = Graph::new();
        let binding = store.bind(&mut g);
        let node = binding.node(id);
        let s = g.sum(node);
        let loss = g.mul(s, s).unwrap();
        g.backward(loss).unwrap();
        store.absorb_grads(&g, &binding);
        // d/dw of (sum w)^2 = 2 * sum = 6 for each element.
        assert_eq!(store.value(id).grad().unwrap(), &[6.0, 6.0]);

        store.zero_grads();
        assert_eq!(store.value(id).grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn init_is_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let ta = xavier_uniform(&mut a, 8, 8, vec![8, 8]);
        let tb = xavier_uniform(&mut b, 8, 8, vec![8, 8]);
        assert_eq!(ta.data(), tb.data());
    }
}
