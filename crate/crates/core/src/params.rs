// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named parameter collections and their seeded initialisation.

use indexmap::IndexMap;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{BridgeError, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Element, Tensor};

/// Ordered map from parameter name to tensor. Order is insertion order and
/// is the order used by checkpoints and optimiser state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    /// Looks up a parameter that the architecture guarantees to exist.
    pub fn expect(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| BridgeError::Input(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Places every parameter on `g`, as trainable inputs or as constants.
    pub fn attach<'a, T: Element>(&'a self, g: &mut Graph<T>, trainable: bool) -> Bound<'a> {
        let vars = self
            .params
            .values()
            .map(|t| {
                let v = t.cast::<T>();
                if trainable {
                    g.input(v)
                } else {
                    g.constant(v)
                }
            })
            .collect();
        Bound { set: self, vars }
    }

    /// Sets every value to zero.
    pub fn zero_all(&mut self) {
        for t in self.params.values_mut() {
            t.data_mut().fill(0.0);
        }
    }
}

/// Parameters of a [`ParamSet`] placed on a graph.
#[derive(Debug)]
pub struct Bound<'a> {
    set: &'a ParamSet,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.set
            .params
            .get_index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| BridgeError::Input(format!("missing parameter `{name}`")))
    }

    /// Gradients in parameter order, as `f32`; parameters off the loss path get zeros.
    pub fn collect<T: Element>(&self, grads: &Gradients<T>) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(self.set.params.values())
            .map(|(&v, p)| match grads.get(v) {
                Some(g) => g.cast(),
                None => Tensor::zeros(p.shape()),
            })
            .collect()
    }
}

/// Independent seed for sub-stream `stream` of a run seeded with `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Seeded initialiser shared by all architectures.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    pub fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        Tensor::new(vec![fan_in, fan_out], data).expect("sized")
    }

    pub fn zeros(&self, n: usize) -> Tensor {
        Tensor::zeros(&[1, n])
    }

    pub fn ones(&self, n: usize) -> Tensor {
        Tensor::full(&[1, n], 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xavier_bounds_and_determinism() {
        let a = Initializer::new(7).xavier(10, 6);
        let b = Initializer::new(7).xavier(10, 6);
        assert_eq!(a, b);
        let bound = (6.0f32 / 16.0).sqrt();
        assert!(a.data().iter().all(|x| x.abs() <= bound));
        assert_ne!(a, Initializer::new(8).xavier(10, 6));
    }

    #[test]
    fn bound_lookup() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::zeros(&[2, 2]));
        let mut g = Graph::<f32>::new();
        let b = p.attach(&mut g, true);
        assert!(b.var("w").is_ok());
        assert!(b.var("nope").is_err());
    }
}
