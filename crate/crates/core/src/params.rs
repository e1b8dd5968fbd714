//! Named parameter tensors.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered collection of named tensors. Order is insertion order and is
/// the order used for checkpoints and optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        ParamStore { entries: self.entries.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect() }
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore { entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }

    /// Checks that `other` holds exactly the same names and shapes.
    pub fn expect_compatible(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::contract(format!("{} parameters vs {}", self.len(), other.len())));
        }
        for ((a, ta), (b, tb)) in self.entries.iter().zip(&other.entries) {
            if a != b || ta.shape() != tb.shape() {
                return Err(Error::contract(format!(
                    "parameter `{a}` {:?} does not match `{b}` {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Uniform initialisation in `[-bound, bound]` with
/// `bound = gain * sqrt(6 / fan_in)`.
pub fn fan_in_uniform<S: Scalar>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let bound = gain * (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| S::lit(rng.random_range(-bound..=bound)))
}
