use std::collections::BTreeMap;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// Named parameter tensors, iterated in lexicographic name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamRegistry<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamRegistry<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamRegistry<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Scalar count of the parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamRegistry<U> {
        ParamRegistry {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Centered uniform draw in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_init<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut p = ParamRegistry::<f32>::new();
        p.insert("sem.b", Tensor::zeros(&[2])).unwrap();
        p.insert("bev.a", Tensor::zeros(&[3])).unwrap();
        assert!(p.insert("bev.a", Tensor::zeros(&[1])).is_err());
        let names: Vec<_> = p.names().cloned().collect();
        assert_eq!(names, ["bev.a", "sem.b"]);
        assert_eq!(p.num_scalars(), 5);
        assert_eq!(p.num_scalars_with_prefix("sem."), 2);
    }

    #[test]
    fn uniform_init_is_bounded_and_seeded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let a: Tensor<f64> = uniform_init(&[100], 25, &mut r1);
        let b: Tensor<f64> = uniform_init(&[100], 25, &mut r2);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() < 0.2));
    }
}
