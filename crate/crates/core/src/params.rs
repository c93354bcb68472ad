//! Named learnable tensors with gradient buffers.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub value: Tensor<f32>,
    pub grad: Tensor<f32>,
}

/// Ordered map from dotted name to parameter; iteration follows insertion.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(name, ParamEntry { value, grad });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor<f32>> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Replaces a value, keeping the shape fixed.
    pub fn set(&mut self, name: &str, value: Tensor<f32>) -> Result<()> {
        let e = self.entries.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if e.value.shape() != value.shape() {
            return Err(Error::ParamShape {
                name: name.to_string(),
                expected: e.value.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        e.value = value;
        Ok(())
    }

    /// Overwrites every parameter whose name starts with `prefix` with zeros.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (name, e) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                e.value = Tensor::zeros(e.value.shape());
                n += 1;
            }
        }
        n
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = Tensor::zeros(e.value.shape());
        }
    }

    /// Adds gradients by name. Parameters absent from `grads` are untouched.
    pub fn accumulate_grads<T: Real>(&mut self, grads: &IndexMap<String, Tensor<T>>) -> Result<()> {
        for (name, g) in grads {
            let e = self.entries.get_mut(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if e.grad.shape() != g.shape() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: e.grad.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
            e.grad.add_assign(&g.cast());
        }
        Ok(())
    }

    /// A typed snapshot of the current values.
    pub fn values<T: Real>(&self) -> ParamValues<T> {
        ParamValues {
            map: self.entries.iter().map(|(k, e)| (k.clone(), e.value.cast())).collect(),
        }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, e) in &self.entries {
            let o = other
                .entries
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if o.value.shape() != e.value.shape() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: e.value.shape().to_vec(),
                    found: o.value.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = other.entries.keys().find(|k| !self.entries.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

/// Read-only parameter values in the scalar type of a forward pass.
#[derive(Clone, Debug)]
pub struct ParamValues<T: Real> {
    map: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamValues<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }
}

/// Initialization schemes, per parameter type.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f32),
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    /// Truncated normal with std `gain / sqrt(fan_in)`; fan-in is the product
    /// of all but the leading axis.
    FanIn(f64),
}

impl Init {
    pub fn sample<R: Rng>(self, shape: &[usize], rng: &mut R) -> Tensor<f32> {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Const(v) => Tensor::full(shape, v),
            Init::TruncNormal(std) => trunc_normal(shape, std, rng),
            Init::FanIn(gain) => {
                let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
                trunc_normal(shape, gain / (fan_in as f64).sqrt(), rng)
            }
        }
    }
}

fn trunc_normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break (z * std) as f32;
        }
    })
}

/// Registers parameters under a dotted prefix.
pub struct ParamBuilder<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        ParamBuilder { store, rng }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<String> {
        let t = init.sample(shape, self.rng);
        self.store.insert(name, t)?;
        Ok(name.to_string())
    }

    pub fn add_tensor(&mut self, name: &str, value: Tensor<f32>) -> Result<String> {
        self.store.insert(name, value)?;
        Ok(name.to_string())
    }

    pub fn rng(&mut self) -> &mut R {
        self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn set_checks_shape() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(s.set("a", Tensor::zeros(&[3])), Err(Error::ParamShape { .. })));
        assert!(matches!(s.set("b", Tensor::zeros(&[2])), Err(Error::UnknownParam(_))));
    }

    #[test]
    fn gradient_buffers_match_parameters() {
        let mut s = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut pb = ParamBuilder::new(&mut s, &mut rng);
        pb.add("w", &[3, 4], Init::TruncNormal(0.02)).unwrap();
        pb.add("b", &[4], Init::Zeros).unwrap();
        assert!(s.iter().all(|(_, e)| e.grad.shape() == e.value.shape()));
        assert_eq!(s.num_scalars(), 16);
    }

    #[test]
    fn truncated_normal_stays_within_two_std() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let t = Init::TruncNormal(0.02).sample(&[1000], &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04 + 1e-7));
    }

    #[test]
    fn zero_prefix_counts_matches() {
        let mut s = ParamStore::new();
        s.insert("head.w", Tensor::ones(&[2])).unwrap();
        s.insert("head.b", Tensor::ones(&[1])).unwrap();
        s.insert("body.w", Tensor::ones(&[2])).unwrap();
        assert_eq!(s.zero_prefix("head."), 2);
        assert_eq!(s.get("body.w").unwrap().data(), &[1.0, 1.0]);
    }
}
