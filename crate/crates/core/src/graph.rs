//! A forward pass: a tape plus name-bound parameters and routing state.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamValues;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How semantic routing draws its class assignments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Routing {
    /// Straight-through one-hot when set, relaxed probabilities otherwise.
    pub hard: bool,
    pub tau: f64,
    /// `None` replaces Gumbel noise by zeros (deterministic evaluation).
    pub noise_seed: Option<u64>,
}

impl Routing {
    pub fn eval() -> Self {
        Routing {
            hard: true,
            tau: 1.0,
            noise_seed: None,
        }
    }

    pub fn train(seed: u64) -> Self {
        Routing {
            noise_seed: Some(seed),
            ..Self::eval()
        }
    }

    /// Relaxed routing with zero noise; used by gradient checks.
    pub fn soft() -> Self {
        Routing {
            hard: false,
            ..Self::eval()
        }
    }
}

pub struct Graph<'p, T: Real> {
    tape: Tape<T>,
    params: &'p ParamValues<T>,
    bound: HashMap<String, Var>,
    order: Vec<String>,
    routing: Routing,
    noise: Option<ChaCha8Rng>,
}

impl<T: Real> Deref for Graph<'_, T> {
    type Target = Tape<T>;
    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T: Real> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamValues<T>, routing: Routing) -> Self {
        Self::with_tape(Tape::new(), params, routing)
    }

    /// Forward-only graph; no backward rules are kept.
    pub fn inference(params: &'p ParamValues<T>, routing: Routing) -> Self {
        Self::with_tape(Tape::without_grad(), params, routing)
    }

    fn with_tape(tape: Tape<T>, params: &'p ParamValues<T>, routing: Routing) -> Self {
        Graph {
            tape,
            params,
            bound: HashMap::new(),
            order: Vec::new(),
            routing,
            noise: routing.noise_seed.map(ChaCha8Rng::seed_from_u64),
        }
    }

    pub fn routing(&self) -> Routing {
        self.routing
    }

    /// The named parameter as a leaf; repeated lookups share one node.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let v = self.tape.leaf(t);
        self.bound.insert(name.to_string(), v);
        self.order.push(name.to_string());
        Ok(v)
    }

    /// Standard Gumbel samples, or zeros when routing is noise-free.
    pub fn gumbel(&mut self, shape: &[usize]) -> Tensor<T> {
        match self.noise.as_mut() {
            None => Tensor::zeros(shape),
            Some(rng) => Tensor::from_fn(shape, |_| {
                let u: f64 = rng.gen_range(1e-10..1.0);
                T::of(-(-u.ln()).ln())
            }),
        }
    }

    /// Backward from `loss`; returns gradients for every bound parameter,
    /// zero where the parameter did not reach the loss.
    pub fn param_grads(&self, loss: Var) -> Result<IndexMap<String, Tensor<T>>> {
        let mut grads = self.tape.backward(loss)?;
        Ok(self
            .order
            .iter()
            .map(|name| {
                let v = self.bound[name];
                let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(self.tape.shape(v)));
                (name.clone(), g)
            })
            .collect())
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn eval_routing_is_noise_free() {
        let store = ParamStore::new();
        let values = store.values::<f64>();
        let mut g = Graph::new(&values, Routing::eval());
        assert!(g.gumbel(&[4]).data().iter().all(|&v| v == 0.0));
        let mut n = Graph::new(&values, Routing::train(1));
        assert!(n.gumbel(&[4]).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn unknown_parameter_is_an_error() {
        let store = ParamStore::new();
        let values = store.values::<f32>();
        let mut g = Graph::new(&values, Routing::eval());
        assert!(g.p("missing").is_err());
    }
}
