//! Reverse-mode differentiation tape.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order of the graph and `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// What a backward rule sees: the upstream gradient, the forward inputs and
/// output, and which inputs actually need a gradient.
pub struct BackwardArgs<'a, T: Real> {
    pub grad: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub needs: Vec<bool>,
}

/// Returns one gradient per input, `None` where the input needs none.
pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>>>;

pub struct TapeNode<T: Real> {
    pub op: &'static str,
    pub inputs: Vec<usize>,
    pub value: Tensor<T>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<TapeNode<T>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; backward rules are dropped.
    pub fn without_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[TapeNode<T>] {
        &self.nodes
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(TapeNode {
            op: "constant",
            inputs: Vec::new(),
            value,
            backward: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is collected by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(TapeNode {
            op: "leaf",
            inputs: Vec::new(),
            value,
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an operation with a caller-supplied backward rule.
    pub fn push_op<F>(&mut self, op: &'static str, inputs: &[Var], value: Tensor<T>, backward: F) -> Var
    where
        F: Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(TapeNode {
            op,
            inputs: inputs.iter().map(|v| v.0).collect(),
            value,
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// First node whose value is not finite, as `(node id, op tag)`.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let out = &self.nodes[loss.0].value;
        if out.numel() != 1 {
            return Err(Error::NonScalarLoss(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(out.shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let args = BackwardArgs {
                grad: &grad,
                inputs: node.inputs.iter().map(|&i| &self.nodes[i].value).collect(),
                output: &node.value,
                needs: node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect(),
            };
            let input_grads = backward(&args);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.op);
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[input].value.shape(), "gradient shape from op {}", node.op);
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of leaves after a backward sweep.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(Tensor::ones(&[2]));
        let x = t.leaf(Tensor::ones(&[2]));
        let y = t.mul(c, x).unwrap();
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::ones(&[3]));
        assert!(matches!(t.backward(x), Err(crate::Error::NonScalarLoss(_))));
    }

    #[test]
    fn without_grad_tape_yields_no_gradients() {
        let mut t = Tape::<f64>::without_grad();
        let x = t.leaf(Tensor::ones(&[1]));
        let s = t.sum(x);
        assert!(t.backward(s).unwrap().get(x).is_none());
    }

    #[test]
    fn first_non_finite_points_at_the_producing_node() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(&[2], vec![-1.0, 4.0]).unwrap());
        let r = t.sqrt(x);
        let _ = t.sum(r);
        let (id, op) = t.first_non_finite().unwrap();
        assert_eq!(id, r.id());
        assert_eq!(op, "sqrt");
    }

    proptest! {
        #[test]
        fn fan_out_gradients_add(v in prop::collection::vec(-3.0f64..3.0, 1..8)) {
            // loss = sum(x) + sum(x) + sum(x * x): gradient 2 + 2x.
            let n = v.len();
            let mut t = Tape::<f64>::new();
            let x = t.leaf(Tensor::new(&[n], v.clone()).unwrap());
            let a = t.sum(x);
            let b = t.sum(x);
            let sq = t.mul(x, x).unwrap();
            let c = t.sum(sq);
            let ab = t.add(a, b).unwrap();
            let loss = t.add(ab, c).unwrap();
            let g = t.backward(loss).unwrap();
            for (gi, xi) in g.get(x).unwrap().data().iter().zip(&v) {
                prop_assert!((gi - (2.0 + 2.0 * xi)).abs() < 1e-12);
            }
        }
    }
}
