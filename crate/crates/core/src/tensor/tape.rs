use std::collections::BTreeMap;

use super::{ParamRegistry, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }

    /// The handle of node `id`; only meaningful for a tape with more nodes.
    pub fn from_id(id: usize) -> Self {
        Var(id)
    }
}

/// What a backward rule sees: the forward inputs and output, the incoming
/// gradient, and which inputs actually need a gradient.
pub struct BackwardCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    pub needs: Vec<bool>,
}

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    op: &'static str,
}

/// Append-only record of a forward computation. Nodes are stored in
/// creation order, which is a topological order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; no backward rules are kept.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that participates in differentiation.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.push(value, Vec::new(), None, requires_grad, "leaf")
    }

    /// Leaf that never receives a gradient (data, targets, masks).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), None, false, "constant")
    }

    /// Binds a named parameter from `params` as a leaf, once per tape.
    pub fn param(&mut self, params: &ParamRegistry<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.leaf(value);
        self.nodes[v.0].op = "param";
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Binds `name` to an existing variable so later [`Tape::param`] calls
    /// return it instead of reading a registry.
    pub fn bind_param(&mut self, name: &str, v: Var) -> Result<()> {
        if self.params.insert(name.to_string(), v).is_some() {
            return Err(Error::invalid(format!("parameter `{name}` bound twice")));
        }
        Ok(())
    }

    /// Parameters bound so far, by name.
    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Records the result of an operation. The backward rule is dropped when
    /// no input requires a gradient.
    pub fn record(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[Var],
        backward: impl Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward: Option<BackwardFn<T>> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push(
            value,
            inputs.iter().map(|v| v.0).collect(),
            backward,
            requires_grad,
            op,
        )
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        inputs: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
        op: &'static str,
    ) -> Var {
        self.nodes.push(Node {
            value,
            inputs,
            backward,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(shape, T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let (lower, upper) = grads.split_at_mut(i);
            let Some(grad) = upper[0].as_ref() else {
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|&j| &self.nodes[j].value).collect(),
                output: &node.value,
                grad,
                needs: node
                    .inputs
                    .iter()
                    .map(|&j| self.nodes[j].requires_grad)
                    .collect(),
            };
            let input_grads = rule(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.op);
            for (&j, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[j].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    self.nodes[j].value.shape(),
                    "gradient shape from op {}",
                    node.op
                );
                match &mut lower[j] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }
}

/// Gradients of one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, Var>,
}

impl<T: Real> Gradients<T> {
    /// `None` when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero when it does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Gradient for every parameter bound on the tape.
    pub fn params(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, &v)| (name.clone(), self.wrt(v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_product_gradient_is_other_factor() {
        let mut t = Tape::<f64>::new();
        let w = t.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let x = t.constant(Tensor::new(vec![3], vec![4.0, 5.0, 6.0]).unwrap());
        let p = t.mul(w, x).unwrap();
        let loss = t.sum(p);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(w).data(), &[4.0, 5.0, 6.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn disconnected_leaf_gets_zero() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = t.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let loss = t.sum(a);
        let g = t.backward(loss).unwrap();
        assert!(g.get(b).is_none());
        assert_eq!(g.wrt(b).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(a), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::new(vec![1], vec![3.0]).unwrap());
        let b = t.mul(a, a).unwrap();
        let c = t.add(b, a).unwrap();
        let loss = t.sum(c);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(a).data(), &[7.0]);
    }

    #[test]
    fn inference_tape_keeps_no_rules() {
        let mut t = Tape::<f32>::inference();
        let a = t.leaf(Tensor::zeros(&[2]));
        assert!(!t.requires_grad(a));
        let s = t.sum(a);
        let g = t.backward(s).unwrap();
        assert!(g.get(a).is_none());
    }
}
