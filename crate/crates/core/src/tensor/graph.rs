use std::collections::BTreeMap;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Given the gradient of a node's output and which inputs need a gradient,
/// returns one optional gradient buffer per input.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Element> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Per-forward-pass tape. Nodes are appended in topological order, so the
/// backward sweep is a reverse walk over the node list.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// When enabled, every op output is scanned and a NaN/Inf is reported as
    /// [`Error::Numeric`] naming the op.
    pub fn with_finite_checks(mut self, enabled: bool) -> Self {
        self.check_finite = enabled;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf node. Gradients are collected for it only when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[Var],
        backward: impl Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::Numeric(format!("output of {op}")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                if node.inputs.is_empty() {
                    leaves.insert(i, Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            let Some(backward) = &node.backward else {
                leaves.insert(i, Tensor::from_parts(node.value.shape().to_vec(), gout));
                continue;
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = backward(&gout, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((&input, need), grad) in node.inputs.iter().zip(needs).zip(input_grads) {
                let Some(grad) = grad else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(grad.len(), self.nodes[input.0].value.len());
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(grad) {
                            *a += g;
                        }
                    }
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        // Leaves created after the root never see the sweep.
        for (i, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.requires_grad && node.inputs.is_empty() {
                leaves.insert(i, Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Gradient of the loss with respect to every leaf that requires a gradient.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: BTreeMap<usize, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}
