//! Reverse-mode tape. Every operator appends one node holding its output
//! value and a closure mapping the output gradient to input gradients.

use std::fmt;

use crate::error::{ensure, Error, Result};

use super::scalar::Scalar;

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: fmt::Debug> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(
            n == data.len(),
            Error::ShapeMismatch(format!("shape {shape:?} needs {n} values, got {}", data.len()))
        );
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| S::from_f64_lossy(x as f64)).collect())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|x| x.to_f64_lossy() as f32).collect()
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps the output gradient to one optional gradient per input; `needs[i]`
/// tells whether input `i` wants one.
pub(crate) type BackwardFn<S> =
    Box<dyn Fn(&[&Tensor<S>], &Tensor<S>, &[S], &[bool]) -> Vec<Option<Vec<S>>> + Send + Sync>;

struct Node<S> {
    value: Tensor<S>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<S>>,
    requires_grad: bool,
    name: &'static str,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            name: "leaf",
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value.data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].name
    }

    /// Records an operator output. The backward closure is dropped when no
    /// input requires a gradient.
    pub(crate) fn push(&mut self, name: &'static str, value: Tensor<S>, parents: &[Var], backward: BackwardFn<S>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            name,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape and returns the
    /// gradients of every leaf that requires one.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        let n = self.nodes[loss.0].value.len();
        ensure!(
            n == 1,
            Error::InvalidArgument(format!("backward needs a scalar loss, got {} values", n))
        );
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![S::one()]);
        }
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let Some(back) = &node.backward else {
                if node.requires_grad {
                    leaf_grads.push((i, g));
                }
                continue;
            };
            let inputs: Vec<&Tensor<S>> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let parent_grads = back(&inputs, &node.value, &g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.len(), self.nodes[p.0].value.len(), "{}", node.name);
                match &mut grads[p.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&pg) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        leaf_grads.sort_by_key(|(i, _)| *i);
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients<S> {
    grads: Vec<(usize, Vec<S>)>,
}

impl<S> Gradients<S> {
    /// `None` when the leaf did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads
            .binary_search_by_key(&v.0, |(i, _)| *i)
            .ok()
            .map(|k| self.grads[k].1.as_slice())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<S>> {
        let k = self.grads.binary_search_by_key(&v.0, |(i, _)| *i).ok()?;
        Some(std::mem::take(&mut self.grads[k].1))
    }
}
