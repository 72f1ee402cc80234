//! Reverse-mode tape.
//!
//! Every primitive application appends one node holding its output value and
//! whatever the backward rule needs. Node ids are assigned in creation order, so
//! the node list is already topologically sorted and `backward` is a single
//! reverse sweep. A successful `backward` clears the tape and bumps its
//! generation, which invalidates every [`Var`] issued before.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::params::ParamTree;
use crate::scalar::Scalar;
use crate::tensor::{AxisSplit, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    pub(crate) id: u32,
    pub(crate) generation: u32,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Gelu(usize),
    Matmul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Softmax {
        x: usize,
        split: AxisSplit,
    },
    LogSoftmax {
        x: usize,
        split: AxisSplit,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        split: AxisSplit,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    MeanAxis {
        x: usize,
        split: AxisSplit,
    },
    SumAll(usize),
    MeanAll(usize),
    GatherRows {
        x: usize,
        indices: Vec<usize>,
    },
    ScatterAddRows {
        x: usize,
        indices: Vec<usize>,
    },
    GatherElements {
        x: usize,
        indices: Vec<usize>,
    },
    RowScale {
        x: usize,
        w: usize,
    },
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    L2Normalize {
        x: usize,
        norms: Vec<T>,
    },
}

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Records primitive applications for one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    generation: u32,
    params: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            generation: 0,
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Discards the recording without computing gradients.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.generation = self.generation.wrapping_add(1);
    }

    pub(crate) fn index(&self, v: Var) -> Result<usize> {
        let id = v.id as usize;
        if v.generation != self.generation || id >= self.nodes.len() {
            return Err(TensorError::StaleVar);
        }
        Ok(id)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len() as u32;
        // constant subgraphs never need their recipe
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            id,
            generation: self.generation,
        }
    }

    pub(crate) fn needs_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.index(v)?].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A named trainable leaf. Registering the same path twice returns the
    /// first handle.
    pub fn param(&mut self, path: &str, value: &Tensor<T>) -> Var {
        if let Some(&id) = self.params.get(path) {
            return Var {
                id: id as u32,
                generation: self.generation,
            };
        }
        let var = self.push(value.clone(), Op::Leaf, true);
        self.params.insert(path.to_string(), var.id as usize);
        var
    }

    /// Registers `path` from `tree` as a trainable leaf.
    pub fn bind(&mut self, tree: &ParamTree<T>, path: &str) -> Result<Var> {
        if let Some(&id) = self.params.get(path) {
            return Ok(Var {
                id: id as u32,
                generation: self.generation,
            });
        }
        let value = tree.get(path)?;
        Ok(self.param(path, value))
    }

    pub fn param_paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Gradients of a scalar `loss` with respect to every registered parameter.
    ///
    /// Consumes the recording: afterwards the tape is empty and all earlier
    /// handles are stale, so a second call on the same loss fails.
    pub fn backward(&mut self, loss: Var) -> Result<ParamTree<T>> {
        let root = self.index(loss)?;
        let root_value = &self.nodes[root].value;
        if root_value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(root + 1);
        grads.resize_with(root + 1, || None);
        grads[root] = Some(vec![T::one()]);

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (input, contribution) in self.backward_node(id, &g) {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contribution) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        let mut out = ParamTree::new();
        for (path, &id) in &self.params {
            let shape = self.nodes[id].value.shape().to_vec();
            let data = match grads.get_mut(id).and_then(Option::take) {
                Some(g) => g,
                None => vec![T::zero(); self.nodes[id].value.numel()],
            };
            out.insert(path.clone(), Tensor::from_parts(shape, data))?;
        }
        self.reset();
        Ok(out)
    }
}
