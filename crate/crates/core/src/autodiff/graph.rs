use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;

use super::backward::backward_node;
use super::param::{ParamId, ParamStore};
use super::{numel, Real};
use crate::error::{Error, Result};

/// Index map from output elements to input elements for a broadcast operand.
/// `None` means identity.
pub(crate) type IndexMap = Option<Vec<u32>>;

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize, IndexMap, IndexMap),
    Sub(usize, usize, IndexMap, IndexMap),
    Mul(usize, usize, IndexMap, IndexMap),
    Div(usize, usize, IndexMap, IndexMap),
    Scale(usize, Real),
    AddScalar(usize),
    MatMul(usize, usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    ReduceSum {
        a: usize,
        axis: usize,
    },
    ReduceMax {
        a: usize,
        axis: usize,
        argmax: Vec<u32>,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    LeakyRelu(usize, Real),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Abs(usize),
    ClampMin(usize, Real),
    NormL2 {
        a: usize,
        axis: usize,
    },
    Gather {
        a: usize,
        idx: Vec<usize>,
    },
    ScatterAdd {
        a: usize,
        idx: Vec<usize>,
    },
    Reshape(usize),
    Conv2d {
        x: usize,
        w: usize,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<u32>,
    },
    Dropout {
        a: usize,
        mask: Vec<Real>,
    },
    QuatMul(usize, usize),
    QuatToRotmat(usize),
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<Real>,
    pub op: Op,
    pub requires_grad: bool,
    pub param: Option<ParamId>,
    pub keep_grad: bool,
}

#[derive(Default)]
pub(crate) struct Inner {
    pub nodes: Vec<Node>,
    consumed: bool,
    kept: HashMap<usize, Vec<Real>>,
    param_grads: Vec<(ParamId, Vec<Real>)>,
}

/// A single forward/backward tape. Not shared across threads; build one graph
/// per sample and reduce gradients afterwards.
#[derive(Default)]
pub struct Graph {
    pub(crate) inner: RefCell<Inner>,
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Tensor<'g> {
    pub(crate) g: &'g Graph,
    pub(crate) id: usize,
}

impl fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, shape: Vec<usize>, value: Vec<Real>, op: Op) -> Tensor<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut inner = self.inner.borrow_mut();
        let requires_grad = op_inputs(&op).iter().any(|&i| inner.nodes[i].requires_grad);
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            param: None,
            keep_grad: false,
        });
        Tensor { g: self, id }
    }

    fn leaf(&self, shape: &[usize], value: Vec<Real>, trainable: bool) -> Result<Tensor<'_>> {
        if numel(shape) != value.len() {
            return Err(crate::error::shape_err("leaf", shape, &[value.len()]));
        }
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape: shape.to_vec(),
            value,
            op: Op::Leaf,
            requires_grad: trainable,
            param: None,
            keep_grad: trainable,
        });
        Ok(Tensor { g: self, id })
    }

    /// A constant input (no gradient).
    pub fn constant(&self, value: Vec<Real>, shape: &[usize]) -> Result<Tensor<'_>> {
        self.leaf(shape, value, false)
    }

    pub fn scalar(&self, v: Real) -> Tensor<'_> {
        self.leaf(&[1], vec![v], false).expect("scalar shape")
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor<'_> {
        self.leaf(shape, vec![0.0; numel(shape)], false).expect("zeros shape")
    }

    /// A trainable input whose gradient is retained after backward.
    pub fn trainable(&self, value: Vec<Real>, shape: &[usize]) -> Result<Tensor<'_>> {
        self.leaf(shape, value, true)
    }

    /// Copies a stored parameter into the graph as a trainable leaf.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Tensor<'_> {
        let p = store.get(id);
        let t = self
            .leaf(&p.shape, p.value.clone(), true)
            .expect("parameter shape is consistent");
        let mut inner = self.inner.borrow_mut();
        let n = &mut inner.nodes[t.id];
        n.param = Some(id);
        n.keep_grad = false;
        t
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Tensor<'_>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::GraphConsumed);
        }
        let shape = inner.nodes[loss.id].shape.clone();
        if numel(&shape) != 1 {
            return Err(Error::NotScalar(shape));
        }
        let n = loss.id + 1;
        let mut grads: Vec<Option<Vec<Real>>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &inner.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            backward_node(&inner.nodes, id, &g, &mut grads);
        }
        let mut kept = HashMap::new();
        let mut param_grads = Vec::new();
        for (id, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &inner.nodes[id];
            if let Some(p) = node.param {
                param_grads.push((p, g));
            } else if node.keep_grad {
                kept.insert(id, g);
            }
        }
        inner.kept = kept;
        inner.param_grads = param_grads;
        inner.consumed = true;
        // Release the backward records; forward values stay readable.
        for node in inner.nodes.iter_mut() {
            node.op = Op::Leaf;
        }
        Ok(())
    }

    /// Gradient of a trainable leaf after backward (zeros if it did not
    /// influence the loss).
    pub fn grad(&self, t: Tensor<'_>) -> Option<Vec<Real>> {
        let inner = self.inner.borrow();
        if !inner.consumed || !inner.nodes[t.id].keep_grad {
            return None;
        }
        Some(
            inner
                .kept
                .get(&t.id)
                .cloned()
                .unwrap_or_else(|| vec![0.0; inner.nodes[t.id].value.len()]),
        )
    }

    /// Parameter gradients gathered by the last backward, in the order the
    /// parameters were first read. A parameter read twice appears twice.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<Real>)> {
        self.inner.borrow().param_grads.clone()
    }

    pub fn take_param_grads(&self) -> Vec<(ParamId, Vec<Real>)> {
        std::mem::take(&mut self.inner.borrow_mut().param_grads)
    }
}

impl<'g> Tensor<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.g
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.g.inner.borrow().nodes[self.id].value.len()
    }

    pub fn value(&self) -> Vec<Real> {
        self.g.inner.borrow().nodes[self.id].value.clone()
    }

    pub(crate) fn value_ref(&self) -> Ref<'g, [Real]> {
        Ref::map(self.g.inner.borrow(), |i| i.nodes[self.id].value.as_slice())
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Real {
        let v = self.value_ref();
        assert_eq!(v.len(), 1, "item() on a tensor with {} elements", v.len());
        v[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.g.inner.borrow().nodes[self.id].requires_grad
    }
}

pub(crate) fn op_inputs(op: &Op) -> Vec<usize> {
    use Op::*;
    match op {
        Leaf => vec![],
        Add(a, b, ..) | Sub(a, b, ..) | Mul(a, b, ..) | Div(a, b, ..) | MatMul(a, b) | QuatMul(a, b) => {
            vec![*a, *b]
        }
        Conv2d { x, w } => vec![*x, *w],
        Concat { inputs, .. } => inputs.clone(),
        Scale(a, _)
        | AddScalar(a)
        | LeakyRelu(a, _)
        | Exp(a)
        | Log(a)
        | Sqrt(a)
        | Abs(a)
        | ClampMin(a, _)
        | Reshape(a)
        | QuatToRotmat(a) => vec![*a],
        Slice { a, .. }
        | ReduceSum { a, .. }
        | ReduceMax { a, .. }
        | Softmax { a, .. }
        | NormL2 { a, .. }
        | Gather { a, .. }
        | ScatterAdd { a, .. }
        | Dropout { a, .. } => vec![*a],
        MaxPool2d { x, .. } => vec![*x],
    }
}
