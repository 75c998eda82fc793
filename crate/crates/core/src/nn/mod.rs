//! Minimal layer toolkit: a named parameter store plus two interpreters of the
//! same layer vocabulary. [`Eval`] runs inference and frees activations as
//! soon as they go out of scope; [`Tape`] records every activation so that
//! [`Tape::backward`] can produce parameter gradients.

pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use kernels::ConvGeom;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Ordered collection of named parameter arrays.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<T>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param { name: name.into(), shape, data });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[T] {
        &self.params[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].data
    }

    /// Mutable access to two distinct parameters at once.
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut [T], &mut [T]) {
        assert_ne!(a, b, "pair_mut needs distinct parameters");
        if a.0 < b.0 {
            let (lo, hi) = self.params.split_at_mut(b.0);
            (&mut lo[a.0].data, &mut hi[0].data)
        } else {
            let (lo, hi) = self.params.split_at_mut(a.0);
            (&mut hi[0].data, &mut lo[b.0].data)
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Zero-filled store with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), shape: p.shape.clone(), data: vec![T::zero(); p.data.len()] })
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::of(v.f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// Checks that both stores list identical names and shapes in order.
    pub fn ensure_same_layout<U: Scalar>(&self, other: &ParamStore<U>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Parameters(format!(
                "{} parameters vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Parameters(format!(
                    "`{}` {:?} vs `{}` {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
}

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dout: usize,
}

/// The layer vocabulary the denoiser is written against.
pub trait Ops<T: Scalar> {
    type V;

    fn input(&mut self, t: Tensor<T>) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T>;
    fn conv(&mut self, x: &Self::V, p: &ConvParams) -> Self::V;
    fn group_norm(&mut self, x: &Self::V, p: &NormParams) -> Self::V;
    fn silu(&mut self, x: &Self::V) -> Self::V;
    fn linear(&mut self, x: &Self::V, p: &LinearParams) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn channel_bias(&mut self, x: &Self::V, bias: &Self::V) -> Self::V;
    fn concat(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn upsample(&mut self, x: &Self::V) -> Self::V;
    fn attention(&mut self, q: &Self::V, k: &Self::V, v: &Self::V) -> Self::V;
    fn embed(&mut self, table: ParamId, dim: usize, labels: &[usize]) -> Self::V;
}

/// Inference interpreter.
pub struct Eval<'a, T> {
    params: &'a ParamStore<T>,
}

impl<'a, T: Scalar> Eval<'a, T> {
    pub fn new(params: &'a ParamStore<T>) -> Self {
        Eval { params }
    }
}

impl<T: Scalar> Ops<T> for Eval<'_, T> {
    type V = Tensor<T>;

    fn input(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }
    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }
    fn conv(&mut self, x: &Tensor<T>, p: &ConvParams) -> Tensor<T> {
        kernels::conv2d_forward(x, self.params.data(p.weight), Some(self.params.data(p.bias)), &p.geom)
    }
    fn group_norm(&mut self, x: &Tensor<T>, p: &NormParams) -> Tensor<T> {
        kernels::group_norm_forward(x, self.params.data(p.gamma), self.params.data(p.beta), p.groups).0
    }
    fn silu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        kernels::silu_forward(x)
    }
    fn linear(&mut self, x: &Tensor<T>, p: &LinearParams) -> Tensor<T> {
        kernels::linear_forward(x, self.params.data(p.weight), self.params.data(p.bias), p.dout)
    }
    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        let mut y = a.clone();
        for (o, &v) in y.data_mut().iter_mut().zip(b.data()) {
            *o += v;
        }
        y
    }
    fn channel_bias(&mut self, x: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
        kernels::channel_bias_forward(x, bias)
    }
    fn concat(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        kernels::concat_forward(a, b)
    }
    fn upsample(&mut self, x: &Tensor<T>) -> Tensor<T> {
        kernels::upsample_forward(x)
    }
    fn attention(&mut self, q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Tensor<T> {
        kernels::attention_forward(q, k, v).0
    }
    fn embed(&mut self, table: ParamId, dim: usize, labels: &[usize]) -> Tensor<T> {
        kernels::embed_forward(self.params.data(table), dim, labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Conv { x: NodeId, p: ConvParams },
    GroupNorm { x: NodeId, p: NormParams, stats: kernels::GroupStats<T> },
    Silu { x: NodeId },
    Linear { x: NodeId, p: LinearParams },
    Add { a: NodeId, b: NodeId },
    ChannelBias { x: NodeId, bias: NodeId },
    Concat { a: NodeId, b: NodeId },
    Upsample { x: NodeId },
    Attention { q: NodeId, k: NodeId, v: NodeId, probs: Vec<T> },
    Embed { table: ParamId, dim: usize, labels: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recording interpreter for reverse-mode differentiation.
pub struct Tape<'a, T> {
    params: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new(params: &'a ParamStore<T>) -> Self {
        Tape { params, nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Propagates `seed` (the gradient of the objective with respect to
    /// `root`) back through the tape and returns parameter gradients.
    pub fn backward(self, root: NodeId, seed: Tensor<T>) -> ParamStore<T> {
        let mut grads = self.params.zeros_like();
        let mut node_grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[root.0] = Some(seed);
        let accumulate = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| match slot {
            Some(acc) => {
                for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
            None => *slot = Some(g),
        };
        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = node_grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Conv { x, p } => {
                    let xv = &self.nodes[x.0].value;
                    let w = self.params.data(p.weight);
                    let (dw, db) = grads.pair_mut(p.weight, p.bias);
                    let dx = kernels::conv2d_backward(xv, w, &dy, &p.geom, dw, Some(db));
                    accumulate(&mut node_grads[x.0], dx);
                }
                Op::GroupNorm { x, p, stats } => {
                    let xv = &self.nodes[x.0].value;
                    let (dg, dbt) = grads.pair_mut(p.gamma, p.beta);
                    let dx = kernels::group_norm_backward(xv, self.params.data(p.gamma), stats, &dy, p.groups, dg, dbt);
                    accumulate(&mut node_grads[x.0], dx);
                }
                Op::Silu { x } => {
                    let dx = kernels::silu_backward(&self.nodes[x.0].value, &dy);
                    accumulate(&mut node_grads[x.0], dx);
                }
                Op::Linear { x, p } => {
                    let (dw, db) = grads.pair_mut(p.weight, p.bias);
                    let dx = kernels::linear_backward(&self.nodes[x.0].value, self.params.data(p.weight), &dy, dw, db);
                    accumulate(&mut node_grads[x.0], dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut node_grads[b.0], dy.clone());
                    accumulate(&mut node_grads[a.0], dy);
                }
                Op::ChannelBias { x, bias } => {
                    accumulate(&mut node_grads[bias.0], kernels::channel_bias_backward(&dy));
                    accumulate(&mut node_grads[x.0], dy);
                }
                Op::Concat { a, b } => {
                    let ca = self.nodes[a.0].value.shape()[1];
                    let (da, db) = kernels::concat_backward(&dy, ca);
                    accumulate(&mut node_grads[a.0], da);
                    accumulate(&mut node_grads[b.0], db);
                }
                Op::Upsample { x } => {
                    accumulate(&mut node_grads[x.0], kernels::upsample_backward(&dy));
                }
                Op::Attention { q, k, v, probs } => {
                    let (dq, dk, dv) = kernels::attention_backward(
                        &self.nodes[q.0].value,
                        &self.nodes[k.0].value,
                        &self.nodes[v.0].value,
                        probs,
                        &dy,
                    );
                    accumulate(&mut node_grads[q.0], dq);
                    accumulate(&mut node_grads[k.0], dk);
                    accumulate(&mut node_grads[v.0], dv);
                }
                Op::Embed { table, dim, labels } => {
                    kernels::embed_backward(&dy, *dim, labels, grads.data_mut(*table));
                }
            }
        }
        grads
    }
}

impl<T: Scalar> Ops<T> for Tape<'_, T> {
    type V = NodeId;

    fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf)
    }
    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Tensor<T> {
        self.val(*v)
    }
    fn conv(&mut self, x: &NodeId, p: &ConvParams) -> NodeId {
        let y = kernels::conv2d_forward(self.val(*x), self.params.data(p.weight), Some(self.params.data(p.bias)), &p.geom);
        self.push(y, Op::Conv { x: *x, p: *p })
    }
    fn group_norm(&mut self, x: &NodeId, p: &NormParams) -> NodeId {
        let (y, stats) =
            kernels::group_norm_forward(self.val(*x), self.params.data(p.gamma), self.params.data(p.beta), p.groups);
        self.push(y, Op::GroupNorm { x: *x, p: *p, stats })
    }
    fn silu(&mut self, x: &NodeId) -> NodeId {
        let y = kernels::silu_forward(self.val(*x));
        self.push(y, Op::Silu { x: *x })
    }
    fn linear(&mut self, x: &NodeId, p: &LinearParams) -> NodeId {
        let y = kernels::linear_forward(self.val(*x), self.params.data(p.weight), self.params.data(p.bias), p.dout);
        self.push(y, Op::Linear { x: *x, p: *p })
    }
    fn add(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let mut y = self.val(*a).clone();
        for (o, &v) in y.data_mut().iter_mut().zip(self.val(*b).data()) {
            *o += v;
        }
        self.push(y, Op::Add { a: *a, b: *b })
    }
    fn channel_bias(&mut self, x: &NodeId, bias: &NodeId) -> NodeId {
        let y = kernels::channel_bias_forward(self.val(*x), self.val(*bias));
        self.push(y, Op::ChannelBias { x: *x, bias: *bias })
    }
    fn concat(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let y = kernels::concat_forward(self.val(*a), self.val(*b));
        self.push(y, Op::Concat { a: *a, b: *b })
    }
    fn upsample(&mut self, x: &NodeId) -> NodeId {
        let y = kernels::upsample_forward(self.val(*x));
        self.push(y, Op::Upsample { x: *x })
    }
    fn attention(&mut self, q: &NodeId, k: &NodeId, v: &NodeId) -> NodeId {
        let (y, probs) = kernels::attention_forward(self.val(*q), self.val(*k), self.val(*v));
        self.push(y, Op::Attention { q: *q, k: *k, v: *v, probs })
    }
    fn embed(&mut self, table: ParamId, dim: usize, labels: &[usize]) -> NodeId {
        let y = kernels::embed_forward(self.params.data(table), dim, labels);
        self.push(y, Op::Embed { table, dim, labels: labels.to_vec() })
    }
}
