//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] records every forward op as a node holding its output tensor
//! plus whatever context the backward pass needs. [`Graph::backward`] walks
//! the tape once in reverse, accumulates gradients into per-node buffers, and
//! returns the gradients of all registered parameters as a [`GradStore`].
//! A graph can run one backward pass; afterwards it is released and a second
//! call is an error.

mod backward;
mod kernels;
mod ops;
pub mod par;

pub use kernels::ConvDims;

use crate::error::{Error, Result};
use crate::param::ParamId;
use crate::tensor::Tensor;
use std::collections::HashMap;

/// Forward/eval switch. Training mode uses batch statistics in channel norm
/// and records running-stat updates; eval mode is a pure function of inputs
/// and parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Conv2d {
        input: Value,
        weight: Value,
        bias: Value,
        dims: ConvDims,
    },
    MaxPool2x2 {
        input: Value,
        argmax: Vec<u32>,
    },
    ChannelNorm {
        input: Value,
        gamma: Value,
        beta: Value,
        mean: Vec<f64>,
        var: Vec<f64>,
        training: bool,
    },
    Prelu {
        input: Value,
        alpha: Value,
        channels: usize,
        plane: usize,
    },
    Linear {
        input: Value,
        weight: Value,
        bias: Value,
        rows: usize,
        d_in: usize,
        d_out: usize,
    },
    LayerNorm {
        input: Value,
        gamma: Value,
        beta: Value,
        means: Vec<f64>,
        inv_stds: Vec<f64>,
    },
    Softmax {
        input: Value,
        k: usize,
    },
    MeanTokens {
        input: Value,
    },
    Reshape {
        input: Value,
    },
    Permute {
        input: Value,
        axes: Vec<usize>,
    },
    Bmm {
        a: Value,
        b: Value,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    },
    Scale {
        input: Value,
        factor: f64,
    },
    Add {
        a: Value,
        b: Value,
    },
    Mul {
        a: Value,
        b: Value,
    },
    Upsample2x {
        input: Value,
    },
    GlobalAvgPool {
        input: Value,
    },
    CrossEntropy {
        logits: Value,
        targets: Vec<usize>,
    },
    FuseWeighted {
        features: Vec<Value>,
        weights: Value,
    },
    LoadBalance {
        probs: Value,
        col_means: Vec<f64>,
    },
    Project {
        input: Value,
        coeffs: Vec<f64>,
    },
    SumAll {
        input: Value,
    },
}

pub(crate) struct Node {
    pub data: Tensor,
    pub op: Op,
    pub needs_grad: bool,
}

/// Gradients of registered parameters after a backward pass.
#[derive(Debug, Default)]
pub struct GradStore {
    grads: HashMap<ParamId, Vec<f64>>,
}

impl GradStore {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(&id).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Recording tape for one forward (and at most one backward) pass.
pub struct Graph {
    mode: Mode,
    threads: usize,
    nodes: Vec<Node>,
    params: Vec<(ParamId, Value)>,
    param_lookup: HashMap<ParamId, Value>,
    grads: Vec<Option<Vec<f64>>>,
    released: bool,
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self::with_threads(mode, 1)
    }

    /// A graph whose heavy kernels may use up to `threads` worker threads.
    /// Results are bit-identical for every thread count.
    pub fn with_threads(mode: Mode, threads: usize) -> Self {
        Graph {
            mode,
            threads: threads.max(1),
            nodes: Vec::new(),
            params: Vec::new(),
            param_lookup: HashMap::new(),
            grads: Vec::new(),
            released: false,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub(crate) fn push(&mut self, data: Tensor, op: Op, needs_grad: bool) -> Value {
        self.nodes.push(Node {
            data,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Value(self.nodes.len() - 1)
    }

    /// Leaf with no gradient tracking (inputs, fixed tensors).
    pub fn constant(&mut self, t: Tensor) -> Value {
        self.push(t, Op::Leaf, false)
    }

    /// Gradient-tracked leaf not tied to a parameter; its gradient is
    /// readable through [`Graph::grad_of`] after backward.
    pub fn var(&mut self, t: Tensor) -> Value {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a parameter leaf. Repeated registration of the same
    /// parameter returns the existing node so gradients accumulate once.
    pub fn param(&mut self, p: &crate::param::Parameter) -> Value {
        if let Some(&v) = self.param_lookup.get(&p.id()) {
            return v;
        }
        let v = self.push(p.value().clone(), Op::Leaf, true);
        self.params.push((p.id(), v));
        self.param_lookup.insert(p.id(), v);
        v
    }

    pub fn shape_of(&self, v: Value) -> &[usize] {
        self.nodes[v.0].shape()
    }

    pub fn data_of(&self, v: Value) -> &[f64] {
        self.nodes[v.0].data.data()
    }

    /// Clones a node's output out of the graph.
    pub fn detach(&self, v: Value) -> Tensor {
        self.nodes[v.0].data.clone()
    }

    /// Gradient of a leaf created with [`Graph::var`], available after
    /// backward. Interior and parameter gradients are consumed by the pass.
    pub fn grad_of(&self, v: Value) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub(crate) fn node(&self, v: Value) -> &Node {
        &self.nodes[v.0]
    }

    /// Reverse pass from a scalar loss. Gradients of all registered
    /// parameters are accumulated and returned; the graph is then released
    /// and refuses a second pass.
    pub fn backward(&mut self, loss: Value) -> Result<GradStore> {
        if self.released {
            return Err(Error::Autodiff(
                "backward called on a released graph".into(),
            ));
        }
        if self.nodes[loss.0].data.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape()
            )));
        }
        self.released = true;
        self.grads[loss.0] = Some(vec![1.0]);
        self.propagate(loss.0);

        let mut store = GradStore::default();
        for &(pid, v) in &self.params {
            if let Some(g) = self.grads[v.0].take() {
                store.grads.insert(pid, g);
            }
        }
        Ok(store)
    }
}

impl Node {
    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }
}
