//! Learnable parameter wrapper and initialization helpers.

use std::cell::Cell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Gradients, NodeId, Tape};
use crate::tensor::Tensor4;

/// A trainable tensor. Binding clones the current value onto a tape as a
/// leaf and remembers the node so the gradient can be pulled back after
/// the backward pass.
#[derive(Debug)]
pub struct Param {
    pub value: Tensor4,
    node: Cell<Option<NodeId>>,
}

impl Param {
    pub fn new(mut value: Tensor4) -> Self {
        value.requires_grad = true;
        Param {
            value,
            node: Cell::new(None),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> NodeId {
        let id = tape.leaf(self.value.clone());
        self.node.set(Some(id));
        id
    }

    pub fn bound(&self) -> Option<NodeId> {
        self.node.get()
    }

    /// Copy this parameter's gradient out of a backward result. Parameters
    /// that never influenced the loss get a zero gradient.
    pub fn pull_grad(&mut self, grads: &Gradients) {
        let g = self
            .node
            .get()
            .and_then(|id| grads.get(id))
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; self.value.numel()]);
        self.value.grad = Some(g);
    }

    pub fn clear_binding(&self) {
        self.node.set(None);
    }
}

/// Ordered traversal of a module's learnable parameters. The visit order
/// is fixed by each implementation and shared by the optimizer, the
/// checkpoint writer, and gradient checks.
pub trait ParamVisit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn named_values(&self) -> Vec<(String, Tensor4)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name.to_string(), p.value.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.value.numel());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform(-bound, bound) with bound = 1/sqrt(fan_in); the usual conv init.
pub fn fan_in_uniform(rng: &mut ChaCha8Rng, dims: [usize; 4], fan_in: usize) -> Tensor4 {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let numel: usize = dims.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor4::new(dims, data).expect("init extents")
}

pub fn uniform(rng: &mut ChaCha8Rng, dims: [usize; 4], lo: f64, hi: f64) -> Tensor4 {
    let numel: usize = dims.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor4::new(dims, data).expect("init extents")
}
