//! Small learnable layers shared by the blocks and the U-Net assembly.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::ops::norm::NormKind;
use crate::param::{fan_in_uniform, join, Param, ParamVisit};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor4;

/// Convolution weights plus bias with fixed stride/padding/groups.
pub struct ConvLayer {
    pub w: Param,
    pub b: Param,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvLayer {
    pub fn init(
        rng: &mut ChaCha8Rng,
        out_c: usize,
        in_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Self {
        let fan_in = (in_c / groups) * k * k;
        ConvLayer {
            w: Param::new(fan_in_uniform(rng, [out_c, in_c / groups, k, k], fan_in)),
            b: Param::new(Tensor4::zeros([1, out_c, 1, 1])),
            stride,
            padding,
            groups,
        }
    }

    /// All-zero weights and bias (residual heads, offset predictors).
    pub fn zeros(out_c: usize, in_c: usize, k: usize, stride: usize, padding: usize, groups: usize) -> Self {
        ConvLayer {
            w: Param::new(Tensor4::zeros([out_c, in_c / groups, k, k])),
            b: Param::new(Tensor4::zeros([1, out_c, 1, 1])),
            stride,
            padding,
            groups,
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let w = self.w.bind(tape);
        let b = self.b.bind(tape);
        tape.conv2d(x, w, Some(b), self.stride, self.padding, self.groups)
    }
}

impl ParamVisit for ConvLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

/// Layer or group normalization with learned per-channel affine.
pub struct AffineNorm {
    pub gamma: Param,
    pub beta: Param,
    pub kind: NormKind,
    pub groups: usize,
    pub eps: f64,
}

impl AffineNorm {
    pub fn layer(channels: usize) -> Self {
        AffineNorm {
            gamma: Param::new(Tensor4::ones([1, channels, 1, 1])),
            beta: Param::new(Tensor4::zeros([1, channels, 1, 1])),
            kind: NormKind::Layer,
            groups: 1,
            eps: 1e-5,
        }
    }

    pub fn group(channels: usize, groups: usize) -> Self {
        AffineNorm {
            gamma: Param::new(Tensor4::ones([1, channels, 1, 1])),
            beta: Param::new(Tensor4::zeros([1, channels, 1, 1])),
            kind: NormKind::Group,
            groups,
            eps: 1e-5,
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let gamma = self.gamma.bind(tape);
        let beta = self.beta.bind(tape);
        tape.norm(x, gamma, beta, self.kind, self.groups, self.eps)
    }
}

impl ParamVisit for AffineNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Two pointwise layers around a GELU.
pub struct Mlp {
    pub expand: ConvLayer,
    pub project: ConvLayer,
}

impl Mlp {
    pub fn init(rng: &mut ChaCha8Rng, channels: usize, ratio: usize) -> Self {
        let hidden = channels * ratio;
        Mlp {
            expand: ConvLayer::init(rng, hidden, channels, 1, 1, 0, 1),
            project: ConvLayer::init(rng, channels, hidden, 1, 1, 0, 1),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let h = self.expand.apply(tape, x)?;
        let g = tape.gelu(h)?;
        self.project.apply(tape, g)
    }
}

impl ParamVisit for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.expand.visit(&join(prefix, "fc1"), f);
        self.project.visit(&join(prefix, "fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.expand.visit_mut(&join(prefix, "fc1"), f);
        self.project.visit_mut(&join(prefix, "fc2"), f);
    }
}
