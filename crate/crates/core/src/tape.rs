//! Reverse-mode differentiation tape.
//!
//! Every differentiable operation appends one node holding its output
//! value, parent references, and enough attributes to replay the chain
//! rule. Nodes are created in execution order, so walking the tape
//! backwards visits each node exactly once in reverse topological order.
//! Backward accumulation is sequential and index-ordered, which keeps
//! training trajectories bitwise reproducible.

use crate::error::{Error, Result};
use crate::mvgl::{self, TopKMaskSet};
use crate::ops::norm::NormKind;
use crate::ops::{conv, elementwise as ew, layout, matmul, norm, pool, resize, softmax};
use crate::scan::{self, Permutation};
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Constant data for the masked-KL node: the guidance distribution and the
/// renormalized per-mask targets. The learned distribution is the node's
/// parent; the guidance side carries no gradient.
#[derive(Clone, Debug)]
pub struct MaskedKlSpec {
    eps: f64,
    masks: Vec<Vec<u32>>,
    q_masked: Vec<Vec<f64>>,
}

impl MaskedKlSpec {
    pub fn new(q: &[f64], masks: &TopKMaskSet, eps: f64) -> Result<Self> {
        let n = q.len();
        let mut q_masked = Vec::with_capacity(masks.masks.len());
        for idx in &masks.masks {
            if idx.iter().any(|&i| i as usize >= n) {
                return Err(Error::shape("mask index outside distribution".to_string()));
            }
            let z: f64 = idx.iter().map(|&i| q[i as usize]).sum();
            if z <= 0.0 {
                return Err(Error::param(
                    "mask selects zero guidance mass".to_string(),
                ));
            }
            q_masked.push(idx.iter().map(|&i| q[i as usize] / z).collect());
        }
        Ok(MaskedKlSpec {
            eps,
            masks: masks.masks.clone(),
            q_masked,
        })
    }

    fn forward(&self, p: &Tensor4) -> f64 {
        let pd = p.data();
        let mut total = 0.0;
        for (idx, qm) in self.masks.iter().zip(&self.q_masked) {
            let z: f64 = idx.iter().map(|&i| pd[i as usize]).sum();
            let mut kl = 0.0;
            for (t, &i) in idx.iter().enumerate() {
                let pm = pd[i as usize] / z;
                let qv = qm[t];
                kl += qv * (qv.ln() - (pm + self.eps).ln());
            }
            total += kl;
        }
        total
    }

    fn backward(&self, p: &Tensor4, upstream: f64) -> Tensor4 {
        let pd = p.data();
        let mut dp = Tensor4::zeros(p.dims());
        for (idx, qm) in self.masks.iter().zip(&self.q_masked) {
            let z: f64 = idx.iter().map(|&i| pd[i as usize]).sum();
            let mut inner = 0.0;
            for (t, &i) in idx.iter().enumerate() {
                let pm = pd[i as usize] / z;
                inner += qm[t] * pm / (pm + self.eps);
            }
            for (t, &i) in idx.iter().enumerate() {
                let pm = pd[i as usize] / z;
                dp.data_mut()[i as usize] +=
                    upstream * (inner - qm[t] / (pm + self.eps)) / z;
            }
        }
        dp
    }
}

pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Abs,
    // The shift is applied in the forward pass; only the scale matters here.
    Affine { a: f64 },
    Charbonnier { eps: f64 },
    Gelu,
    Sigmoid,
    Clamp01,
    Conv2d { stride: usize, padding: usize, groups: usize, has_bias: bool },
    ConvDynamic { padding: usize },
    KernelMix,
    Norm { kind: NormKind, groups: usize, eps: f64 },
    SoftmaxLast,
    BilinearResize,
    MatmulNT,
    MatmulNN,
    AdaptiveAvgPool,
    PadReflect { pads: [usize; 4] },
    Crop { top: usize, left: usize },
    SliceChannels { start: usize },
    ConcatChannels,
    SliceItem { index: usize },
    Reshape,
    TokensFromImage,
    ImageFromTokens,
    WindowPartition { ws: usize },
    WindowMerge { ws: usize },
    GatherPixels { perms: Vec<Permutation> },
    ScatterPixels { perms: Vec<Permutation> },
    SsmScan,
    SoftSplat { k: usize },
    MaskedKl { spec: MaskedKlSpec },
    MeanAll,
    SumAll,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Abs => "abs",
            Op::Affine { .. } => "affine",
            Op::Charbonnier { .. } => "charbonnier",
            Op::Gelu => "gelu",
            Op::Sigmoid => "sigmoid",
            Op::Clamp01 => "clamp01",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvDynamic { .. } => "conv_dynamic",
            Op::KernelMix => "kernel_mix",
            Op::Norm { .. } => "norm",
            Op::SoftmaxLast => "softmax",
            Op::BilinearResize => "bilinear_resize",
            Op::MatmulNT => "matmul_nt",
            Op::MatmulNN => "matmul",
            Op::AdaptiveAvgPool => "adaptive_avg_pool",
            Op::PadReflect { .. } => "pad_reflect",
            Op::Crop { .. } => "crop",
            Op::SliceChannels { .. } => "slice_channels",
            Op::ConcatChannels => "concat_channels",
            Op::SliceItem { .. } => "slice_item",
            Op::Reshape => "reshape",
            Op::TokensFromImage => "tokens_from_image",
            Op::ImageFromTokens => "image_from_tokens",
            Op::WindowPartition { .. } => "window_partition",
            Op::WindowMerge { .. } => "window_merge",
            Op::GatherPixels { .. } => "gather_pixels",
            Op::ScatterPixels { .. } => "scatter_pixels",
            Op::SsmScan => "ssm_scan",
            Op::SoftSplat { .. } => "soft_splat",
            Op::MaskedKl { .. } => "masked_kl",
            Op::MeanAll => "mean_all",
            Op::SumAll => "sum_all",
        }
    }
}

struct Node {
    value: Tensor4,
    parents: Vec<NodeId>,
    op: Op,
    needs_grad: bool,
}

/// Gradients per tape node after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor4>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor4> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor4 {
        &self.nodes[id.0].value
    }

    /// A leaf participating in differentiation if its tensor requires grad.
    pub fn leaf(&mut self, value: Tensor4) -> NodeId {
        let needs = value.requires_grad;
        self.push_unchecked(value, vec![], Op::Leaf, needs)
    }

    /// A leaf that never receives gradients (fixed kernels, targets).
    pub fn constant(&mut self, mut value: Tensor4) -> NodeId {
        value.requires_grad = false;
        self.push_unchecked(value, vec![], Op::Leaf, false)
    }

    fn push_unchecked(
        &mut self,
        value: Tensor4,
        parents: Vec<NodeId>,
        op: Op,
        needs_grad: bool,
    ) -> NodeId {
        self.nodes.push(Node {
            value,
            parents,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor4, parents: Vec<NodeId>, op: Op) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::numeric(format!(
                "non-finite values produced by `{}`",
                op.name()
            )));
        }
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push_unchecked(value, parents, op, needs))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        ew::check_same_dims(self.value(a), self.value(b), "add")?;
        let v = ew::binary(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, vec![a, b], Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        ew::check_same_dims(self.value(a), self.value(b), "sub")?;
        let v = ew::binary(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, vec![a, b], Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        ew::check_same_dims(self.value(a), self.value(b), "mul")?;
        let v = ew::binary(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, vec![a, b], Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        ew::check_same_dims(self.value(a), self.value(b), "div")?;
        let v = ew::binary(self.value(a), self.value(b), |x, y| x / y);
        self.push(v, vec![a, b], Op::Div)
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(f64::abs);
        self.push(v, vec![x], Op::Abs)
    }

    /// a * x + b, elementwise with scalar coefficients.
    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> Result<NodeId> {
        let v = self.value(x).map(|t| a * t + b);
        self.push(v, vec![x], Op::Affine { a })
    }

    pub fn charbonnier(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::param(format!("charbonnier eps must be positive, got {eps}")));
        }
        let v = self.value(x).map(|t| (t * t + eps * eps).sqrt());
        self.push(v, vec![x], Op::Charbonnier { eps })
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(ew::gelu);
        self.push(v, vec![x], Op::Gelu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(ew::sigmoid);
        self.push(v, vec![x], Op::Sigmoid)
    }

    pub fn clamp01(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|t| t.clamp(0.0, 1.0));
        self.push(v, vec![x], Op::Clamp01)
    }

    // ---- structured ops ----

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<NodeId> {
        if stride == 0 {
            return Err(Error::param("stride must be at least 1".to_string()));
        }
        let v = conv::forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            padding,
            groups,
        )?;
        let mut parents = vec![x, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        self.push(
            v,
            parents,
            Op::Conv2d {
                stride,
                padding,
                groups,
                has_bias: bias.is_some(),
            },
        )
    }

    /// Depthwise convolution with a per-sample kernel tensor (B,C,kh,kw).
    pub fn conv_dynamic(&mut self, x: NodeId, w: NodeId, padding: usize) -> Result<NodeId> {
        let v = conv::dynamic_forward(self.value(x), self.value(w), padding)?;
        self.push(v, vec![x, w], Op::ConvDynamic { padding })
    }

    /// Mix expert kernel banks with per-sample attention weights.
    pub fn kernel_mix(&mut self, att: NodeId, banks: NodeId) -> Result<NodeId> {
        let v = conv::kernel_mix_forward(self.value(att), self.value(banks))?;
        self.push(v, vec![att, banks], Op::KernelMix)
    }

    pub fn norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        kind: NormKind,
        groups: usize,
        eps: f64,
    ) -> Result<NodeId> {
        let v = norm::forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            kind,
            groups,
            eps,
        )?;
        self.push(v, vec![x, gamma, beta], Op::Norm { kind, groups, eps })
    }

    /// Softmax over the last axis of every row.
    pub fn softmax_last(&mut self, x: NodeId) -> Result<NodeId> {
        let v = softmax::forward(self.value(x));
        self.push(v, vec![x], Op::SoftmaxLast)
    }

    /// softmax(x / T): the temperature-scaled form used throughout.
    pub fn softmax_temp(&mut self, x: NodeId, t: f64) -> Result<NodeId> {
        if t <= 0.0 {
            return Err(Error::param(format!("temperature must be positive, got {t}")));
        }
        let scaled = self.affine(x, 1.0 / t, 0.0)?;
        self.softmax_last(scaled)
    }

    pub fn bilinear_resize(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        if oh == 0 || ow == 0 {
            return Err(Error::param("resize extents must be at least 1".to_string()));
        }
        let v = resize::forward(self.value(x), oh, ow);
        self.push(v, vec![x], Op::BilinearResize)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul::nt_forward(self.value(a), self.value(b))?;
        self.push(v, vec![a, b], Op::MatmulNT)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul::nn_forward(self.value(a), self.value(b))?;
        self.push(v, vec![a, b], Op::MatmulNN)
    }

    /// Scaled dot-product attention over token matrices (B,G,N,D).
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, scale: f64) -> Result<NodeId> {
        let scores = self.matmul_nt(q, k)?;
        let scaled = self.affine(scores, scale, 0.0)?;
        let probs = self.softmax_last(scaled)?;
        self.matmul(probs, v)
    }

    pub fn adaptive_avg_pool(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        if oh == 0 || ow == 0 {
            return Err(Error::param("pool extents must be at least 1".to_string()));
        }
        let v = pool::forward(self.value(x), oh, ow);
        self.push(v, vec![x], Op::AdaptiveAvgPool)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.adaptive_avg_pool(x, 1, 1)
    }

    pub fn pad_reflect(&mut self, x: NodeId, pads: [usize; 4]) -> Result<NodeId> {
        if pads == [0, 0, 0, 0] {
            return Ok(x);
        }
        layout::validate_reflect(self.value(x), pads)?;
        let v = layout::pad_reflect_forward(self.value(x), pads);
        self.push(v, vec![x], Op::PadReflect { pads })
    }

    pub fn crop(&mut self, x: NodeId, top: usize, left: usize, oh: usize, ow: usize) -> Result<NodeId> {
        let [_, _, h, w] = self.value(x).dims();
        if top == 0 && left == 0 && oh == h && ow == w {
            return Ok(x);
        }
        let v = layout::crop_forward(self.value(x), top, left, oh, ow)?;
        self.push(v, vec![x], Op::Crop { top, left })
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, count: usize) -> Result<NodeId> {
        let v = layout::slice_channels_forward(self.value(x), start, count)?;
        self.push(v, vec![x], Op::SliceChannels { start })
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = layout::concat_channels_forward(self.value(a), self.value(b))?;
        self.push(v, vec![a, b], Op::ConcatChannels)
    }

    pub fn slice_item(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let v = layout::slice_item_forward(self.value(x), index)?;
        self.push(v, vec![x], Op::SliceItem { index })
    }

    pub fn reshape(&mut self, x: NodeId, dims: [usize; 4]) -> Result<NodeId> {
        let v = self.value(x).reshaped(dims)?;
        self.push(v, vec![x], Op::Reshape)
    }

    pub fn tokens_from_image(&mut self, x: NodeId) -> Result<NodeId> {
        let v = layout::tokens_from_image_forward(self.value(x));
        self.push(v, vec![x], Op::TokensFromImage)
    }

    pub fn image_from_tokens(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let v = layout::image_from_tokens_forward(self.value(x), h, w)?;
        self.push(v, vec![x], Op::ImageFromTokens)
    }

    pub fn window_partition(&mut self, x: NodeId, ws: usize) -> Result<NodeId> {
        let v = layout::window_partition_forward(self.value(x), ws)?;
        self.push(v, vec![x], Op::WindowPartition { ws })
    }

    pub fn window_merge(&mut self, x: NodeId, ws: usize, h: usize, w: usize) -> Result<NodeId> {
        let v = layout::window_merge_forward(self.value(x), ws, h, w)?;
        self.push(v, vec![x], Op::WindowMerge { ws })
    }

    pub fn gather_pixels(&mut self, x: NodeId, perms: Vec<Permutation>) -> Result<NodeId> {
        let v = scan::gather_forward(self.value(x), &perms)?;
        self.push(v, vec![x], Op::GatherPixels { perms })
    }

    pub fn scatter_pixels(
        &mut self,
        y: NodeId,
        perms: Vec<Permutation>,
        h: usize,
        w: usize,
    ) -> Result<NodeId> {
        let v = scan::scatter_forward(self.value(y), &perms, h, w)?;
        self.push(v, vec![y], Op::ScatterPixels { perms })
    }

    /// Diagonal state recurrence along the sequence axis of (B,1,N,C).
    pub fn ssm_scan(
        &mut self,
        xseq: NodeId,
        a_raw: NodeId,
        input_proj: NodeId,
        output_proj: NodeId,
        skip: NodeId,
    ) -> Result<NodeId> {
        let v = scan::ssm_forward(
            self.value(xseq),
            self.value(a_raw),
            self.value(input_proj),
            self.value(output_proj),
            self.value(skip),
        )?;
        self.push(
            v,
            vec![xseq, a_raw, input_proj, output_proj, skip],
            Op::SsmScan,
        )
    }

    /// Bilinear splat of k^2 predicted samples per pixel into (B,1,H,W).
    pub fn soft_splat(&mut self, offsets: NodeId, k: usize) -> Result<NodeId> {
        let v = mvgl::soft_splat_forward(self.value(offsets), k)?;
        self.push(v, vec![offsets], Op::SoftSplat { k })
    }

    /// Masked KL against a constant guidance distribution; input must be a
    /// flat probability row (1,1,1,N).
    pub fn masked_kl(&mut self, p: NodeId, spec: MaskedKlSpec) -> Result<NodeId> {
        let dims = self.value(p).dims();
        if dims[0] != 1 || dims[1] != 1 || dims[2] != 1 {
            return Err(Error::shape(format!(
                "masked_kl expects a flat (1,1,1,N) row, found {dims:?}"
            )));
        }
        let v = Tensor4::scalar_tensor(spec.forward(self.value(p)));
        self.push(v, vec![p], Op::MaskedKl { spec })
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let v = Tensor4::scalar_tensor(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push(v, vec![x], Op::MeanAll)
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor4::scalar_tensor(self.value(x).data().iter().sum::<f64>());
        self.push(v, vec![x], Op::SumAll)
    }

    /// Mean of a list of scalar nodes.
    pub fn mean_of(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::param("mean of empty node list".to_string()));
        }
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x)?;
        }
        self.affine(acc, 1.0 / xs.len() as f64, 0.0)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Returns per-node gradients for
    /// leaves that require them.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape(format!(
                "backward root must be scalar, found {:?}",
                self.value(root).dims()
            )));
        }
        let mut grads: Vec<Option<Tensor4>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor4::scalar_tensor(1.0));
        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.parents.is_empty() {
                let pgrads = self.backward_step(id, &g)?;
                for (pid, pg) in node.parents.iter().zip(pgrads) {
                    if !self.nodes[pid.0].needs_grad {
                        continue;
                    }
                    match grads[pid.0].as_mut() {
                        Some(acc) => acc.add_assign(&pg)?,
                        None => grads[pid.0] = Some(pg),
                    }
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_step(&self, id: usize, g: &Tensor4) -> Result<Vec<Tensor4>> {
        let node = &self.nodes[id];
        let pv = |i: usize| &self.nodes[node.parents[i].0].value;
        let out = &node.value;
        let grads: Vec<Tensor4> = match &node.op {
            Op::Leaf => vec![],
            Op::Add => vec![g.clone(), g.clone()],
            Op::Sub => vec![g.clone(), g.map(|v| -v)],
            Op::Mul => vec![
                ew::binary(g, pv(1), |gv, y| gv * y),
                ew::binary(g, pv(0), |gv, x| gv * x),
            ],
            Op::Div => {
                let da = ew::binary(g, pv(1), |gv, y| gv / y);
                let tmp = ew::binary(g, out, |gv, o| gv * o);
                let db = ew::binary(&tmp, pv(1), |t, y| -t / y);
                vec![da, db]
            }
            Op::Abs => vec![ew::binary(g, pv(0), |gv, x| {
                if x > 0.0 {
                    gv
                } else if x < 0.0 {
                    -gv
                } else {
                    0.0
                }
            })],
            Op::Affine { a } => vec![g.map(|v| v * a)],
            Op::Charbonnier { eps } => vec![ew::binary(g, pv(0), |gv, x| {
                gv * x / (x * x + eps * eps).sqrt()
            })],
            Op::Gelu => vec![ew::binary(g, pv(0), |gv, x| gv * ew::gelu_deriv(x))],
            Op::Sigmoid => vec![ew::binary(g, out, |gv, y| gv * y * (1.0 - y))],
            Op::Clamp01 => vec![ew::binary(g, pv(0), |gv, x| {
                if (0.0..=1.0).contains(&x) {
                    gv
                } else {
                    0.0
                }
            })],
            Op::Conv2d {
                stride,
                padding,
                groups,
                has_bias,
            } => {
                let (dx, dw, db) =
                    conv::backward(pv(0), pv(1), *has_bias, *stride, *padding, *groups, g);
                let mut v = vec![dx, dw];
                if let Some(db) = db {
                    v.push(db);
                }
                v
            }
            Op::ConvDynamic { padding } => {
                let (dx, dw) = conv::dynamic_backward(pv(0), pv(1), *padding, g);
                vec![dx, dw]
            }
            Op::KernelMix => {
                let (da, db) = conv::kernel_mix_backward(pv(0), pv(1), g);
                vec![da, db]
            }
            Op::Norm { kind, groups, eps } => {
                let (dx, dgamma, dbeta) = norm::backward(pv(0), pv(1), *kind, *groups, *eps, g);
                vec![dx, dgamma, dbeta]
            }
            Op::SoftmaxLast => vec![softmax::backward(out, g)],
            Op::BilinearResize => vec![resize::backward(pv(0).dims(), g)],
            Op::MatmulNT => {
                let (da, db) = matmul::nt_backward(pv(0), pv(1), g);
                vec![da, db]
            }
            Op::MatmulNN => {
                let (da, db) = matmul::nn_backward(pv(0), pv(1), g);
                vec![da, db]
            }
            Op::AdaptiveAvgPool => vec![pool::backward(pv(0).dims(), g)],
            Op::PadReflect { pads } => vec![layout::pad_reflect_backward(pv(0).dims(), *pads, g)],
            Op::Crop { top, left } => vec![layout::crop_backward(pv(0).dims(), *top, *left, g)],
            Op::SliceChannels { start } => {
                vec![layout::slice_channels_backward(pv(0).dims(), *start, g)]
            }
            Op::ConcatChannels => {
                let (da, db) =
                    layout::concat_channels_backward(pv(0).channels(), pv(1).channels(), g);
                vec![da, db]
            }
            Op::SliceItem { index } => vec![layout::slice_item_backward(pv(0).dims(), *index, g)],
            Op::Reshape => vec![g.reshaped(pv(0).dims())?],
            Op::TokensFromImage => {
                let [_, _, h, w] = pv(0).dims();
                vec![layout::image_from_tokens_forward(g, h, w)?]
            }
            Op::ImageFromTokens => vec![layout::tokens_from_image_forward(g)],
            Op::WindowPartition { ws } => {
                let [_, _, h, w] = pv(0).dims();
                vec![layout::window_merge_forward(g, *ws, h, w)?]
            }
            Op::WindowMerge { ws } => vec![layout::window_partition_forward(g, *ws)?],
            Op::GatherPixels { perms } => vec![scan::gather_backward(pv(0).dims(), perms, g)],
            Op::ScatterPixels { perms } => vec![scan::scatter_backward(pv(0).dims(), perms, g)],
            Op::SsmScan => {
                let (dx, da, db, dc, dd) =
                    scan::ssm_backward(pv(0), pv(1), pv(2), pv(3), pv(4), g);
                vec![dx, da, db, dc, dd]
            }
            Op::SoftSplat { k } => vec![mvgl::soft_splat_backward(pv(0), *k, g)],
            Op::MaskedKl { spec } => vec![spec.backward(pv(0), g.scalar()?)],
            Op::MeanAll => {
                let n = pv(0).numel() as f64;
                vec![Tensor4::full(pv(0).dims(), g.scalar()? / n)]
            }
            Op::SumAll => vec![Tensor4::full(pv(0).dims(), g.scalar()?)],
        };
        for t in &grads {
            if !t.all_finite() {
                return Err(Error::numeric(format!(
                    "non-finite gradient produced by `{}`",
                    node.op.name()
                )));
            }
        }
        Ok(grads)
    }
}
