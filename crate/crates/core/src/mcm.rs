//! The Mamba-Conv mixer block: pre-norm residual layout around a dual-path
//! mixer (value-reordered scan on one channel half, grouped dynamic
//! convolution on the other) and a pointwise MLP.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{AffineNorm, ConvLayer, Mlp};
use crate::mvgl::{self, OffsetHead, PriorMap};
use crate::param::{fan_in_uniform, join, uniform, Param, ParamVisit};
use crate::scan::{self, Direction, ScanParams};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor4;

/// How the scan path obtains its visiting order and training guidance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuideMode {
    /// Top-k masked multi-granularity KL against the upsampled prior.
    Mvgl,
    /// Rank pixels directly by the upsampled prior during training;
    /// no guidance loss.
    RankPrior,
    /// Unmasked KL on the prior's native lattice after pooling S.
    PooledKl,
    /// Unmasked KL at full feature resolution.
    FullKl,
    /// No guidance at all.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanOrder {
    /// Descending value priority (the default).
    ValueDesc,
    /// Ascending value order (reversed-flow ablation).
    ValueAsc,
    /// Conventional four-direction raster baseline.
    FourWay,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockConfig {
    pub channels: usize,
    pub mlp_ratio: usize,
    pub d_state: usize,
    pub k: usize,
    pub groups: usize,
    pub reduction: usize,
    pub fusion_groups: usize,
    pub use_scan: bool,
    pub use_conv: bool,
    pub dynamic_kernels: bool,
    pub scan_order: ScanOrder,
    pub guide: GuideMode,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.use_scan && !self.use_conv {
            return Err(Error::param("block must keep at least one mixer path".to_string()));
        }
        if self.use_scan && self.use_conv && self.channels % 2 != 0 {
            return Err(Error::param(format!(
                "dual-path block needs an even channel count, got {}",
                self.channels
            )));
        }
        if self.use_conv {
            let c2 = self.conv_width();
            if self.reduction == 0 || c2 % self.reduction != 0 {
                return Err(Error::param(format!(
                    "conv path width {c2} not divisible by reduction {}",
                    self.reduction
                )));
            }
            if self.groups == 0 {
                return Err(Error::param("kernel bank needs at least one expert".to_string()));
            }
        }
        if self.use_scan && self.use_conv && self.channels % self.fusion_groups != 0 {
            return Err(Error::param(format!(
                "fusion GroupNorm groups {} do not divide {} channels",
                self.fusion_groups, self.channels
            )));
        }
        if self.k == 0 || self.d_state == 0 || self.mlp_ratio == 0 {
            return Err(Error::param("k, d_state and mlp_ratio must be at least 1".to_string()));
        }
        Ok(())
    }

    /// Channel width seen by the scan path (full width when it is alone).
    pub fn scan_width(&self) -> usize {
        if self.use_conv {
            self.channels / 2
        } else {
            self.channels
        }
    }

    pub fn conv_width(&self) -> usize {
        if self.use_scan {
            self.channels / 2
        } else {
            self.channels
        }
    }
}

/// Grouped dynamic convolution: G expert depthwise kernels mixed by
/// softmax attention over pooled channel statistics.
pub struct ConvPath {
    /// Expert kernels, (G, C2, 3, 3).
    pub banks: Param,
    att_reduce: ConvLayer,
    att_expand: ConvLayer,
    width: usize,
    groups: usize,
    dynamic: bool,
}

impl ConvPath {
    fn init(rng: &mut ChaCha8Rng, cfg: &BlockConfig) -> Self {
        let c2 = cfg.conv_width();
        ConvPath {
            banks: Param::new(fan_in_uniform(rng, [cfg.groups, c2, 3, 3], 9)),
            att_reduce: ConvLayer::init(rng, c2 / cfg.reduction, c2, 1, 1, 0, 1),
            att_expand: ConvLayer::init(rng, cfg.groups * c2, c2 / cfg.reduction, 1, 1, 0, 1),
            width: c2,
            groups: cfg.groups,
            dynamic: cfg.dynamic_kernels,
        }
    }

    /// Per-sample mixed kernel W = sum_i P_i * A_i, shape (B, C2, 3, 3).
    ///
    /// The expanded attention channels are laid out channel-major
    /// (channel c's G logits are contiguous) so the reshape to
    /// (B, C2, 1, G) is a pure view.
    pub fn dynamic_kernel(&self, tape: &mut Tape, x2: NodeId) -> Result<NodeId> {
        let batch = tape.value(x2).batch();
        let pooled = tape.global_avg_pool(x2)?;
        let a1 = self.att_reduce.apply(tape, pooled)?;
        let a2 = self.att_expand.apply(tape, a1)?;
        let logits = tape.reshape(a2, [batch, self.width, 1, self.groups])?;
        let att = tape.softmax_last(logits)?;
        let banks = self.banks.bind(tape);
        tape.kernel_mix(att, banks)
    }

    pub fn forward(&self, tape: &mut Tape, x2: NodeId) -> Result<NodeId> {
        if self.dynamic {
            let w = self.dynamic_kernel(tape, x2)?;
            tape.conv_dynamic(x2, w, 1)
        } else {
            // Static ablation: depthwise conv with the first expert bank.
            let banks = self.banks.bind(tape);
            let first = tape.slice_item(banks, 0)?;
            let w = tape.reshape(first, [self.width, 1, 3, 3])?;
            tape.conv2d(x2, w, None, 1, 1, self.width)
        }
    }
}

impl ParamVisit for ConvPath {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "banks"), &self.banks);
        self.att_reduce.visit(&join(prefix, "att1"), f);
        self.att_expand.visit(&join(prefix, "att2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "banks"), &mut self.banks);
        self.att_reduce.visit_mut(&join(prefix, "att1"), f);
        self.att_expand.visit_mut(&join(prefix, "att2"), f);
    }
}

/// Channel fusion head: depthwise 3x3, then two pointwise layers each
/// followed by GroupNorm and GELU, with the concatenated input added back.
pub struct FusionUnit {
    dw: ConvLayer,
    pw1: ConvLayer,
    gn1: AffineNorm,
    pw2: ConvLayer,
    gn2: AffineNorm,
}

impl FusionUnit {
    fn init(rng: &mut ChaCha8Rng, channels: usize, gn_groups: usize) -> Self {
        FusionUnit {
            dw: ConvLayer::init(rng, channels, channels, 3, 1, 1, channels),
            pw1: ConvLayer::init(rng, channels, channels, 1, 1, 0, 1),
            gn1: AffineNorm::group(channels, gn_groups),
            pw2: ConvLayer::init(rng, channels, channels, 1, 1, 0, 1),
            gn2: AffineNorm::group(channels, gn_groups),
        }
    }

    pub fn apply(&self, tape: &mut Tape, f_g: NodeId, f_l: NodeId) -> Result<NodeId> {
        let cat = tape.concat_channels(f_g, f_l)?;
        let mut t = self.dw.apply(tape, cat)?;
        t = self.pw1.apply(tape, t)?;
        t = self.gn1.apply(tape, t)?;
        t = tape.gelu(t)?;
        t = self.pw2.apply(tape, t)?;
        t = self.gn2.apply(tape, t)?;
        t = tape.gelu(t)?;
        tape.add(t, cat)
    }
}

impl ParamVisit for FusionUnit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.dw.visit(&join(prefix, "dw"), f);
        self.pw1.visit(&join(prefix, "pw1"), f);
        self.gn1.visit(&join(prefix, "gn1"), f);
        self.pw2.visit(&join(prefix, "pw2"), f);
        self.gn2.visit(&join(prefix, "gn2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.dw.visit_mut(&join(prefix, "dw"), f);
        self.pw1.visit_mut(&join(prefix, "pw1"), f);
        self.gn1.visit_mut(&join(prefix, "gn1"), f);
        self.pw2.visit_mut(&join(prefix, "pw2"), f);
        self.gn2.visit_mut(&join(prefix, "gn2"), f);
    }
}

/// The reordering scan path with its offset predictor and recurrence
/// parameters.
pub struct ScanPath {
    pub offset_head: OffsetHead,
    pub scan: ScanParams,
}

impl ScanPath {
    fn init(rng: &mut ChaCha8Rng, width: usize, d_state: usize, k: usize) -> Self {
        let bound = 1.0 / (d_state as f64).sqrt();
        ScanPath {
            offset_head: OffsetHead {
                depthwise: Param::new(fan_in_uniform(rng, [width, 1, 3, 3], 9)),
                depthwise_bias: Param::new(Tensor4::zeros([1, width, 1, 1])),
                // Zero pointwise head: offsets start at zero, so the initial
                // frequency map is the identity sampling (all ones).
                pointwise: Param::new(Tensor4::zeros([2 * k * k, width, 1, 1])),
                pointwise_bias: Param::new(Tensor4::zeros([1, 2 * k * k, 1, 1])),
                k,
            },
            scan: ScanParams {
                a_raw: Param::new(uniform(rng, [width, d_state, 1, 1], -0.5, 1.5)),
                input_proj: Param::new(uniform(rng, [width, d_state, 1, 1], -bound, bound)),
                output_proj: Param::new(uniform(rng, [width, d_state, 1, 1], -bound, bound)),
                skip: Param::new(Tensor4::ones([width, 1, 1, 1])),
                d_state,
            },
        }
    }
}

impl ParamVisit for ScanPath {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.offset_head.visit(prefix, f);
        self.scan.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.offset_head.visit_mut(prefix, f);
        self.scan.visit_mut(prefix, f);
    }
}

/// Forward mode. Inference carries no prior information at all; the type
/// makes it impossible for the enhancement path to consult one.
#[derive(Clone, Copy)]
pub enum Mode<'a> {
    Inference,
    Train {
        /// One prior per batch item.
        priors: &'a [PriorMap],
        temperature: f64,
        ratios: &'a [f64],
    },
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Side results of a block forward.
#[derive(Default)]
pub struct BlockAux {
    /// Averaged guidance term for this block, when one was produced.
    pub mvgl_term: Option<NodeId>,
    /// The value map that drove reordering (detached).
    pub value_map: Option<Tensor4>,
}

pub struct McmBlock {
    pub cfg: BlockConfig,
    norm1: AffineNorm,
    scan_path: Option<ScanPath>,
    conv_path: Option<ConvPath>,
    fuse: Option<FusionUnit>,
    norm2: AffineNorm,
    mlp: Mlp,
}

impl McmBlock {
    pub fn init(rng: &mut ChaCha8Rng, cfg: BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let scan_path = cfg
            .use_scan
            .then(|| ScanPath::init(rng, cfg.scan_width(), cfg.d_state, cfg.k));
        let conv_path = cfg.use_conv.then(|| ConvPath::init(rng, &cfg));
        let fuse = (cfg.use_scan && cfg.use_conv)
            .then(|| FusionUnit::init(rng, cfg.channels, cfg.fusion_groups));
        Ok(McmBlock {
            norm1: AffineNorm::layer(cfg.channels),
            scan_path,
            conv_path,
            fuse,
            norm2: AffineNorm::layer(cfg.channels),
            mlp: Mlp::init(rng, cfg.channels, cfg.mlp_ratio),
            cfg,
        })
    }

    fn scan_forward(&self, tape: &mut Tape, x1: NodeId, mode: Mode<'_>) -> Result<(NodeId, BlockAux)> {
        let path = self.scan_path.as_ref().expect("scan path present");
        if self.cfg.scan_order == ScanOrder::FourWay {
            let y = scan::four_way_scan(tape, x1, &path.scan)?;
            return Ok((y, BlockAux::default()));
        }
        let offsets = path.offset_head.predict(tape, x1)?;
        let s = tape.soft_splat(offsets, self.cfg.k)?;
        let frequencies = tape.value(s).clone();
        let [batch, _, h, w] = frequencies.dims();

        let mut aux = BlockAux::default();
        if let Mode::Train {
            priors,
            temperature,
            ratios,
        } = mode
        {
            if priors.len() != batch {
                return Err(Error::param(format!(
                    "{} priors supplied for a batch of {batch}",
                    priors.len()
                )));
            }
            let mut terms = Vec::new();
            for (b, prior) in priors.iter().enumerate() {
                let item = tape.slice_item(s, b)?;
                let term = match self.cfg.guide {
                    GuideMode::Mvgl => Some(mvgl::mvgl_loss(tape, item, prior, temperature, ratios)?),
                    GuideMode::FullKl => {
                        Some(mvgl::mvgl_loss(tape, item, prior, temperature, &[1.0])?)
                    }
                    GuideMode::PooledKl => {
                        Some(mvgl::pooled_kl_loss(tape, item, prior, temperature)?)
                    }
                    GuideMode::RankPrior | GuideMode::None => None,
                };
                if let Some(t) = term {
                    terms.push(t);
                }
            }
            if !terms.is_empty() {
                aux.mvgl_term = Some(tape.mean_of(&terms)?);
            }
        }

        // Ranking values: the frequency statistics, except for the
        // prior-ranking ablation which orders by the lifted prior during
        // training.
        let values = match (self.cfg.guide, mode) {
            (GuideMode::RankPrior, Mode::Train { priors, .. }) => {
                let mut v = Tensor4::zeros([batch, 1, h, w]);
                for (b, prior) in priors.iter().enumerate() {
                    let up = prior.upsampled(h, w);
                    let base = b * h * w;
                    v.data_mut()[base..base + h * w].copy_from_slice(&up);
                }
                v
            }
            _ => frequencies,
        };
        let direction = match self.cfg.scan_order {
            ScanOrder::ValueAsc => Direction::Reversed,
            _ => Direction::Forward,
        };
        let y = scan::reordered_scan(tape, x1, &values, &path.scan, direction)?;
        aux.value_map = Some(values);
        Ok((y, aux))
    }

    /// Pre-norm residual block: x + Mixer(LN(x)), then + MLP(LN(.)).
    pub fn forward(&self, tape: &mut Tape, x: NodeId, mode: Mode<'_>) -> Result<(NodeId, BlockAux)> {
        let c = self.cfg.channels;
        if tape.value(x).channels() != c {
            return Err(Error::shape(format!(
                "block expects {c} channels, found {}",
                tape.value(x).channels()
            )));
        }
        let ln1 = self.norm1.apply(tape, x)?;
        let (mixer, aux) = match (&self.scan_path, &self.conv_path) {
            (Some(_), Some(conv)) => {
                let half = c / 2;
                let x1 = tape.slice_channels(ln1, 0, half)?;
                let x2 = tape.slice_channels(ln1, half, half)?;
                let (f_g, aux) = self.scan_forward(tape, x1, mode)?;
                let f_l = conv.forward(tape, x2)?;
                let fused = self.fuse.as_ref().expect("fusion present").apply(tape, f_g, f_l)?;
                (fused, aux)
            }
            (Some(_), None) => self.scan_forward(tape, ln1, mode)?,
            (None, Some(conv)) => (conv.forward(tape, ln1)?, BlockAux::default()),
            (None, None) => unreachable!("validated config"),
        };
        let y1 = tape.add(x, mixer)?;
        let ln2 = self.norm2.apply(tape, y1)?;
        let m = self.mlp.apply(tape, ln2)?;
        let y = tape.add(y1, m)?;
        Ok((y, aux))
    }

    /// Force every learnable tensor to zero (tests of the residual layout).
    pub fn zero_all(&mut self) {
        self.visit_mut("", &mut |_, p| {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        });
    }
}

impl ParamVisit for McmBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        if let Some(sp) = &self.scan_path {
            sp.visit(&join(prefix, "scan"), f);
        }
        if let Some(cp) = &self.conv_path {
            cp.visit(&join(prefix, "dyn"), f);
        }
        if let Some(fu) = &self.fuse {
            fu.visit(&join(prefix, "fuse"), f);
        }
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        if let Some(sp) = &mut self.scan_path {
            sp.visit_mut(&join(prefix, "scan"), f);
        }
        if let Some(cp) = &mut self.conv_path {
            cp.visit_mut(&join(prefix, "dyn"), f);
        }
        if let Some(fu) = &mut self.fuse {
            fu.visit_mut(&join(prefix, "fuse"), f);
        }
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}
