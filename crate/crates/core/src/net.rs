//! U-Net assembly: three encoder scales with stride-2 downsampling,
//! a bottleneck, bridged skip connections, and a zero-initialized head
//! added back to the input as a global residual.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cfb::{Bridge, BridgeConfig};
use crate::error::{Error, Result};
use crate::layers::ConvLayer;
use crate::loss::LossWeights;
use crate::mcm::{BlockConfig, GuideMode, McmBlock, Mode, ScanOrder};
use crate::mvgl::PriorMap;
use crate::param::{join, Param, ParamVisit};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor4;

/// Spatial downsampling factor of the full net (three stride-2 stages).
pub const SCALE_FACTOR: usize = 8;
/// Stage count: three encoder scales, bottleneck, three decoder scales.
pub const STAGES: usize = 7;

/// Per-stage, per-batch-item guidance priors. The default assigns one
/// source everywhere; stage overrides allow external files per scale.
#[derive(Clone, Debug)]
pub struct PriorSet {
    per_stage: Vec<Vec<PriorMap>>,
}

impl PriorSet {
    /// The same per-item priors at every stage.
    pub fn uniform(items: Vec<PriorMap>) -> Self {
        PriorSet {
            per_stage: (0..STAGES).map(|_| items.clone()).collect(),
        }
    }

    pub fn set_stage(&mut self, stage: usize, items: Vec<PriorMap>) -> Result<()> {
        if stage >= STAGES {
            return Err(Error::param(format!("stage {stage} outside 0..{STAGES}")));
        }
        self.per_stage[stage] = items;
        Ok(())
    }

    pub fn stage(&self, stage: usize) -> &[PriorMap] {
        &self.per_stage[stage]
    }
}

/// Forward mode at the network level. Inference admits no prior data by
/// construction.
pub enum NetMode<'a> {
    Inference,
    Train {
        priors: &'a PriorSet,
        temperature: f64,
    },
}

#[derive(Clone, Debug)]
pub struct NetConfig {
    pub base_channels: usize,
    pub enc_depths: [usize; 3],
    pub bottleneck_depth: usize,
    pub dec_depths: [usize; 3],
    pub d_state: usize,
    pub groups: usize,
    pub reduction: usize,
    pub k: usize,
    pub mlp_ratio: usize,
    pub window: usize,
    pub fusion_groups: usize,
    pub use_scan: bool,
    pub use_conv: bool,
    pub use_cfb: bool,
    pub dynamic_kernels: bool,
    pub scan_order: ScanOrder,
    pub guide: GuideMode,
    pub ratios: Vec<f64>,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            base_channels: 32,
            enc_depths: [2, 2, 2],
            bottleneck_depth: 2,
            dec_depths: [2, 2, 2],
            d_state: 8,
            groups: 4,
            reduction: 4,
            k: 1,
            mlp_ratio: 2,
            window: 4,
            fusion_groups: 4,
            use_scan: true,
            use_conv: true,
            use_cfb: true,
            dynamic_kernels: true,
            scan_order: ScanOrder::ValueDesc,
            guide: GuideMode::Mvgl,
            ratios: crate::mvgl::DEFAULT_RATIOS.to_vec(),
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl NetConfig {
    fn block_cfg(&self, channels: usize) -> BlockConfig {
        BlockConfig {
            channels,
            mlp_ratio: self.mlp_ratio,
            d_state: self.d_state,
            k: self.k,
            groups: self.groups,
            reduction: self.reduction,
            fusion_groups: self.fusion_groups,
            use_scan: self.use_scan,
            use_conv: self.use_conv,
            dynamic_kernels: self.dynamic_kernels,
            scan_order: self.scan_order,
            guide: self.guide,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::param("base channel count must be positive".to_string()));
        }
        if self.enc_depths.iter().any(|&d| d == 0)
            || self.dec_depths.iter().any(|&d| d == 0)
            || self.bottleneck_depth == 0
        {
            return Err(Error::param("stage depths must be at least 1".to_string()));
        }
        self.weights.validate()?;
        for c in [
            self.base_channels,
            self.base_channels * 2,
            self.base_channels * 4,
        ] {
            self.block_cfg(c).validate()?;
        }
        if self.ratios.is_empty() {
            return Err(Error::param("mask ratio list must not be empty".to_string()));
        }
        Ok(())
    }
}

/// Side outputs of one forward pass.
#[derive(Default)]
pub struct NetAux {
    /// Per-block guidance terms (blocks that produced one).
    pub mvgl_terms: Vec<NodeId>,
    /// Value maps in forward order: (label, detached (B,1,H,W) map).
    pub value_maps: Vec<(String, Tensor4)>,
}

struct Stage {
    blocks: Vec<McmBlock>,
    /// Labels like "block3.enc2"; fixed at construction.
    labels: Vec<String>,
}

impl Stage {
    fn forward(&self, tape: &mut Tape, x: NodeId, mode: Mode<'_>, aux: &mut NetAux) -> Result<NodeId> {
        let mut cur = x;
        for (block, label) in self.blocks.iter().zip(&self.labels) {
            let (y, block_aux) = block.forward(tape, cur, mode)?;
            if let Some(term) = block_aux.mvgl_term {
                aux.mvgl_terms.push(term);
            }
            if let Some(v) = block_aux.value_map {
                aux.value_maps.push((label.clone(), v));
            }
            cur = y;
        }
        Ok(cur)
    }
}

pub struct UieNet {
    pub cfg: NetConfig,
    embed: ConvLayer,
    enc: Vec<Stage>,
    downs: Vec<ConvLayer>,
    bottleneck: Stage,
    /// Bridges by level: index 0 is the full-resolution skip (cfb1).
    bridges: Vec<Bridge>,
    /// Decoder stages deepest-first.
    dec: Vec<Stage>,
    head: ConvLayer,
}

/// Builds the network and reports its parameter count.
pub fn build_unet(cfg: NetConfig) -> Result<(UieNet, usize)> {
    let net = UieNet::init(cfg)?;
    let count = net.param_count();
    Ok((net, count))
}

impl UieNet {
    pub fn init(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x6a09_e667_f3bc_c909).wrapping_add(1));
        let c = cfg.base_channels;
        let widths = [c, 2 * c, 4 * c];
        let mut next_block = 0usize;
        let mut make_stage = |rng: &mut ChaCha8Rng, width: usize, depth: usize, tag: &str| -> Result<Stage> {
            let mut blocks = Vec::with_capacity(depth);
            let mut labels = Vec::with_capacity(depth);
            for _ in 0..depth {
                blocks.push(McmBlock::init(rng, cfg.block_cfg(width))?);
                labels.push(format!("block{next_block}.{tag}"));
                next_block += 1;
            }
            Ok(Stage { blocks, labels })
        };

        let embed = ConvLayer::init(&mut rng, c, 3, 3, 1, 1, 1);
        let enc = vec![
            make_stage(&mut rng, widths[0], cfg.enc_depths[0], "enc1")?,
            make_stage(&mut rng, widths[1], cfg.enc_depths[1], "enc2")?,
            make_stage(&mut rng, widths[2], cfg.enc_depths[2], "enc3")?,
        ];
        let downs = vec![
            ConvLayer::init(&mut rng, widths[1], widths[0], 3, 2, 1, 1),
            ConvLayer::init(&mut rng, widths[2], widths[1], 3, 2, 1, 1),
            ConvLayer::init(&mut rng, widths[2], widths[2], 3, 2, 1, 1),
        ];
        let bottleneck = make_stage(&mut rng, widths[2], cfg.bottleneck_depth, "bottleneck")?;
        let bridges = vec![
            Bridge::init(&mut rng, BridgeConfig { channels: widths[0], below_channels: widths[1], window: cfg.window })?,
            Bridge::init(&mut rng, BridgeConfig { channels: widths[1], below_channels: widths[2], window: cfg.window })?,
            Bridge::init(&mut rng, BridgeConfig { channels: widths[2], below_channels: widths[2], window: cfg.window })?,
        ];
        let dec = vec![
            make_stage(&mut rng, widths[2], cfg.dec_depths[0], "dec3")?,
            make_stage(&mut rng, widths[1], cfg.dec_depths[1], "dec2")?,
            make_stage(&mut rng, widths[0], cfg.dec_depths[2], "dec1")?,
        ];
        // Zero head: the net is the identity (clamped) at initialization.
        let head = ConvLayer::zeros(3, c, 3, 1, 1, 1);
        Ok(UieNet {
            cfg,
            embed,
            enc,
            downs,
            bottleneck,
            bridges,
            dec,
            head,
        })
    }

    /// Full forward pass. Input must be (B,3,H,W) with both extents
    /// divisible by 8; see [`UieNet::enhance`] for the padded path.
    pub fn forward(&self, tape: &mut Tape, x: NodeId, mode: Mode<'_>) -> Result<(NodeId, NetAux)> {
        let [_, c, h, w] = tape.value(x).dims();
        if c != 3 {
            return Err(Error::shape(format!("expected RGB input, found {c} channels")));
        }
        if h % SCALE_FACTOR != 0 || w % SCALE_FACTOR != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} not divisible by {SCALE_FACTOR}"
            )));
        }
        let mut aux = NetAux::default();
        let e = self.embed.apply(tape, x)?;
        let s1 = self.enc[0].forward(tape, e, mode, &mut aux)?;
        let d1 = self.downs[0].apply(tape, s1)?;
        let s2 = self.enc[1].forward(tape, d1, mode, &mut aux)?;
        let d2 = self.downs[1].apply(tape, s2)?;
        let s3 = self.enc[2].forward(tape, d2, mode, &mut aux)?;
        let d3 = self.downs[2].apply(tape, s3)?;
        let btm = self.bottleneck.forward(tape, d3, mode, &mut aux)?;

        let fuse = |tape: &mut Tape, bridge: &Bridge, f_h: NodeId, f_l: NodeId| {
            if self.cfg.use_cfb {
                bridge.forward(tape, f_h, f_l)
            } else {
                bridge.skip_add(tape, f_h, f_l)
            }
        };
        let u3 = fuse(tape, &self.bridges[2], s3, btm)?;
        let r3 = self.dec[0].forward(tape, u3, mode, &mut aux)?;
        let u2 = fuse(tape, &self.bridges[1], s2, r3)?;
        let r2 = self.dec[1].forward(tape, u2, mode, &mut aux)?;
        let u1 = fuse(tape, &self.bridges[0], s1, r2)?;
        let r1 = self.dec[2].forward(tape, u1, mode, &mut aux)?;

        let residual = self.head.apply(tape, r1)?;
        let sum = tape.add(x, residual)?;
        let out = tape.clamp01(sum)?;
        Ok((out, aux))
    }

    /// Inference on an arbitrary-size image: reflect-pad to a multiple of
    /// 8, run the net, crop back. The signature admits no prior data.
    pub fn enhance(&self, input: &Tensor4) -> Result<Tensor4> {
        let [_, _, h, w] = input.dims();
        let ph = h.div_ceil(SCALE_FACTOR) * SCALE_FACTOR - h;
        let pw = w.div_ceil(SCALE_FACTOR) * SCALE_FACTOR - w;
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let padded = tape.pad_reflect(x, [0, ph, 0, pw])?;
        let (out, _) = self.forward(&mut tape, padded, Mode::Inference)?;
        let cropped = tape.crop(out, 0, 0, h, w)?;
        Ok(tape.value(cropped).clone())
    }

    /// Value maps for one input, in forward block order.
    pub fn value_maps(&self, input: &Tensor4) -> Result<Vec<(String, Tensor4)>> {
        let [_, _, h, w] = input.dims();
        let ph = h.div_ceil(SCALE_FACTOR) * SCALE_FACTOR - h;
        let pw = w.div_ceil(SCALE_FACTOR) * SCALE_FACTOR - w;
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let padded = tape.pad_reflect(x, [0, ph, 0, pw])?;
        let (_, aux) = self.forward(&mut tape, padded, Mode::Inference)?;
        Ok(aux.value_maps)
    }

    /// Assign parameter values from a loaded checkpoint by name.
    pub fn load_values(&mut self, lookup: &dyn Fn(&str) -> Option<Tensor4>) -> Result<()> {
        let mut missing = Vec::new();
        let mut bad_shape = Vec::new();
        self.visit_mut("", &mut |name, p| match lookup(name) {
            Some(t) if t.dims() == p.value.dims() => {
                p.value.data_mut().copy_from_slice(t.data());
            }
            Some(_) => bad_shape.push(name.to_string()),
            None => missing.push(name.to_string()),
        });
        if !missing.is_empty() || !bad_shape.is_empty() {
            return Err(Error::format(format!(
                "checkpoint incompatible with config: {} missing, {} mismatched ({:?} ...)",
                missing.len(),
                bad_shape.len(),
                missing.iter().chain(bad_shape.iter()).take(3).collect::<Vec<_>>()
            )));
        }
        Ok(())
    }
}

impl ParamVisit for UieNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.embed.visit(&join(prefix, "embed"), f);
        for stage in self.enc.iter().chain([&self.bottleneck]).chain(&self.dec) {
            for (block, label) in stage.blocks.iter().zip(&stage.labels) {
                let name = label.split('.').next().expect("label prefix");
                block.visit(&join(prefix, name), f);
            }
        }
        for (i, d) in self.downs.iter().enumerate() {
            d.visit(&join(prefix, &format!("down{}", i + 1)), f);
        }
        for (i, b) in self.bridges.iter().enumerate() {
            b.visit(&join(prefix, &format!("cfb{}", i + 1)), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        let bottleneck = &mut self.bottleneck;
        for stage in self
            .enc
            .iter_mut()
            .chain([bottleneck])
            .chain(self.dec.iter_mut())
        {
            for (block, label) in stage.blocks.iter_mut().zip(&stage.labels) {
                let name = label.split('.').next().expect("label prefix");
                block.visit_mut(&join(prefix, name), f);
            }
        }
        for (i, d) in self.downs.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("down{}", i + 1)), f);
        }
        for (i, b) in self.bridges.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("cfb{}", i + 1)), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
