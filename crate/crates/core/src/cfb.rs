//! Cross-feature bridge on skip connections: window self-attention over
//! the encoder feature, cross-attention from encoder queries to aligned
//! decoder keys/values, and a sigmoid spatial-channel gate blending the
//! encoder feature with the upsampled aligned decoder feature.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::ConvLayer;
use crate::param::{join, Param, ParamVisit};
use crate::tape::{NodeId, Tape};

#[derive(Clone, Copy, Debug)]
pub struct BridgeConfig {
    /// Channels of the encoder feature at this skip level.
    pub channels: usize,
    /// Channels of the decoder feature arriving from below.
    pub below_channels: usize,
    /// Window side for local self-attention.
    pub window: usize,
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::param("window size must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// Single-head bridge; the q/k/v projections are shared between the two
/// attention stages (keys/values act on whichever feature feeds them).
pub struct Bridge {
    pub cfg: BridgeConfig,
    q: ConvLayer,
    k: ConvLayer,
    v: ConvLayer,
    align: ConvLayer,
    gate: ConvLayer,
}

impl Bridge {
    pub fn init(rng: &mut ChaCha8Rng, cfg: BridgeConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(Bridge {
            q: ConvLayer::init(rng, c, c, 1, 1, 0, 1),
            k: ConvLayer::init(rng, c, c, 1, 1, 0, 1),
            v: ConvLayer::init(rng, c, c, 1, 1, 0, 1),
            align: ConvLayer::init(rng, c, cfg.below_channels, 1, 1, 0, 1),
            // Zero gate: sigma(0) = 0.5, an even blend at initialization.
            gate: ConvLayer::zeros(c, 2 * c, 1, 1, 0, 1),
            cfg,
        })
    }

    /// Non-overlapping window self-attention preserving the spatial extent.
    /// Extents that do not tile are reflect-padded and cropped afterwards.
    pub fn window_self_attention(&self, tape: &mut Tape, f_h: NodeId) -> Result<NodeId> {
        let [_, c, h, w] = tape.value(f_h).dims();
        if c != self.cfg.channels {
            return Err(Error::shape(format!(
                "bridge expects {} channels, found {c}",
                self.cfg.channels
            )));
        }
        let ws = self.cfg.window.min(h).min(w);
        let (ph, pw) = (h.div_ceil(ws) * ws - h, w.div_ceil(ws) * ws - w);
        let padded = tape.pad_reflect(f_h, [0, ph, 0, pw])?;
        let q = self.q.apply(tape, padded)?;
        let k = self.k.apply(tape, padded)?;
        let v = self.v.apply(tape, padded)?;
        let qw = tape.window_partition(q, ws)?;
        let kw = tape.window_partition(k, ws)?;
        let vw = tape.window_partition(v, ws)?;
        let scale = 1.0 / (self.cfg.channels as f64).sqrt();
        let out = tape.attention(qw, kw, vw, scale)?;
        let merged = tape.window_merge(out, ws, h + ph, w + pw)?;
        tape.crop(merged, 0, 0, h, w)
    }

    /// Channel-aligned decoder feature (1x1 projection of the raw skip
    /// input from below).
    pub fn align_below(&self, tape: &mut Tape, f_l: NodeId) -> Result<NodeId> {
        if tape.value(f_l).channels() != self.cfg.below_channels {
            return Err(Error::shape(format!(
                "bridge expects {} decoder channels, found {}",
                self.cfg.below_channels,
                tape.value(f_l).channels()
            )));
        }
        self.align.apply(tape, f_l)
    }

    /// Encoder tokens query the aligned decoder tokens; the output is
    /// reshaped back to the encoder extent.
    pub fn cross_attention(&self, tape: &mut Tape, f_h: NodeId, f_l1: NodeId) -> Result<NodeId> {
        let [_, _, h, w] = tape.value(f_h).dims();
        let q = self.q.apply(tape, f_h)?;
        let k = self.k.apply(tape, f_l1)?;
        let v = self.v.apply(tape, f_l1)?;
        let qt = tape.tokens_from_image(q)?;
        let kt = tape.tokens_from_image(k)?;
        let vt = tape.tokens_from_image(v)?;
        let scale = 1.0 / (self.cfg.channels as f64).sqrt();
        let out = tape.attention(qt, kt, vt, scale)?;
        tape.image_from_tokens(out, h, w)
    }

    /// W = sigma(conv([F'_h, F'_l1])); out = W * F_h + (1 - W) * up(F_l1).
    pub fn gated_fusion(
        &self,
        tape: &mut Tape,
        f_h: NodeId,
        f_h_att: NodeId,
        f_l1_att: NodeId,
        f_l1_up: NodeId,
    ) -> Result<NodeId> {
        let cat = tape.concat_channels(f_h_att, f_l1_att)?;
        let logits = self.gate.apply(tape, cat)?;
        let gate = tape.sigmoid(logits)?;
        let keep = tape.mul(gate, f_h)?;
        let inv = tape.affine(gate, -1.0, 1.0)?;
        let other = tape.mul(inv, f_l1_up)?;
        tape.add(keep, other)
    }

    /// Full bridge: attention stages feed the gate; the blend operands are
    /// the raw encoder feature and the upsampled aligned decoder feature.
    pub fn forward(&self, tape: &mut Tape, f_h: NodeId, f_l: NodeId) -> Result<NodeId> {
        let [_, _, h, w] = tape.value(f_h).dims();
        let f_l1 = self.align_below(tape, f_l)?;
        let f_h_att = self.window_self_attention(tape, f_h)?;
        let f_l1_att = self.cross_attention(tape, f_h, f_l1)?;
        let up = tape.bilinear_resize(f_l1, h, w)?;
        self.gated_fusion(tape, f_h, f_h_att, f_l1_att, up)
    }

    /// The no-bridge ablation: plain addition of the upsampled,
    /// channel-aligned decoder feature.
    pub fn skip_add(&self, tape: &mut Tape, f_h: NodeId, f_l: NodeId) -> Result<NodeId> {
        let [_, _, h, w] = tape.value(f_h).dims();
        let f_l1 = self.align_below(tape, f_l)?;
        let up = tape.bilinear_resize(f_l1, h, w)?;
        tape.add(f_h, up)
    }
}

impl ParamVisit for Bridge {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.align.visit(&join(prefix, "align"), f);
        self.gate.visit(&join(prefix, "gate"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.align.visit_mut(&join(prefix, "align"), f);
        self.gate.visit_mut(&join(prefix, "gate"), f);
    }
}
