//! Value-map learning: per-pixel offset prediction, sampling-frequency
//! accumulation, explicit low-resolution priors, and the temperature-annealed
//! top-k masked KL guidance loss.

use crate::error::{Error, Result};
use crate::ops::{pool, resize};
use crate::param::Param;
use crate::tape::{MaskedKlSpec, NodeId, Tape};
use crate::tensor::Tensor4;

/// Default mask coverage ratios.
pub const DEFAULT_RATIOS: [f64; 4] = [0.25, 0.50, 0.75, 1.00];
/// Epsilon inside the KL log denominator.
pub const KL_EPS: f64 = 1e-8;

/// Explicit low-resolution value prior with provenance.
#[derive(Clone, Debug)]
pub struct PriorMap {
    pub h: usize,
    pub w: usize,
    pub grid: Vec<f64>,
    pub source: PriorSource,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PriorSource {
    /// Loaded from an external tensor file.
    External(String),
    /// Sobel-gradient proxy computed from a reference image.
    ReferenceGradient,
}

impl PriorMap {
    pub fn new(h: usize, w: usize, grid: Vec<f64>, source: PriorSource) -> Result<Self> {
        if h == 0 || w == 0 || grid.len() != h * w {
            return Err(Error::shape(format!(
                "prior grid of {} values for extent {h}x{w}",
                grid.len()
            )));
        }
        if grid.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::numeric(
                "prior entries must be finite and non-negative".to_string(),
            ));
        }
        Ok(PriorMap { h, w, grid, source })
    }

    /// Bilinear upsampling to the feature extent (D -> D-up).
    pub fn upsampled(&self, h: usize, w: usize) -> Vec<f64> {
        resize::resize_grid(&self.grid, self.h, self.w, h, w)
    }
}

/// Channel L2 norm of a (1,C,h,w) feature tensor, detached from gradients.
pub fn explicit_prior(features: &Tensor4, source: PriorSource) -> Result<PriorMap> {
    if !features.all_finite() {
        return Err(Error::numeric(
            "prior features contain non-finite values".to_string(),
        ));
    }
    let [n, c, h, w] = features.dims();
    if n != 1 {
        return Err(Error::shape(format!(
            "prior features must be a single item, found {:?}",
            features.dims()
        )));
    }
    let mut grid = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ch in 0..c {
                let v = features.at(0, ch, y, x);
                acc += v * v;
            }
            grid[y * w + x] = acc.sqrt();
        }
    }
    PriorMap::new(h, w, grid, source)
}

/// Sobel-magnitude proxy for the external prior: grayscale reference,
/// 3x3 Sobel with zero padding, average-pool to 16x16, min-max to [0,1].
pub fn prior_from_reference(reference: &Tensor4) -> Result<PriorMap> {
    let [n, c, h, w] = reference.dims();
    if n != 1 || c != 3 {
        return Err(Error::shape(format!(
            "reference must be (1,3,H,W), found {:?}",
            reference.dims()
        )));
    }
    // Rec.601 luma.
    let mut gray = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            gray[y * w + x] = 0.299 * reference.at(0, 0, y, x)
                + 0.587 * reference.at(0, 1, y, x)
                + 0.114 * reference.at(0, 2, y, x);
        }
    }
    // Clamp-to-edge sampling: zero padding would ring at the image border
    // and drown real edges after min-max normalization.
    let at = |y: isize, x: isize| -> f64 {
        let yc = y.clamp(0, h as isize - 1) as usize;
        let xc = x.clamp(0, w as isize - 1) as usize;
        gray[yc * w + xc]
    };
    let mut mag = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = -at(y - 1, x - 1) + at(y - 1, x + 1) - 2.0 * at(y, x - 1) + 2.0 * at(y, x + 1)
                - at(y + 1, x - 1)
                + at(y + 1, x + 1);
            let gy = -at(y - 1, x - 1) - 2.0 * at(y - 1, x) - at(y - 1, x + 1)
                + at(y + 1, x - 1)
                + 2.0 * at(y + 1, x)
                + at(y + 1, x + 1);
            mag[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    let mut grid = pool::pool_grid(&mag, h, w, 16, 16);
    let max = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = grid.iter().copied().fold(f64::INFINITY, f64::min);
    if max - min > 0.0 {
        for v in grid.iter_mut() {
            *v = (*v - min) / (max - min);
        }
    } else {
        log::warn!("degenerate constant reference image; prior is all-zero");
        grid.iter_mut().for_each(|v| *v = 0.0);
    }
    PriorMap::new(16, 16, grid, PriorSource::ReferenceGradient)
}

/// Per-pixel displacement vectors for k^2 samples per pixel.
///
/// Channel layout of the raw tensor: sample n occupies channels (2n, 2n+1)
/// as (dy, dx).
#[derive(Clone, Debug)]
pub struct OffsetField {
    pub offsets: Tensor4,
    pub k: usize,
}

impl OffsetField {
    pub fn new(offsets: Tensor4, k: usize) -> Result<Self> {
        if k == 0 || offsets.channels() != 2 * k * k {
            return Err(Error::shape(format!(
                "offset field with {} channels for k={k}",
                offsets.channels()
            )));
        }
        Ok(OffsetField { offsets, k })
    }
}

/// Base integer grid for the n-th sample: the pixel itself for k=1, the
/// centered k x k lattice otherwise (pixel at floor((k-1)/2)).
#[inline]
pub fn base_offset(n: usize, k: usize) -> (isize, isize) {
    let half = ((k - 1) / 2) as isize;
    ((n / k) as isize - half, (n % k) as isize - half)
}

/// Continuous sampling coordinates p-hat = p_base + offset, untouched when
/// they fall outside the grid.
pub fn sample_locations(field: &OffsetField) -> Vec<Vec<(f64, f64)>> {
    let [batch, _, h, w] = field.offsets.dims();
    let k2 = field.k * field.k;
    let mut out = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut samples = Vec::with_capacity(h * w * k2);
        for y in 0..h {
            for x in 0..w {
                for n in 0..k2 {
                    let (by, bx) = base_offset(n, field.k);
                    let dy = field.offsets.at(b, 2 * n, y, x);
                    let dx = field.offsets.at(b, 2 * n + 1, y, x);
                    samples.push((y as f64 + by as f64 + dy, x as f64 + bx as f64 + dx));
                }
            }
        }
        out.push(samples);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrequencyMode {
    /// Nearest-pixel integer counts; visualization only.
    HardCount,
    /// Differentiable bilinear splat of unit mass per sample.
    SoftSplat,
}

/// Sampling-frequency statistics at feature resolution.
#[derive(Clone, Debug)]
pub struct SamplingFrequencyMap {
    pub grid: Tensor4,
    pub mode: FrequencyMode,
}

/// Accumulate sample mass into an (B,1,H,W) grid outside the tape.
/// Out-of-bounds mass is dropped in both modes.
pub fn accumulate_frequency(field: &OffsetField, mode: FrequencyMode) -> SamplingFrequencyMap {
    let [batch, _, h, w] = field.offsets.dims();
    let samples = sample_locations(field);
    let mut grid = Tensor4::zeros([batch, 1, h, w]);
    for (b, item) in samples.iter().enumerate() {
        for &(sy, sx) in item {
            match mode {
                FrequencyMode::HardCount => {
                    let (ry, rx) = (sy.round(), sx.round());
                    if ry >= 0.0 && rx >= 0.0 && (ry as usize) < h && (rx as usize) < w {
                        let i = grid.idx(b, 0, ry as usize, rx as usize);
                        grid.data_mut()[i] += 1.0;
                    }
                }
                FrequencyMode::SoftSplat => {
                    splat_into(grid.data_mut(), b, h, w, sy, sx);
                }
            }
        }
    }
    SamplingFrequencyMap { grid, mode }
}

#[inline]
fn splat_into(data: &mut [f64], b: usize, h: usize, w: usize, sy: f64, sx: f64) {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let fy = sy - y0;
    let fx = sx - x0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let py = y0 + dy;
            let px = x0 + dx;
            if py >= 0.0 && px >= 0.0 && (py as usize) < h && (px as usize) < w {
                data[(b * h + py as usize) * w + px as usize] += wy * wx;
            }
        }
    }
}

/// Forward kernel for the tape soft-splat op: offsets (B,2k^2,H,W) -> (B,1,H,W).
pub fn soft_splat_forward(offsets: &Tensor4, k: usize) -> Result<Tensor4> {
    let field = OffsetField::new(offsets.clone(), k)?;
    Ok(accumulate_frequency(&field, FrequencyMode::SoftSplat).grid)
}

/// Gradient of the splat with respect to the raw offsets.
pub fn soft_splat_backward(offsets: &Tensor4, k: usize, grad_out: &Tensor4) -> Tensor4 {
    let [batch, _, h, w] = offsets.dims();
    let k2 = k * k;
    let mut doff = Tensor4::zeros(offsets.dims());
    for b in 0..batch {
        for y in 0..h {
            for x in 0..w {
                for n in 0..k2 {
                    let (by, bx) = base_offset(n, k);
                    let sy = y as f64 + by as f64 + offsets.at(b, 2 * n, y, x);
                    let sx = x as f64 + bx as f64 + offsets.at(b, 2 * n + 1, y, x);
                    let y0 = sy.floor();
                    let x0 = sx.floor();
                    let fy = sy - y0;
                    let fx = sx - x0;
                    let mut gy = 0.0;
                    let mut gx = 0.0;
                    // d(weight)/d(sy) is -wx for the floor row, +wx for the
                    // next row; symmetrically for sx.
                    for (dy, wy, sy_sign) in [(0.0, 1.0 - fy, -1.0), (1.0, fy, 1.0)] {
                        for (dx, wx, sx_sign) in [(0.0, 1.0 - fx, -1.0), (1.0, fx, 1.0)] {
                            let py = y0 + dy;
                            let px = x0 + dx;
                            if py >= 0.0 && px >= 0.0 && (py as usize) < h && (px as usize) < w {
                                let g = grad_out.at(b, 0, py as usize, px as usize);
                                gy += g * sy_sign * wx;
                                gx += g * sx_sign * wy;
                            }
                        }
                    }
                    let iy = doff.idx(b, 2 * n, y, x);
                    doff.data_mut()[iy] = gy;
                    let ix = doff.idx(b, 2 * n + 1, y, x);
                    doff.data_mut()[ix] = gx;
                }
            }
        }
    }
    doff
}

/// Piecewise-linear temperature annealing: T(0) = t_start, linear down to
/// t_end at `half_point`, constant afterwards.
#[derive(Clone, Copy, Debug)]
pub struct TemperatureSchedule {
    pub t_start: f64,
    pub t_end: f64,
    pub half_point: u64,
}

impl TemperatureSchedule {
    pub fn new(half_point: u64) -> Self {
        TemperatureSchedule {
            t_start: 1.0,
            t_end: 0.1,
            half_point,
        }
    }

    pub fn at(&self, iter: u64) -> f64 {
        if self.half_point == 0 || iter >= self.half_point {
            return self.t_end;
        }
        let f = iter as f64 / self.half_point as f64;
        self.t_start + (self.t_end - self.t_start) * f
    }
}

/// Nested binary masks selecting the top-r fractions of a distribution.
#[derive(Clone, Debug)]
pub struct TopKMaskSet {
    /// One index set per ratio, each sorted by flat index.
    pub masks: Vec<Vec<u32>>,
    pub ratios: Vec<f64>,
}

impl TopKMaskSet {
    /// Build masks on the guidance distribution `q`; ties broken by raster
    /// index so the selection is deterministic.
    pub fn build(q: &[f64], ratios: &[f64]) -> Result<Self> {
        let n = q.len();
        let order = crate::scan::argsort_desc(q)?;
        let mut masks = Vec::with_capacity(ratios.len());
        for &r in ratios {
            if !(0.0..=1.0).contains(&r) || r <= 0.0 {
                return Err(Error::param(format!("mask ratio {r} outside (0, 1]")));
            }
            let count = (r * n as f64).ceil() as usize;
            if count == 0 {
                return Err(Error::param(format!("mask ratio {r} selects no pixels")));
            }
            let mut idx: Vec<u32> = (0..count).map(|t| order.source(t) as u32).collect();
            idx.sort_unstable();
            masks.push(idx);
        }
        Ok(TopKMaskSet {
            masks,
            ratios: ratios.to_vec(),
        })
    }
}

/// Plain softmax with temperature over a flat slice (off-tape path).
pub fn softmax_temp_values(values: &[f64], t: f64) -> Result<Vec<f64>> {
    if t <= 0.0 {
        return Err(Error::param(format!("temperature must be positive, got {t}")));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values.iter().map(|&v| ((v - max) / t).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    Ok(out)
}

/// Multi-granularity masked KL between the (constant) guidance
/// distribution derived from the prior and the learned distribution
/// derived from `s`. Returns the summed per-mask KL as a tape scalar.
///
/// `s` must be a (1,1,H,W) soft-splat node so gradients reach the offsets;
/// the prior side is evaluated off-tape and treated as a constant.
pub fn mvgl_loss(
    tape: &mut Tape,
    s: NodeId,
    prior: &PriorMap,
    temperature: f64,
    ratios: &[f64],
) -> Result<NodeId> {
    let [b, c, h, w] = tape.value(s).dims();
    if b != 1 || c != 1 {
        return Err(Error::shape(format!(
            "mvgl loss expects a single (1,1,H,W) frequency map, found {:?}",
            tape.value(s).dims()
        )));
    }
    let up = prior.upsampled(h, w);
    let q = softmax_temp_values(&up, temperature)?;
    let masks = TopKMaskSet::build(&q, ratios)?;
    let scaled = tape.affine(s, 1.0 / temperature, 0.0)?;
    masked_kl_from_q(tape, scaled, &q, &masks)
}

/// Guidance variant: KL(q || pool(S)) on the prior's native lattice.
pub fn pooled_kl_loss(
    tape: &mut Tape,
    s: NodeId,
    prior: &PriorMap,
    temperature: f64,
) -> Result<NodeId> {
    if temperature <= 0.0 {
        return Err(Error::param(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let pooled = tape.adaptive_avg_pool(s, prior.h, prior.w)?;
    let q = softmax_temp_values(&prior.grid, temperature)?;
    let masks = TopKMaskSet::build(&q, &[1.0])?;
    let scaled = tape.affine(pooled, 1.0 / temperature, 0.0)?;
    masked_kl_from_q(tape, scaled, &q, &masks)
}

/// Shared tail of the guidance variants: a row softmax of the already
/// temperature-scaled statistics against a precomputed constant q.
fn masked_kl_from_q(
    tape: &mut Tape,
    s_scaled: NodeId,
    q: &[f64],
    masks: &TopKMaskSet,
) -> Result<NodeId> {
    let n = q.len();
    let flat = tape.reshape(s_scaled, [1, 1, 1, n])?;
    let p = tape.softmax_last(flat)?;
    let spec = MaskedKlSpec::new(q, masks, KL_EPS)?;
    tape.masked_kl(p, spec)
}

/// The value map consumed by reordering. In soft mode this is the
/// frequency map passed through unchanged; it is always detached.
pub fn value_map(s: &SamplingFrequencyMap) -> Tensor4 {
    let mut v = s.grid.clone();
    v.requires_grad = false;
    v.grad = None;
    v
}

/// Learnable offset predictor: depthwise 3x3 -> GELU -> 1x1 to 2k^2 channels.
pub struct OffsetHead {
    pub depthwise: Param,
    pub depthwise_bias: Param,
    pub pointwise: Param,
    pub pointwise_bias: Param,
    pub k: usize,
}

impl crate::param::ParamVisit for OffsetHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&crate::param::join(prefix, "offset_dw.w"), &self.depthwise);
        f(&crate::param::join(prefix, "offset_dw.b"), &self.depthwise_bias);
        f(&crate::param::join(prefix, "offset_pw.w"), &self.pointwise);
        f(&crate::param::join(prefix, "offset_pw.b"), &self.pointwise_bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&crate::param::join(prefix, "offset_dw.w"), &mut self.depthwise);
        f(&crate::param::join(prefix, "offset_dw.b"), &mut self.depthwise_bias);
        f(&crate::param::join(prefix, "offset_pw.w"), &mut self.pointwise);
        f(&crate::param::join(prefix, "offset_pw.b"), &mut self.pointwise_bias);
    }
}

impl OffsetHead {
    /// Raw offsets (no clamping) for the current features.
    pub fn predict(&self, tape: &mut Tape, x1: NodeId) -> Result<NodeId> {
        let c1 = tape.value(x1).channels();
        let dw = self.depthwise.bind(tape);
        let dwb = self.depthwise_bias.bind(tape);
        let pw = self.pointwise.bind(tape);
        let pwb = self.pointwise_bias.bind(tape);
        let a = tape.conv2d(x1, dw, Some(dwb), 1, 1, c1)?;
        let g = tape.gelu(a)?;
        tape.conv2d(g, pw, Some(pwb), 1, 0, 1)
    }
}

impl TemperatureSchedule {
    /// The loss path needs T > 0; annealing never reaches zero by
    /// construction, but config files could.
    pub fn validate(&self) -> Result<()> {
        if self.t_start <= 0.0 || self.t_end <= 0.0 || self.t_end > self.t_start {
            return Err(Error::param(format!(
                "temperature schedule must satisfy 0 < t_end <= t_start, got {} -> {}",
                self.t_start, self.t_end
            )));
        }
        Ok(())
    }
}
