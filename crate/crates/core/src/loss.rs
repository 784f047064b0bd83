//! Composite training objective: L1, SSIM structure term, Laplacian edge
//! term (Charbonnier form), and the averaged guidance loss.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor4;

/// Charbonnier epsilon in the edge loss.
pub const EDGE_EPS: f64 = 1e-3;
/// SSIM stabilizers on the [0,1] dynamic range.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// SSIM window: 11 taps, sigma 1.5.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Loss weights (lambda 1..4). Defaults follow the reference recipe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub edge: f64,
    pub mvgl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 8.0,
            ssim: 1.0,
            edge: 4.0,
            mvgl: 2e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.l1 < 0.0 || self.ssim < 0.0 || self.edge < 0.0 || self.mvgl < 0.0 {
            return Err(Error::param("loss weights must be non-negative".to_string()));
        }
        Ok(())
    }
}

/// Scalar values of each component, for logging.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub l1: f64,
    pub ssim_term: f64,
    pub edge: f64,
    pub mvgl: f64,
    pub total: f64,
}

fn normalized_gaussian(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let mut taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Depthwise Gaussian kernel (C,1,size,size), normalized to unit mass.
fn gaussian_kernel(channels: usize, size: usize, sigma: f64) -> Tensor4 {
    let taps = normalized_gaussian(size, sigma);
    Tensor4::from_fn([channels, 1, size, size], |_, _, y, x| taps[y] * taps[x])
}

/// Mean SSIM between two same-shape tensors, as a differentiable node.
/// Windows are `valid` (no padding); images smaller than 11 pixels fall
/// back to the largest window that fits, with a warning.
pub fn ssim_node(tape: &mut Tape, x: NodeId, y: NodeId) -> Result<NodeId> {
    let dims = tape.value(x).dims();
    if dims != tape.value(y).dims() {
        return Err(Error::shape(format!(
            "ssim operands {:?} vs {:?}",
            dims,
            tape.value(y).dims()
        )));
    }
    let [_, c, h, w] = dims;
    let mut size = SSIM_WINDOW;
    if h < size || w < size {
        size = h.min(w);
        log::warn!("image {h}x{w} smaller than the SSIM window; using {size} taps");
    }
    let win = tape.constant(gaussian_kernel(c, size, SSIM_SIGMA));
    let blur = |tape: &mut Tape, t: NodeId| tape.conv2d(t, win, None, 1, 0, c);

    let mu_x = blur(tape, x)?;
    let mu_y = blur(tape, y)?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let exx = blur(tape, xx)?;
    let eyy = blur(tape, yy)?;
    let exy = blur(tape, xy)?;
    let mu_xx = tape.mul(mu_x, mu_x)?;
    let mu_yy = tape.mul(mu_y, mu_y)?;
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let var_x = tape.sub(exx, mu_xx)?;
    let var_y = tape.sub(eyy, mu_yy)?;
    let cov = tape.sub(exy, mu_xy)?;

    let n1 = tape.affine(mu_xy, 2.0, SSIM_C1)?;
    let n2 = tape.affine(cov, 2.0, SSIM_C2)?;
    let d1p = tape.add(mu_xx, mu_yy)?;
    let d1 = tape.affine(d1p, 1.0, SSIM_C1)?;
    let d2p = tape.add(var_x, var_y)?;
    let d2 = tape.affine(d2p, 1.0, SSIM_C2)?;
    let num = tape.mul(n1, n2)?;
    let den = tape.mul(d1, d2)?;
    let map = tape.div(num, den)?;
    tape.mean_all(map)
}

/// SSIM as a plain value (the full-reference metric path).
pub fn ssim_value(a: &Tensor4, b: &Tensor4) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(a.clone());
    let y = tape.constant(b.clone());
    let s = ssim_node(&mut tape, x, y)?;
    tape.value(s).scalar()
}

/// Fixed Laplacian edge extractor as a depthwise kernel.
fn laplacian_kernel(channels: usize) -> Tensor4 {
    const K: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
    Tensor4::from_fn([channels, 1, 3, 3], |_, _, y, x| K[y][x])
}

/// Charbonnier distance between Laplacian edge maps, averaged over pixels.
pub fn edge_loss_node(tape: &mut Tape, x: NodeId, y: NodeId) -> Result<NodeId> {
    let c = tape.value(x).channels();
    let lap = tape.constant(laplacian_kernel(c));
    let ex = tape.conv2d(x, lap, None, 1, 1, c)?;
    let ey = tape.conv2d(y, lap, None, 1, 1, c)?;
    let diff = tape.sub(ex, ey)?;
    let ch = tape.charbonnier(diff, EDGE_EPS)?;
    tape.mean_all(ch)
}

pub fn edge_loss_value(a: &Tensor4, b: &Tensor4) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(a.clone());
    let y = tape.constant(b.clone());
    let e = edge_loss_node(&mut tape, x, y)?;
    tape.value(e).scalar()
}

/// Mean absolute error.
pub fn l1_node(tape: &mut Tape, x: NodeId, y: NodeId) -> Result<NodeId> {
    let diff = tape.sub(x, y)?;
    let a = tape.abs(diff)?;
    tape.mean_all(a)
}

/// Weighted total objective. Returns the scalar node plus the component
/// values for logging. The guidance component is the mean of the per-block
/// terms, or exactly zero when none exist.
pub fn loss_total(
    tape: &mut Tape,
    prediction: NodeId,
    target: NodeId,
    mvgl_terms: &[NodeId],
    weights: &LossWeights,
) -> Result<(NodeId, LossBreakdown)> {
    weights.validate()?;
    let l1 = l1_node(tape, prediction, target)?;
    let ssim = ssim_node(tape, prediction, target)?;
    let ssim_term = tape.affine(ssim, -1.0, 1.0)?;
    let edge = edge_loss_node(tape, prediction, target)?;
    let mvgl = if mvgl_terms.is_empty() {
        tape.constant(Tensor4::scalar_tensor(0.0))
    } else {
        tape.mean_of(mvgl_terms)?
    };

    let wl1 = tape.affine(l1, weights.l1, 0.0)?;
    let wssim = tape.affine(ssim_term, weights.ssim, 0.0)?;
    let wedge = tape.affine(edge, weights.edge, 0.0)?;
    let wmvgl = tape.affine(mvgl, weights.mvgl, 0.0)?;
    let s1 = tape.add(wl1, wssim)?;
    let s2 = tape.add(s1, wedge)?;
    let total = tape.add(s2, wmvgl)?;

    let breakdown = LossBreakdown {
        l1: tape.value(l1).scalar()?,
        ssim_term: tape.value(ssim_term).scalar()?,
        edge: tape.value(edge).scalar()?,
        mvgl: tape.value(mvgl).scalar()?,
        total: tape.value(total).scalar()?,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_window_normalized() {
        let taps = normalized_gaussian(11, 1.5);
        assert_eq!(taps.len(), 11);
        assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(taps[5] > taps[0]);
    }

    #[test]
    fn ssim_self_is_one() {
        let x = Tensor4::from_fn([1, 3, 16, 16], |_, c, y, xq| {
            ((c + 1) * (y + 2) * (xq + 3) % 17) as f64 / 17.0
        });
        assert_eq!(ssim_value(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn ssim_symmetric_bitwise() {
        let a = Tensor4::from_fn([1, 1, 16, 16], |_, _, y, x| ((y * 31 + x * 7) % 13) as f64 / 13.0);
        let b = Tensor4::from_fn([1, 1, 16, 16], |_, _, y, x| ((y * 5 + x * 11) % 7) as f64 / 7.0);
        let ab = ssim_value(&a, &b).unwrap();
        let ba = ssim_value(&b, &a).unwrap();
        assert_eq!(ab.to_bits(), ba.to_bits());
    }

    #[test]
    fn ssim_inverted_binary_is_negative() {
        let a = Tensor4::from_fn([1, 1, 16, 16], |_, _, y, x| ((y / 4 + x / 4) % 2) as f64);
        let b = a.map(|v| 1.0 - v);
        assert!(ssim_value(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn edge_loss_floor_and_support() {
        let x = Tensor4::from_fn([1, 1, 8, 8], |_, _, y, xq| ((y * 3 + xq) % 5) as f64 * 0.2);
        let v = edge_loss_value(&x, &x).unwrap();
        assert!((v - EDGE_EPS).abs() < 1e-12);

        // A single differing pixel perturbs exactly a 3x3 patch of the
        // edge map.
        let mut y = x.clone();
        let i = y.idx(0, 0, 4, 4);
        y.data_mut()[i] += 0.5;
        let mut tape = Tape::new();
        let (xa, ya) = (tape.constant(x), tape.constant(y));
        let c = 1;
        let lap = tape.constant(laplacian_kernel(c));
        let ex = tape.conv2d(xa, lap, None, 1, 1, c).unwrap();
        let ey = tape.conv2d(ya, lap, None, 1, 1, c).unwrap();
        let mut touched = 0;
        for yy in 0..8 {
            for xx in 0..8 {
                if (tape.value(ex).at(0, 0, yy, xx) - tape.value(ey).at(0, 0, yy, xx)).abs() > 0.0 {
                    touched += 1;
                    assert!((yy as isize - 4).abs() <= 1 && (xx as isize - 4).abs() <= 1);
                }
            }
        }
        assert_eq!(touched, 5, "plus-shaped Laplacian support");
    }

    #[test]
    fn constant_images_edge_loss_near_floor() {
        let a = Tensor4::full([1, 3, 8, 8], 0.2);
        let b = Tensor4::full([1, 3, 8, 8], 0.7);
        // Interior Laplacians are zero for both; only the zero-padding
        // border contributes a difference.
        let v = edge_loss_value(&a, &b).unwrap();
        let border_ratio = 28.0 / 64.0;
        assert!(v >= EDGE_EPS && v < EDGE_EPS + border_ratio * 2.0);
    }

    #[test]
    fn l1_uniform_shift() {
        let x = Tensor4::full([1, 3, 4, 4], 0.4);
        let y = x.map(|v| v + 0.1);
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(y), tape.constant(x));
        let l = l1_node(&mut tape, a, b).unwrap();
        assert!((tape.value(l).scalar().unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn total_loss_components() {
        let x = Tensor4::from_fn([1, 3, 16, 16], |_, c, y, xq| {
            0.2 + 0.5 * (((c + y + xq) % 4) as f64 / 4.0)
        });
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(x.clone()), tape.constant(x));
        let w = LossWeights::default();
        let (_, parts) = loss_total(&mut tape, a, b, &[], &w).unwrap();
        assert_eq!(parts.l1, 0.0);
        assert!(parts.ssim_term.abs() < 1e-12);
        assert!((parts.edge - EDGE_EPS).abs() < 1e-12);
        assert_eq!(parts.mvgl, 0.0);
        assert!((parts.total - w.edge * EDGE_EPS).abs() < 1e-10);
        assert!(LossWeights { l1: -1.0, ..w }.validate().is_err());
    }
}
