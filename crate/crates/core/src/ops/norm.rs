//! Layer and group normalization over (batch, channel, height, width).
//!
//! Layer kind normalizes each pixel's channel vector; group kind
//! normalizes each (sample, channel-group) slab across space. Both apply a
//! learned per-channel affine afterwards.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Layer,
    Group,
}

pub fn validate(x: &Tensor4, gamma: &Tensor4, beta: &Tensor4, kind: NormKind, groups: usize, eps: f64) -> Result<()> {
    let c = x.channels();
    if gamma.dims() != [1, c, 1, 1] || beta.dims() != [1, c, 1, 1] {
        return Err(Error::shape(format!(
            "norm affine extents {:?}/{:?}, expected [1, {c}, 1, 1]",
            gamma.dims(),
            beta.dims()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::param(format!("norm eps must be positive, got {eps}")));
    }
    if kind == NormKind::Group && (groups == 0 || c % groups != 0) {
        return Err(Error::shape(format!(
            "group norm: {c} channels not divisible by {groups} groups"
        )));
    }
    Ok(())
}

/// Enumerate the flat indices of one normalization set.
fn for_each_set(x: &Tensor4, kind: NormKind, groups: usize, mut f: impl FnMut(&[usize])) {
    let [n, c, h, w] = x.dims();
    let mut idx = Vec::new();
    match kind {
        NormKind::Layer => {
            for b in 0..n {
                for y in 0..h {
                    for xw in 0..w {
                        idx.clear();
                        for ch in 0..c {
                            idx.push(x.idx(b, ch, y, xw));
                        }
                        f(&idx);
                    }
                }
            }
        }
        NormKind::Group => {
            let cpg = c / groups;
            for b in 0..n {
                for g in 0..groups {
                    idx.clear();
                    for ch in g * cpg..(g + 1) * cpg {
                        for y in 0..h {
                            for xw in 0..w {
                                idx.push(x.idx(b, ch, y, xw));
                            }
                        }
                    }
                    f(&idx);
                }
            }
        }
    }
}

fn channel_of(x: &Tensor4, flat: usize) -> usize {
    let [_, c, h, w] = x.dims();
    (flat / (h * w)) % c
}

pub fn forward(
    x: &Tensor4,
    gamma: &Tensor4,
    beta: &Tensor4,
    kind: NormKind,
    groups: usize,
    eps: f64,
) -> Result<Tensor4> {
    validate(x, gamma, beta, kind, groups, eps)?;
    let mut out = Tensor4::zeros(x.dims());
    let xd = x.data();
    for_each_set(x, kind, groups, |set| {
        let m = set.len() as f64;
        let mean = set.iter().map(|&i| xd[i]).sum::<f64>() / m;
        let var = set.iter().map(|&i| (xd[i] - mean) * (xd[i] - mean)).sum::<f64>() / m;
        let inv = 1.0 / (var + eps).sqrt();
        for &i in set {
            let c = channel_of(x, i);
            out.data_mut()[i] = gamma.data()[c] * ((xd[i] - mean) * inv) + beta.data()[c];
        }
    });
    Ok(out)
}

pub fn backward(
    x: &Tensor4,
    gamma: &Tensor4,
    kind: NormKind,
    groups: usize,
    eps: f64,
    grad_out: &Tensor4,
) -> (Tensor4, Tensor4, Tensor4) {
    let mut dx = Tensor4::zeros(x.dims());
    let mut dgamma = Tensor4::zeros(gamma.dims());
    let mut dbeta = Tensor4::zeros(gamma.dims());
    let xd = x.data();
    let gd = grad_out.data();
    for_each_set(x, kind, groups, |set| {
        let m = set.len() as f64;
        let mean = set.iter().map(|&i| xd[i]).sum::<f64>() / m;
        let var = set.iter().map(|&i| (xd[i] - mean) * (xd[i] - mean)).sum::<f64>() / m;
        let inv = 1.0 / (var + eps).sqrt();
        // g = dy * gamma, reduced twice over the set.
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for &i in set {
            let c = channel_of(x, i);
            let xhat = (xd[i] - mean) * inv;
            let g = gd[i] * gamma.data()[c];
            sum_g += g;
            sum_gx += g * xhat;
            dgamma.data_mut()[c] += gd[i] * xhat;
            dbeta.data_mut()[c] += gd[i];
        }
        let mean_g = sum_g / m;
        let mean_gx = sum_gx / m;
        for &i in set {
            let c = channel_of(x, i);
            let xhat = (xd[i] - mean) * inv;
            let g = gd[i] * gamma.data()[c];
            dx.data_mut()[i] = (g - mean_g - xhat * mean_gx) * inv;
        }
    });
    (dx, dgamma, dbeta)
}
