//! 2-D cross-correlation kernels: grouped/depthwise convolution, the
//! per-sample dynamic depthwise convolution, and expert-kernel mixing.
//!
//! Accumulation order is fixed everywhere: input channels outermost, then
//! kernel rows, then kernel columns. Tests rely on this being bit-exact
//! against a naive nested-loop oracle.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub fn out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::shape(format!(
            "kernel extent {kernel} exceeds padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

pub fn validate(x: &Tensor4, w: &Tensor4, bias: Option<&Tensor4>, groups: usize) -> Result<()> {
    let [_, ic, _, _] = x.dims();
    let [oc, wic, _, _] = w.dims();
    if groups == 0 || ic % groups != 0 || oc % groups != 0 {
        return Err(Error::shape(format!(
            "channels in={ic} out={oc} not divisible by groups={groups}"
        )));
    }
    if wic != ic / groups {
        return Err(Error::shape(format!(
            "kernel expects {wic} input channels per group, input provides {}",
            ic / groups
        )));
    }
    if let Some(b) = bias {
        if b.dims() != [1, oc, 1, 1] {
            return Err(Error::shape(format!(
                "bias extents {:?}, expected [1, {oc}, 1, 1]",
                b.dims()
            )));
        }
    }
    Ok(())
}

pub fn forward(
    x: &Tensor4,
    w: &Tensor4,
    bias: Option<&Tensor4>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor4> {
    validate(x, w, bias, groups)?;
    let [n, ic, h, wid] = x.dims();
    let [oc, icpg, kh, kw] = w.dims();
    let oh = out_extent(h, kh, stride, padding)?;
    let ow = out_extent(wid, kw, stride, padding)?;
    let ocpg = oc / groups;
    let mut out = Tensor4::zeros([n, oc, oh, ow]);
    for b in 0..n {
        for o in 0..oc {
            let g = o / ocpg;
            let base = bias.map_or(0.0, |bt| bt.data()[o]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = base;
                    for i in 0..icpg {
                        let c = g * icpg + i;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= wid as isize {
                                    continue;
                                }
                                acc += x.at(b, c, iy as usize, ix as usize) * w.at(o, i, ky, kx);
                            }
                        }
                    }
                    out.set(b, o, oy, ox, acc);
                }
            }
        }
    }
    let _ = ic;
    Ok(out)
}

/// Gradients with respect to (x, w, bias) given the upstream gradient.
pub fn backward(
    x: &Tensor4,
    w: &Tensor4,
    has_bias: bool,
    stride: usize,
    padding: usize,
    groups: usize,
    grad_out: &Tensor4,
) -> (Tensor4, Tensor4, Option<Tensor4>) {
    let [n, _, h, wid] = x.dims();
    let [oc, icpg, kh, kw] = w.dims();
    let [_, _, oh, ow] = grad_out.dims();
    let ocpg = oc / groups;
    let mut dx = Tensor4::zeros(x.dims());
    let mut dw = Tensor4::zeros(w.dims());
    let mut db = has_bias.then(|| Tensor4::zeros([1, oc, 1, 1]));
    for b in 0..n {
        for o in 0..oc {
            let g = o / ocpg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = grad_out.at(b, o, oy, ox);
                    if let Some(dbt) = db.as_mut() {
                        dbt.data_mut()[o] += go;
                    }
                    for i in 0..icpg {
                        let c = g * icpg + i;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= wid as isize {
                                    continue;
                                }
                                let (iy, ix) = (iy as usize, ix as usize);
                                let di = dx.idx(b, c, iy, ix);
                                dx.data_mut()[di] += go * w.at(o, i, ky, kx);
                                let wi = dw.idx(o, i, ky, kx);
                                dw.data_mut()[wi] += go * x.at(b, c, iy, ix);
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Depthwise convolution with one kernel set per batch sample, stride 1.
pub fn dynamic_forward(x: &Tensor4, w: &Tensor4, padding: usize) -> Result<Tensor4> {
    let [n, c, h, wid] = x.dims();
    let [wn, wc, kh, kw] = w.dims();
    if wn != n || wc != c {
        return Err(Error::shape(format!(
            "dynamic kernel extents {:?} do not match input {:?}",
            w.dims(),
            x.dims()
        )));
    }
    let oh = out_extent(h, kh, 1, padding)?;
    let ow = out_extent(wid, kw, 1, padding)?;
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        let iy = (oy + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox + kx) as isize - padding as isize;
                            if ix < 0 || ix >= wid as isize {
                                continue;
                            }
                            acc += x.at(b, ch, iy as usize, ix as usize) * w.at(b, ch, ky, kx);
                        }
                    }
                    out.set(b, ch, oy, ox, acc);
                }
            }
        }
    }
    Ok(out)
}

pub fn dynamic_backward(
    x: &Tensor4,
    w: &Tensor4,
    padding: usize,
    grad_out: &Tensor4,
) -> (Tensor4, Tensor4) {
    let [n, c, h, wid] = x.dims();
    let [_, _, kh, kw] = w.dims();
    let [_, _, oh, ow] = grad_out.dims();
    let mut dx = Tensor4::zeros(x.dims());
    let mut dw = Tensor4::zeros(w.dims());
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = grad_out.at(b, ch, oy, ox);
                    for ky in 0..kh {
                        let iy = (oy + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox + kx) as isize - padding as isize;
                            if ix < 0 || ix >= wid as isize {
                                continue;
                            }
                            let (iy, ix) = (iy as usize, ix as usize);
                            let di = dx.idx(b, ch, iy, ix);
                            dx.data_mut()[di] += go * w.at(b, ch, ky, kx);
                            let wi = dw.idx(b, ch, ky, kx);
                            dw.data_mut()[wi] += go * x.at(b, ch, iy, ix);
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// W[b,c] = sum_g att[b,c,0,g] * banks[g,c], mixing expert kernels per sample.
pub fn kernel_mix_forward(att: &Tensor4, banks: &Tensor4) -> Result<Tensor4> {
    let [n, c, one, g] = att.dims();
    let [gb, cb, kh, kw] = banks.dims();
    if one != 1 || g != gb || c != cb {
        return Err(Error::shape(format!(
            "kernel mix: attention {:?} vs banks {:?}",
            att.dims(),
            banks.dims()
        )));
    }
    let mut out = Tensor4::zeros([n, c, kh, kw]);
    for b in 0..n {
        for ch in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = 0.0;
                    for gi in 0..g {
                        acc += att.at(b, ch, 0, gi) * banks.at(gi, ch, ky, kx);
                    }
                    out.set(b, ch, ky, kx, acc);
                }
            }
        }
    }
    Ok(out)
}

pub fn kernel_mix_backward(att: &Tensor4, banks: &Tensor4, grad_out: &Tensor4) -> (Tensor4, Tensor4) {
    let [n, c, _, g] = att.dims();
    let [_, _, kh, kw] = banks.dims();
    let mut datt = Tensor4::zeros(att.dims());
    let mut dbanks = Tensor4::zeros(banks.dims());
    for b in 0..n {
        for ch in 0..c {
            for gi in 0..g {
                let mut acc = 0.0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let go = grad_out.at(b, ch, ky, kx);
                        acc += go * banks.at(gi, ch, ky, kx);
                        let bi = dbanks.idx(gi, ch, ky, kx);
                        dbanks.data_mut()[bi] += go * att.at(b, ch, 0, gi);
                    }
                }
                let ai = datt.idx(b, ch, 0, gi);
                datt.data_mut()[ai] += acc;
            }
        }
    }
    (datt, dbanks)
}
