//! Data-movement kernels: padding, cropping, channel slicing/concat,
//! batch-item slicing, token flattening, and window partitioning. All are
//! index bijections or fixed scatter patterns, so their backwards are the
//! mirrored moves.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Mirror an out-of-range coordinate back into [0, extent) without
/// repeating the border pixel. Requires the overhang to be < extent.
#[inline]
fn reflect(i: isize, extent: usize) -> usize {
    let n = extent as isize;
    let mut v = i;
    if v < 0 {
        v = -v;
    }
    if v >= n {
        v = 2 * n - 2 - v;
    }
    debug_assert!((0..n).contains(&v));
    v as usize
}

pub fn validate_reflect(x: &Tensor4, pads: [usize; 4]) -> Result<()> {
    let [_, _, h, w] = x.dims();
    let [top, bottom, left, right] = pads;
    if top >= h || bottom >= h || left >= w || right >= w {
        return Err(Error::shape(format!(
            "reflective padding {pads:?} too large for {h}x{w}"
        )));
    }
    Ok(())
}

pub fn pad_reflect_forward(x: &Tensor4, pads: [usize; 4]) -> Tensor4 {
    let [n, c, h, w] = x.dims();
    let [top, bottom, left, right] = pads;
    let mut out = Tensor4::zeros([n, c, h + top + bottom, w + left + right]);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..h + top + bottom {
                let iy = reflect(oy as isize - top as isize, h);
                for ox in 0..w + left + right {
                    let ix = reflect(ox as isize - left as isize, w);
                    out.set(b, ch, oy, ox, x.at(b, ch, iy, ix));
                }
            }
        }
    }
    out
}

pub fn pad_reflect_backward(x_dims: [usize; 4], pads: [usize; 4], grad_out: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = x_dims;
    let [top, _, left, _] = pads;
    let [_, _, oh, ow] = grad_out.dims();
    let mut dx = Tensor4::zeros(x_dims);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                let iy = reflect(oy as isize - top as isize, h);
                for ox in 0..ow {
                    let ix = reflect(ox as isize - left as isize, w);
                    let i = dx.idx(b, ch, iy, ix);
                    dx.data_mut()[i] += grad_out.at(b, ch, oy, ox);
                }
            }
        }
    }
    dx
}

pub fn crop_forward(x: &Tensor4, top: usize, left: usize, oh: usize, ow: usize) -> Result<Tensor4> {
    let [n, c, h, w] = x.dims();
    if top + oh > h || left + ow > w {
        return Err(Error::shape(format!(
            "crop {oh}x{ow}+{top}+{left} exceeds {h}x{w}"
        )));
    }
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xq in 0..ow {
                    out.set(b, ch, y, xq, x.at(b, ch, y + top, xq + left));
                }
            }
        }
    }
    Ok(out)
}

pub fn crop_backward(x_dims: [usize; 4], top: usize, left: usize, grad_out: &Tensor4) -> Tensor4 {
    let [_, _, oh, ow] = grad_out.dims();
    let [n, c, _, _] = x_dims;
    let mut dx = Tensor4::zeros(x_dims);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xq in 0..ow {
                    let i = dx.idx(b, ch, y + top, xq + left);
                    dx.data_mut()[i] = grad_out.at(b, ch, y, xq);
                }
            }
        }
    }
    dx
}

pub fn slice_channels_forward(x: &Tensor4, start: usize, count: usize) -> Result<Tensor4> {
    let [n, c, h, w] = x.dims();
    if start + count > c {
        return Err(Error::shape(format!(
            "channel slice [{start}, {}) exceeds {c} channels",
            start + count
        )));
    }
    let mut out = Tensor4::zeros([n, count, h, w]);
    for b in 0..n {
        for ch in 0..count {
            for y in 0..h {
                for xq in 0..w {
                    out.set(b, ch, y, xq, x.at(b, ch + start, y, xq));
                }
            }
        }
    }
    Ok(out)
}

pub fn slice_channels_backward(x_dims: [usize; 4], start: usize, grad_out: &Tensor4) -> Tensor4 {
    let [_, count, h, w] = grad_out.dims();
    let n = x_dims[0];
    let mut dx = Tensor4::zeros(x_dims);
    for b in 0..n {
        for ch in 0..count {
            for y in 0..h {
                for xq in 0..w {
                    let i = dx.idx(b, ch + start, y, xq);
                    dx.data_mut()[i] = grad_out.at(b, ch, y, xq);
                }
            }
        }
    }
    dx
}

pub fn concat_channels_forward(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    let [n, ca, h, w] = a.dims();
    let [nb, cb, hb, wb] = b.dims();
    if n != nb || h != hb || w != wb {
        return Err(Error::shape(format!(
            "channel concat: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut out = Tensor4::zeros([n, ca + cb, h, w]);
    for bi in 0..n {
        for ch in 0..ca + cb {
            for y in 0..h {
                for xq in 0..w {
                    let v = if ch < ca {
                        a.at(bi, ch, y, xq)
                    } else {
                        b.at(bi, ch - ca, y, xq)
                    };
                    out.set(bi, ch, y, xq, v);
                }
            }
        }
    }
    Ok(out)
}

pub fn concat_channels_backward(ca: usize, cb: usize, grad_out: &Tensor4) -> (Tensor4, Tensor4) {
    let [n, _, h, w] = grad_out.dims();
    let da = slice_channels_forward(grad_out, 0, ca).expect("concat grad split");
    let db = slice_channels_forward(grad_out, ca, cb).expect("concat grad split");
    let _ = (n, h, w);
    (da, db)
}

pub fn slice_item_forward(x: &Tensor4, index: usize) -> Result<Tensor4> {
    let [n, c, h, w] = x.dims();
    if index >= n {
        return Err(Error::shape(format!("batch index {index} out of {n}")));
    }
    let stride = c * h * w;
    let mut out = Tensor4::zeros([1, c, h, w]);
    out.data_mut()
        .copy_from_slice(&x.data()[index * stride..(index + 1) * stride]);
    Ok(out)
}

pub fn slice_item_backward(x_dims: [usize; 4], index: usize, grad_out: &Tensor4) -> Tensor4 {
    let stride: usize = x_dims[1] * x_dims[2] * x_dims[3];
    let mut dx = Tensor4::zeros(x_dims);
    dx.data_mut()[index * stride..(index + 1) * stride].copy_from_slice(grad_out.data());
    dx
}

/// (B,C,H,W) -> (B,1,H*W,C): one row of pixel features per raster position.
pub fn tokens_from_image_forward(x: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = x.dims();
    let mut out = Tensor4::zeros([n, 1, h * w, c]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xq in 0..w {
                    out.set(b, 0, y * w + xq, ch, x.at(b, ch, y, xq));
                }
            }
        }
    }
    out
}

pub fn image_from_tokens_forward(x: &Tensor4, h: usize, w: usize) -> Result<Tensor4> {
    let [n, one, tokens, c] = x.dims();
    if one != 1 || tokens != h * w {
        return Err(Error::shape(format!(
            "token tensor {:?} does not fold to {h}x{w}",
            x.dims()
        )));
    }
    let mut out = Tensor4::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xq in 0..w {
                    out.set(b, ch, y, xq, x.at(b, 0, y * w + xq, ch));
                }
            }
        }
    }
    Ok(out)
}

/// (B,C,H,W) -> (B*windows, 1, ws*ws, C) over non-overlapping ws x ws tiles.
pub fn window_partition_forward(x: &Tensor4, ws: usize) -> Result<Tensor4> {
    let [n, c, h, w] = x.dims();
    if ws == 0 || h % ws != 0 || w % ws != 0 {
        return Err(Error::shape(format!(
            "window size {ws} does not tile {h}x{w}"
        )));
    }
    let (nwy, nwx) = (h / ws, w / ws);
    let mut out = Tensor4::zeros([n * nwy * nwx, 1, ws * ws, c]);
    for b in 0..n {
        for wy in 0..nwy {
            for wx in 0..nwx {
                let wi = b * nwy * nwx + wy * nwx + wx;
                for ty in 0..ws {
                    for tx in 0..ws {
                        for ch in 0..c {
                            out.set(wi, 0, ty * ws + tx, ch, x.at(b, ch, wy * ws + ty, wx * ws + tx));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn window_merge_forward(x: &Tensor4, ws: usize, h: usize, w: usize) -> Result<Tensor4> {
    let (nwy, nwx) = (h / ws, w / ws);
    let [wn, one, tokens, c] = x.dims();
    if one != 1 || tokens != ws * ws || wn % (nwy * nwx) != 0 {
        return Err(Error::shape(format!(
            "window tensor {:?} does not merge to {h}x{w} with ws={ws}",
            x.dims()
        )));
    }
    let n = wn / (nwy * nwx);
    let mut out = Tensor4::zeros([n, c, h, w]);
    for b in 0..n {
        for wy in 0..nwy {
            for wx in 0..nwx {
                let wi = b * nwy * nwx + wy * nwx + wx;
                for ty in 0..ws {
                    for tx in 0..ws {
                        for ch in 0..c {
                            out.set(b, ch, wy * ws + ty, wx * ws + tx, x.at(wi, 0, ty * ws + tx, ch));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        // extent 4: -2 -1 | 0 1 2 3 | 4 5  ->  2 1 | 0 1 2 3 | 2 1
        assert_eq!(reflect(-2, 4), 2);
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(5, 4), 1);
    }

    #[test]
    fn windows_round_trip() {
        let x = Tensor4::from_fn([2, 3, 4, 8], |b, c, y, xq| (b * 997 + c * 131 + y * 17 + xq) as f64);
        let wins = window_partition_forward(&x, 4).unwrap();
        let back = window_merge_forward(&wins, 4, 4, 8).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn tokens_round_trip() {
        let x = Tensor4::from_fn([1, 2, 3, 5], |_, c, y, xq| (c * 100 + y * 10 + xq) as f64);
        let tok = tokens_from_image_forward(&x);
        assert_eq!(tok.dims(), [1, 1, 15, 2]);
        let back = image_from_tokens_forward(&tok, 3, 5).unwrap();
        assert_eq!(back, x);
    }
}
