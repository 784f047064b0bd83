//! Bilinear resampling, align-corners = false.
//!
//! The source coordinate for output index `o` is `(o + 0.5) * in/out - 0.5`;
//! taps are clamped to the image border. This convention is part of the
//! serialization-stable contract of the crate.

use crate::tensor::Tensor4;

/// The four taps and weights for one output coordinate.
#[inline]
pub fn taps(out_idx: usize, in_extent: usize, out_extent: usize) -> (usize, usize, f64) {
    let scale = in_extent as f64 / out_extent as f64;
    let src = (out_idx as f64 + 0.5) * scale - 0.5;
    let i0 = src.floor();
    let frac = src - i0;
    let lo = (i0.max(0.0) as usize).min(in_extent - 1);
    let hi = ((i0 + 1.0).max(0.0) as usize).min(in_extent - 1);
    (lo, hi, frac)
}

pub fn forward(x: &Tensor4, oh: usize, ow: usize) -> Tensor4 {
    let [n, c, h, w] = x.dims();
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                let (y0, y1, fy) = taps(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1, fx) = taps(ox, w, ow);
                    let v = x.at(b, ch, y0, x0) * (1.0 - fy) * (1.0 - fx)
                        + x.at(b, ch, y0, x1) * (1.0 - fy) * fx
                        + x.at(b, ch, y1, x0) * fy * (1.0 - fx)
                        + x.at(b, ch, y1, x1) * fy * fx;
                    out.set(b, ch, oy, ox, v);
                }
            }
        }
    }
    out
}

pub fn backward(x_dims: [usize; 4], grad_out: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = x_dims;
    let [_, _, oh, ow] = grad_out.dims();
    let mut dx = Tensor4::zeros(x_dims);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                let (y0, y1, fy) = taps(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1, fx) = taps(ox, w, ow);
                    let g = grad_out.at(b, ch, oy, ox);
                    let i00 = dx.idx(b, ch, y0, x0);
                    dx.data_mut()[i00] += g * (1.0 - fy) * (1.0 - fx);
                    let i01 = dx.idx(b, ch, y0, x1);
                    dx.data_mut()[i01] += g * (1.0 - fy) * fx;
                    let i10 = dx.idx(b, ch, y1, x0);
                    dx.data_mut()[i10] += g * fy * (1.0 - fx);
                    let i11 = dx.idx(b, ch, y1, x1);
                    dx.data_mut()[i11] += g * fy * fx;
                }
            }
        }
    }
    dx
}

/// Resize a bare 2-D grid (used for prior upsampling outside the tape).
pub fn resize_grid(grid: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let t = Tensor4::new([1, 1, h, w], grid.to_vec()).expect("grid extents");
    forward(&t, oh, ow).data().to_vec()
}
