//! Adaptive average pooling (global pooling is the (1,1) case).

use crate::tensor::Tensor4;

#[inline]
fn bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end.max(start + 1))
}

pub fn forward(x: &Tensor4, oh: usize, ow: usize) -> Tensor4 {
    let [n, c, h, w] = x.dims();
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                let (y0, y1) = bin(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1) = bin(ox, w, ow);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for xq in x0..x1 {
                            acc += x.at(b, ch, y, xq);
                        }
                    }
                    out.set(b, ch, oy, ox, acc / ((y1 - y0) * (x1 - x0)) as f64);
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
                let (y0, y1) = bin(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1) = bin(ox, w, ow);
                    let g = grad_out.at(b, ch, oy, ox) / ((y1 - y0) * (x1 - x0)) as f64;
                    for y in y0..y1 {
                        for xq in x0..x1 {
                            let i = dx.idx(b, ch, y, xq);
                            dx.data_mut()[i] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Pool a bare 2-D grid (prior construction outside the tape).
pub fn pool_grid(grid: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let t = Tensor4::new([1, 1, h, w], grid.to_vec()).expect("grid extents");
    forward(&t, oh, ow).data().to_vec()
}
