//! Row softmax over the last tensor axis, with max-subtraction.

use crate::tensor::Tensor4;

pub fn forward(x: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = x.dims();
    let mut out = Tensor4::zeros(x.dims());
    let rows = n * c * h;
    for r in 0..rows {
        let s = r * w;
        let row = &x.data()[s..s + w];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in 0..w {
            let e = (row[i] - max).exp();
            out.data_mut()[s + i] = e;
            sum += e;
        }
        for i in 0..w {
            out.data_mut()[s + i] /= sum;
        }
    }
    out
}

pub fn backward(y: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = y.dims();
    let mut dx = Tensor4::zeros(y.dims());
    let rows = n * c * h;
    for r in 0..rows {
        let s = r * w;
        let mut dot = 0.0;
        for i in 0..w {
            dot += grad_out.data()[s + i] * y.data()[s + i];
        }
        for i in 0..w {
            dx.data_mut()[s + i] = y.data()[s + i] * (grad_out.data()[s + i] - dot);
        }
    }
    dx
}
