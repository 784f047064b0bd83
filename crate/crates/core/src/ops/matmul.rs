//! Batched token-matrix products for attention. Tensors are treated as
//! stacks of (rows x cols) matrices over the leading two axes.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// out[n,m] = sum_d a[n,d] * b[m,d]  (a · b^T)
pub fn nt_forward(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    let [ba, ga, n, d] = a.dims();
    let [bb, gb, m, db] = b.dims();
    if ba != bb || ga != gb || d != db {
        return Err(Error::shape(format!(
            "matmul_nt: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut out = Tensor4::zeros([ba, ga, n, m]);
    for bi in 0..ba {
        for gi in 0..ga {
            for i in 0..n {
                for j in 0..m {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += a.at(bi, gi, i, k) * b.at(bi, gi, j, k);
                    }
                    out.set(bi, gi, i, j, acc);
                }
            }
        }
    }
    Ok(out)
}

pub fn nt_backward(a: &Tensor4, b: &Tensor4, grad_out: &Tensor4) -> (Tensor4, Tensor4) {
    let [ba, ga, n, d] = a.dims();
    let m = b.dims()[2];
    let mut da = Tensor4::zeros(a.dims());
    let mut db = Tensor4::zeros(b.dims());
    for bi in 0..ba {
        for gi in 0..ga {
            for i in 0..n {
                for j in 0..m {
                    let g = grad_out.at(bi, gi, i, j);
                    for k in 0..d {
                        let ai = da.idx(bi, gi, i, k);
                        da.data_mut()[ai] += g * b.at(bi, gi, j, k);
                        let bj = db.idx(bi, gi, j, k);
                        db.data_mut()[bj] += g * a.at(bi, gi, i, k);
                    }
                }
            }
        }
    }
    (da, db)
}

/// out[n,d] = sum_m a[n,m] * b[m,d]
pub fn nn_forward(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    let [ba, ga, n, m] = a.dims();
    let [bb, gb, mb, d] = b.dims();
    if ba != bb || ga != gb || m != mb {
        return Err(Error::shape(format!(
            "matmul: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut out = Tensor4::zeros([ba, ga, n, d]);
    for bi in 0..ba {
        for gi in 0..ga {
            for i in 0..n {
                for k in 0..d {
                    let mut acc = 0.0;
                    for j in 0..m {
                        acc += a.at(bi, gi, i, j) * b.at(bi, gi, j, k);
                    }
                    out.set(bi, gi, i, k, acc);
                }
            }
        }
    }
    Ok(out)
}

pub fn nn_backward(a: &Tensor4, b: &Tensor4, grad_out: &Tensor4) -> (Tensor4, Tensor4) {
    let [ba, ga, n, m] = a.dims();
    let d = b.dims()[3];
    let mut da = Tensor4::zeros(a.dims());
    let mut db = Tensor4::zeros(b.dims());
    for bi in 0..ba {
        for gi in 0..ga {
            for i in 0..n {
                for j in 0..m {
                    let mut acc = 0.0;
                    for k in 0..d {
                        let g = grad_out.at(bi, gi, i, k);
                        acc += g * b.at(bi, gi, j, k);
                        let bj = db.idx(bi, gi, j, k);
                        db.data_mut()[bj] += a.at(bi, gi, i, j) * g;
                    }
                    let ai = da.idx(bi, gi, i, j);
                    da.data_mut()[ai] += acc;
                }
            }
        }
    }
    (da, db)
}
