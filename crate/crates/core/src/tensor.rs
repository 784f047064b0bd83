//! Dense rank-4 tensors in `(batch, channel, height, width)` layout.
//!
//! Storage is a flat row-major `f64` buffer. All forward kernels in this
//! crate run in f64 so that finite-difference gradient checks are reliable;
//! serialized payloads are f32 (see [`crate::vrst`]).

use crate::error::{Error, Result};

/// Dense rank-4 array with optional gradient buffer.
///
/// `data.len()` always equals the product of `dims`. The gradient, when
/// present, has identical extents and is only populated for parameters
/// after a backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor4 {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if data.len() != numel {
            return Err(Error::shape(format!(
                "buffer of {} values does not fill extents {:?} ({} elements)",
                data.len(),
                dims,
                numel
            )));
        }
        Ok(Tensor4 {
            dims,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        let numel = dims.iter().product();
        Tensor4 {
            dims,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(dims: [usize; 4], value: f64) -> Self {
        let numel = dims.iter().product();
        Tensor4 {
            dims,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn ones(dims: [usize; 4]) -> Self {
        Self::full(dims, 1.0)
    }

    /// Scalar tensor of extent (1,1,1,1).
    pub fn scalar_tensor(value: f64) -> Self {
        Tensor4 {
            dims: [1, 1, 1, 1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Flat vector as a (1,1,1,n) tensor.
    pub fn from_flat(data: Vec<f64>) -> Self {
        Tensor4 {
            dims: [1, 1, 1, data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut t = Tensor4::zeros(dims);
        for b in 0..dims[0] {
            for c in 0..dims[1] {
                for y in 0..dims[2] {
                    for x in 0..dims[3] {
                        let i = t.idx(b, c, y, x);
                        t.data[i] = f(b, c, y, x);
                    }
                }
            }
        }
        t
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }
    #[inline]
    pub fn batch(&self) -> usize {
        self.dims[0]
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.dims[1]
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.dims[2]
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.dims[3]
    }
    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn idx(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(b, c, y, x);
        self.data[i] = v;
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a (1,1,1,1) tensor.
    pub fn scalar(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "expected scalar tensor, found extents {:?}",
                self.dims
            )));
        }
        Ok(self.data[0])
    }

    /// Same buffer under different extents; element count must match.
    pub fn reshaped(&self, dims: [usize; 4]) -> Result<Tensor4> {
        let numel: usize = dims.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(format!(
                "cannot view {:?} as {:?}",
                self.dims, dims
            )));
        }
        Tensor4::new(dims, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Elementwise accumulate, used for gradient aggregation.
    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "accumulate extents {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_buffer() {
        assert!(Tensor4::new([1, 2, 2, 2], vec![0.0; 7]).is_err());
        assert!(Tensor4::new([1, 2, 2, 2], vec![0.0; 8]).is_ok());
    }

    #[test]
    fn row_major_layout() {
        let t = Tensor4::from_fn([2, 3, 4, 5], |b, c, y, x| (b * 1000 + c * 100 + y * 10 + x) as f64);
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data()[t.numel() - 1], 1234.0);
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor4::from_flat(vec![1.0, 2.0, 3.0, 4.0]);
        let r = t.reshaped([1, 1, 2, 2]).unwrap();
        assert_eq!(r.at(0, 0, 1, 0), 3.0);
        assert!(t.reshaped([1, 1, 3, 2]).is_err());
    }
}
