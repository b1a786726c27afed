//! Dense row-major tensors over 64-bit reals and complex pairs.
//!
//! These are the value types everything else computes with. A `Tensor`
//! owns a flat `Vec<f64>` in row-major order together with its shape;
//! a `ComplexTensor` keeps separate real and imaginary planes of equal
//! length. Both are plain values: cheap to clone at the sizes used
//! here, immutable once handed to a tape, and free of interior
//! mutability.

use crate::error::{CoreError, Result};

/// Dense n-dimensional array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Dense n-dimensional array of complex values stored as split
/// real/imaginary planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    pub(crate) re: Vec<f64>,
    pub(crate) im: Vec<f64>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(CoreError::invalid(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        if numel(&shape) != data.len() {
            return Err(CoreError::shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let n = numel(shape);
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let s = strides(&self.shape);
        let off: usize = index.iter().zip(&s).map(|(i, st)| i * st).sum();
        self.data[off]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let s = strides(&self.shape);
        let off: usize = index.iter().zip(&s).map(|(i, st)| i * st).sum();
        self.data[off] = value;
    }

    /// Reinterpret the buffer under a new shape with identical element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.data.len() {
            return Err(CoreError::shape(format!(
                "cannot reshape {:?} ({} elems) to {:?} ({})",
                self.shape,
                self.data.len(),
                shape,
                numel(shape)
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(CoreError::shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| c * x)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(CoreError::NonFinite {
                context: context.to_string(),
            })
        }
    }

    /// Embed into a complex tensor with zero imaginary plane.
    pub fn to_complex(&self) -> ComplexTensor {
        ComplexTensor {
            shape: self.shape.clone(),
            re: self.data.clone(),
            im: vec![0.0; self.data.len()],
        }
    }
}

impl ComplexTensor {
    pub fn new(shape: Vec<usize>, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        if re.len() != im.len() {
            return Err(CoreError::shape(format!(
                "re ({}) and im ({}) length differ",
                re.len(),
                im.len()
            )));
        }
        if numel(&shape) != re.len() {
            return Err(CoreError::shape(format!(
                "shape {:?} implies {} elements, planes have {}",
                shape,
                numel(&shape),
                re.len()
            )));
        }
        Ok(ComplexTensor { shape, re, im })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = numel(shape);
        ComplexTensor {
            shape: shape.to_vec(),
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut [f64] {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut [f64] {
        &mut self.im
    }

    /// Both planes mutably at once.
    pub fn planes_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.re, &mut self.im)
    }

    pub fn at(&self, index: &[usize]) -> (f64, f64) {
        let s = strides(&self.shape);
        let off: usize = index.iter().zip(&s).map(|(i, st)| i * st).sum();
        (self.re[off], self.im[off])
    }

    pub fn set(&mut self, index: &[usize], re: f64, im: f64) {
        let s = strides(&self.shape);
        let off: usize = index.iter().zip(&s).map(|(i, st)| i * st).sum();
        self.re[off] = re;
        self.im[off] = im;
    }

    pub fn conj(&self) -> ComplexTensor {
        ComplexTensor {
            shape: self.shape.clone(),
            re: self.re.clone(),
            im: self.im.iter().map(|&x| -x).collect(),
        }
    }

    pub fn add(&self, other: &ComplexTensor) -> Result<ComplexTensor> {
        if self.shape != other.shape {
            return Err(CoreError::shape(format!(
                "complex add on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(ComplexTensor {
            shape: self.shape.clone(),
            re: self.re.iter().zip(&other.re).map(|(a, b)| a + b).collect(),
            im: self.im.iter().zip(&other.im).map(|(a, b)| a + b).collect(),
        })
    }

    /// Elementwise complex product.
    pub fn mul(&self, other: &ComplexTensor) -> Result<ComplexTensor> {
        if self.shape != other.shape {
            return Err(CoreError::shape(format!(
                "complex mul on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let n = self.len();
        let mut re = vec![0.0; n];
        let mut im = vec![0.0; n];
        for i in 0..n {
            re[i] = self.re[i] * other.re[i] - self.im[i] * other.im[i];
            im[i] = self.re[i] * other.im[i] + self.im[i] * other.re[i];
        }
        Ok(ComplexTensor {
            shape: self.shape.clone(),
            re,
            im,
        })
    }

    pub fn scale(&self, c: f64) -> ComplexTensor {
        ComplexTensor {
            shape: self.shape.clone(),
            re: self.re.iter().map(|x| c * x).collect(),
            im: self.im.iter().map(|x| c * x).collect(),
        }
    }

    /// Sum of squared magnitudes.
    pub fn energy(&self) -> f64 {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r * r + i * i)
            .sum()
    }

    pub fn max_abs_im(&self) -> f64 {
        self.im.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.re.iter().all(|x| x.is_finite()) && self.im.iter().all(|x| x.is_finite())
    }

    /// Real part as a tensor, discarding the imaginary plane.
    pub fn re_tensor(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.re.clone(),
        }
    }

    /// Pack as a real tensor with a trailing extent-2 axis `[..., 2]`
    /// holding (re, im) pairs. Used for checkpoints and optimizer state.
    pub fn to_interleaved(&self) -> Tensor {
        let mut shape = self.shape.clone();
        shape.push(2);
        let mut data = Vec::with_capacity(self.len() * 2);
        for i in 0..self.len() {
            data.push(self.re[i]);
            data.push(self.im[i]);
        }
        Tensor { shape, data }
    }

    /// Inverse of [`ComplexTensor::to_interleaved`].
    pub fn from_interleaved(t: &Tensor) -> Result<ComplexTensor> {
        let shape = t.shape();
        if shape.last() != Some(&2) {
            return Err(CoreError::shape(format!(
                "interleaved complex tensor needs trailing extent 2, got {shape:?}"
            )));
        }
        let inner = shape[..shape.len() - 1].to_vec();
        let n = numel(&inner);
        let mut re = Vec::with_capacity(n);
        let mut im = Vec::with_capacity(n);
        for i in 0..n {
            re.push(t.data()[2 * i]);
            im.push(t.data()[2 * i + 1]);
        }
        ComplexTensor::new(inner, re, im)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_consistency_enforced() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn row_major_indexing() {
        let t = Tensor::from_fn(&[2, 3], |idx| (idx[0] * 10 + idx[1]) as f64);
        assert_eq!(t.data(), &[0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
        assert_eq!(t.at(&[1, 2]), 12.0);
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let r = t.reshape(&[2, 2]).unwrap();
        assert_eq!(r.shape(), &[2, 2]);
        assert_eq!(r.at(&[1, 0]), 3.0);
        assert!(t.reshape(&[3]).is_err());
    }

    #[test]
    fn complex_interleave_round_trip() {
        let c = ComplexTensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.0, 0.5, 2.0])
            .unwrap();
        let packed = c.to_interleaved();
        assert_eq!(packed.shape(), &[2, 2, 2]);
        let back = ComplexTensor::from_interleaved(&packed).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn complex_mul_matches_hand_computation() {
        let a = ComplexTensor::new(vec![1], vec![1.0], vec![2.0]).unwrap();
        let b = ComplexTensor::new(vec![1], vec![3.0], vec![-1.0]).unwrap();
        let c = a.mul(&b).unwrap();
        // (1+2i)(3-i) = 3 - i + 6i + 2 = 5 + 5i
        assert_eq!(c.re()[0], 5.0);
        assert_eq!(c.im()[0], 5.0);
    }
}
