//! Dense n-dimensional tensors.
//!
//! A tensor is a shape plus a flat row-major value buffer, with an optional
//! gradient buffer of the same shape. Autodiff bookkeeping lives in
//! [`crate::graph::ComputeGraph`]; this type is plain data.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    /// Populated on leaves after a backward pass.
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} implies {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); n], grad: None, requires_grad: false }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n], grad: None, requires_grad: false }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![], data: vec![value], grad: None, requires_grad: false }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Convert element type; exact when widening f32 -> f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.to64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &x| m.max(x.to64().abs()))
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &x in &self.data {
            let v = x.to64();
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_tensor_has_one_element() {
        let t = Tensor::<f64>::scalar(4.5);
        assert_eq!(t.numel(), 1);
        assert!(t.shape().is_empty());
        assert_eq!(t.item(), 4.5);
    }

    #[test]
    fn cast_widens_exactly() {
        let t = Tensor::<f32>::new(vec![2], vec![0.1f32, -3.25]).unwrap();
        let w: Tensor<f64> = t.cast();
        assert_eq!(w.data()[0], 0.1f32 as f64);
        assert_eq!(w.data()[1], -3.25);
    }
}
