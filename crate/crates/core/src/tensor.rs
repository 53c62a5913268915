//! Dense row-major tensors.
//!
//! A [`Tensor`] is a shape plus a flat buffer; ownership is plain `Vec` and
//! views are slices. Constructors and every op validate finiteness: a tensor
//! holding NaN or Inf never circulates, the offending operation reports a
//! numeric failure instead.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor after checking the shape/data contract.
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>, context: &str) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "{context}: shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.check_finite(context)?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![S::zero(); numel] }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    /// Internal constructor for freshly computed buffers; the caller is
    /// responsible for running `check_finite` before the tensor escapes.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn scalar_value(&self) -> Result<S> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!(
                "expected a scalar tensor, got shape {:?}",
                self.shape
            )))
        }
    }

    /// Errors with a numeric failure naming `context` if any element is
    /// NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::numeric(format!(
                    "{context}: non-finite value {v} at flat index {i} (shape {:?})",
                    self.shape
                )));
            }
        }
        Ok(())
    }

    /// Elementwise map to another scalar width, preserving shape.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64_c(v.to_f64_c())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_enforces_shape_data_agreement() {
        let err = Tensor::from_vec(vec![2, 3], vec![1.0f32; 5], "test").unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let ok = Tensor::from_vec(vec![2, 3], vec![1.0f32; 6], "test").unwrap();
        assert_eq!(ok.numel(), 6);
    }

    #[test]
    fn non_finite_elements_are_a_numeric_failure() {
        let err = Tensor::from_vec(vec![2], vec![1.0f32, f32::NAN], "stem.conv").unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(err.to_string().contains("stem.conv"));
        let err = Tensor::from_vec(vec![1], vec![f64::INFINITY], "x").unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn scalar_tensors_expose_their_value() {
        let s = Tensor::scalar(-0.5f32);
        assert!(s.is_scalar());
        assert_eq!(s.scalar_value().unwrap(), -0.5);
        let v = Tensor::from_vec(vec![2], vec![0.0f32, 1.0], "t").unwrap();
        assert!(v.scalar_value().is_err());
    }

    #[test]
    fn cast_round_trips_between_widths() {
        let t = Tensor::from_vec(vec![3], vec![0.25f32, -1.5, 3.0], "t").unwrap();
        let d: Tensor<f64> = t.cast();
        let back: Tensor<f32> = d.cast();
        assert_eq!(t, back);
    }
}
