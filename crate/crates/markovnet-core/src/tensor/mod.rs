//! Minimal dense-tensor numeric core with reverse-mode automatic
//! differentiation: enough to express and train small convolutional
//! autoencoders in reproducible 64-bit arithmetic.

mod adam;
mod conv;
mod init;
mod tape;

pub use adam::{adam_step, AdamState};
pub use conv::Padding;
pub use init::glorot_uniform;
pub use tape::{BnMode, RunningStats, Tape, VarId};

use crate::scalar::Real;
use crate::{Error, Result};

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Clone, Debug)]
pub struct Tensor<R> {
    shape: Vec<usize>,
    data: Vec<R>,
    requires_grad: bool,
    grad: Option<Vec<R>>,
}

impl<R: Real> Tensor<R> {
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![R::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<R>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract("tensor extents must be positive"));
        }
        if data.len() != numel {
            return Err(Error::contract(format!(
                "tensor data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(x: R) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) -> &mut Self {
        self.requires_grad = flag;
        self
    }

    pub fn grad(&self) -> Option<&[R]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<R>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.data.len(), "gradient shape mismatch");
        }
        self.grad = grad;
    }

    /// Reinterpret the data under a new shape with identical element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<R>> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::contract(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        let mut out = self.clone();
        out.shape = shape.to_vec();
        Ok(out)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, R> {
        self.data.iter()
    }

    /// Squared Frobenius norm of the whole tensor.
    pub fn sum_squares(&self) -> R {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_mismatched_length() {
        let r = Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::from_vec(&[2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[4, 2]).is_err());
    }
}
