//! Dense row-major f64 tensors.
//!
//! All compute in this crate runs in 64-bit floats; checkpoints cast to
//! f32 on disk (see `checkpoint`).

use rand::Rng;

use crate::error::{Error, Result};

/// A dense tensor with row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let numel = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
        }
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let numel = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn from_vec(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!(
                    "dims {:?} imply {} elements, got {}",
                    dims,
                    numel,
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            dims,
            data,
            requires_grad: false,
        })
    }

    /// Uniform init in [-bound, bound], drawn element by element in row-major order.
    pub fn uniform(dims: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = dims.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor {
            dims: dims.to_vec(),
            data,
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.dims.len(), 2, "rows() needs a rank-2 tensor");
        self.dims[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.dims.len(), 2, "cols() needs a rank-2 tensor");
        self.dims[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_element_count() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn row_access_is_row_major() {
        let t = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.row(1), &[4.0, 5.0, 6.0]);
        assert_eq!(t.get2(0, 2), 3.0);
    }
}
