//! Dense row-major tensors of `f64`.

use crate::error::{Error, Result};

/// A dense N-d array. Four-dimensional tensors are laid out as
/// `[batch, channels, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::shape("tensor", "rank", "rank must be at least 1"));
        }
        if shape.contains(&0) {
            return Err(Error::shape(
                "tensor",
                "extent",
                format!("all extents must be >= 1, got {shape:?}"),
            ));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(
                "tensor",
                "length",
                format!("shape {shape:?} needs {len} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&e| e >= 1),
            "invalid shape {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    /// Builds a tensor by evaluating `f` on every flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let len = shape.iter().product();
        let mut t = Self::zeros(shape);
        t.data = (0..len).map(f).collect();
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// True when every extent is 1.
    pub fn is_scalar(&self) -> bool {
        self.shape.iter().all(|&e| e == 1)
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(
                "set_grad",
                "length",
                format!("gradient has {} values, tensor {}", grad.len(), self.data.len()),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                "length",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// `(batch, channels, height, width)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::shape(
                "dims4",
                "rank",
                format!("expected rank 4, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn at4(&self, b: usize, c: usize, i: usize, j: usize) -> f64 {
        let (_, cs, h, w) = self.dims4().expect("rank-4 tensor");
        self.data[((b * cs + c) * h + i) * w + j]
    }

    /// Copy of one `[height, width]` plane of a rank-4 tensor.
    pub fn plane(&self, b: usize, c: usize) -> Vec<f64> {
        let (_, cs, h, w) = self.dims4().expect("rank-4 tensor");
        let start = (b * cs + c) * h * w;
        self.data[start..start + h * w].to_vec()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }
}

/// Largest elementwise absolute difference between two equally sized slices.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_must_match_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(err.to_string().contains("length"));
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn grad_buffer_length_checked() {
        let mut t = Tensor::zeros(&[2, 2]);
        assert!(t.set_grad(vec![1.0; 3]).is_err());
        t.set_grad(vec![1.0; 4]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0; 4]);
    }

    #[test]
    fn rank4_indexing_is_row_major() {
        let t = Tensor::from_fn(&[1, 2, 2, 3], |i| i as f64);
        assert_eq!(t.at4(0, 1, 1, 2), 11.0);
        assert_eq!(t.plane(0, 1), vec![6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
    }
}
