//! Dense row-major tensors. Image batches use NCHW layout.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(shape, data.len()));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn scalar(value: S) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Samples i.i.d. `N(0, std^2)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                S::from_f64_lossy(z * std)
            })
            .collect();
        Self { shape: shape.to_vec(), data }
    }

    /// Samples i.i.d. entries uniform on `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| S::from_f64_lossy(rng.random_range(lo..hi))).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(shape(alloc::format!("expected rank-4 NCHW tensor, got {other:?}"))),
        }
    }

    pub fn reshape(mut self, new_shape: &[usize]) -> Result<Self> {
        let n: usize = new_shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err(new_shape, self.data.len()));
        }
        self.shape = new_shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies batch item `i` of an NCHW tensor into a `1xCxHxW` tensor.
    pub fn batch_item(&self, i: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        if i >= n {
            return Err(shape(alloc::format!("batch index {i} out of range {n}")));
        }
        let sz = c * h * w;
        Ok(Self { shape: vec![1, c, h, w], data: self.data[i * sz..(i + 1) * sz].to_vec() })
    }

    /// Concatenates tensors along the batch (first) dimension.
    pub fn stack_batch(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| shape("stack of zero tensors"))?;
        let inner = &first.shape[1..];
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut n = 0;
        for t in items {
            if &t.shape[1..] != inner {
                return Err(shape("stack_batch inner shape mismatch"));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape_v = vec![n];
        shape_v.extend_from_slice(inner);
        Ok(Self { shape: shape_v, data })
    }
}

fn shape_err(s: &[usize], len: usize) -> crate::error::Error {
    shape(alloc::format!("shape {s:?} does not match {len} elements"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reshape_checks_element_count() {
        let t = Tensor::<f32>::zeros(&[2, 3]);
        assert!(t.clone().reshape(&[3, 2]).is_ok());
        assert!(t.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn stack_and_split_batch() {
        let a = Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![3.0, 4.0]).unwrap();
        let s = Tensor::stack_batch(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 1, 1, 2]);
        assert_eq!(s.batch_item(1).unwrap(), b);
        assert_eq!(s.batch_item(0).unwrap(), a);
    }
}
