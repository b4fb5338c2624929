//! Dense row-major tensors.
//!
//! Values are plain `Vec`-backed buffers with a shape. Rank 0 is a scalar
//! (one element); zero-length dimensions are rejected at construction so
//! every tensor holds at least one value. Tensors are treated as immutable
//! values by the graph layer: ops allocate fresh outputs rather than
//! mutating inputs, which is what lets read-only evaluation run in
//! parallel.

use crate::error::Error;
use crate::scalar::Scalar;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = checked_len(shape).expect("zero dimension in tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); len],
        }
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        let len = checked_len(shape).expect("zero dimension in tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; len],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let len = checked_len(shape)
            .ok_or_else(|| Error::shape(format!("zero dimension in shape {shape:?}")))?;
        if data.len() != len {
            return Err(Error::shape(format!(
                "shape {shape:?} implies {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
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
        false
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of bounds for dim {i} ({dim})");
            off = off * dim + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> S {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], v: S) {
        let off = self.offset(index);
        self.data[off] = v;
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise combination; shapes must match exactly.
    pub fn zip_map(&self, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch: {:?} vs {:?}",
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

    /// Sum of squares, accumulated in f64.
    pub fn sum_sq(&self) -> f64 {
        self.data
            .iter()
            .map(|x| {
                let v = x.to_f64_lossy();
                v * v
            })
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Convert elementwise to another scalar type (through f64).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| T::from_f64(x.to_f64_lossy()))
                .collect(),
        }
    }
}

fn checked_len(shape: &[usize]) -> Option<usize> {
    let mut len = 1usize;
    for &d in shape {
        if d == 0 {
            return None;
        }
        len = len.checked_mul(d)?;
    }
    Some(len)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_and_indexing() {
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.at(&[0, 0]), 1.0);
        assert_eq!(t.at(&[1, 2]), 6.0);
        assert_eq!(t.offset(&[1, 0]), 3);
    }

    #[test]
    fn scalar_tensor_has_rank_zero() {
        let s = Tensor::<f64>::scalar(2.5);
        assert!(s.is_scalar());
        assert_eq!(s.len(), 1);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.at(&[]), 2.5);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let r = Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 3]);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn zero_dimension_is_an_error() {
        let r = Tensor::<f32>::from_vec(&[2, 0], vec![]);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn zip_map_checks_shapes() {
        let a = Tensor::<f32>::filled(&[2, 2], 1.0);
        let b = Tensor::<f32>::filled(&[4], 1.0);
        assert!(a.zip_map(&b, |x, y| x + y).is_err());
        let c = Tensor::<f32>::filled(&[2, 2], 2.0);
        let sum = a.zip_map(&c, |x, y| x + y).unwrap();
        assert_eq!(sum.data(), &[3.0; 4]);
    }

    #[test]
    fn cast_roundtrips_exact_values() {
        let a = Tensor::<f32>::from_vec(&[3], vec![0.5, -1.25, 3.0]).unwrap();
        let b: Tensor<f64> = a.cast();
        assert_eq!(b.data(), &[0.5, -1.25, 3.0]);
        let c: Tensor<f32> = b.cast();
        assert_eq!(c, a);
    }
}
