//! Dense row-major tensors.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array, row-major, NCHW for images.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("{numel} elements for shape {shape:?}"),
                data.len(),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape("item", "1 element", self.data.len())),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{} elements", self.data.len()),
                format!("{shape:?}"),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(
                "dims4",
                "[N, C, H, W]",
                format!("{:?}", self.shape),
            )),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape("zip_map", other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.sum() / T::lit(self.data.len() as f64)
    }

    /// Equal shape and identical bit patterns.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn mse(&self, other: &Self) -> Result<T> {
        self.expect_same_shape("mse", other)?;
        if self.data.is_empty() {
            return Ok(T::zero());
        }
        let s: T = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        Ok(s / T::lit(self.data.len() as f64))
    }

    /// Sample `n` of a batched tensor, keeping a leading unit dimension.
    pub fn batch_item(&self, n: usize) -> Result<Self> {
        let Some((&batch, rest)) = self.shape.split_first() else {
            return Err(Error::shape("batch_item", "rank >= 1", "scalar"));
        };
        if n >= batch {
            return Err(Error::invalid(
                "batch_item",
                format!("index {n} >= batch {batch}"),
            ));
        }
        let per: usize = rest.iter().product();
        let mut shape = vec![1];
        shape.extend_from_slice(rest);
        Ok(Self {
            shape,
            data: self.data[n * per..(n + 1) * per].to_vec(),
        })
    }

    /// Concatenate along the leading (batch) dimension.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors"))?;
        let rest = &first.shape[1..];
        let mut data = Vec::with_capacity(items.iter().map(|t| t.numel()).sum());
        let mut batch = 0;
        for item in items {
            if &item.shape[1..] != rest {
                return Err(Error::shape(
                    "stack",
                    format!("{:?}", first.shape),
                    format!("{:?}", item.shape),
                ));
            }
            batch += item.shape[0];
            data.extend_from_slice(&item.data);
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(rest);
        Ok(Self { shape, data })
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        Ok(())
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor<{}>{:?} [", T::NAME, self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn stack_and_batch_item_agree() {
        let a = Tensor::<f32>::from_fn([1, 2, 2], |i| i as f32);
        let b = Tensor::<f32>::from_fn([1, 2, 2], |i| 10.0 + i as f32);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert!(s.batch_item(0).unwrap().bits_eq(&a));
        assert!(s.batch_item(1).unwrap().bits_eq(&b));
    }

    #[test]
    fn cast_roundtrip_is_exact_for_f32_values() {
        let a = Tensor::<f32>::from_fn([7], |i| (i as f32).sin());
        assert!(a.cast::<f64>().cast::<f32>().bits_eq(&a));
    }
}
