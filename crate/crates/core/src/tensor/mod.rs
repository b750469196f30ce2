//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Production code runs on `f32` (the default scalar). The whole module is
//! generic over [`Scalar`] so validation suites can re-run the identical op
//! sequence in `f64` when comparing analytic gradients against central
//! finite differences.
//!
//! Tensors are row-major flat buffers. Recorded computation lives on a
//! [`Tape`]; tensors detached from any tape are plain immutable values and
//! safe to share across threads. One tape is owned by one thread.

mod tape;

pub mod gradcheck;

pub use tape::{Tape, VarId};

use crate::error::{Error, Result};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type of a tensor. Implemented for `f32` (production) and `f64`
/// (shadow computations in validation).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("literal conversion")
    }

    /// Clamp floor applied to every norm and denominator term.
    fn eps() -> Self {
        Self::c(1e-8)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense row-major tensor. `product(shape) == data.len()` always holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(|i| f(i)).collect(),
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> T {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[T] {
        debug_assert_eq!(self.shape.len(), 2);
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Convert element type, e.g. lift an `f32` tensor into the `f64` shadow.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::c(x.to_f64().expect("finite cast")))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Right-aligned broadcast of two shapes, numpy-style.
pub(crate) fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Expand `data` of `shape` to `out_shape` obtained by broadcasting.
pub(crate) fn broadcast_expand<T: Scalar>(
    data: &[T],
    shape: &[usize],
    out_shape: &[usize],
) -> Vec<T> {
    if shape == out_shape {
        return data.to_vec();
    }
    let ndim = out_shape.len();
    let mut padded = vec![1usize; ndim];
    padded[ndim - shape.len()..].copy_from_slice(shape);
    let numel: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    for flat in 0..numel {
        let mut rem = flat;
        let mut src = 0usize;
        let mut stride = 1usize;
        // Walk dimensions right to left, ignoring broadcast dims in the source.
        let mut src_strides = vec![0usize; ndim];
        for d in (0..ndim).rev() {
            src_strides[d] = if padded[d] == 1 { 0 } else { stride };
            stride *= padded[d];
        }
        for d in (0..ndim).rev() {
            let c = rem % out_shape[d];
            rem /= out_shape[d];
            src += c.min(padded[d] - 1) * src_strides[d];
        }
        out.push(data[src]);
    }
    out
}

/// Sum `grad` (of `grad_shape`) down to `target_shape`, undoing a broadcast.
pub(crate) fn reduce_to_shape<T: Scalar>(
    grad: &[T],
    grad_shape: &[usize],
    target_shape: &[usize],
) -> Vec<T> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let ndim = grad_shape.len();
    let mut padded = vec![1usize; ndim];
    padded[ndim - target_shape.len()..].copy_from_slice(target_shape);
    let target_numel: usize = target_shape.iter().product();
    let mut out = vec![T::zero(); target_numel];
    let mut tgt_strides = vec![0usize; ndim];
    let mut stride = 1usize;
    for d in (0..ndim).rev() {
        tgt_strides[d] = if padded[d] == 1 { 0 } else { stride };
        stride *= padded[d];
    }
    for (flat, &g) in grad.iter().enumerate() {
        let mut rem = flat;
        let mut tgt = 0usize;
        for d in (0..ndim).rev() {
            let c = rem % grad_shape[d];
            rem /= grad_shape[d];
            tgt += c.min(padded[d] - 1) * tgt_strides[d];
        }
        out[tgt] = out[tgt] + g;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[3, 1], &[1, 4]).unwrap(), vec![3, 4]);
        assert_eq!(broadcast_shape("t", &[4], &[2, 4]).unwrap(), vec![2, 4]);
        assert!(broadcast_shape("t", &[3], &[4]).is_err());
    }

    #[test]
    fn expand_and_reduce_roundtrip() {
        let col = vec![1.0f32, 2.0, 3.0];
        let expanded = broadcast_expand(&col, &[3, 1], &[3, 2]);
        assert_eq!(expanded, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let reduced = reduce_to_shape(&expanded, &[3, 2], &[3, 1]);
        assert_eq!(reduced, vec![2.0, 4.0, 6.0]);
    }
}
