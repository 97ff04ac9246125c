//! Dense f32 tensors and a reverse-mode autodiff tape.
//!
//! All network math in this crate is built from the ops on [`Tape`]. Kernels
//! run on the CPU, may parallelize internally via rayon, and accumulate in a
//! fixed order so results are bit-identical across runs and thread counts.

mod gradcheck;
mod kernels;
mod tape;

#[doc(hidden)]
pub use gradcheck::op_gradchecks_seeded;
pub use gradcheck::{finite_difference_check, finite_difference_check_sampled, op_gradchecks, GradCheckReport};
pub use tape::{Op, Tape, Var};

use std::fmt;

/// Errors surfaced by tensor ops. Shape problems and non-finite values are
/// reported eagerly rather than propagated silently.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    ShapeMismatch { op: &'static str, detail: String },
    NonFinite { op: &'static str },
    InvalidAxis { op: &'static str, axis: usize, rank: usize },
    NotScalar { op: &'static str, numel: usize },
    ChannelsNotDivisible { channels: usize, groups: usize },
    EmptyOutput { op: &'static str, detail: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, detail } => {
                write!(f, "{op}: shape mismatch: {detail}")
            }
            TensorError::NonFinite { op } => {
                write!(f, "{op}: non-finite value in output")
            }
            TensorError::InvalidAxis { op, axis, rank } => {
                write!(f, "{op}: axis {axis} out of range for rank {rank}")
            }
            TensorError::NotScalar { op, numel } => {
                write!(f, "{op}: expected scalar tensor, got {numel} elements")
            }
            TensorError::ChannelsNotDivisible { channels, groups } => {
                write!(f, "group_norm: {channels} channels not divisible by {groups} groups")
            }
            TensorError::EmptyOutput { op, detail } => {
                write!(f, "{op}: non-positive output extent: {detail}")
            }
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense n-dimensional f32 array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length must equal product of extents"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_row_major() {
        assert_eq!(strides_of(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_of(&[5]), vec![1]);
        assert!(strides_of(&[]).is_empty());
    }

    #[test]
    #[should_panic]
    fn tensor_len_mismatch_panics() {
        let _ = Tensor::new(vec![2, 2], vec![1.0; 3]);
    }
}
