//! Dense tensors with reverse-mode gradient propagation.
//!
//! A [`Tensor`] owns an immutable row-major value buffer. Tracking a tensor on
//! a [`Tape`] (via [`Tape::var`]) makes every subsequent operation with it
//! record a backward rule; [`Tape::backward`] then fills per-leaf gradient
//! buffers by replaying the records in reverse order. A tape and the tensors
//! tracked on it are confined to one thread; untracked forward evaluation is
//! a pure function.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

mod check;
pub mod ops;
mod tape;

pub use check::grad_check;
pub use tape::{NodeId, Tape};
pub(crate) use tape::{BackwardRule, BwdCtx};

/// Dense multi-dimensional array. Cloning is cheap (shared storage) and the
/// shared buffer is never mutated, so tensors behave like values.
#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    pub(crate) track: Option<(Tape<S>, NodeId)>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!(
                    "shape {:?} implies {} elements, got {}",
                    shape,
                    numel,
                    data.len()
                ),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(
                "tensor",
                format!("zero extent in shape {:?}", shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            track: None,
        })
    }

    pub(crate) fn from_parts(
        shape: Vec<usize>,
        data: Arc<Vec<S>>,
        track: Option<(Tape<S>, NodeId)>,
    ) -> Self {
        Tensor { shape, data, track }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![S::zero(); numel]),
            track: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![value; numel]),
            track: None,
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![value]),
            track: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub(crate) fn storage(&self) -> Arc<Vec<S>> {
        Arc::clone(&self.data)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same values, no gradient tracking.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            track: None,
        }
    }

    pub fn is_tracked(&self) -> bool {
        self.track.is_some()
    }

    /// Element at a multi-index; intended for tests and small probes.
    pub fn at(&self, idx: &[usize]) -> S {
        assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&x, &d)) in idx.iter().zip(self.shape.iter()).enumerate() {
            assert!(x < d, "index {} out of range at axis {}", x, i);
            flat = flat * d + x;
        }
        self.data[flat]
    }

    /// Converts element type; drops tracking.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::of(v.as_f64())).collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            track: None,
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", &self.data[..])?;
        }
        if self.is_tracked() {
            write!(f, " (tracked)")?;
        }
        Ok(())
    }
}
