//! Dense row-major tensors with a tape-based reverse-mode differentiator.
//!
//! Every model layer and loss in the crate is assembled from the primitives
//! recorded by [`Tape`]. Gradients are checkable against central finite
//! differences with [`grad_check`].

mod backward;
mod gradcheck;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Tape, Var};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: element count {len} does not match shape {shape:?}")]
    BadLength {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: non-finite result")]
    NonFinite { op: &'static str },
    #[error("{op}: input outside the domain of the operation")]
    Domain { op: &'static str },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: index {index} out of range {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Element type of a tensor: `f64` for verification, `f32` for the training
/// fast path.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Dtype tag used by the checkpoint format.
    const DTYPE: u8;
    const NAME: &'static str;

    /// `c = alpha * a * b + beta * c` over strided row/column views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    const BYTES: usize;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! gemm_guard {
    ($m:expr, $k:expr, $n:expr, $a:expr, $b:expr, $c:expr) => {
        if $m == 0 || $n == 0 {
            return;
        }
        debug_assert!(!$a.is_empty() || $k == 0);
        debug_assert!(!$b.is_empty() || $k == 0);
        debug_assert!(!$c.is_empty());
    };
}

impl Real for f32 {
    const DTYPE: u8 = 0;
    const NAME: &'static str = "f32";
    const BYTES: usize = 4;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        (rsa, csa): (isize, isize),
        b: &[f32],
        (rsb, csb): (isize, isize),
        beta: f32,
        c: &mut [f32],
        (rsc, csc): (isize, isize),
    ) {
        gemm_guard!(m, k, n, a, b, c);
        // SAFETY: callers pass slices whose extents cover every strided
        // element addressed by (m, k, n) and the given strides.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Real for f64 {
    const DTYPE: u8 = 1;
    const NAME: &'static str = "f64";
    const BYTES: usize = 8;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        (rsa, csa): (isize, isize),
        b: &[f64],
        (rsb, csb): (isize, isize),
        beta: f64,
        c: &mut [f64],
        (rsc, csc): (isize, isize),
    ) {
        gemm_guard!(m, k, n, a, b, c);
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
}

/// A dense row-major array with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) || numel(&shape) != data.len() {
            return Err(TensorError::BadLength {
                op: "tensor",
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            data: vec![T::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            data: vec![v; n],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a trainable leaf and allocates its accumulator.
    pub fn with_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        self.grad = on.then(|| vec![T::zero(); self.data.len()]);
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds `delta` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(TensorError::BadLength {
                op: "accumulate_grad",
                shape: self.shape.clone(),
                len: delta.len(),
            });
        }
        let g = self
            .grad
            .get_or_insert_with(|| vec![T::zero(); delta.len()]);
        for (a, &d) in g.iter_mut().zip(delta) {
            *a = *a + d;
        }
        Ok(())
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Converts element precision, dropping any gradient.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
            requires_grad: false,
            grad: None,
        }
    }
}

/// `(outer, extent, inner)` decomposition of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
