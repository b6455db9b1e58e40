//! Minimal reverse-mode tensor engine over `f64`.
//!
//! Values are [`Tensor`]s: a shape plus a reference-counted, metered
//! [`Buffer`]. Differentiable computation goes through a [`Tape`], which
//! hands out [`Var`] handles and records backward closures when recording
//! is on.

pub mod meter;
mod param;
pub mod rng;
mod tape;

use std::fmt;
use std::ops::{Deref, DerefMut};
use std::rc::Rc;

use thiserror::Error;

pub use meter::{mem_scope, MemoryMeter, MeterError, ScopeReport};
pub use param::Param;
pub use rng::SeededRng;
pub use tape::{Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: value {value} at index {index} is outside the domain")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{op}: degenerate zero-norm vector (row {row})")]
    Degenerate { op: &'static str, row: usize },
    #[error("{op}: invalid parameter: {detail}")]
    Param { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward on a value that is not recorded on this tape")]
    NotOnTape,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Metered `f64` storage. Creation and drop are reported to the thread's
/// memory meter.
pub struct Buffer(Vec<f64>);

impl Buffer {
    pub fn new(data: Vec<f64>) -> Self {
        meter::record_alloc(Self::bytes_of(data.len()));
        Buffer(data)
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0.0; len])
    }

    pub fn bytes(&self) -> u64 {
        Self::bytes_of(self.0.len())
    }

    fn bytes_of(len: usize) -> u64 {
        (len * std::mem::size_of::<f64>()) as u64
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.clone()
    }
}

impl Drop for Buffer {
    fn drop(&mut self) {
        meter::record_free(self.bytes());
    }
}

impl Clone for Buffer {
    fn clone(&self) -> Self {
        Buffer::new(self.0.clone())
    }
}

impl Deref for Buffer {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Buffer {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl fmt::Debug for Buffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

/// Shaped row-major array. Cloning shares the payload.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Buffer>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self::from_buffer(shape, Buffer::new(data)))
    }

    pub(crate) fn from_buffer(shape: Vec<usize>, data: Buffer) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Rc::new(data),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::from_buffer(shape, Buffer::zeros(n))
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_buffer(vec![n], Buffer::new(data))
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_buffer(vec![], Buffer::new(vec![value]))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable payload; copies first if the payload is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        if Rc::get_mut(&mut self.data).is_none() {
            self.data = Rc::new((*self.data).clone());
        }
        Rc::get_mut(&mut self.data).expect("unique after copy")
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    /// Same payload under a new shape.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: Rc::clone(&self.data),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `r` of a 2-D tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[r * cols..(r + 1) * cols]
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &&**self.data)
            .finish()
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data.0 == *other.data.0
    }
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(TensorError::Shape {
            op: "cosine_sim",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 {
        return Err(TensorError::Degenerate {
            op: "cosine_sim",
            row: 0,
        });
    }
    if nb == 0.0 {
        return Err(TensorError::Degenerate {
            op: "cosine_sim",
            row: 1,
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
