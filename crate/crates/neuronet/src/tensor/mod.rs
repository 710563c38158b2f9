//! Dense tensors and tape-based reverse-mode differentiation.
//!
//! Volumetric tensors use the `[channels, depth, height, width]` layout with
//! an implicit batch of one; scalars are rank-0 tensors. Training runs in
//! `f32`; every operation is also instantiated for `f64` so gradients can be
//! checked against central finite differences at tight tolerances.

mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{finite_difference_gradient, relative_gradient_error};
pub use tape::{BnMode, GradientMap, Tape};

use std::fmt;
use std::iter::Sum;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Scalar element type of a tensor: `f32` for training, `f64` for
/// verification-grade gradient checking.
pub trait Element:
    Float + NumAssign + FromPrimitive + Sum<Self> + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Dtype tag used in the checkpoint container (0 = f32, 1 = f64).
    const DTYPE_CODE: u8;
    const BYTES: usize;

    fn from_f64c(x: f64) -> Self;
    fn to_f64c(self) -> f64;
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE_CODE: u8 = 0;
    const BYTES: usize = 4;

    fn from_f64c(x: f64) -> Self {
        x as f32
    }
    fn to_f64c(self) -> f64 {
        self as f64
    }
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Element for f64 {
    const DTYPE_CODE: u8 = 1;
    const BYTES: usize = 8;

    fn from_f64c(x: f64) -> Self {
        x
    }
    fn to_f64c(self) -> f64 {
        self
    }
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Identifies the node a tensor occupies on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct TapeRef {
    pub tape_id: u64,
    pub node: usize,
}

/// Dense N-dimensional array. Immutable after creation; cloning is cheap
/// (the payload is shared). A tensor may carry a handle linking it into a
/// differentiation tape; a detached tensor never receives a gradient.
#[derive(Debug, Clone)]
pub struct Tensor<T: Element> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    pub(crate) tape_ref: Option<TapeRef>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Usage(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            tape_ref: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![T::zero(); numel]),
            tape_ref: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![value; numel]),
            tape_ref: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
            tape_ref: None,
        }
    }

    /// Fan-in-scaled normal init: std = sqrt(2 / fan_in).
    pub fn randn_fan_in<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Self {
        let std = T::from_f64c((2.0 / fan_in as f64).sqrt());
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::sample_standard_normal(rng) * std)
            .collect();
        Tensor {
            shape,
            data: Arc::new(data),
            tape_ref: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The value of a rank-0 tensor.
    pub fn scalar_value(&self) -> Result<T> {
        if !self.is_scalar() {
            return Err(Error::Usage(format!(
                "expected scalar tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// A copy of this tensor unlinked from any tape.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            tape_ref: None,
        }
    }

    /// Rebuild with new contents, same shape. Used by the optimizer.
    pub fn with_data(&self, data: Vec<T>) -> Result<Self> {
        Tensor::new(self.shape.clone(), data)
    }

    /// Cast elementwise, e.g. to run an f32 model under f64 verification.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| U::from_f64c(x.to_f64c())).collect()),
            tape_ref: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub(crate) fn check_finite<T: Element>(data: &[T], op: &str) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite value in output of {op}")))
    }
}

/// Shape of a volumetric `[C, D, H, W]` tensor.
pub(crate) fn as_cdhw(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    if shape.len() != 4 {
        return Err(Error::Config(format!(
            "{what}: expected [C,D,H,W] tensor, got shape {shape:?}"
        )));
    }
    Ok([shape[0], shape[1], shape[2], shape[3]])
}
