//! Dense tensors, compute backends and the reverse-mode tape.
//!
//! A [`Tensor`] is a row-major array of at most four axes. Elements are held
//! either as 32-bit floats or in a 16-bit storage class; arithmetic always
//! happens in 32-bit and half storage is rounded on write.

mod backend;
pub mod kernels;
mod tape;

use std::borrow::Cow;

use half::f16;
use half::vec::HalfFloatVecExt;
use half::slice::HalfFloatSliceExt;

pub use backend::{Backend, CpuBackend, ReferenceBackend, Strides};
pub use tape::{Gradients, RopeTable, Tape, Var};

use crate::error::{Error, OpKind, Result};

pub const MAX_AXES: usize = 4;

/// Storage class for tensor elements.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Full,
    Half,
}

impl Precision {
    pub fn bytes_per_element(self) -> usize {
        match self {
            Precision::Full => 4,
            Precision::Half => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Storage {
    Full(Vec<f32>),
    Half(Vec<f16>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    storage: Storage,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.len() > MAX_AXES {
        return Err(Error::dim(
            OpKind::Leaf,
            format!("{} axes exceeds the limit of {MAX_AXES}", shape.len()),
        ));
    }
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::dim(
            OpKind::Leaf,
            format!("shape {shape:?} holds {expected} elements, got {len}"),
        ));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self {
            shape: shape.to_vec(),
            storage: Storage::Full(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len]).expect("zeros shape within axis limit")
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![value; len]).expect("full shape within axis limit")
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            storage: Storage::Full(vec![value]),
        }
    }

    /// Builds a tensor in the requested storage class, rounding if half.
    pub fn with_precision(shape: &[usize], data: Vec<f32>, precision: Precision) -> Result<Self> {
        check_shape(shape, data.len())?;
        let storage = match precision {
            Precision::Full => Storage::Full(data),
            Precision::Half => Storage::Half(Vec::<f16>::from_f32_slice(&data)),
        };
        Ok(Self {
            shape: shape.to_vec(),
            storage,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        match &self.storage {
            Storage::Full(v) => v.len(),
            Storage::Half(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn precision(&self) -> Precision {
        match self.storage {
            Storage::Full(_) => Precision::Full,
            Storage::Half(_) => Precision::Half,
        }
    }

    /// Bytes occupied by the element buffer.
    pub fn nbytes(&self) -> usize {
        self.len() * self.precision().bytes_per_element()
    }

    /// Elements widened to 32-bit. Borrowed when already full precision.
    pub fn values(&self) -> Cow<'_, [f32]> {
        match &self.storage {
            Storage::Full(v) => Cow::Borrowed(v),
            Storage::Half(v) => Cow::Owned(v.to_f32_vec()),
        }
    }

    /// Mutable access to full-precision elements; `None` for half storage.
    pub fn as_mut_slice(&mut self) -> Option<&mut [f32]> {
        match &mut self.storage {
            Storage::Full(v) => Some(v),
            Storage::Half(_) => None,
        }
    }

    pub fn as_slice(&self) -> Option<&[f32]> {
        match &self.storage {
            Storage::Full(v) => Some(v),
            Storage::Half(_) => None,
        }
    }

    pub fn into_vec(self) -> Vec<f32> {
        match self.storage {
            Storage::Full(v) => v,
            Storage::Half(v) => v.to_f32_vec(),
        }
    }

    pub fn to_precision(&self, precision: Precision) -> Tensor {
        if self.precision() == precision {
            return self.clone();
        }
        Tensor::with_precision(&self.shape, self.values().into_owned(), precision)
            .expect("shape already validated")
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Option<f32> {
        (self.len() == 1).then(|| self.values()[0])
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape, self.len())?;
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// Rounds every element through the 16-bit storage class in place.
pub(crate) fn round_to_half(values: &mut [f32]) {
    for v in values.iter_mut() {
        *v = f16::from_f32(*v).to_f32();
    }
}
