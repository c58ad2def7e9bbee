//! Small differentiable-network core.
//!
//! Parameters live in a [`ParamStore`]; a forward pass records vector-level
//! operations on a [`Tape`], and [`Tape::backward`] replays it in reverse to
//! produce exact gradients for every parameter. Everything is `f64`.

mod gradcheck;
mod layers;
mod optim;
pub(crate) mod tape;

pub use gradcheck::{gradient_check, GradCheckReport, DEFAULT_GRADCHECK_STEP, DEFAULT_GRADCHECK_TOLERANCE};
pub use layers::{forward_dense, gru_step, Activation, DenseBlock, DenseLayer, GruCell};
pub use optim::{Adam, AdamConfig};
pub use tape::{Tape, Var};

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch { op: &'static str, expected: usize, got: usize },
    #[error("backward needs a scalar loss, got length {0}")]
    NonScalarLoss(usize),
    #[error("variable {0} was not recorded on this tape")]
    UnrecordedVar(usize),
    #[error("parameter {0} does not exist")]
    UnknownParam(usize),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, NnError> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(NnError::ShapeMismatch { op: "tensor", expected: len, got: data.len() });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 { self.shape[1] } else { 1 }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors in a fixed, explicit order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor with one of identical shape, in order.
    pub fn load(&mut self, tensors: Vec<Tensor>) -> Result<(), NnError> {
        if tensors.len() != self.tensors.len() {
            return Err(NnError::ShapeMismatch { op: "load", expected: self.tensors.len(), got: tensors.len() });
        }
        for (dst, src) in self.tensors.iter().zip(&tensors) {
            if dst.shape != src.shape {
                return Err(NnError::ShapeMismatch { op: "load", expected: dst.len(), got: src.len() });
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    /// FNV-1a over names, shapes and the bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, t) in self.iter() {
            eat(name.as_bytes());
            for d in &t.shape {
                eat(&(*d as u64).to_le_bytes());
            }
            for v in &t.data {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Gradient tensors aligned one-to-one with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { tensors: store.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn norm(&self, ids: &[ParamId]) -> f64 {
        libm::sqrt(
            ids.iter()
                .flat_map(|id| self.tensors[id.0].data.iter())
                .map(|g| g * g)
                .sum::<f64>(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}
