//! Minimal NCHW autograd engine in double precision.
//!
//! The engine covers exactly what the saliency network needs: 2-D convolutions with
//! rectangular/dilated kernels, batch normalization, bilinear resizing, pooling,
//! broadcast arithmetic and a clamped binary cross-entropy. Parameters live in a
//! [`ParamStore`]; each forward pass builds a fresh [`Graph`] against it.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod store;

pub use graph::{bce_value, numel, sigmoid, Graph, Mode, Shape4, Var, BCE_EPS, BN_EPS, BN_MOMENTUM};
pub use kernels::Window;
pub use nn::{BatchNorm2d, Builder, Cbr, Conv2d, ConvSpec};
pub use store::{Entry, EntryKind, ParamId, ParamStore};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("duplicate parameter name {0}")]
    DuplicateName(String),
}

/// Owned NCHW tensor, used to move values out of a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Shape4,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape4, data: Vec<f64>) -> Self {
        assert_eq!(numel(shape), data.len(), "tensor data does not match shape {shape:?}");
        Tensor { shape, data }
    }

    pub fn zeros(shape: Shape4) -> Self {
        Tensor { shape, data: vec![0.0; numel(shape)] }
    }

    pub fn from_graph(g: &Graph, v: Var) -> Self {
        Tensor { shape: g.shape(v), data: g.to_vec(v) }
    }

    /// `(C, H, W)` of one sample.
    pub fn chw(&self) -> (usize, usize, usize) {
        (self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}
