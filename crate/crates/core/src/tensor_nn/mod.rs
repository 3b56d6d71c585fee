//! A small dense-tensor engine: the handful of layers the CNN architectures
//! need, each with an exact backward pass, plus Adam and a finite-difference
//! gradient checker.
//!
//! Tensors are row-major `f64`. Layers own their parameters and cache what
//! backward needs during [`Layer::forward`]; [`Layer::infer`] is the pure
//! eval-mode path used for shared, concurrent inference.

mod adam;
mod conv;
mod gemm;
mod gradcheck;
mod linear;
mod norm;
mod ops;

pub use adam::{AdamConfig, AdamState};
pub use conv::Conv2d;
pub use gemm::{gemm, MatRef};
pub use gradcheck::{grad_check, grad_check_with_step, rel_err, GradReport, Sequential, FD_STEP};
pub use linear::Linear;
pub use norm::BatchNorm;
pub use norm::{ChannelAxis, BN_EPS, BN_MOMENTUM};
pub use ops::{
    avgpool2x2_backward, avgpool2x2_forward, cross_entropy, log_softmax_rows, relu_backward,
    relu_forward, softmax_backward, softmax_cross_entropy, softmax_rows, AvgPool2x2, Relu,
};

use rand::Rng;
use thiserror::Error;

use crate::compress::QuantizedTensor;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch norm needs at least two values per channel in train mode")]
    DegenerateBatch,
    #[error("probability rows do not sum to one (row {row} sums to {sum})")]
    NotNormalized { row: usize, sum: f64 },
    #[error("input too small: {0}")]
    InputTooSmall(String),
    #[error("backward called without a cached forward pass")]
    NoCache,
    #[error("operation needs float weights but the layer is quantized")]
    Quantized,
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = if bound > 0.0 {
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        } else {
            vec![0.0; n]
        };
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(NnError::ShapeMismatch(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Unpacks a rank-4 shape.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(NnError::ShapeMismatch(format!(
                "expected a rank-4 tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(NnError::ShapeMismatch(format!(
                "expected a rank-2 tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Whether a forward pass uses batch statistics (and caches for backward).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A learnable tensor and its accumulated gradient. The gradient buffer is
/// allocated on first use so untrained full-width models stay lean.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    grad: Vec<f64>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Self {
            value,
            grad: Vec::new(),
        }
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    /// Gradient buffer, zero-initialized on first access.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        }
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub(crate) fn value_and_grad(&mut self) -> (&mut [f64], &mut [f64]) {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        }
        (self.value.data_mut(), &mut self.grad)
    }
}

/// Conv/linear weights: trainable float, or int8 after quantization.
#[derive(Debug, Clone, PartialEq)]
pub enum Weight {
    Float(Param),
    Int8(QuantizedTensor),
}

impl Weight {
    pub fn shape(&self) -> &[usize] {
        match self {
            Weight::Float(p) => p.value.shape(),
            Weight::Int8(q) => q.shape(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn float(&self) -> Result<&Param> {
        match self {
            Weight::Float(p) => Ok(p),
            Weight::Int8(_) => Err(NnError::Quantized),
        }
    }

    pub fn float_mut(&mut self) -> Result<&mut Param> {
        match self {
            Weight::Float(p) => Ok(p),
            Weight::Int8(_) => Err(NnError::Quantized),
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, Weight::Int8(_))
    }
}

/// Read-only view of one serialized tensor in a layer's state.
#[derive(Debug, Clone, Copy)]
pub enum StateRef<'a> {
    Float(&'a Tensor),
    Int8(&'a QuantizedTensor),
}

/// Mutable slot in a layer's state: plain tensors (biases, norm statistics)
/// or weights that may be swapped for a quantized payload.
#[derive(Debug)]
pub enum StateMut<'a> {
    Tensor(&'a mut Tensor),
    Param(&'a mut Param),
    Weight(&'a mut Weight),
}

pub type NamedState<'a> = Vec<(String, StateRef<'a>)>;
pub type NamedStateMut<'a> = Vec<(String, StateMut<'a>)>;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Common surface of every trainable building block.
pub trait Layer {
    /// Forward pass that caches whatever [`Layer::backward`] needs.
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor>;
    /// Accumulates parameter gradients and returns the gradient w.r.t. the
    /// input of the most recent forward call.
    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor>;
    /// Eval-mode forward without side effects.
    fn infer(&self, x: &Tensor) -> Result<Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }
    fn state<'a>(&'a self, _prefix: &str, _out: &mut NamedState<'a>) {}
    fn state_mut<'a>(&'a mut self, _prefix: &str, _out: &mut NamedStateMut<'a>) {}
}

/// He-uniform bound for a given fan-in.
pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}
