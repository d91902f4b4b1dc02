//! A small loop-based neural-network engine with exact analytic gradients.
//!
//! Tensors are per-sample (`[C, H, W]` feature maps or flat vectors); batch
//! handling lives in the training loops, which sum per-sample parameter
//! gradients in a fixed order so results do not depend on scheduling.

mod blaze;
pub mod container;
pub mod gradcheck;
mod layers;
mod optim;

pub use blaze::{BlazeBlock, BlazeBlockSpec, BlockKind};
pub use layers::{
    Cache, Conv2d, ConvTranspose2d, Dense, DepthwiseConv2d, Layer, MaxPool2d, Sequential,
};
pub use optim::{Optimizer, OptimizerKind};

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape { context: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid layer configuration: {0}")]
    Config(String),
    #[error("non-finite gradient in parameter tensor {0}")]
    NonFiniteGradient(usize),
    #[error("container: {0}")]
    Container(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn shape_err(context: &str, expected: &[usize], got: &[usize]) -> NnError {
    NnError::Shape { context: context.into(), expected: expected.to_vec(), got: got.to_vec() }
}

/// Dense row-major buffer with a shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err("Tensor::from_vec", shape, &[data.len()]));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    /// He-style fan-in uniform initialization.
    pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
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
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err("reshape", shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn expect_shape(&self, context: &str, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(shape_err(context, shape, &self.shape));
        }
        Ok(())
    }

    pub(crate) fn dims3(&self, context: &str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(NnError::Shape {
                context: format!("{context} expects [C, H, W]"),
                expected: vec![],
                got: self.shape.clone(),
            }),
        }
    }
}

/// Zeroed gradient buffers matching a parameter list.
pub fn zero_grads(params: &[&Tensor]) -> Vec<Tensor> {
    params.iter().map(|p| Tensor::zeros(p.shape())).collect()
}

/// Sum of `src` into `dst`, element-wise over matching tensor lists.
pub fn accumulate(dst: &mut [Tensor], src: &[Tensor]) {
    for (d, s) in dst.iter_mut().zip(src) {
        for (a, b) in d.data.iter_mut().zip(&s.data) {
            *a += b;
        }
    }
}

pub fn count_params(params: &[&Tensor]) -> usize {
    params.iter().map(|p| p.len()).sum()
}
