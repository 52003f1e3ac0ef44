//! Minimal layers with hand-written backward passes.
//!
//! Forward passes borrow the layer immutably and return whatever the backward
//! pass needs; backward passes accumulate into each [`Param::grad`]. That lets
//! one network be run on several batches (positives and negatives) before a
//! single optimizer step.

mod batchnorm;
mod conv;
mod linear;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::real::Real;

pub use batchnorm::{BatchNorm, BnCache};
pub use conv::{col2im, im2col, Conv2d, ConvCache, ConvTCache, ConvTranspose2d, Geometry};
pub use linear::Linear;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor with its gradient accumulator and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F: Real> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
    pub velocity: ArrayD<F>,
}

impl<F: Real> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        let velocity = ArrayD::zeros(value.raw_dim());
        Self { value, grad, velocity }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn normal<R: Rng>(shape: &[usize], mean: f64, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(mean, std).expect("valid std");
        Self::new(ArrayD::from_shape_simple_fn(IxDyn(shape), || F::lit(dist.sample(rng))))
    }

    pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        Self::new(ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            F::lit(rng.gen_range(-bound..=bound))
        }))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

/// Walks named tensors of a module tree.
pub trait Module<F: Real> {
    /// Trainable parameters, named by module path.
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>));

    /// Non-trainable state (batch-norm running statistics).
    fn visit_buffers(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, &mut ArrayD<F>)) {}

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn relu<F: Real, D: ndarray::Dimension>(x: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    x.mapv(|v| v.max(F::zero()))
}

/// Backward of ReLU given its output.
pub fn relu_backward<F: Real, D: ndarray::Dimension>(
    y: &ndarray::Array<F, D>,
    dy: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &v| {
        if v <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu<F: Real, D: ndarray::Dimension>(x: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    let a = F::lit(LEAKY_SLOPE);
    x.mapv(|v| if v > F::zero() { v } else { v * a })
}

/// Backward of leaky ReLU given its output (sign is preserved by the activation).
pub fn leaky_relu_backward<F: Real, D: ndarray::Dimension>(
    y: &ndarray::Array<F, D>,
    dy: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let a = F::lit(LEAKY_SLOPE);
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &v| {
        if v <= F::zero() {
            *d *= a;
        }
    });
    dx
}

/// Backward of tanh given its output.
pub fn tanh_backward<F: Real, D: ndarray::Dimension>(
    y: &ndarray::Array<F, D>,
    dy: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &v| *d *= F::one() - v * v);
    dx
}
