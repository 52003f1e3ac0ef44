use ndarray::{Array2, Axis, Ix1, Ix2};
use rand::Rng;

use super::{join, Module, Param};
use crate::real::Real;

/// `y = x Wᵀ + b` over rows of `x`.
#[derive(Debug, Clone)]
pub struct Linear<F: Real> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
}

impl<F: Real> Linear<F> {
    /// Uniform `±1/sqrt(fan_in)` initialisation.
    pub fn new<R: Rng>(fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Param::uniform(&[fan_out, fan_in], bound, rng),
            bias: bias.then(|| Param::uniform(&[fan_out], bound, rng)),
        }
    }

    pub fn with_normal<R: Rng>(fan_in: usize, fan_out: usize, bias: bool, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Param::normal(&[fan_out, fan_in], 0.0, std, rng),
            bias: bias.then(|| Param::zeros(&[fan_out])),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn w(&self) -> ndarray::ArrayView2<'_, F> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d weight")
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.w().t());
        if let Some(b) = &self.bias {
            let b = b.value.view().into_dimensionality::<Ix1>().expect("1-d bias");
            y += &b;
        }
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
        let dw = dy.t().dot(x);
        self.weight.grad += &dw.into_dyn();
        if let Some(b) = &mut self.bias {
            b.grad += &dy.sum_axis(Axis(0)).into_dyn();
        }
        dy.dot(&self.w())
    }

    /// Parameter gradients only, skipping the input gradient.
    pub fn backward_params(&mut self, x: &Array2<F>, dy: &Array2<F>) {
        let dw = dy.t().dot(x);
        self.weight.grad += &dw.into_dyn();
        if let Some(b) = &mut self.bias {
            b.grad += &dy.sum_axis(Axis(0)).into_dyn();
        }
    }
}

impl<F: Real> Module<F> for Linear<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}
