use ndarray::{Array2, Array4};
use rand::Rng;

use super::ArchConfig;
use crate::error::{Error, Result};
use crate::nn::{
    relu, relu_backward, tanh_backward, BatchNorm, BnCache, ConvTCache, ConvTranspose2d, Geometry, Linear, Mode, Module, Param,
};
use crate::real::Real;

/// Generator: latent code → image in `[-1, 1]`.
///
/// Linear projection to `s₀ × s₀ × 8b` (with `s₀ = size / 8`), then three
/// stride-2 transposed convolutions halving the width each time; the first
/// two are followed by batch norm and ReLU, the last by `tanh`.
#[derive(Debug, Clone)]
pub struct Decoder<F: Real> {
    pub fc: Linear<F>,
    pub bn0: BatchNorm<F>,
    pub up1: ConvTranspose2d<F>,
    pub bn1: BatchNorm<F>,
    pub up2: ConvTranspose2d<F>,
    pub bn2: BatchNorm<F>,
    pub up3: ConvTranspose2d<F>,
    latent_dim: usize,
    start: usize,
    width0: usize,
}

pub struct DecoderCache<F: Real> {
    z: Array2<F>,
    bn0: BnCache<F>,
    a0: Array4<F>,
    c1: ConvTCache<F>,
    bn1: BnCache<F>,
    a1: Array4<F>,
    c2: ConvTCache<F>,
    bn2: BnCache<F>,
    a2: Array4<F>,
    c3: ConvTCache<F>,
    out: Array4<F>,
}

impl<F: Real> Decoder<F> {
    pub fn new<R: Rng>(arch: &ArchConfig, rng: &mut R) -> Self {
        let b = arch.base_width;
        let start = arch.image_size / 8;
        let width0 = 8 * b;
        Self {
            fc: Linear::with_normal(arch.latent_dim, width0 * start * start, false, 0.02, rng),
            bn0: BatchNorm::new(width0),
            up1: ConvTranspose2d::new(width0, 4 * b, Geometry::DOWN2, false, rng),
            bn1: BatchNorm::new(4 * b),
            up2: ConvTranspose2d::new(4 * b, 2 * b, Geometry::DOWN2, false, rng),
            bn2: BatchNorm::new(2 * b),
            up3: ConvTranspose2d::new(2 * b, arch.channels, Geometry::DOWN2, true, rng),
            latent_dim: arch.latent_dim,
            start,
            width0,
        }
    }

    pub fn forward(&self, z: &Array2<F>, mode: Mode) -> Result<(Array4<F>, DecoderCache<F>)> {
        if z.ncols() != self.latent_dim {
            return Err(Error::shape(format!("latent codes of length {}", self.latent_dim), z.ncols()));
        }
        let n = z.nrows();
        let h0 = self
            .fc
            .forward(z)
            .into_shape_with_order((n, self.width0, self.start, self.start))
            .expect("reshape");
        let (h0, bn0) = self.bn0.forward4(&h0, mode);
        let a0 = relu(&h0);
        let (h1, c1) = self.up1.forward(&a0);
        let (h1, bn1) = self.bn1.forward4(&h1, mode);
        let a1 = relu(&h1);
        let (h2, c2) = self.up2.forward(&a1);
        let (h2, bn2) = self.bn2.forward4(&h2, mode);
        let a2 = relu(&h2);
        let (h3, c3) = self.up3.forward(&a2);
        let out = h3.mapv(|v| v.tanh());
        let cache = DecoderCache {
            z: z.clone(),
            bn0,
            a0,
            c1,
            bn1,
            a1,
            c2,
            bn2,
            a2,
            c3,
            out: out.clone(),
        };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients; returns `dL/dz`.
    pub fn backward(&mut self, cache: &DecoderCache<F>, d_out: &Array4<F>) -> Array2<F> {
        let d = tanh_backward(&cache.out, d_out);
        let d = self.up3.backward(&cache.c3, &d);
        let d = relu_backward(&cache.a2, &d);
        let d = self.bn2.backward4(&cache.bn2, &d);
        let d = self.up2.backward(&cache.c2, &d);
        let d = relu_backward(&cache.a1, &d);
        let d = self.bn1.backward4(&cache.bn1, &d);
        let d = self.up1.backward(&cache.c1, &d);
        let d = relu_backward(&cache.a0, &d);
        let d = self.bn0.backward4(&cache.bn0, &d);
        let n = d.dim().0;
        let d = d.into_shape_with_order((n, self.width0 * self.start * self.start)).expect("reshape");
        self.fc.backward(&cache.z, &d)
    }

    pub fn update_running(&mut self, cache: &DecoderCache<F>) {
        self.bn0.update_running(&cache.bn0);
        self.bn1.update_running(&cache.bn1);
        self.bn2.update_running(&cache.bn2);
    }
}

impl<F: Real> Module<F> for Decoder<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        let p = |n: &str| crate::nn::join(prefix, n);
        self.fc.visit_params(&p("fc"), f);
        self.bn0.visit_params(&p("bn0"), f);
        self.up1.visit_params(&p("up1"), f);
        self.bn1.visit_params(&p("bn1"), f);
        self.up2.visit_params(&p("up2"), f);
        self.bn2.visit_params(&p("bn2"), f);
        self.up3.visit_params(&p("up3"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ndarray::ArrayD<F>)) {
        let p = |n: &str| crate::nn::join(prefix, n);
        self.bn0.visit_buffers(&p("bn0"), f);
        self.bn1.visit_buffers(&p("bn1"), f);
        self.bn2.visit_buffers(&p("bn2"), f);
    }
}
