use ndarray::{Array2, Array4, Axis};
use rand::Rng;

use super::ArchConfig;
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, leaky_relu_backward, BatchNorm, BnCache, Conv2d, ConvCache, Geometry, Linear, Mode, Module, Param};
use crate::real::Real;

/// Encoder outputs for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePack<F: Real> {
    /// Local feature map `(N, S, H, W)` taken at the tap block.
    pub a: Array4<F>,
    /// Global latent; also the mean of `p(z | A)`.
    pub mu: Array2<F>,
    pub logvar: Array2<F>,
}

impl<F: Real> FeaturePack<F> {
    /// The deterministic global latent `z = μ`.
    pub fn z(&self) -> &Array2<F> {
        &self.mu
    }
}

struct Block<F: Real> {
    conv: ConvCache<F>,
    bn: BnCache<F>,
    act: Array4<F>,
}

pub struct EncoderCache<F: Real> {
    blocks: Vec<Block<F>>,
    flat: Array2<F>,
}

/// Three stride-2 conv blocks (batch norm + leaky ReLU 0.2), then linear
/// `μ` and log-variance heads on the spatially averaged last block.
#[derive(Debug, Clone)]
pub struct Encoder<F: Real> {
    pub convs: Vec<Conv2d<F>>,
    pub bns: Vec<BatchNorm<F>>,
    pub mu: Linear<F>,
    pub logvar: Linear<F>,
    channels: usize,
    image_size: usize,
    tap: usize,
}

impl<F: Real> Encoder<F> {
    pub fn new<R: Rng>(arch: &ArchConfig, rng: &mut R) -> Self {
        let b = arch.base_width;
        let widths = [arch.channels, 2 * b, 4 * b, 8 * b];
        let convs = (0..3)
            .map(|i| Conv2d::new(widths[i], widths[i + 1], Geometry::DOWN2, false, rng))
            .collect();
        let bns = (0..3).map(|i| BatchNorm::new(widths[i + 1])).collect();
        let flat = 8 * b;
        Self {
            convs,
            bns,
            mu: Linear::new(flat, arch.latent_dim, true, rng),
            logvar: Linear::new(flat, arch.latent_dim, true, rng),
            channels: arch.channels,
            image_size: arch.image_size,
            tap: arch.tap_block,
        }
    }

    fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.channels || h != self.image_size || w != self.image_size {
            return Err(Error::shape(
                format!("N×{}×{}×{}", self.channels, self.image_size, self.image_size),
                format!("N×{c}×{h}×{w}"),
            ));
        }
        Ok(())
    }

    fn run_blocks(&self, x: &Array4<F>, mode: Mode, upto: usize) -> Vec<Block<F>> {
        let mut blocks: Vec<Block<F>> = Vec::with_capacity(upto);
        for i in 0..upto {
            let input = if i == 0 { x } else { &blocks[i - 1].act };
            let (h, conv) = self.convs[i].forward(input);
            let (h, bn) = self.bns[i].forward4(&h, mode);
            let act = leaky_relu(&h);
            blocks.push(Block { conv, bn, act });
        }
        blocks
    }

    pub fn forward(&self, x: &Array4<F>, mode: Mode) -> Result<(FeaturePack<F>, EncoderCache<F>)> {
        self.check_input(x)?;
        let blocks = self.run_blocks(x, mode, 3);
        let last = &blocks[2].act;
        let flat = last.mean_axis(Axis(3)).and_then(|m| m.mean_axis(Axis(2))).expect("non-empty map");
        let pack = FeaturePack {
            a: blocks[self.tap - 1].act.clone(),
            mu: self.mu.forward(&flat),
            logvar: self.logvar.forward(&flat),
        };
        Ok((pack, EncoderCache { blocks, flat }))
    }

    /// The local feature map alone: the encoder truncated after the tap block.
    pub fn features(&self, x: &Array4<F>, mode: Mode) -> Result<Array4<F>> {
        self.check_input(x)?;
        let mut blocks = self.run_blocks(x, mode, self.tap);
        Ok(blocks.pop().expect("tap >= 1").act)
    }

    /// Accumulates parameter gradients from upstream gradients on `A`, `μ` and log-variance.
    pub fn backward(
        &mut self,
        cache: &EncoderCache<F>,
        d_a: Option<&Array4<F>>,
        d_mu: Option<&Array2<F>>,
        d_logvar: Option<&Array2<F>>,
    ) {
        let mut d_flat = Array2::<F>::zeros(cache.flat.raw_dim());
        if let Some(g) = d_mu {
            d_flat += &self.mu.backward(&cache.flat, g);
        }
        if let Some(g) = d_logvar {
            d_flat += &self.logvar.backward(&cache.flat, g);
        }
        let (n, c, h, w) = cache.blocks[2].act.dim();
        let area = F::lit((h * w) as f64);
        let mut d = Array4::from_shape_fn((n, c, h, w), |(i, j, _, _)| d_flat[[i, j]] / area);
        for i in (0..3).rev() {
            if i + 1 == self.tap {
                if let Some(g) = d_a {
                    d += g;
                }
            }
            let blk = &cache.blocks[i];
            let g = leaky_relu_backward(&blk.act, &d);
            let g = self.bns[i].backward4(&blk.bn, &g);
            let dx = self.convs[i].backward(&blk.conv, &g);
            if i > 0 {
                d = dx;
            }
        }
    }

    pub fn update_running(&mut self, cache: &EncoderCache<F>) {
        for (bn, blk) in self.bns.iter_mut().zip(&cache.blocks) {
            bn.update_running(&blk.bn);
        }
    }
}

impl<F: Real> Module<F> for Encoder<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        for (i, (c, b)) in self.convs.iter_mut().zip(self.bns.iter_mut()).enumerate() {
            c.visit_params(&crate::nn::join(prefix, &format!("conv{}", i + 1)), f);
            b.visit_params(&crate::nn::join(prefix, &format!("bn{}", i + 1)), f);
        }
        self.mu.visit_params(&crate::nn::join(prefix, "mu"), f);
        self.logvar.visit_params(&crate::nn::join(prefix, "logvar"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ndarray::ArrayD<F>)) {
        for (i, b) in self.bns.iter_mut().enumerate() {
            b.visit_buffers(&crate::nn::join(prefix, &format!("bn{}", i + 1)), f);
        }
    }
}
