//! Mutual-information critics and the prior head.

use ndarray::{concatenate, s, Array1, Array2, Array3, Array4, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, relu, relu_backward, Linear, Module, Param};
use crate::real::Real;

/// Two ReLU hidden layers and a scalar output.
#[derive(Debug, Clone)]
pub struct Mlp<F: Real> {
    pub l1: Linear<F>,
    pub l2: Linear<F>,
    pub out: Linear<F>,
}

pub struct MlpCache<F: Real> {
    x: Array2<F>,
    h1: Array2<F>,
    h2: Array2<F>,
}

impl<F: Real> Mlp<F> {
    pub fn new<R: Rng>(fan_in: usize, hidden: (usize, usize), fan_out: usize, rng: &mut R) -> Self {
        Self {
            l1: Linear::new(fan_in, hidden.0, true, rng),
            l2: Linear::new(hidden.0, hidden.1, true, rng),
            out: Linear::new(hidden.1, fan_out, true, rng),
        }
    }

    pub fn forward(&self, x: Array2<F>) -> (Array2<F>, MlpCache<F>) {
        let h1 = relu(&self.l1.forward(&x));
        let h2 = relu(&self.l2.forward(&h1));
        let y = self.out.forward(&h2);
        (y, MlpCache { x, h1, h2 })
    }

    pub fn backward(&mut self, cache: &MlpCache<F>, dy: &Array2<F>) -> Array2<F> {
        let d = self.out.backward(&cache.h2, dy);
        let d = relu_backward(&cache.h2, &d);
        let d = self.l2.backward(&cache.h1, &d);
        let d = relu_backward(&cache.h1, &d);
        self.l1.backward(&cache.x, &d)
    }
}

impl<F: Real> Module<F> for Mlp<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.l1.visit_params(&join(prefix, "l1"), f);
        self.l2.visit_params(&join(prefix, "l2"), f);
        self.out.visit_params(&join(prefix, "out"), f);
    }
}

fn check_pair<F: Real>(a: &Array4<F>, z: &Array2<F>, s: usize, d: usize) -> Result<()> {
    if a.dim().1 != s || z.ncols() != d || a.dim().0 != z.nrows() {
        return Err(Error::shape(
            format!("A: N×{s}×H×W with z: N×{d}"),
            format!("A: {:?} with z: {:?}", a.shape(), z.shape()),
        ));
    }
    Ok(())
}

/// Global critic over `[A_z, z]`, where `A_z` is a learned linear map of the
/// spatially averaged feature map down to the latent width.
#[derive(Debug, Clone)]
pub struct GlobalHead<F: Real> {
    pub proj: Linear<F>,
    pub mlp: Mlp<F>,
    feature_channels: usize,
    latent_dim: usize,
}

pub struct GlobalCache<F: Real> {
    pooled: Array2<F>,
    mlp: MlpCache<F>,
    spatial: (usize, usize),
    zero_latent: bool,
}

impl<F: Real> GlobalHead<F> {
    pub fn new<R: Rng>(feature_channels: usize, latent_dim: usize, width: usize, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(feature_channels, latent_dim, true, rng),
            mlp: Mlp::new(2 * latent_dim, (width, width), 1, rng),
            feature_channels,
            latent_dim,
        }
    }

    /// Raw (pre-sigmoid) score per row. `zero_latent` replaces `z` by zeros.
    pub fn forward(&self, a: &Array4<F>, z: &Array2<F>, zero_latent: bool) -> Result<(Array1<F>, GlobalCache<F>)> {
        check_pair(a, z, self.feature_channels, self.latent_dim)?;
        let (_, _, h, w) = a.dim();
        let pooled = a.mean_axis(Axis(3)).expect("w > 0").mean_axis(Axis(2)).expect("h > 0");
        let az = self.proj.forward(&pooled);
        let zin = if zero_latent { Array2::zeros(z.raw_dim()) } else { z.clone() };
        let input = concatenate![Axis(1), az, zin];
        let (y, mlp) = self.mlp.forward(input);
        Ok((
            y.column(0).to_owned(),
            GlobalCache {
                pooled,
                mlp,
                spatial: (h, w),
                zero_latent,
            },
        ))
    }

    /// Returns `(dL/dA, dL/dz)`.
    pub fn backward(&mut self, cache: &GlobalCache<F>, d_score: &Array1<F>) -> (Array4<F>, Array2<F>) {
        let dy = d_score.view().insert_axis(Axis(1)).to_owned();
        let din = self.mlp.backward(&cache.mlp, &dy);
        let d = self.latent_dim;
        let d_az = din.slice(s![.., ..d]).to_owned();
        let dz = if cache.zero_latent {
            Array2::zeros(d_az.raw_dim())
        } else {
            din.slice(s![.., d..]).to_owned()
        };
        let d_pooled = self.proj.backward(&cache.pooled, &d_az);
        let (h, w) = cache.spatial;
        let scale = F::one() / F::lit((h * w) as f64);
        let n = d_pooled.nrows();
        let da = Array4::from_shape_fn((n, self.feature_channels, h, w), |(b, c, _, _)| d_pooled[[b, c]] * scale);
        (da, dz)
    }
}

impl<F: Real> Module<F> for GlobalHead<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.proj.visit_params(&join(prefix, "proj"), f);
        self.mlp.visit_params(&join(prefix, "mlp"), f);
    }
}

/// Local critic: a 1×1 convolutional net over `[A_ij, z_A]` at every position,
/// with `z_A` the global latent replicated across the map.
#[derive(Debug, Clone)]
pub struct LocalHead<F: Real> {
    pub mlp: Mlp<F>,
    feature_channels: usize,
    latent_dim: usize,
}

pub struct LocalCache<F: Real> {
    mlp: MlpCache<F>,
    dims: (usize, usize, usize),
    zero_latent: bool,
}

impl<F: Real> LocalHead<F> {
    pub fn new<R: Rng>(feature_channels: usize, latent_dim: usize, width: usize, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::new(feature_channels + latent_dim, (width, width), 1, rng),
            feature_channels,
            latent_dim,
        }
    }

    /// Raw score map `(N, H, W)`. `zero_latent` replaces `z_A` by zeros.
    pub fn forward(&self, a: &Array4<F>, z: &Array2<F>, zero_latent: bool) -> Result<(Array3<F>, LocalCache<F>)> {
        check_pair(a, z, self.feature_channels, self.latent_dim)?;
        let (n, s, h, w) = a.dim();
        let d = self.latent_dim;
        let mut input = Array2::<F>::zeros((n * h * w, s + d));
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let mut row = input.row_mut((b * h + i) * w + j);
                    for c in 0..s {
                        row[c] = a[[b, c, i, j]];
                    }
                    if !zero_latent {
                        row.slice_mut(s![s..]).assign(&z.row(b));
                    }
                }
            }
        }
        let (y, mlp) = self.mlp.forward(input);
        let map = y.into_shape_with_order((n, h, w)).expect("reshape");
        Ok((
            map,
            LocalCache {
                mlp,
                dims: (n, h, w),
                zero_latent,
            },
        ))
    }

    /// Returns `(dL/dA, dL/dz)`; the latent gradient sums over positions.
    pub fn backward(&mut self, cache: &LocalCache<F>, d_map: &Array3<F>) -> (Array4<F>, Array2<F>) {
        let (n, h, w) = cache.dims;
        let dy = d_map
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * h * w, 1))
            .expect("reshape");
        let din = self.mlp.backward(&cache.mlp, &dy);
        let s = self.feature_channels;
        let mut da = Array4::<F>::zeros((n, s, h, w));
        let mut dz = Array2::<F>::zeros((n, self.latent_dim));
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let row = din.row((b * h + i) * w + j);
                    for c in 0..s {
                        da[[b, c, i, j]] = row[c];
                    }
                    if !cache.zero_latent {
                        let mut zr = dz.row_mut(b);
                        zr += &row.slice(s![s..]);
                    }
                }
            }
        }
        (da, dz)
    }
}

impl<F: Real> Module<F> for LocalHead<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.mlp.visit_params(&join(prefix, "mlp"), f);
    }
}

/// Maps `μ` to a log-variance correction for `p(z | A)`. The output layer starts at
/// zero so the correction is initially the identity.
#[derive(Debug, Clone)]
pub struct PriorHead<F: Real> {
    pub mlp: Mlp<F>,
}

impl<F: Real> PriorHead<F> {
    pub fn new<R: Rng>(latent_dim: usize, hidden: (usize, usize), rng: &mut R) -> Self {
        let mut mlp = Mlp::new(latent_dim, hidden, latent_dim, rng);
        mlp.out.weight.value.fill(F::zero());
        if let Some(b) = &mut mlp.out.bias {
            b.value.fill(F::zero());
        }
        Self { mlp }
    }

    pub fn forward(&self, mu: &Array2<F>) -> (Array2<F>, MlpCache<F>) {
        self.mlp.forward(mu.clone())
    }

    pub fn backward(&mut self, cache: &MlpCache<F>, d_delta: &Array2<F>) -> Array2<F> {
        self.mlp.backward(cache, d_delta)
    }
}

impl<F: Real> Module<F> for PriorHead<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.mlp.visit_params(&join(prefix, "mlp"), f);
    }
}
