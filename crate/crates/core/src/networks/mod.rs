//! DCGAN-shaped generator and encoder plus the three estimator heads.

mod decoder;
mod encoder;
mod heads;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, Array4, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mode, Module, Param};
use crate::real::Real;

pub use decoder::{Decoder, DecoderCache};
pub use encoder::{Encoder, EncoderCache, FeaturePack};
pub use heads::{GlobalCache, GlobalHead, LocalCache, LocalHead, Mlp, MlpCache, PriorHead};

/// Architecture dimensions shared by all networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub latent_dim: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Channel unit `b`: the encoder runs `2b → 4b → 8b`, the decoder the reverse.
    pub base_width: usize,
    /// Encoder block (1-based) whose activation is the local feature map.
    pub tap_block: usize,
    /// Hidden width of the global and local critics.
    pub head_width: usize,
    pub prior_hidden: (usize, usize),
    /// When false the prior loss uses the encoder's log-variance directly.
    pub use_prior_head: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            image_size: 32,
            channels: 3,
            base_width: 64,
            tap_block: 2,
            head_width: 512,
            prior_hidden: (1000, 200),
            use_prior_head: true,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return Err(Error::Config(format!("image_size {} is not a positive multiple of 8", self.image_size)));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if !(1..=3).contains(&self.tap_block) {
            return Err(Error::Config(format!("tap_block must be 1, 2 or 3, got {}", self.tap_block)));
        }
        if self.latent_dim == 0 || self.base_width == 0 || self.head_width == 0 {
            return Err(Error::Config("latent_dim, base_width and head_width must be positive".into()));
        }
        Ok(())
    }

    /// `(S, H, W)` of the local feature map.
    pub fn feature_dims(&self) -> (usize, usize, usize) {
        let side = self.image_size >> self.tap_block;
        (self.base_width << self.tap_block, side, side)
    }
}

/// Every trainable network of the model.
#[derive(Debug, Clone)]
pub struct Networks<F: Real> {
    pub arch: ArchConfig,
    pub decoder: Decoder<F>,
    pub encoder: Encoder<F>,
    pub global: GlobalHead<F>,
    pub local: LocalHead<F>,
    pub prior: PriorHead<F>,
}

impl<F: Real> Networks<F> {
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, _, _) = arch.feature_dims();
        Ok(Self {
            arch: arch.clone(),
            decoder: Decoder::new(arch, &mut rng),
            encoder: Encoder::new(arch, &mut rng),
            global: GlobalHead::new(s, arch.latent_dim, arch.head_width, &mut rng),
            local: LocalHead::new(s, arch.latent_dim, arch.head_width, &mut rng),
            prior: PriorHead::new(arch.latent_dim, arch.prior_hidden, &mut rng),
        })
    }

    pub fn decode(&self, z: &Array2<F>) -> Result<Array4<F>> {
        Ok(self.decoder.forward(z, Mode::Eval)?.0)
    }

    pub fn encode(&self, x: &Array4<F>) -> Result<FeaturePack<F>> {
        Ok(self.encoder.forward(x, Mode::Eval)?.0)
    }

    pub fn global_score(&self, a: &Array4<F>, z: &Array2<F>) -> Result<Array1<F>> {
        Ok(self.global.forward(a, z, false)?.0)
    }

    pub fn local_score_map(&self, a: &Array4<F>, z: &Array2<F>) -> Result<Array3<F>> {
        Ok(self.local.forward(a, z, false)?.0)
    }

    /// All tensors (parameters, momentum buffers, running statistics) as `f64`, keyed by path.
    pub fn export_tensors(&mut self) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        self.visit_params("", &mut |name, p| {
            out.insert(format!("param/{name}"), p.value.mapv(|v| v.f64()));
            out.insert(format!("velocity/{name}"), p.velocity.mapv(|v| v.f64()));
        });
        self.visit_buffers("", &mut |name, b| {
            out.insert(format!("buffer/{name}"), b.mapv(|v| v.f64()));
        });
        out
    }

    /// Inverse of [`Networks::export_tensors`]; every tensor must be present with a matching shape.
    pub fn import_tensors(&mut self, tensors: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
        let mut err: Option<Error> = None;
        let mut take = |key: String, dst: &mut ArrayD<F>| {
            if err.is_some() {
                return;
            }
            match tensors.get(&key) {
                Some(t) if t.shape() == dst.shape() => dst.zip_mut_with(t, |d, &s| *d = F::lit(s)),
                Some(t) => err = Some(Error::Checkpoint(format!("{key}: shape {:?}, expected {:?}", t.shape(), dst.shape()))),
                None => err = Some(Error::Checkpoint(format!("missing tensor {key}"))),
            }
        };
        self.visit_params("", &mut |name, p| {
            take(format!("param/{name}"), &mut p.value);
            take(format!("velocity/{name}"), &mut p.velocity);
        });
        self.visit_buffers("", &mut |name, b| take(format!("buffer/{name}"), b));
        err.map_or(Ok(()), Err)
    }
}

impl<F: Real> Module<F> for Networks<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        let p = |n: &str| crate::nn::join(prefix, n);
        self.decoder.visit_params(&p("decoder"), f);
        self.encoder.visit_params(&p("encoder"), f);
        self.global.visit_params(&p("global"), f);
        self.local.visit_params(&p("local"), f);
        self.prior.visit_params(&p("prior"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<F>)) {
        let p = |n: &str| crate::nn::join(prefix, n);
        self.decoder.visit_buffers(&p("decoder"), f);
        self.encoder.visit_buffers(&p("encoder"), f);
    }
}
