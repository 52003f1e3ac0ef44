//! Joint optimisation of networks, critics and per-sample latent codes.

mod checkpoint;
mod step;

use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::{make_pair_batch, AugmentationPolicy};
use crate::dataset::{stack, ImageSample, OneClassSplit};
use crate::error::{Error, Result};
use crate::latent_init::{init_codes, pca_fit, PcaModel};
use crate::losses::{LossWeights, PyramidSpec, ReconLoss};
use crate::networks::{ArchConfig, Networks};
use crate::nn::Mode;
use crate::real::Real;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use step::{batches, objective, sgd_step, sgd_update, Phase, RunningCaches, Terms};

/// How the latent codes are initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Init {
    /// Whitened PCA projection of the training images.
    Pca,
    /// Independent standard-normal draws.
    Normal,
    /// Encoder means after a warm-up of the contrastive branch alone.
    Contrastive,
}

/// Switches for the ablation studies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub use_local_mi: bool,
    pub use_global_mi: bool,
    pub use_prior_mi: bool,
    pub recon_loss: ReconLoss,
    pub init: Init,
    /// Zero the latent half of the local critic's input.
    pub drop_z_a: bool,
    /// Zero the latent half of the global critic's input.
    pub drop_z: bool,
    pub freeze_codes: bool,
    /// Use other images of the batch as negatives instead of augmented copies.
    pub shuffle_negatives: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_local_mi: true,
            use_global_mi: true,
            use_prior_mi: true,
            recon_loss: ReconLoss::Laplacian,
            init: Init::Pca,
            drop_z_a: false,
            drop_z: false,
            freeze_codes: false,
            shuffle_negatives: false,
        }
    }
}

impl Ablation {
    pub fn no_mi(self) -> Self {
        Self {
            use_local_mi: false,
            use_global_mi: false,
            use_prior_mi: false,
            ..self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub pyramid: PyramidSpec,
    pub seed: u64,
    pub ablation: Ablation,
    pub arch: ArchConfig,
    pub augment: AugmentationPolicy,
    /// Write a numbered checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    /// Epochs of encoder-only training before contrastive code initialisation.
    pub warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 0.002,
            momentum: 0.9,
            weight_decay: 0.005,
            weights: LossWeights::default(),
            pyramid: PyramidSpec::default(),
            seed: 0,
            ablation: Ablation::default(),
            arch: ArchConfig::default(),
            augment: AugmentationPolicy::default(),
            checkpoint_every: 10,
            warmup_epochs: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 (batch normalisation), got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.pyramid.levels == 0 {
            return Err(Error::Config("pyramid.levels must be at least 1".into()));
        }
        self.weights.validate()?;
        self.arch.validate()?;
        self.augment.validate()
    }

    /// Per-epoch RNG: a fixed stream of the run seed, so resuming needs only the epoch counter.
    fn epoch_rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

const WARMUP_STREAM: u64 = 1 << 32;
const NORMAL_INIT_STREAM: u64 = u64::MAX;

/// One row of the metric history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    #[serde(rename = "L_lap")]
    pub lap: f64,
    #[serde(rename = "L_lat")]
    pub lat: f64,
    #[serde(rename = "L_global")]
    pub global: f64,
    #[serde(rename = "L_local")]
    pub local: f64,
    #[serde(rename = "L_prior")]
    pub prior: f64,
    pub total: f64,
}

impl EpochMetrics {
    fn new(epoch: usize, t: Terms) -> Self {
        Self {
            epoch,
            lap: t.lap,
            lat: t.lat,
            global: t.global,
            local: t.local,
            prior: t.prior,
            total: t.total,
        }
    }

    pub fn values(&self) -> [f64; 6] {
        [self.lap, self.lat, self.global, self.local, self.prior, self.total]
    }
}

/// Everything needed to continue or reproduce a run.
#[derive(Debug, Clone)]
pub struct TrainState<F: Real> {
    pub config: TrainConfig,
    pub nets: Networks<F>,
    /// One row per training sample, in `code_ids` order.
    pub codes: Array2<F>,
    pub code_velocity: Array2<F>,
    pub code_ids: Vec<String>,
    pub pca: Option<PcaModel>,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
}

impl<F: Real> TrainState<F> {
    /// Builds networks and initial codes for `train` (whose order fixes the code rows).
    pub fn init(config: &TrainConfig, train: &[ImageSample]) -> Result<Self> {
        config.validate()?;
        if train.len() < 2 {
            return Err(Error::Config(format!("need at least 2 training samples, got {}", train.len())));
        }
        let d = config.arch.latent_dim;
        let nets = Networks::new(&config.arch, config.seed)?;
        let mut state = Self {
            config: config.clone(),
            nets,
            codes: Array2::zeros((train.len(), d)),
            code_velocity: Array2::zeros((train.len(), d)),
            code_ids: train.iter().map(|x| x.id.clone()).collect(),
            pca: None,
            epoch: 0,
            history: Vec::new(),
        };
        state.check_samples(train)?;
        match config.ablation.init {
            Init::Pca => {
                let pca = pca_fit(train, d)?;
                state.codes = init_codes(&pca, train)?.mapv(F::lit);
                state.pca = Some(pca);
            }
            Init::Normal => {
                let mut rng = config.epoch_rng(NORMAL_INIT_STREAM);
                state.codes = Array2::from_shape_simple_fn((train.len(), d), || F::lit(rng.sample(StandardNormal)));
            }
            Init::Contrastive => {
                for k in 0..config.warmup_epochs {
                    let mut rng = config.epoch_rng(WARMUP_STREAM + k as u64);
                    state.pass(train, &mut rng, Phase::Warmup, k + 1)?;
                }
                state.codes = encode_means(&state.nets, train)?;
            }
        }
        Ok(state)
    }

    /// Confirms that `train` is the sample list the codes were built for.
    pub fn check_samples(&self, train: &[ImageSample]) -> Result<()> {
        if train.len() != self.code_ids.len() || train.iter().zip(&self.code_ids).any(|(x, id)| &x.id != id) {
            return Err(Error::Config("training samples do not match the latent codes of this run".into()));
        }
        let a = &self.config.arch;
        if let Some(x) = train.iter().find(|x| x.pixels.dim() != (a.channels, a.image_size, a.image_size)) {
            return Err(Error::Sample {
                id: x.id.clone(),
                reason: format!(
                    "shape {:?} does not match the configured {}×{}×{}",
                    x.pixels.dim(),
                    a.channels,
                    a.image_size,
                    a.image_size
                ),
            });
        }
        Ok(())
    }

    /// One training epoch; appends to the history and returns the epoch means.
    pub fn run_epoch(&mut self, train: &[ImageSample]) -> Result<EpochMetrics> {
        let epoch = self.epoch + 1;
        let mut rng = self.config.epoch_rng(epoch as u64);
        let t = self.pass(train, &mut rng, Phase::Joint, epoch)?;
        let row = EpochMetrics::new(epoch, t);
        self.history.push(row);
        self.epoch = epoch;
        Ok(row)
    }

    fn pass(&mut self, train: &[ImageSample], rng: &mut ChaCha8Rng, phase: Phase, epoch: usize) -> Result<Terms> {
        let cfg = self.config.clone();
        let mut perm: Vec<usize> = (0..train.len()).collect();
        perm.shuffle(rng);
        let mut steps = Vec::new();
        for (step, idx) in batches(&perm, cfg.batch_size).into_iter().enumerate() {
            let aug_seed: u64 = rng.gen();
            let batch: Vec<&ImageSample> = idx.iter().map(|&i| &train[i]).collect();
            let pos = stack::<F>(batch.iter().copied());
            let neg = if cfg.ablation.shuffle_negatives {
                let rolled: Vec<&ImageSample> = (0..batch.len()).map(|i| batch[(i + 1) % batch.len()]).collect();
                stack::<F>(rolled)
            } else {
                let owned: Vec<ImageSample> = batch.iter().map(|&x| x.clone()).collect();
                let pairs = make_pair_batch(&owned, &cfg.augment, aug_seed);
                stack::<F>(pairs.iter().map(|p| &p.negative))
            };
            let codes = self.codes.select(Axis(0), idx);
            let (terms, d_codes, caches) = objective(&mut self.nets, &codes, &pos, &neg, &cfg, phase)?;
            if !terms.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step: step + 1,
                    terms: terms.describe(),
                });
            }
            sgd_step(&mut self.nets, &cfg);
            if phase == Phase::Joint && !cfg.ablation.freeze_codes {
                let mut grad = Array2::<F>::zeros(self.codes.raw_dim());
                for (row, &i) in idx.iter().enumerate() {
                    grad.row_mut(i).assign(&d_codes.row(row));
                }
                sgd_update(&mut self.codes, &grad, &mut self.code_velocity, cfg.learning_rate, cfg.momentum, 0.0);
            }
            caches.apply(&mut self.nets);
            steps.push(terms);
        }
        Ok(step::mean_terms(&steps))
    }

    pub fn to_checkpoint(&mut self) -> Checkpoint {
        let mut tensors = self.nets.export_tensors();
        tensors.insert("codes/value".into(), self.codes.mapv(|v| v.f64()).into_dyn());
        tensors.insert("codes/velocity".into(), self.code_velocity.mapv(|v| v.f64()).into_dyn());
        if let Some(p) = &self.pca {
            tensors.insert("pca/mean".into(), p.mean.clone().into_dyn());
            tensors.insert("pca/components".into(), p.components.clone().into_dyn());
            tensors.insert("pca/scales".into(), p.component_scales.clone().into_dyn());
        }
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            code_ids: self.code_ids.clone(),
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut nets = Networks::<F>::new(&ckpt.config.arch, ckpt.config.seed)?;
        nets.import_tensors(&ckpt.tensors)?;
        let matrix = |name: &str| -> Result<Array2<F>> {
            let t = ckpt.tensor(name)?;
            let want = (ckpt.code_ids.len(), ckpt.config.arch.latent_dim);
            t.clone()
                .into_dimensionality()
                .ok()
                .filter(|m: &Array2<f64>| m.dim() == want)
                .map(|m| m.mapv(F::lit))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape {:?}, expected {want:?}", t.shape())))
        };
        let pca = match ckpt.tensors.get("pca/mean") {
            None => None,
            Some(mean) => {
                let bad = |e| Error::Checkpoint(format!("pca tensors: {e}"));
                let mean = mean.clone().into_dimensionality().map_err(bad)?;
                let components = ckpt.tensor("pca/components")?.clone().into_dimensionality().map_err(bad)?;
                let component_scales = ckpt.tensor("pca/scales")?.clone().into_dimensionality().map_err(bad)?;
                Some(PcaModel {
                    mean,
                    components,
                    component_scales,
                })
            }
        };
        Ok(Self {
            config: ckpt.config.clone(),
            nets,
            codes: matrix("codes/value")?,
            code_velocity: matrix("codes/velocity")?,
            code_ids: ckpt.code_ids.clone(),
            pca,
            epoch: ckpt.epoch,
            history: ckpt.history.clone(),
        })
    }
}

/// Eval-mode encoder means of `samples`, computed in chunks.
pub fn encode_means<F: Real>(nets: &Networks<F>, samples: &[ImageSample]) -> Result<Array2<F>> {
    let mut out = Array2::<F>::zeros((samples.len(), nets.arch.latent_dim));
    for (k, chunk) in samples.chunks(EVAL_CHUNK).enumerate() {
        let (pack, _) = nets.encoder.forward(&stack::<F>(chunk), Mode::Eval)?;
        out.slice_mut(ndarray::s![k * EVAL_CHUNK..k * EVAL_CHUNK + chunk.len(), ..]).assign(&pack.mu);
    }
    Ok(out)
}

pub(crate) const EVAL_CHUNK: usize = 64;

/// Where a run writes its artefacts.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub dir: PathBuf,
}

impl RunLayout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn model(&self) -> PathBuf {
        self.dir.join("model.ndck")
    }

    pub fn periodic(&self, epoch: usize) -> PathBuf {
        self.dir.join("checkpoints").join(format!("epoch-{epoch:04}.ndck"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub history: Vec<EpochMetrics>,
}

/// Trains from scratch on `split.train` for `config.epochs` epochs.
pub fn train<F: Real>(split: &OneClassSplit, config: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    if split.train.is_empty() {
        return Err(Error::Config("the split has no training samples".into()));
    }
    let mut state = TrainState::<F>::init(config, &split.train)?;
    continue_run(&mut state, &split.train, config.epochs, out_dir)
}

/// Loads a checkpoint and continues training until `epochs` epochs are complete.
pub fn resume<F: Real>(checkpoint: &Path, train: &[ImageSample], epochs: usize, out_dir: &Path) -> Result<TrainOutcome> {
    let mut state = TrainState::<F>::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    state.check_samples(train)?;
    continue_run(&mut state, train, epochs, out_dir)
}

/// Runs epochs until `epochs` are complete, writing metrics after every epoch
/// and checkpoints at the configured interval and at the end.
pub fn continue_run<F: Real>(
    state: &mut TrainState<F>,
    train: &[ImageSample],
    epochs: usize,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let layout = RunLayout::new(out_dir);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_metrics_csv(&layout.metrics(), &state.history)?;
    while state.epoch < epochs {
        let row = state.run_epoch(train)?;
        log::info!("epoch {}: {}", row.epoch, row_summary(&row));
        write_metrics_csv(&layout.metrics(), &state.history)?;
        let every = state.config.checkpoint_every;
        if every > 0 && state.epoch.is_multiple_of(every) {
            state.to_checkpoint().save(&layout.periodic(state.epoch))?;
        }
    }
    let path = layout.model();
    state.to_checkpoint().save(&path)?;
    Ok(TrainOutcome {
        checkpoint: path,
        history: state.history.clone(),
    })
}

fn row_summary(r: &EpochMetrics) -> String {
    format!(
        "total {:.5} (lap {:.5}, lat {:.5}, global {:.5}, local {:.5}, prior {:.5})",
        r.total, r.lap, r.lat, r.global, r.local, r.prior
    )
}

pub fn write_metrics_csv(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    if history.is_empty() {
        w.write_record(["epoch", "L_lap", "L_lat", "L_global", "L_local", "L_prior", "total"])
            .map_err(|e| csv_error(path, e))?;
    }
    for row in history {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

#[cfg(test)]
mod tests;
