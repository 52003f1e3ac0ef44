//! Declarative run configuration and named ablation switches.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::Protocol;
use crate::error::{Error, Result};
use crate::losses::ReconLoss;
use crate::trainer::{Init, TrainConfig};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "NOVELDEC_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset manifest (TOML).
    pub dataset: PathBuf,
    pub target_class: u32,
    #[serde(default = "default_protocol")]
    pub protocol: Protocol,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Seed, learning schedule, architecture, augmentation policy and ablation flags.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSettings,
    /// Variants run by the `ablate` command; empty means the MI-term grid.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ablate: Vec<AblationVariant>,
}

fn default_protocol() -> Protocol {
    Protocol::FullTest
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub score: ReconLoss,
    /// Fixed novelty threshold; `None` uses the 95th percentile of train scores.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub plots: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            score: ReconLoss::Laplacian,
            threshold: None,
            plots: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationVariant {
    pub name: String,
    #[serde(default)]
    pub flags: Vec<AblationFlag>,
}

/// Single switches that turn off or replace one part of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationFlag {
    /// Disable the global, local and prior terms.
    NoMi,
    NoGlobal,
    NoLocal,
    NoPrior,
    /// Plain mean-squared reconstruction error.
    Mse,
    /// No reconstruction term at all.
    NoRecon,
    NormalInit,
    ContrastiveInit,
    DropZA,
    DropZ,
    FreezeCodes,
    ShuffleNegatives,
    /// Analytic prior on the encoder's own log-variance, without the prior head.
    NoPriorHead,
}

impl AblationFlag {
    pub const ALL: [AblationFlag; 13] = [
        AblationFlag::NoMi,
        AblationFlag::NoGlobal,
        AblationFlag::NoLocal,
        AblationFlag::NoPrior,
        AblationFlag::Mse,
        AblationFlag::NoRecon,
        AblationFlag::NormalInit,
        AblationFlag::ContrastiveInit,
        AblationFlag::DropZA,
        AblationFlag::DropZ,
        AblationFlag::FreezeCodes,
        AblationFlag::ShuffleNegatives,
        AblationFlag::NoPriorHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationFlag::NoMi => "no_mi",
            AblationFlag::NoGlobal => "no_global",
            AblationFlag::NoLocal => "no_local",
            AblationFlag::NoPrior => "no_prior",
            AblationFlag::Mse => "mse",
            AblationFlag::NoRecon => "no_recon",
            AblationFlag::NormalInit => "normal_init",
            AblationFlag::ContrastiveInit => "contrastive_init",
            AblationFlag::DropZA => "drop_z_a",
            AblationFlag::DropZ => "drop_z",
            AblationFlag::FreezeCodes => "freeze_codes",
            AblationFlag::ShuffleNegatives => "shuffle_negatives",
            AblationFlag::NoPriorHead => "no_prior_head",
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        let ab = &mut cfg.ablation;
        match self {
            AblationFlag::NoMi => *ab = ab.no_mi(),
            AblationFlag::NoGlobal => ab.use_global_mi = false,
            AblationFlag::NoLocal => ab.use_local_mi = false,
            AblationFlag::NoPrior => ab.use_prior_mi = false,
            AblationFlag::Mse => ab.recon_loss = ReconLoss::Mse,
            AblationFlag::NoRecon => ab.recon_loss = ReconLoss::None,
            AblationFlag::NormalInit => ab.init = Init::Normal,
            AblationFlag::ContrastiveInit => ab.init = Init::Contrastive,
            AblationFlag::DropZA => ab.drop_z_a = true,
            AblationFlag::DropZ => ab.drop_z = true,
            AblationFlag::FreezeCodes => ab.freeze_codes = true,
            AblationFlag::ShuffleNegatives => ab.shuffle_negatives = true,
            AblationFlag::NoPriorHead => cfg.arch.use_prior_head = false,
        }
    }
}

impl FromStr for AblationFlag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL.into_iter().find(|f| f.name() == key).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|f| f.name()).collect();
            Error::Config(format!("unknown ablation {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

impl std::fmt::Display for AblationFlag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// The mutual-information grid: no MI, each critic alone, both critics, everything.
pub fn default_ablation_grid() -> Vec<AblationVariant> {
    use AblationFlag::*;
    let v = |name: &str, flags: Vec<AblationFlag>| AblationVariant {
        name: name.into(),
        flags,
    };
    vec![
        v("none", vec![NoMi]),
        v("global", vec![NoLocal, NoPrior]),
        v("local", vec![NoGlobal, NoPrior]),
        v("global+local", vec![NoPrior]),
        v("global+local+prior", vec![]),
    ]
}

impl RunConfig {
    /// Parses TOML text; unknown keys anywhere are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `dataset` path is resolved against its directory
    /// (the output directory stays relative to the working directory).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.dataset.is_relative() {
            cfg.dataset = base.join(&cfg.dataset);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(t) = self.eval.threshold {
            if !t.is_finite() {
                return Err(Error::Config(format!("eval.threshold must be finite, got {t}")));
            }
        }
        if self.eval.score == ReconLoss::None {
            return Err(Error::Config("eval.score must be LAPLACIAN or MSE".into()));
        }
        let mut names = std::collections::HashSet::new();
        for v in &self.ablate {
            if !names.insert(v.name.as_str()) {
                return Err(Error::Config(format!("duplicate ablation variant {:?}", v.name)));
            }
        }
        Ok(())
    }

    /// Applies the seed override from [`SEED_ENV`], if set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// What a command ran with; enough to replay it (`--config run_manifest.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    /// Split file written for the run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<PathBuf>,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, split: Option<PathBuf>) -> Self {
        Self {
            command: command.into(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            seed: config.train.seed,
            split,
            config: config.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn parse(text: &str) -> Result<Self> {
        let m: RunManifest = serde_json::from_str(text).map_err(|e| Error::Config(format!("run manifest: {e}")))?;
        m.config.validate()?;
        Ok(m)
    }
}

/// Loads a TOML run config, or the config embedded in a `.json` run manifest.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(RunManifest::parse(&text)?.config)
    } else {
        RunConfig::from_file(path)
    }
}
