//! Reconstruction-error scoring, AUC, thresholding, reports and plots.

pub mod plot;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{stack, ImageSample, OneClassSplit, Protocol};
use crate::error::{Error, Result};
use crate::latent_init::pca_fit_matrix;
use crate::losses::{laplacian_per_sample, mse_per_sample, PyramidSpec, ReconLoss};
use crate::networks::Networks;
use crate::real::Real;
use crate::trainer::{encode_means, Checkpoint, EpochMetrics};
use plot::Series;

const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub score: f64,
    /// 1 = in-class, 0 = out-of-class.
    pub label: u8,
}

/// Trained networks in inference mode.
#[derive(Debug, Clone)]
pub struct Model<F: Real> {
    pub nets: Networks<F>,
    pub pyramid: PyramidSpec,
}

impl<F: Real> Model<F> {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut nets = Networks::<F>::new(&ckpt.config.arch, ckpt.config.seed)?;
        nets.import_tensors(&ckpt.tensors)?;
        Ok(Self {
            nets,
            pyramid: ckpt.config.pyramid,
        })
    }

    /// `score(x) = loss(decode(encode(x).μ), x)` for every sample.
    pub fn scores(&self, samples: &[ImageSample], kind: ReconLoss) -> Result<Vec<f64>> {
        if kind == ReconLoss::None {
            return Err(Error::Config("a reconstruction error is required for scoring".into()));
        }
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(CHUNK) {
            let x = stack::<F>(chunk);
            let z = self.nets.encode(&x)?.mu;
            let xhat = self.nets.decode(&z)?;
            let per = match kind {
                ReconLoss::Mse => mse_per_sample(&xhat, &x)?,
                _ => laplacian_per_sample(&xhat, &x, self.pyramid)?,
            };
            out.extend(per.into_iter().map(|v| v.f64().max(0.0)));
        }
        Ok(out)
    }

    pub fn score(&self, x: &ImageSample, kind: ReconLoss) -> Result<f64> {
        Ok(self.scores(std::slice::from_ref(x), kind)?[0])
    }

    pub fn latents(&self, samples: &[ImageSample]) -> Result<Array2<f64>> {
        Ok(encode_means(&self.nets, samples)?.mapv(|v| v.f64()))
    }
}

/// Anomaly score of one image under a checkpoint (computed in `f32`).
pub fn anomaly_score(x: &ImageSample, ckpt: &Checkpoint, kind: ReconLoss) -> Result<f64> {
    Model::<f32>::from_checkpoint(ckpt)?.score(x, kind)
}

/// Rank AUC with out-of-class (label 0) as the positive class; ties count ½.
pub fn auc(records: &[ScoreRecord]) -> Result<f64> {
    let n_out = records.iter().filter(|r| r.label == 0).count();
    let n_in = records.len() - n_out;
    if n_out == 0 || n_in == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both labels ({n_in} in-class, {n_out} out-of-class)"
        )));
    }
    if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::UndefinedMetric(format!("score of {} is not finite", r.id)));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].score.total_cmp(&records[b].score));
    // average 1-based ranks over tie groups, summed for the positive class
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && records[order[j + 1]].score == records[order[i]].score {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| records[k].label == 0).count() as f64;
        i = j + 1;
    }
    let (p, q) = (n_out as f64, n_in as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Confusion counts with novelty (label 0) as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Flags a sample as novel iff its score exceeds `threshold`.
pub fn classify(records: &[ScoreRecord], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for r in records {
        match (r.score > threshold, r.label == 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// Linearly interpolated percentile, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::UndefinedMetric("percentile of an empty set".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Euclidean distance of each test latent to the centroid of the train latents.
pub fn centroid_distances(train: &Array2<f64>, test: &Array2<f64>) -> Vec<f64> {
    let centre: Array1<f64> = train.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(test.ncols()));
    test.rows()
        .into_iter()
        .map(|r| r.iter().zip(&centre).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBreakdown {
    pub class: u32,
    pub count: usize,
    pub mean_score: f64,
    /// AUC of this class against the in-class test samples (absent for the target class).
    pub auc_vs_inliers: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub target_class: u32,
    pub protocol: Protocol,
    pub epoch: usize,
    pub score_kind: ReconLoss,
    pub auc: f64,
    /// AUC of the distance from the train-latent centroid.
    pub latent_auc: f64,
    pub threshold: f64,
    pub confusion: Confusion,
    pub per_class: Vec<ClassBreakdown>,
    pub records: Vec<ScoreRecord>,
    pub plots: Vec<PathBuf>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("report json: {e}")))
    }

    /// Writes `report.json` and `scores.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        let path = dir.join("scores.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::io(&path, e.into()))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub score_kind: ReconLoss,
    /// Overrides the default threshold (95th percentile of train scores).
    pub threshold: Option<f64>,
    /// Directory for the three plots; `None` skips plotting.
    pub plot_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            score_kind: ReconLoss::Laplacian,
            threshold: None,
            plot_dir: None,
        }
    }
}

pub fn evaluate(split: &OneClassSplit, ckpt: &Checkpoint, opts: &EvalOptions) -> Result<EvalReport> {
    evaluate_with::<f32>(split, ckpt, opts)
}

pub fn evaluate_with<F: Real>(split: &OneClassSplit, ckpt: &Checkpoint, opts: &EvalOptions) -> Result<EvalReport> {
    let model = Model::<F>::from_checkpoint(ckpt)?;
    let test: Vec<ImageSample> = split.test.iter().map(|t| t.sample.clone()).collect();
    let scores = model.scores(&test, opts.score_kind)?;
    let records: Vec<ScoreRecord> = split
        .test
        .iter()
        .zip(&scores)
        .map(|(t, &score)| ScoreRecord {
            id: t.sample.id.clone(),
            score,
            label: t.inlier as u8,
        })
        .collect();
    let auc_value = auc(&records)?;
    let threshold = match opts.threshold {
        Some(t) if t.is_finite() => t,
        Some(t) => return Err(Error::Config(format!("threshold must be finite, got {t}"))),
        None => percentile(&model.scores(&split.train, opts.score_kind)?, 95.0)?,
    };

    let train_latents = model.latents(&split.train)?;
    let test_latents = model.latents(&test)?;
    let dist = centroid_distances(&train_latents, &test_latents);
    let latent_records: Vec<ScoreRecord> = records
        .iter()
        .zip(&dist)
        .map(|(r, &d)| ScoreRecord { score: d, ..r.clone() })
        .collect();
    let latent_auc = auc(&latent_records)?;

    let mut plots = Vec::new();
    if let Some(dir) = &opts.plot_dir {
        plots = write_plots(dir, &ckpt.history, &records, &test_latents)?;
    }
    Ok(EvalReport {
        target_class: split.target_class,
        protocol: split.protocol,
        epoch: ckpt.epoch,
        score_kind: opts.score_kind,
        auc: auc_value,
        latent_auc,
        threshold,
        confusion: classify(&records, threshold),
        per_class: per_class(split, &records),
        records,
        plots,
    })
}

fn per_class(split: &OneClassSplit, records: &[ScoreRecord]) -> Vec<ClassBreakdown> {
    let mut groups: BTreeMap<u32, Vec<&ScoreRecord>> = BTreeMap::new();
    for (t, r) in split.test.iter().zip(records) {
        groups.entry(t.sample.label).or_default().push(r);
    }
    let inliers: Vec<ScoreRecord> = records.iter().filter(|r| r.label == 1).cloned().collect();
    groups
        .into_iter()
        .map(|(class, rs)| {
            let mean_score = rs.iter().map(|r| r.score).sum::<f64>() / rs.len() as f64;
            let auc_vs_inliers = if class == split.target_class {
                None
            } else {
                let mut pool = inliers.clone();
                pool.extend(rs.iter().map(|r| (*r).clone()));
                auc(&pool).ok()
            };
            ClassBreakdown {
                class,
                count: rs.len(),
                mean_score,
                auc_vs_inliers,
            }
        })
        .collect()
}

fn write_plots(
    dir: &Path,
    history: &[EpochMetrics],
    records: &[ScoreRecord],
    latents: &Array2<f64>,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let curve = |name: &'static str, f: fn(&EpochMetrics) -> f64| Series {
        name,
        points: history.iter().map(|m| (m.epoch as f64, f(m))).collect(),
    };
    let losses = plot::line_chart(
        "Training losses",
        "epoch",
        "loss",
        &[
            curve("total", |m| m.total),
            curve("L_lap", |m| m.lap),
            curve("L_lat", |m| m.lat),
            curve("L_global", |m| m.global),
            curve("L_local", |m| m.local),
            curve("L_prior", |m| m.prior),
        ],
    );
    let split_by = |label: u8| records.iter().filter(move |r| r.label == label);
    let hist = plot::histogram(
        "Anomaly scores",
        "score",
        &[
            ("in-class", split_by(1).map(|r| r.score).collect()),
            ("out-of-class", split_by(0).map(|r| r.score).collect()),
        ],
        30,
    );
    let proj = project_2d(latents);
    let pts = |label: u8| -> Vec<(f64, f64)> {
        records
            .iter()
            .zip(&proj)
            .filter(|(r, _)| r.label == label)
            .map(|(_, &p)| p)
            .collect()
    };
    let scatter = plot::scatter("Test latents (PCA)", &[("in-class", pts(1)), ("out-of-class", pts(0))]);

    let mut paths = Vec::new();
    for (name, body) in [("loss_curves.svg", losses), ("score_histogram.svg", hist), ("latent_projection.svg", scatter)] {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        paths.push(p);
    }
    Ok(paths)
}

/// Linear PCA projection to two dimensions; falls back to the first two
/// coordinates when the latents are too few or too narrow.
pub fn project_2d(latents: &Array2<f64>) -> Vec<(f64, f64)> {
    let coords = match pca_fit_matrix(latents, 2) {
        Ok(m) => {
            let centred = latents - &m.mean;
            centred.dot(&m.components.t())
        }
        Err(_) => latents.clone(),
    };
    coords
        .rows()
        .into_iter()
        .map(|r| (r.first().copied().unwrap_or(0.0), r.get(1).copied().unwrap_or(0.0)))
        .collect()
}
