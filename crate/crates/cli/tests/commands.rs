use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::Array3;
use noveldec::config::RunManifest;
use noveldec::dataset::{save_png, ImageSample};
use noveldec::scoring::EvalReport;
use noveldec::trainer::read_metrics_csv;
use tempfile::TempDir;

fn noveldec(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noveldec"))
        .args(args)
        .arg("--quiet")
        .current_dir(cwd)
        .env_remove("NOVELDEC_SEED")
        .output()
        .expect("spawn noveldec")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Class 0 is a centred bright square, classes 1 and 2 are stripes.
fn glyph(class: u32, k: usize) -> Array3<f32> {
    let jitter = (k % 3) as f32 * 0.1;
    Array3::from_shape_fn((1, 8, 8), |(_, y, x)| {
        let on = match class {
            0 => (2..6).contains(&y) && (2..6).contains(&x),
            1 => x % 3 == 0,
            _ => y % 3 == 0,
        };
        if on {
            0.9 - jitter
        } else {
            -0.9 + jitter
        }
    })
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join("data/img")).unwrap();
        let mut csv = String::from("id,relpath,label\n");
        let mut test_csv = csv.clone();
        for class in 0..3u32 {
            for k in 0..12 {
                let id = format!("c{class}-{k:02}");
                let rel = format!("img/{id}.png");
                let sample = ImageSample::new(id.clone(), class, glyph(class, k)).unwrap();
                save_png(&sample, &root.join("data").join(&rel)).unwrap();
                let line = format!("{id},{rel},{class}\n");
                if k < 8 {
                    csv.push_str(&line);
                } else {
                    test_csv.push_str(&line);
                }
            }
        }
        fs::write(root.join("data/train.csv"), csv).unwrap();
        fs::write(root.join("data/test.csv"), test_csv).unwrap();
        fs::write(
            root.join("data/manifest.toml"),
            "root = \".\"\nimage_size = 8\nchannels = 1\n\n[format]\nkind = \"image_dir\"\ncsv = \"train.csv\"\ntest_csv = \"test.csv\"\n",
        )
        .unwrap();
        fs::write(
            root.join("run.toml"),
            r#"dataset = "data/manifest.toml"
target_class = 0
output_dir = "runs/toy"

[train]
epochs = 2
batch_size = 4
seed = 7
checkpoint_every = 0

[train.arch]
latent_dim = 4
base_width = 2
head_width = 8
prior_hidden = [8, 6]
"#,
        )
        .unwrap();
        Self { dir }
    }

    fn root(&self) -> &Path {
        self.dir.path()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        noveldec(args, self.root())
    }
}

#[test]
fn prepare_is_byte_reproducible() {
    let f = Fixture::new();
    for out in ["a.json", "b.json"] {
        ok(&f.run(&["prepare", "--manifest", "data/manifest.toml", "--target", "0", "--seed", "3", "--out", out]));
    }
    let a = fs::read(f.path("a.json")).unwrap();
    assert_eq!(a, fs::read(f.path("b.json")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert!(text.contains("c0-00") && !text.contains("\"c1-00\""));
}

#[test]
fn prepare_rejects_unknown_target_class() {
    let f = Fixture::new();
    let out = f.run(&["prepare", "--manifest", "data/manifest.toml", "--target", "9", "--out", "s.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("target class 9"));
    assert!(!f.path("s.json").exists());
}

#[test]
fn one_epoch_writes_one_history_row_and_a_manifest() {
    let f = Fixture::new();
    ok(&f.run(&["train", "--config", "run.toml", "--epochs", "1"]));
    let history = read_metrics_csv(&f.path("runs/toy/metrics.csv")).unwrap();
    assert_eq!(history.len(), 1);
    assert!(f.path("runs/toy/model.ndck").exists());
    let manifest = RunManifest::parse(&fs::read_to_string(f.path("runs/toy/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.command, "train");
    assert_eq!(manifest.seed, 7);
    assert_eq!(manifest.config.train.epochs, 1);
}

#[test]
fn ablate_flag_and_seed_variable_reach_the_manifest() {
    let f = Fixture::new();
    let out = Command::new(env!("CARGO_BIN_EXE_noveldec"))
        .args(["train", "--config", "run.toml", "--epochs", "1", "--ablate", "no_mi", "--out", "runs/nomi", "-q"])
        .current_dir(f.root())
        .env("NOVELDEC_SEED", "11")
        .output()
        .unwrap();
    ok(&out);
    let m = RunManifest::parse(&fs::read_to_string(f.path("runs/nomi/run_manifest.json")).unwrap()).unwrap();
    let ab = m.config.train.ablation;
    assert!(!ab.use_global_mi && !ab.use_local_mi && !ab.use_prior_mi);
    assert_eq!(m.seed, 11);
    let row = &read_metrics_csv(&f.path("runs/nomi/metrics.csv")).unwrap()[0];
    assert_eq!((row.global, row.local, row.prior), (0.0, 0.0, 0.0));
}

#[test]
fn run_manifest_reproduces_the_run() {
    let f = Fixture::new();
    ok(&f.run(&["train", "--config", "run.toml"]));
    ok(&f.run(&["train", "--config", "runs/toy/run_manifest.json", "--out", "runs/again"]));
    assert_eq!(
        fs::read(f.path("runs/toy/metrics.csv")).unwrap(),
        fs::read(f.path("runs/again/metrics.csv")).unwrap()
    );
}

#[test]
fn eval_writes_report_scores_and_plots() {
    let f = Fixture::new();
    ok(&f.run(&["train", "--config", "run.toml"]));
    let stdout = ok(&f.run(&[
        "eval",
        "--checkpoint",
        "runs/toy/model.ndck",
        "--split",
        "runs/toy/split.json",
        "--out",
        "eval",
    ]));
    assert!(stdout.contains("AUC"));
    for name in ["report.json", "scores.csv", "loss_curves.svg", "score_histogram.svg", "latent_projection.svg"] {
        assert!(f.path("eval").join(name).exists(), "{name}");
    }
    let report = EvalReport::from_json(&fs::read_to_string(f.path("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report.records.len(), 4 + 8);
    assert!((0.0..=1.0).contains(&report.auc));
    let scores = fs::read_to_string(f.path("eval/scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 1 + 12);
}

#[test]
fn eval_with_missing_checkpoint_fails_without_outputs() {
    let f = Fixture::new();
    ok(&f.run(&["prepare", "--manifest", "data/manifest.toml", "--target", "0", "--out", "split.json"]));
    let out = f.run(&["eval", "--checkpoint", "nope.ndck", "--split", "split.json", "--out", "eval"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!f.path("eval").exists());
}

#[test]
fn score_prefers_training_images_over_inverted_copies() {
    let f = Fixture::new();
    ok(&f.run(&["train", "--config", "run.toml", "--epochs", "40"]));
    let sample = ImageSample::new("inv", 0, glyph(0, 0).mapv(|v| -v)).unwrap();
    save_png(&sample, &f.path("inverted.png")).unwrap();
    let score = |img: &str| -> f64 {
        ok(&f.run(&["score", "--checkpoint", "runs/toy/model.ndck", "--image", img]))
            .trim()
            .parse()
            .unwrap()
    };
    let plain = score("data/img/c0-00.png");
    let inverted = score("inverted.png");
    assert!(plain < inverted, "{plain} vs {inverted}");
}

#[test]
fn bad_config_is_a_config_error() {
    let f = Fixture::new();
    fs::write(f.path("bad.toml"), "dataset = \"data/manifest.toml\"\ntarget_class = 0\nmystery = 1\n").unwrap();
    let out = f.run(&["train", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!f.path("runs").exists());
}

#[test]
fn ablate_runs_the_declared_grid() {
    let f = Fixture::new();
    let mut cfg = fs::read_to_string(f.path("run.toml")).unwrap();
    cfg = cfg.replace("[train]\n", "[eval]\nplots = false\n\n[train]\n");
    cfg.push_str("\n[[ablate]]\nname = \"full\"\n\n[[ablate]]\nname = \"no mi\"\nflags = [\"no_mi\", \"mse\"]\n");
    fs::write(f.path("grid.toml"), cfg).unwrap();
    ok(&f.run(&["ablate", "--config", "grid.toml", "--epochs", "1", "--out", "grid"]));
    let summary = fs::read_to_string(f.path("grid/ablation_summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "variant,flags,auc,latent_auc,final_total");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("no mi,no_mi mse,"));
    assert!(f.path("grid/variants/no_mi/eval/report.json").exists());
    assert!(!f.path("grid/variants/full/eval/loss_curves.svg").exists());
}
