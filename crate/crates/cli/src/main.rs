use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use noveldec::config::{default_ablation_grid, load_run_config, AblationFlag, RunConfig, RunManifest, SEED_ENV};
use noveldec::dataset::{
    load_dataset, load_image, load_test_set, make_one_class_split, DatasetManifest, OneClassSplit, Protocol, SplitFile,
};
use noveldec::losses::ReconLoss;
use noveldec::scoring::{anomaly_score, evaluate, EvalOptions, EvalReport};
use noveldec::trainer::{self, Checkpoint};
use noveldec::{Error, Result};

#[derive(Parser)]
#[command(name = "noveldec", version, about = "One-class novelty detection with a decoder-encoder network")]
struct Cli {
    /// Only print errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a one-class train/test split to disk.
    Prepare(PrepareArgs),
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Score a split's test set and write report.json, scores.csv and plots.
    Eval(EvalArgs),
    /// Print the anomaly score of one image.
    Score(ScoreArgs),
    /// Train and evaluate every variant of an ablation grid.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Dataset manifest (TOML).
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    target: u32,
    /// FULL_TEST or HOLDOUT_80_20.
    #[arg(long, default_value = "FULL_TEST")]
    protocol: Protocol,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output split file (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Run config (TOML) or a run_manifest.json from an earlier run.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Ablation switch, e.g. `no_mi`; repeatable.
    #[arg(long = "ablate", value_name = "FLAG")]
    ablate: Vec<AblationFlag>,
    /// Use this split file instead of drawing a new split.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Continue from a checkpoint of the same run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Dataset manifest, if the split file does not name one.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory (default: `eval/` next to the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
    /// LAPLACIAN or MSE.
    #[arg(long, default_value = "LAPLACIAN", value_parser = parse_score)]
    score: ReconLoss,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    no_plots: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value = "LAPLACIAN", value_parser = parse_score)]
    score: ReconLoss,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
}

fn parse_score(s: &str) -> std::result::Result<ReconLoss, String> {
    match s.to_ascii_uppercase().as_str() {
        "LAPLACIAN" => Ok(ReconLoss::Laplacian),
        "MSE" => Ok(ReconLoss::Mse),
        _ => Err(format!("expected LAPLACIAN or MSE, got {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Score(a) => score(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn seed_override(seed: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(seed),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.into(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

struct Pools {
    train: Vec<noveldec::dataset::ImageSample>,
    test: Vec<noveldec::dataset::ImageSample>,
    manifest: DatasetManifest,
}

fn load_pools(path: &Path) -> Result<Pools> {
    let manifest = DatasetManifest::from_file(path)?;
    Ok(Pools {
        train: load_dataset(&manifest)?,
        test: load_test_set(&manifest)?,
        manifest,
    })
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let seed = seed_override(a.seed)?;
    let pools = load_pools(&a.manifest)?;
    let split = make_one_class_split(&pools.train, &pools.test, a.target, a.protocol, seed)?;
    let mut file = split.to_file(seed);
    file.dataset = Some(absolute(&a.manifest));
    write(&a.out, &file.to_json())?;
    println!(
        "{}: {} train, {} test ({} in-class)",
        a.out.display(),
        split.train.len(),
        split.test.len(),
        split.num_inliers()
    );
    Ok(())
}

fn resolve_run(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = load_run_config(&run.config)?;
    cfg.apply_seed_env()?;
    if let Some(e) = run.epochs {
        cfg.train.epochs = e;
    }
    if let Some(o) = &run.out {
        cfg.output_dir = o.clone();
    }
    cfg.dataset = absolute(&cfg.dataset);
    cfg.validate()?;
    Ok(cfg)
}

/// Loads the dataset and builds (or reloads) the split; aligns the architecture
/// with the manifest's image size and channel count.
fn build_split(cfg: &mut RunConfig, split_file: Option<&Path>) -> Result<(OneClassSplit, SplitFile)> {
    let pools = load_pools(&cfg.dataset)?;
    cfg.train.arch.image_size = pools.manifest.image_size;
    cfg.train.arch.channels = pools.manifest.channels;
    let file = match split_file {
        Some(p) => SplitFile::parse(&std::fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.into(),
            source: e,
        })?)?,
        None => {
            let split = make_one_class_split(&pools.train, &pools.test, cfg.target_class, cfg.protocol, cfg.train.seed)?;
            split.to_file(cfg.train.seed)
        }
    };
    let split = file.resolve(&[&pools.train, &pools.test])?;
    let mut file = file;
    file.dataset = Some(cfg.dataset.clone());
    Ok((split, file))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = resolve_run(&a.run)?;
    for f in &a.ablate {
        f.apply(&mut cfg.train);
    }
    let (split, file) = build_split(&mut cfg, a.split.as_deref())?;
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    let split_path = out.join("split.json");
    write(&split_path, &file.to_json())?;
    write(&out.join("run_manifest.json"), &RunManifest::new("train", &cfg, Some(split_path)).to_json())?;
    let outcome = match &a.resume {
        Some(ckpt) => trainer::resume::<f32>(ckpt, &split.train, cfg.train.epochs, &out)?,
        None => trainer::train::<f32>(&split, &cfg.train, &out)?,
    };
    match outcome.history.last() {
        Some(m) => println!("{}: epoch {} total {:.6}", outcome.checkpoint.display(), m.epoch, m.total),
        None => println!("{}: initial state (0 epochs)", outcome.checkpoint.display()),
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let text = std::fs::read_to_string(&a.split).map_err(|e| Error::Io {
        path: a.split.clone(),
        source: e,
    })?;
    let file = SplitFile::parse(&text)?;
    let dataset = a
        .dataset
        .clone()
        .or(file.dataset.clone())
        .ok_or_else(|| Error::Config("the split file names no dataset; pass --dataset".into()))?;
    let pools = load_pools(&dataset)?;
    let split = file.resolve(&[&pools.train, &pools.test])?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new(".")).join("eval"));
    let opts = EvalOptions {
        score_kind: a.score,
        threshold: a.threshold,
        plot_dir: (!a.no_plots).then(|| out.clone()),
    };
    let report = evaluate(&split, &ckpt, &opts)?;
    report.write(&out)?;
    print_report(&report, &out);
    Ok(())
}

fn print_report(r: &EvalReport, out: &Path) {
    println!(
        "AUC {:.4} (latent-centroid AUC {:.4}); threshold {:.6}: TP {} FP {} TN {} FN {}; written to {}",
        r.auc,
        r.latent_auc,
        r.threshold,
        r.confusion.tp,
        r.confusion.fp,
        r.confusion.tn,
        r.confusion.fn_,
        out.display()
    );
}

fn score(a: ScoreArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let arch = &ckpt.config.arch;
    let x = load_image(&a.image, arch.image_size, arch.channels)?;
    println!("{}", anomaly_score(&x, &ckpt, a.score)?);
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = resolve_run(&a.run)?;
    let (split, file) = build_split(&mut cfg, None)?;
    let out = cfg.output_dir.clone();
    let split_path = out.join("split.json");
    write(&split_path, &file.to_json())?;
    write(&out.join("run_manifest.json"), &RunManifest::new("ablate", &cfg, Some(split_path)).to_json())?;
    let grid = if cfg.ablate.is_empty() {
        default_ablation_grid()
    } else {
        cfg.ablate.clone()
    };
    let mut summary = String::from("variant,flags,auc,latent_auc,final_total\n");
    for variant in &grid {
        let mut tc = cfg.train.clone();
        for f in &variant.flags {
            f.apply(&mut tc);
        }
        tc.validate()?;
        let dir = out.join("variants").join(sanitize(&variant.name));
        log::info!("variant {}: {:?}", variant.name, variant.flags);
        let outcome = trainer::train::<f32>(&split, &tc, &dir)?;
        let ckpt = Checkpoint::load(&outcome.checkpoint)?;
        let opts = EvalOptions {
            score_kind: cfg.eval.score,
            threshold: cfg.eval.threshold,
            plot_dir: cfg.eval.plots.then(|| dir.join("eval")),
        };
        let report = evaluate(&split, &ckpt, &opts)?;
        report.write(&dir.join("eval"))?;
        let flags: Vec<&str> = variant.flags.iter().map(|f| f.name()).collect();
        let total = outcome.history.last().map_or(f64::NAN, |m| m.total);
        summary.push_str(&format!(
            "{},{},{},{},{}\n",
            variant.name,
            flags.join(" "),
            report.auc,
            report.latent_auc,
            total
        ));
        println!("{:<24} AUC {:.4}", variant.name, report.auc);
    }
    write(&out.join("ablation_summary.csv"), &summary)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
