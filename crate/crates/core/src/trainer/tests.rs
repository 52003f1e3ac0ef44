use super::*;
use crate::nn::Module;
use ndarray::Array3;

fn toy_arch() -> ArchConfig {
    ArchConfig {
        latent_dim: 4,
        image_size: 8,
        channels: 1,
        base_width: 2,
        tap_block: 2,
        head_width: 8,
        prior_hidden: (8, 6),
        use_prior_head: true,
    }
}

fn toy_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        arch: toy_arch(),
        seed: 3,
        ..TrainConfig::default()
    }
}

fn toy_samples(n: usize) -> Vec<ImageSample> {
    (0..n)
        .map(|i| {
            let px = Array3::from_shape_fn((1, 8, 8), |(_, r, c)| {
                ((r as f32 * 0.6 + c as f32 * 0.3 + i as f32).sin() * 0.8).clamp(-1.0, 1.0)
            });
            ImageSample::new(format!("toy-{i:03}"), 0, px).unwrap()
        })
        .collect()
}

fn params(nets: &mut Networks<f64>) -> Vec<(String, ndarray::ArrayD<f64>)> {
    let mut out = Vec::new();
    nets.visit_params("", &mut |n, p| out.push((n, p.value.clone())));
    out
}

#[test]
fn zero_objective_only_decays_weights() {
    let mut cfg = toy_config();
    cfg.weights = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
        beta: 0.0,
        gamma: 0.0,
    };
    let train = toy_samples(8);
    let mut state = TrainState::<f64>::init(&cfg, &train).unwrap();
    let before = params(&mut state.nets);
    let codes = state.codes.clone();
    state.run_epoch(&train).unwrap();
    let after = params(&mut state.nets);
    // two steps of pure decay with momentum: p₁ = p(1 − ηλ), p₂ = p₁ − η(μ·ηλp + λp₁)
    let (lr, mu, wd) = (cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let p1 = 1.0 - lr * wd;
    let factor = p1 - lr * (mu * wd + wd * p1);
    for ((name, b), (_, a)) in before.iter().zip(&after) {
        for (x, y) in b.iter().zip(a.iter()) {
            assert!((x * factor - y).abs() < 1e-12, "{name}");
        }
    }
    assert_eq!(state.codes, codes);
}

#[test]
fn disabled_terms_log_zero_and_leave_heads_without_gradient() {
    let mut cfg = toy_config();
    cfg.ablation = cfg.ablation.no_mi();
    let train = toy_samples(6);
    let mut state = TrainState::<f64>::init(&cfg, &train).unwrap();
    let pos = stack::<f64>(&train);
    let (t, _, _) = objective(&mut state.nets, &state.codes.clone(), &pos, &pos, &cfg, Phase::Joint).unwrap();
    assert_eq!((t.global, t.local, t.prior), (0.0, 0.0, 0.0));
    let mut max = 0.0f64;
    state.nets.global.visit_params("", &mut |_, p| max = max.max(p.grad.iter().fold(0.0, |m, g| m.max(g.abs()))));
    state.nets.local.visit_params("", &mut |_, p| max = max.max(p.grad.iter().fold(0.0, |m, g| m.max(g.abs()))));
    state.nets.prior.visit_params("", &mut |_, p| max = max.max(p.grad.iter().fold(0.0, |m, g| m.max(g.abs()))));
    assert_eq!(max, 0.0);
    assert!(t.lap > 0.0 && t.lat > 0.0);
}

#[test]
fn batching_drops_singleton_tail() {
    let perm: Vec<usize> = (0..9).collect();
    assert_eq!(batches(&perm, 4).len(), 2);
    assert_eq!(batches(&perm, 3).len(), 3);
    assert_eq!(batches(&perm, 5).iter().map(|b| b.len()).collect::<Vec<_>>(), vec![5, 4]);
}

#[test]
fn identical_seeds_give_identical_histories() {
    let cfg = toy_config();
    let train = toy_samples(10);
    let run = || {
        let mut s = TrainState::<f32>::init(&cfg, &train).unwrap();
        (0..2).map(|_| s.run_epoch(&train).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
    let mut other = cfg.clone();
    other.seed = 4;
    let mut s = TrainState::<f32>::init(&other, &train).unwrap();
    assert_ne!(s.run_epoch(&train).unwrap(), run()[0]);
}

#[test]
fn checkpoint_round_trip_restores_state() {
    let cfg = toy_config();
    let train = toy_samples(6);
    let mut state = TrainState::<f64>::init(&cfg, &train).unwrap();
    state.run_epoch(&train).unwrap();
    let ckpt = state.to_checkpoint();
    let decoded = Checkpoint::decode(&ckpt.encode()).unwrap();
    assert_eq!(decoded, ckpt);
    let mut restored = TrainState::<f64>::from_checkpoint(&decoded).unwrap();
    assert_eq!(restored.to_checkpoint(), ckpt);
    assert_eq!(restored.pca, state.pca);

    let a = state.run_epoch(&train).unwrap();
    let b = restored.run_epoch(&train).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_decoder_rejects_damage() {
    let cfg = toy_config();
    let train = toy_samples(6);
    let bytes = TrainState::<f32>::init(&cfg, &train).unwrap().to_checkpoint().encode();
    assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::decode(&extra).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(Checkpoint::decode(&magic).is_err());
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(Checkpoint::decode(&version).is_err());
    assert!(Checkpoint::decode(&[]).is_err());
}

#[test]
fn normal_and_contrastive_inits() {
    let train = toy_samples(8);
    let mut cfg = toy_config();
    cfg.ablation.init = Init::Normal;
    let s = TrainState::<f64>::init(&cfg, &train).unwrap();
    assert!(s.pca.is_none());
    assert!(s.codes.iter().any(|v| *v != 0.0));

    cfg.ablation.init = Init::Contrastive;
    cfg.warmup_epochs = 1;
    let s = TrainState::<f64>::init(&cfg, &train).unwrap();
    let direct = encode_means(&s.nets, &train).unwrap();
    assert_eq!(s.codes, direct);
}

#[test]
fn frozen_codes_stay_put() {
    let mut cfg = toy_config();
    cfg.ablation.freeze_codes = true;
    let train = toy_samples(8);
    let mut s = TrainState::<f64>::init(&cfg, &train).unwrap();
    let before = s.codes.clone();
    s.run_epoch(&train).unwrap();
    assert_eq!(s.codes, before);
    cfg.ablation.freeze_codes = false;
    let mut s = TrainState::<f64>::init(&cfg, &train).unwrap();
    s.run_epoch(&train).unwrap();
    assert_ne!(s.codes, before);
}

#[test]
fn mismatched_samples_are_rejected() {
    let cfg = toy_config();
    let train = toy_samples(6);
    let s = TrainState::<f64>::init(&cfg, &train).unwrap();
    assert!(s.check_samples(&train[1..]).is_err());
    let bad = TrainConfig {
        batch_size: 1,
        ..cfg.clone()
    };
    assert!(matches!(TrainState::<f64>::init(&bad, &train), Err(Error::Config(_))));
    assert!(TrainState::<f64>::init(&cfg, &train[..1]).is_err());
}

#[test]
fn metrics_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    write_metrics_csv(&path, &[]).unwrap();
    assert_eq!(
        std::fs::read_to_string(&path).unwrap(),
        "epoch,L_lap,L_lat,L_global,L_local,L_prior,total\n"
    );
    assert!(read_metrics_csv(&path).unwrap().is_empty());
    let rows = vec![EpochMetrics {
        epoch: 1,
        lap: 0.5,
        lat: 0.25,
        global: 0.1,
        local: 0.2,
        prior: 0.3,
        total: 1.35,
    }];
    write_metrics_csv(&path, &rows).unwrap();
    assert_eq!(read_metrics_csv(&path).unwrap(), rows);
}
