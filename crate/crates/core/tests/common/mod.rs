#![allow(dead_code)]

use ndarray::{Array2, Array3, Array4};
use noveldec::dataset::{stack, ImageSample};
use noveldec::networks::{ArchConfig, Networks};
use noveldec::nn::Module;
use noveldec::trainer::{objective, Phase, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toy_arch(latent_dim: usize) -> ArchConfig {
    ArchConfig {
        latent_dim,
        image_size: 8,
        channels: 1,
        base_width: 2,
        tap_block: 2,
        head_width: 8,
        prior_hidden: (8, 6),
        use_prior_head: true,
    }
}

/// Smooth blob images on an 8×8 grid, one per index; `seed` moves the blobs.
pub fn toy_samples(n: usize, seed: u64) -> Vec<ImageSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (cy, cx): (f32, f32) = (rng.gen_range(2.0..6.0), rng.gen_range(2.0..6.0));
            let r: f32 = rng.gen_range(1.2..2.5);
            let px = Array3::from_shape_fn((1, 8, 8), |(_, y, x)| {
                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                2.0 * (-d2 / (2.0 * r * r)).exp() - 1.0
            });
            ImageSample::new(format!("toy-{i:03}"), 0, px).unwrap()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct GradReport {
    /// Worst relative error per parameter group (`decoder`, `encoder`, heads, `codes`).
    pub groups: Vec<(String, f64)>,
    pub checked: usize,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.1).fold(0.0, f64::max)
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Compares the analytic gradient of the total loss with central differences on
/// up to `per_tensor` entries of every parameter tensor and of the latent codes.
pub fn check_total_loss_gradients(seed: u64, per_tensor: usize) -> GradReport {
    let cfg = TrainConfig {
        arch: toy_arch(8),
        seed,
        ..TrainConfig::default()
    };
    let samples = toy_samples(4, seed);
    let pos: Array4<f64> = stack(&samples);
    let neg: Array4<f64> = pos.mapv(|v| -v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut nets = Networks::<f64>::new(&cfg.arch, seed).unwrap();
    // move off the zero-initialised output layers so every path carries gradient
    nets.visit_params("", &mut |_, p| p.value.mapv_inplace(|v| v + rng.gen_range(-0.05..0.05)));
    let codes = Array2::from_shape_fn((4, 8), |_| rng.gen_range(-1.0..1.0));

    let total = |nets: &mut Networks<f64>, codes: &Array2<f64>| {
        objective(nets, codes, &pos, &neg, &cfg, Phase::Joint).unwrap().0.total
    };
    let (_, d_codes, _) = objective(&mut nets, &codes, &pos, &neg, &cfg, Phase::Joint).unwrap();
    let mut analytic: Vec<(String, ndarray::ArrayD<f64>)> = Vec::new();
    nets.visit_params("", &mut |name, p| analytic.push((name, p.grad.clone())));

    let h = 1e-6;
    let mut worst: std::collections::BTreeMap<String, f64> = Default::default();
    let mut checked = 0;
    for (t, (name, grad)) in analytic.iter().enumerate() {
        let group = name.split('.').next().unwrap().to_string();
        let len = grad.len();
        let picks: Vec<usize> = (0..per_tensor.min(len)).map(|_| rng.gen_range(0..len)).collect();
        for k in picks {
            let mut fd = [0.0; 2];
            for (slot, sign) in [(0, 1.0), (1, -1.0)] {
                let mut idx = 0;
                nets.visit_params("", &mut |_, p| {
                    if idx == t {
                        p.value.as_slice_mut().unwrap()[k] += sign * h;
                    }
                    idx += 1;
                });
                fd[slot] = total(&mut nets, &codes);
                let mut idx = 0;
                nets.visit_params("", &mut |_, p| {
                    if idx == t {
                        p.value.as_slice_mut().unwrap()[k] -= sign * h;
                    }
                    idx += 1;
                });
            }
            let numeric = (fd[0] - fd[1]) / (2.0 * h);
            let e = rel_err(grad.as_slice().unwrap()[k], numeric);
            let w = worst.entry(group.clone()).or_insert(0.0);
            *w = w.max(e);
            checked += 1;
        }
    }
    let mut code_worst: f64 = 0.0;
    for i in 0..4 {
        for j in 0..8 {
            let mut plus = codes.clone();
            plus[[i, j]] += h;
            let mut minus = codes.clone();
            minus[[i, j]] -= h;
            let numeric = (total(&mut nets, &plus) - total(&mut nets, &minus)) / (2.0 * h);
            code_worst = code_worst.max(rel_err(d_codes[[i, j]], numeric));
            checked += 1;
        }
    }
    worst.insert("codes".into(), code_worst);
    GradReport {
        groups: worst.into_iter().collect(),
        checked,
    }
}
