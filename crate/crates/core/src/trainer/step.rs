use ndarray::{concatenate, s, Array2, Array3, Array4, Axis};

use super::{Ablation, TrainConfig};
use crate::error::Result;
use crate::losses::{
    global_mi_grad, global_mi_loss, laplacian_pyramid_grad, latent_grad, latent_loss, local_mi_grad, local_mi_loss,
    mse_grad, prior_grad, prior_loss, ReconLoss,
};
use crate::networks::{DecoderCache, EncoderCache, Networks};
use crate::nn::{Mode, Module, Param};
use crate::real::Real;

/// Which parts of the objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Every enabled term.
    Joint,
    /// Encoder and estimator heads only (used to derive contrastive initial codes).
    Warmup,
}

/// Loss terms of one step (or their epoch means).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Terms {
    pub lap: f64,
    pub lat: f64,
    pub global: f64,
    pub local: f64,
    pub prior: f64,
    pub total: f64,
}

impl Terms {
    pub fn is_finite(&self) -> bool {
        [self.lap, self.lat, self.global, self.local, self.prior, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn describe(&self) -> String {
        format!(
            "L_lap={} L_lat={} L_global={} L_local={} L_prior={} total={}",
            self.lap, self.lat, self.global, self.local, self.prior, self.total
        )
    }
}

/// Caches needed to refresh batch-norm running statistics after the update.
pub struct RunningCaches<F: Real> {
    decoder: Option<DecoderCache<F>>,
    encoder: EncoderCache<F>,
}

impl<F: Real> RunningCaches<F> {
    pub fn apply(&self, nets: &mut Networks<F>) {
        if let Some(c) = &self.decoder {
            nets.decoder.update_running(c);
        }
        nets.encoder.update_running(&self.encoder);
    }
}

fn scaled<F: Real, D: ndarray::Dimension>(a: ndarray::Array<F, D>, w: f64) -> ndarray::Array<F, D> {
    a * F::lit(w)
}

/// Evaluates the objective on one batch and accumulates parameter gradients
/// (after zeroing them). Returns the terms, `dL/dcodes` and the batch-norm caches.
///
/// Negatives are paired with the latent of their positive: the critics see
/// `(A(x), z(x))` as joint samples and `(A(x⁻), z(x))` as marginal ones.
/// The prior term covers positives only.
pub fn objective<F: Real>(
    nets: &mut Networks<F>,
    codes: &Array2<F>,
    pos: &Array4<F>,
    neg: &Array4<F>,
    cfg: &TrainConfig,
    phase: Phase,
) -> Result<(Terms, Array2<F>, RunningCaches<F>)> {
    nets.zero_grad();
    let ab: &Ablation = &cfg.ablation;
    let w = cfg.weights;
    let n = pos.dim().0;
    let joint = phase == Phase::Joint;
    let mut t = Terms::default();
    let mut d_codes = Array2::<F>::zeros(codes.raw_dim());

    let mut dec_cache = None;
    if joint && ab.recon_loss != ReconLoss::None {
        let (xhat, cache) = nets.decoder.forward(codes, Mode::Train)?;
        let (v, g) = match ab.recon_loss {
            ReconLoss::Mse => mse_grad(&xhat, pos)?,
            _ => laplacian_pyramid_grad(&xhat, pos, cfg.pyramid)?,
        };
        t.lap = v.f64();
        d_codes += &nets.decoder.backward(&cache, &scaled(g, w.lambda1));
        dec_cache = Some(cache);
    }

    // With critics enabled, positives and negatives share one encoder pass so that
    // batch normalisation sees both populations.
    let critics = ab.use_global_mi || ab.use_local_mi;
    let input = if critics {
        concatenate(Axis(0), &[pos.view(), neg.view()]).expect("same image shape")
    } else {
        pos.clone()
    };
    let (fp, enc_cache) = nets.encoder.forward(&input, Mode::Train)?;
    let m = input.dim().0;
    let z = fp.mu.slice(s![..n, ..]).to_owned();
    let mut d_mu = Array2::<F>::zeros(fp.mu.raw_dim());
    let mut d_lv = Array2::<F>::zeros(fp.mu.raw_dim());
    let mut d_a = Array4::<F>::zeros(fp.a.raw_dim());

    if joint {
        t.lat = latent_loss(codes, &z)?.f64();
        let g = scaled(latent_grad(codes, &z), w.lambda2);
        d_codes += &g;
        d_mu.slice_mut(s![..n, ..]).scaled_add(F::lit(-1.0), &g);
    }

    if critics {
        let zz = concatenate(Axis(0), &[z.view(), z.view()]).expect("same latent shape");
        let mut route = |da: Array4<F>, dz: Array2<F>| {
            d_a += &da;
            let mut top = d_mu.slice_mut(s![..n, ..]);
            top += &dz.slice(s![..n, ..]);
            top += &dz.slice(s![n.., ..]);
        };
        if ab.use_global_mi {
            let (scores, gc) = nets.global.forward(&fp.a, &zz, ab.drop_z)?;
            let (sp, sn) = (scores.slice(s![..n]).to_owned(), scores.slice(s![n..]).to_owned());
            t.global = global_mi_loss(&sp, &sn, w.beta).f64();
            let (gp, gn) = global_mi_grad(&sp, &sn, w.beta);
            let d = scaled(concatenate(Axis(0), &[gp.view(), gn.view()]).expect("1-d"), w.lambda3);
            let (da, dz) = nets.global.backward(&gc, &d);
            route(da, dz);
        }
        if ab.use_local_mi {
            let (maps, lc) = nets.local.forward(&fp.a, &zz, ab.drop_z_a)?;
            let mp: Array3<F> = maps.slice(s![..n, .., ..]).to_owned();
            let mn: Array3<F> = maps.slice(s![n.., .., ..]).to_owned();
            t.local = local_mi_loss(&mp, &mn, w.beta)?.f64();
            let (gp, gn) = local_mi_grad(&mp, &mn, w.beta);
            let d = scaled(concatenate(Axis(0), &[gp.view(), gn.view()]).expect("3-d"), w.lambda3);
            let (da, dz) = nets.local.backward(&lc, &d);
            route(da, dz);
        }
    }

    if ab.use_prior_mi {
        let mu = fp.mu.slice(s![..n, ..]).to_owned();
        let enc_lv = fp.logvar.slice(s![..n, ..]).to_owned();
        let (logvar, head) = if nets.arch.use_prior_head {
            let (delta, pc) = nets.prior.forward(&mu);
            (&enc_lv + &delta, Some(pc))
        } else {
            (enc_lv, None)
        };
        t.prior = prior_loss(&mu, &logvar, w.gamma)?.f64();
        let (gm, gl) = prior_grad(&mu, &logvar, w.gamma);
        let (gm, gl) = (scaled(gm, w.lambda3), scaled(gl, w.lambda3));
        let mut top = d_mu.slice_mut(s![..n, ..]);
        top += &gm;
        if let Some(pc) = head {
            top += &nets.prior.backward(&pc, &gl);
        }
        d_lv.slice_mut(s![..n, ..]).assign(&gl);
    }

    nets.encoder.backward(&enc_cache, Some(&d_a), Some(&d_mu), Some(&d_lv));
    debug_assert_eq!(m, d_mu.nrows());

    t.total = w.lambda1 * t.lap + w.lambda2 * t.lat + w.lambda3 * (t.global + t.local + t.prior);
    Ok((
        t,
        d_codes,
        RunningCaches {
            decoder: dec_cache,
            encoder: enc_cache,
        },
    ))
}

/// Heavy-ball SGD with coupled weight decay: `v ← μv + g + λp`, `p ← p − ηv`.
pub fn sgd_update<F: Real, D: ndarray::Dimension>(
    value: &mut ndarray::Array<F, D>,
    grad: &ndarray::Array<F, D>,
    velocity: &mut ndarray::Array<F, D>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let (lr, mu, wd) = (F::lit(lr), F::lit(momentum), F::lit(weight_decay));
    ndarray::Zip::from(value).and(grad).and(velocity).for_each(|p, &g, v| {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    });
}

pub fn sgd_step<F: Real>(nets: &mut Networks<F>, cfg: &TrainConfig) {
    nets.visit_params("", &mut |_, p: &mut Param<F>| {
        sgd_update(&mut p.value, &p.grad, &mut p.velocity, cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    });
}

/// Index permutation for one epoch, split into batches; a trailing batch of
/// one sample is dropped because batch normalisation needs two.
pub fn batches(perm: &[usize], batch_size: usize) -> Vec<&[usize]> {
    perm.chunks(batch_size).filter(|b| b.len() >= 2).collect()
}

pub(crate) fn mean_terms(steps: &[Terms]) -> Terms {
    let n = steps.len().max(1) as f64;
    let sum = |f: fn(&Terms) -> f64| steps.iter().map(f).sum::<f64>() / n;
    Terms {
        lap: sum(|t| t.lap),
        lat: sum(|t| t.lat),
        global: sum(|t| t.global),
        local: sum(|t| t.local),
        prior: sum(|t| t.prior),
        total: sum(|t| t.total),
    }
}
