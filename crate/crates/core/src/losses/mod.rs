//! Training objectives and their gradients.
//!
//! Every batched loss is a mean over the batch; gradient helpers return
//! `dL/d(input)` for that mean.

pub mod pyramid;

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{sigmoid, softplus, Real};
use pyramid::{decompose, decompose_adjoint, Plane};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidSpec {
    pub levels: usize,
}

impl Default for PyramidSpec {
    fn default() -> Self {
        Self { levels: 3 }
    }
}

/// `λ₁..λ₃` weight reconstruction, latent consistency and MI terms; `β` scales the
/// global/local critics and `γ` the prior term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            beta: 0.5,
            gamma: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.beta, self.gamma];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ReconLoss {
    Laplacian,
    Mse,
    None,
}

fn same_shape<F: Real>(a: &Array4<F>, b: &Array4<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?}", b.shape()), format!("{:?}", a.shape())));
    }
    Ok(())
}

fn plane<F: Real>(x: &Array4<F>, b: usize, c: usize) -> Plane<F> {
    let (_, _, h, w) = x.dim();
    let mut p = Plane::zeros(h, w);
    for (dst, v) in p.data.iter_mut().zip(x.index_axis(Axis(0), b).index_axis(Axis(0), c).iter()) {
        *dst = *v;
    }
    p
}

/// Per-sample `Σ_j 4^j ‖Lap^j(x̂) − Lap^j(x)‖₁ / (C·H·W)`.
pub fn laplacian_per_sample<F: Real>(xhat: &Array4<F>, x: &Array4<F>, spec: PyramidSpec) -> Result<Vec<F>> {
    same_shape(xhat, x)?;
    let (n, c, h, w) = x.dim();
    let diff = xhat - x;
    let norm = F::lit((c * h * w) as f64);
    Ok((0..n)
        .map(|b| {
            let mut total = F::zero();
            for ch in 0..c {
                for (j, band) in decompose(&plane(&diff, b, ch), spec.levels).iter().enumerate() {
                    let wj = F::lit(4f64.powi(j as i32));
                    total += wj * band.data.iter().map(|v| v.abs()).sum::<F>();
                }
            }
            total / norm
        })
        .collect())
}

pub fn laplacian_pyramid_loss<F: Real>(xhat: &Array4<F>, x: &Array4<F>, spec: PyramidSpec) -> Result<F> {
    let per = laplacian_per_sample(xhat, x, spec)?;
    Ok(mean(&per))
}

/// Batch-mean pyramid loss and its gradient w.r.t. `xhat`.
pub fn laplacian_pyramid_grad<F: Real>(xhat: &Array4<F>, x: &Array4<F>, spec: PyramidSpec) -> Result<(F, Array4<F>)> {
    same_shape(xhat, x)?;
    let (n, c, h, w) = x.dim();
    let diff = xhat - x;
    let norm = F::lit((n * c * h * w) as f64);
    let mut grad = Array4::<F>::zeros(x.raw_dim());
    let mut total = F::zero();
    for b in 0..n {
        for ch in 0..c {
            let bands = decompose(&plane(&diff, b, ch), spec.levels);
            let mut gbands = Vec::with_capacity(bands.len());
            for (j, band) in bands.iter().enumerate() {
                let wj = F::lit(4f64.powi(j as i32));
                total += wj * band.data.iter().map(|v| v.abs()).sum::<F>();
                let g: Vec<F> = band.data.iter().map(|v| wj * sign(*v) / norm).collect();
                gbands.push(Plane::new(band.h, band.w, g));
            }
            let g = decompose_adjoint(&gbands);
            for (dst, v) in grad
                .index_axis_mut(Axis(0), b)
                .index_axis_mut(Axis(0), ch)
                .iter_mut()
                .zip(g.data)
            {
                *dst = v;
            }
        }
    }
    Ok((total / norm, grad))
}

fn sign<F: Real>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

fn mean<F: Real>(v: &[F]) -> F {
    if v.is_empty() {
        F::zero()
    } else {
        v.iter().copied().sum::<F>() / F::lit(v.len() as f64)
    }
}

/// Per-sample mean squared pixel error.
pub fn mse_per_sample<F: Real>(xhat: &Array4<F>, x: &Array4<F>) -> Result<Vec<F>> {
    same_shape(xhat, x)?;
    let n = x.dim().0;
    let per = x.len() / n.max(1);
    Ok((0..n)
        .map(|b| {
            let d = &xhat.index_axis(Axis(0), b) - &x.index_axis(Axis(0), b);
            d.mapv(|v| v * v).sum() / F::lit(per as f64)
        })
        .collect())
}

pub fn mse_grad<F: Real>(xhat: &Array4<F>, x: &Array4<F>) -> Result<(F, Array4<F>)> {
    same_shape(xhat, x)?;
    let diff = xhat - x;
    let total = F::lit(x.len() as f64);
    let value = diff.mapv(|v| v * v).sum() / total;
    Ok((value, diff * (F::lit(2.0) / total)))
}

/// Batch mean of `‖z′ − z‖²`.
pub fn latent_loss<F: Real>(z_prime: &Array2<F>, z: &Array2<F>) -> Result<F> {
    if z_prime.shape() != z.shape() {
        return Err(Error::shape(format!("{:?}", z.shape()), format!("{:?}", z_prime.shape())));
    }
    let n = F::lit(z.nrows().max(1) as f64);
    Ok((z_prime - z).mapv(|v| v * v).sum() / n)
}

/// Gradient of [`latent_loss`] w.r.t. `z′`; the gradient w.r.t. `z` is its negation.
pub fn latent_grad<F: Real>(z_prime: &Array2<F>, z: &Array2<F>) -> Array2<F> {
    let n = F::lit(z.nrows().max(1) as f64);
    (z_prime - z) * (F::lit(2.0) / n)
}

/// `−β (mean log σ(pos) + mean log(1 − σ(neg)))`, in softplus form.
pub fn global_mi_loss<F: Real>(pos: &Array1<F>, neg: &Array1<F>, beta: f64) -> F {
    let b = F::lit(beta);
    let p = pos.iter().map(|s| softplus(-*s)).sum::<F>() / F::lit(pos.len().max(1) as f64);
    let q = neg.iter().map(|s| softplus(*s)).sum::<F>() / F::lit(neg.len().max(1) as f64);
    b * (p + q)
}

pub fn global_mi_grad<F: Real>(pos: &Array1<F>, neg: &Array1<F>, beta: f64) -> (Array1<F>, Array1<F>) {
    let b = F::lit(beta);
    let np = F::lit(pos.len().max(1) as f64);
    let nn = F::lit(neg.len().max(1) as f64);
    (pos.mapv(|s| -b * sigmoid(-s) / np), neg.mapv(|s| b * sigmoid(s) / nn))
}

/// `−β/(HW) Σ_ij (mean_b log σ(pos[b,i,j]) + mean_b log(1 − σ(neg[b,i,j])))`.
pub fn local_mi_loss<F: Real>(pos: &Array3<F>, neg: &Array3<F>, beta: f64) -> Result<F> {
    if (pos.dim().1, pos.dim().2) != (neg.dim().1, neg.dim().2) {
        return Err(Error::shape(format!("{:?}", pos.shape()), format!("{:?}", neg.shape())));
    }
    // the spatial average cancels the 1/(HW) factor, leaving a flat mean
    let p = Array1::from_iter(pos.iter().copied());
    let q = Array1::from_iter(neg.iter().copied());
    Ok(global_mi_loss(&p, &q, beta))
}

pub fn local_mi_grad<F: Real>(pos: &Array3<F>, neg: &Array3<F>, beta: f64) -> (Array3<F>, Array3<F>) {
    let p = Array1::from_iter(pos.iter().copied());
    let q = Array1::from_iter(neg.iter().copied());
    let (gp, gq) = global_mi_grad(&p, &q, beta);
    (
        gp.into_shape_with_order(pos.raw_dim()).expect("reshape"),
        gq.into_shape_with_order(neg.raw_dim()).expect("reshape"),
    )
}

/// `γ · mean_b KL(N(μ, diag e^{logvar}) ‖ N(0, I))`.
pub fn prior_loss<F: Real>(mu: &Array2<F>, logvar: &Array2<F>, gamma: f64) -> Result<F> {
    if mu.shape() != logvar.shape() {
        return Err(Error::shape(format!("{:?}", mu.shape()), format!("{:?}", logvar.shape())));
    }
    let half = F::lit(0.5);
    let kl: F = mu
        .iter()
        .zip(logvar.iter())
        .map(|(&m, &lv)| half * (m * m + lv.exp() - F::one() - lv))
        .sum();
    Ok(F::lit(gamma) * kl / F::lit(mu.nrows().max(1) as f64))
}

/// Gradients of [`prior_loss`] w.r.t. `(μ, logvar)`.
pub fn prior_grad<F: Real>(mu: &Array2<F>, logvar: &Array2<F>, gamma: f64) -> (Array2<F>, Array2<F>) {
    let s = F::lit(gamma) / F::lit(mu.nrows().max(1) as f64);
    let half = F::lit(0.5);
    (mu * s, logvar.mapv(|lv| s * half * (lv.exp() - F::one())))
}

pub fn mie_loss<F: Real>(global: F, local: F, prior: F) -> F {
    global + local + prior
}

pub fn total_loss<F: Real>(lap: F, lat: F, mie: F, w: &LossWeights) -> F {
    F::lit(w.lambda1) * lap + F::lit(w.lambda2) * lat + F::lit(w.lambda3) * mie
}
