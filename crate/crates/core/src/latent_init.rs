//! PCA initialisation of the per-sample latent codes.
//!
//! Codes are whitened projections onto the top principal directions of the
//! training class, so over the training set each coordinate has zero mean and
//! unit variance, matching the standard-normal prior the encoder is pulled to.

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};

use crate::dataset::ImageSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    /// Mean image, flattened `C·H·W`.
    pub mean: Array1<f64>,
    /// `d × (C·H·W)`, orthonormal rows.
    pub components: Array2<f64>,
    /// Standard deviation of the training projections along each component.
    pub component_scales: Array1<f64>,
}

pub fn flatten(samples: &[ImageSample]) -> Array2<f64> {
    let p = samples.first().map_or(0, |s| s.pixels.len());
    let mut x = Array2::zeros((samples.len(), p));
    for (mut row, s) in x.axis_iter_mut(Axis(0)).zip(samples) {
        for (r, v) in row.iter_mut().zip(s.pixels.iter()) {
            *r = *v as f64;
        }
    }
    x
}

/// Fits a `d`-component PCA to the rows of `data`.
pub fn pca_fit_matrix(data: &Array2<f64>, d: usize) -> Result<PcaModel> {
    let (n, p) = data.dim();
    if d == 0 || d >= n.min(p) {
        return Err(Error::Config(format!(
            "latent dimension {d} must be positive and below min(samples {n}, pixels {p})"
        )));
    }
    let mean = data.mean_axis(Axis(0)).expect("n > 0");
    let centered = data - &mean.view().insert_axis(Axis(0));

    // Eigen-decompose the smaller Gram matrix.
    let primal = p <= n;
    let gram = if primal {
        centered.t().dot(&centered)
    } else {
        centered.dot(&centered.t())
    };
    let m = gram.nrows();
    let eig = SymmetricEigen::new(DMatrix::from_fn(m, m, |i, j| gram[[i, j]]));
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = (top * 1e-10).max(1e-12);
    let mut components = Array2::<f64>::zeros((d, p));
    let mut scales = Array1::<f64>::ones(d);
    let mut rank = 0;
    for (k, &idx) in order.iter().take(d).enumerate() {
        let lambda = eig.eigenvalues[idx];
        if lambda <= tol {
            break;
        }
        let v = eig.eigenvectors.column(idx);
        let mut row = components.row_mut(k);
        if primal {
            for j in 0..p {
                row[j] = v[j];
            }
        } else {
            // right singular vector from the left one: v = Xᵀu / σ
            let sigma = lambda.sqrt();
            let u = Array1::from_iter(v.iter().copied());
            row.assign(&(centered.t().dot(&u) / sigma));
        }
        scales[k] = (lambda / (n as f64 - 1.0)).sqrt();
        rank += 1;
    }
    if rank < d {
        warn!("data has rank {rank} < {d}; padding with orthonormal completions of unit scale");
        complete_orthonormal(&mut components, rank);
    }
    for mut row in components.axis_iter_mut(Axis(0)) {
        let pivot = row
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, v)| if v.abs() > best.1.abs() { (i, v) } else { best });
        if pivot.1 < 0.0 {
            row.mapv_inplace(|v| -v);
        }
    }
    Ok(PcaModel {
        mean,
        components,
        component_scales: scales,
    })
}

/// Fills rows `from..` with unit vectors orthogonal to all earlier rows (Gram-Schmidt on the standard basis).
fn complete_orthonormal(rows: &mut Array2<f64>, from: usize) {
    let (d, p) = rows.dim();
    let mut basis = 0;
    for k in from..d {
        loop {
            let mut v = Array1::<f64>::zeros(p);
            v[basis % p] = 1.0;
            basis += 1;
            for _ in 0..2 {
                for j in 0..k {
                    let r = rows.row(j);
                    let dot = r.dot(&v);
                    v.scaled_add(-dot, &r);
                }
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-6 {
                rows.row_mut(k).assign(&(v / norm));
                break;
            }
        }
    }
}

pub fn pca_fit(train: &[ImageSample], d: usize) -> Result<PcaModel> {
    if let Some(s) = train.iter().find(|s| s.pixels.dim() != train[0].pixels.dim()) {
        return Err(Error::shape(format!("{:?}", train[0].pixels.dim()), format!("{:?} for {}", s.pixels.dim(), s.id)));
    }
    pca_fit_matrix(&flatten(train), d)
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.components.nrows()
    }

    /// Whitened projection of flattened rows.
    pub fn project_matrix(&self, rows: &Array2<f64>) -> Result<Array2<f64>> {
        if rows.ncols() != self.mean.len() {
            return Err(Error::shape(format!("{} pixels", self.mean.len()), rows.ncols()));
        }
        let centered = rows - &self.mean.view().insert_axis(Axis(0));
        Ok(centered.dot(&self.components.t()) / self.component_scales.view().insert_axis(Axis(0)))
    }

    pub fn project(&self, x: &ImageSample) -> Result<Array1<f64>> {
        let row = flatten(std::slice::from_ref(x));
        Ok(self.project_matrix(&row)?.row(0).to_owned())
    }

    /// Maps whitened coordinates back to flattened pixels.
    pub fn unproject(&self, codes: &Array2<f64>) -> Array2<f64> {
        let scaled = codes * &self.component_scales.view().insert_axis(Axis(0));
        scaled.dot(&self.components) + self.mean.view().insert_axis(Axis(0))
    }
}

/// One whitened PCA code per training sample.
pub fn init_codes(model: &PcaModel, train: &[ImageSample]) -> Result<Array2<f64>> {
    model.project_matrix(&flatten(train))
}
