use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, Ix1};

use super::{join, Mode, Module, Param};
use crate::real::Real;

/// Per-channel batch normalisation over `(N, C, L)`; `L` is the flattened spatial extent.
#[derive(Debug, Clone)]
pub struct BatchNorm<F: Real> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: ArrayD<F>,
    pub running_var: ArrayD<F>,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BnCache<F: Real> {
    xhat: Array3<F>,
    inv_std: Array1<F>,
    mean: Array1<F>,
    var_unbiased: Array1<F>,
    mode: Mode,
}

impl<F: Real> BatchNorm<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(ArrayD::from_elem(vec![channels], F::one())),
            beta: Param::zeros(&[channels]),
            running_mean: ArrayD::zeros(vec![channels]),
            running_var: ArrayD::from_elem(vec![channels], F::one()),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn vec1<'a>(a: &'a ArrayD<F>) -> ndarray::ArrayView1<'a, F> {
        a.view().into_dimensionality::<Ix1>().expect("1-d")
    }

    pub fn forward3(&self, x: &Array3<F>, mode: Mode) -> (Array3<F>, BnCache<F>) {
        let (n, c, l) = x.dim();
        let m = (n * l) as f64;
        let (mean, var_biased, var_unbiased) = match mode {
            Mode::Train => {
                let mean = x.sum_axis(Axis(0)).sum_axis(Axis(1)) / F::lit(m);
                let centered = x - &mean.view().insert_axis(Axis(0)).insert_axis(Axis(2));
                let ss = centered.mapv(|v| v * v).sum_axis(Axis(0)).sum_axis(Axis(1));
                let vb = &ss / F::lit(m);
                let vu = &ss / F::lit((m - 1.0).max(1.0));
                (mean, vb, vu)
            }
            Mode::Eval => {
                let rv = Self::vec1(&self.running_var).to_owned();
                (Self::vec1(&self.running_mean).to_owned(), rv.clone(), rv)
            }
        };
        let inv_std = var_biased.mapv(|v| F::one() / (v + F::lit(self.eps)).sqrt());
        let mut xhat = x.clone();
        for ch in 0..c {
            let (mu, is) = (mean[ch], inv_std[ch]);
            xhat.index_axis_mut(Axis(1), ch).mapv_inplace(|v| (v - mu) * is);
        }
        let g = Self::vec1(&self.gamma.value);
        let b = Self::vec1(&self.beta.value);
        let mut y = xhat.clone();
        for ch in 0..c {
            let (gc, bc) = (g[ch], b[ch]);
            y.index_axis_mut(Axis(1), ch).mapv_inplace(|v| v * gc + bc);
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                mean,
                var_unbiased,
                mode,
            },
        )
    }

    pub fn backward3(&mut self, cache: &BnCache<F>, dy: &Array3<F>) -> Array3<F> {
        let (n, c, l) = dy.dim();
        let m = F::lit((n * l) as f64);
        let dy_sum = dy.sum_axis(Axis(0)).sum_axis(Axis(1));
        let dyx_sum = (dy * &cache.xhat).sum_axis(Axis(0)).sum_axis(Axis(1));
        self.gamma.grad += &dyx_sum.clone().into_dyn();
        self.beta.grad += &dy_sum.clone().into_dyn();
        let g = Self::vec1(&self.gamma.value).to_owned();
        let mut dx = dy.clone();
        for ch in 0..c {
            let scale = g[ch] * cache.inv_std[ch];
            let mut dxc = dx.index_axis_mut(Axis(1), ch);
            match cache.mode {
                Mode::Train => {
                    let (s1, s2) = (dy_sum[ch], dyx_sum[ch]);
                    let xh = cache.xhat.index_axis(Axis(1), ch);
                    ndarray::Zip::from(&mut dxc)
                        .and(&xh)
                        .for_each(|d, &xv| *d = scale * (*d - (s1 + xv * s2) / m));
                }
                Mode::Eval => dxc.mapv_inplace(|d| d * scale),
            }
        }
        dx
    }

    /// Folds the batch statistics of a training-mode forward into the running estimates.
    pub fn update_running(&mut self, cache: &BnCache<F>) {
        if cache.mode != Mode::Train {
            return;
        }
        let mom = F::lit(self.momentum);
        let keep = F::one() - mom;
        ndarray::Zip::from(&mut self.running_mean)
            .and(cache.mean.view().into_dyn())
            .for_each(|r, &v| *r = *r * keep + v * mom);
        ndarray::Zip::from(&mut self.running_var)
            .and(cache.var_unbiased.view().into_dyn())
            .for_each(|r, &v| *r = *r * keep + v * mom);
    }

    pub fn forward4(&self, x: &Array4<F>, mode: Mode) -> (Array4<F>, BnCache<F>) {
        let (n, c, h, w) = x.dim();
        let x3 = x.view().into_shape_with_order((n, c, h * w)).expect("contiguous").to_owned();
        let (y, cache) = self.forward3(&x3, mode);
        (y.into_shape_with_order((n, c, h, w)).expect("reshape"), cache)
    }

    pub fn backward4(&mut self, cache: &BnCache<F>, dy: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = dy.dim();
        let d3 = dy.view().into_shape_with_order((n, c, h * w)).expect("contiguous").to_owned();
        self.backward3(cache, &d3).into_shape_with_order((n, c, h, w)).expect("reshape")
    }

    pub fn forward2(&self, x: &Array2<F>, mode: Mode) -> (Array2<F>, BnCache<F>) {
        let (n, c) = x.dim();
        let (y, cache) = self.forward3(&x.view().insert_axis(Axis(2)).to_owned(), mode);
        (y.into_shape_with_order((n, c)).expect("reshape"), cache)
    }

    pub fn backward2(&mut self, cache: &BnCache<F>, dy: &Array2<F>) -> Array2<F> {
        let (n, c) = dy.dim();
        self.backward3(cache, &dy.view().insert_axis(Axis(2)).to_owned())
            .into_shape_with_order((n, c))
            .expect("reshape")
    }
}

impl<F: Real> Module<F> for BatchNorm<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<F>)) {
        f(join(prefix, "running_mean"), &mut self.running_mean);
        f(join(prefix, "running_var"), &mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_mode_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array3::from_shape_simple_fn((4, 2, 5), || rng.gen_range(-3.0..5.0));
        let bn = BatchNorm::<f64>::new(2);
        let (y, _) = bn.forward3(&x, Mode::Train);
        for ch in 0..2 {
            let v = y.index_axis(Axis(1), ch);
            let mean = v.mean().unwrap();
            let var = v.mapv(|a| (a - mean) * (a - mean)).mean().unwrap();
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array3::from_shape_simple_fn((3, 2, 4), || rng.gen_range(-1.0..1.0));
        let r = Array3::from_shape_simple_fn((3, 2, 4), || rng.gen_range(-1.0..1.0));
        let mut bn = BatchNorm::<f64>::new(2);
        bn.gamma.value = ArrayD::from_shape_vec(vec![2], vec![1.3, -0.7]).unwrap();
        let loss = |bn: &BatchNorm<f64>, x: &Array3<f64>| (&bn.forward3(x, Mode::Train).0 * &r).sum();
        let (_, cache) = bn.forward3(&x, Mode::Train);
        let dx = bn.backward3(&cache, &r);
        let h = 1e-6;
        for idx in [(0, 0, 0), (1, 1, 3), (2, 0, 2)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&bn, &xp) - loss(&bn, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-7, "{fd} vs {}", dx[idx]);
        }
    }
}
