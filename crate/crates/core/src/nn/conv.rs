use ndarray::{Array2, Array4, Axis, Ix1, Ix2};
use rand::Rng;

use super::{join, Module, Param};
use crate::real::Real;

/// Square-kernel convolution geometry over an `h × w` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    pub const DOWN2: Geometry = Geometry {
        kernel: 4,
        stride: 2,
        pad: 1,
    };

    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Unfolds `(N, C, H, W)` into `(C·k·k, N·Ho·Wo)` patch columns.
pub fn im2col<F: Real>(x: &Array4<F>, g: Geometry) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let k = g.kernel;
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("contiguous");
    let cols_w = n * ho * wo;
    let mut out = vec![F::zero(); c * k * k * cols_w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut out[row * cols_w..(row + 1) * cols_w];
                for b in 0..n {
                    let plane = &xs[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst_row = &mut dst[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, cols_w), out).expect("im2col shape")
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into an `(N, C, H, W)` tensor.
pub fn col2im<F: Real>(cols: &Array2<F>, n: usize, c: usize, h: usize, w: usize, g: Geometry) -> Array4<F> {
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let k = g.kernel;
    let cols_w = n * ho * wo;
    assert_eq!(cols.dim(), (c * k * k, cols_w), "col2im shape");
    let cs = cols.as_standard_layout();
    let cs = cs.as_slice().expect("contiguous");
    let mut out = vec![F::zero(); n * c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cs[row * cols_w..(row + 1) * cols_w];
                for b in 0..n {
                    let plane = &mut out[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let src_row = &src[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                        for (ox, &v) in src_row.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec((n, c, h, w), out).expect("col2im shape")
}

/// `(C, N, H, W)`-ordered matrix `(C, N·H·W)` from an `(N, C, H, W)` tensor.
fn channels_first<F: Real>(x: &Array4<F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    x.view()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, n * h * w))
        .expect("reshape")
}

fn from_channels_first<F: Real>(m: Array2<F>, n: usize, c: usize, h: usize, w: usize) -> Array4<F> {
    m.into_shape_with_order((c, n, h, w))
        .expect("reshape")
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
}

fn add_channel_bias<F: Real>(y: &mut Array4<F>, bias: &Option<Param<F>>) {
    if let Some(b) = bias {
        let b = b.value.view().into_dimensionality::<Ix1>().expect("1-d bias");
        for (mut ch, &bv) in y.axis_iter_mut(Axis(1)).zip(b.iter()) {
            ch += bv;
        }
    }
}

fn channel_bias_grad<F: Real>(bias: &mut Option<Param<F>>, dy: &Array4<F>) {
    if let Some(b) = bias {
        let g = dy.sum_axis(Axis(0)).sum_axis(Axis(1)).sum_axis(Axis(1));
        b.grad += &g.into_dyn();
    }
}

/// Strided convolution; weight stored as `(C_out, C_in·k·k)`.
#[derive(Debug, Clone)]
pub struct Conv2d<F: Real> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: Geometry,
}

pub struct ConvCache<F: Real> {
    cols: Array2<F>,
    in_dim: (usize, usize, usize, usize),
}

impl<F: Real> Conv2d<F> {
    pub fn new<R: Rng>(c_in: usize, c_out: usize, geometry: Geometry, bias: bool, rng: &mut R) -> Self {
        let k = geometry.kernel;
        Self {
            weight: Param::normal(&[c_out, c_in * k * k], 0.0, 0.02, rng),
            bias: bias.then(|| Param::zeros(&[c_out])),
            in_channels: c_in,
            out_channels: c_out,
            geometry,
        }
    }

    fn w(&self) -> ndarray::ArrayView2<'_, F> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d weight")
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, ConvCache<F>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (ho, wo) = (self.geometry.out_size(h), self.geometry.out_size(w));
        let cols = im2col(x, self.geometry);
        let y = self.w().dot(&cols);
        let mut y = from_channels_first(y, n, self.out_channels, ho, wo);
        add_channel_bias(&mut y, &self.bias);
        (
            y,
            ConvCache {
                cols,
                in_dim: (n, c, h, w),
            },
        )
    }

    pub fn backward(&mut self, cache: &ConvCache<F>, dy: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = cache.in_dim;
        channel_bias_grad(&mut self.bias, dy);
        let dy2 = channels_first(dy);
        self.weight.grad += &dy2.dot(&cache.cols.t()).into_dyn();
        let dcols = self.w().t().dot(&dy2);
        col2im(&dcols, n, c, h, w, self.geometry)
    }
}

/// Transposed (fractionally strided) convolution, the adjoint of [`Conv2d`] with the
/// same geometry; weight stored as `(C_in, C_out·k·k)`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<F: Real> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: Geometry,
}

pub struct ConvTCache<F: Real> {
    x2: Array2<F>,
    in_dim: (usize, usize, usize, usize),
}

impl<F: Real> ConvTranspose2d<F> {
    pub fn new<R: Rng>(c_in: usize, c_out: usize, geometry: Geometry, bias: bool, rng: &mut R) -> Self {
        let k = geometry.kernel;
        Self {
            weight: Param::normal(&[c_in, c_out * k * k], 0.0, 0.02, rng),
            bias: bias.then(|| Param::zeros(&[c_out])),
            in_channels: c_in,
            out_channels: c_out,
            geometry,
        }
    }

    fn w(&self) -> ndarray::ArrayView2<'_, F> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d weight")
    }

    /// Output side length for an input side `n` (inverse of [`Geometry::out_size`]).
    pub fn out_size(&self, n: usize) -> usize {
        let g = self.geometry;
        (n - 1) * g.stride + g.kernel - 2 * g.pad
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, ConvTCache<F>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "transposed conv input channels");
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let x2 = channels_first(x);
        let cols = self.w().t().dot(&x2);
        let mut y = col2im(&cols, n, self.out_channels, ho, wo, self.geometry);
        add_channel_bias(&mut y, &self.bias);
        (
            y,
            ConvTCache {
                x2,
                in_dim: (n, c, h, w),
            },
        )
    }

    pub fn backward(&mut self, cache: &ConvTCache<F>, dy: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = cache.in_dim;
        channel_bias_grad(&mut self.bias, dy);
        let dcols = im2col(dy, self.geometry);
        self.weight.grad += &cache.x2.dot(&dcols.t()).into_dyn();
        let dx2 = self.w().dot(&dcols);
        from_channels_first(dx2, n, c, h, w)
    }
}

impl<F: Real> Module<F> for Conv2d<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

impl<F: Real> Module<F> for ConvTranspose2d<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}
