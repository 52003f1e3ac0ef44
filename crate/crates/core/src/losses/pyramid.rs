//! Laplacian pyramid with a 5-tap binomial kernel and reflect borders.
//!
//! Levels `0..J-1` are band-pass details `G_j − up(G_{j+1})`; the last level is
//! the low-pass residual `G_{J-1}`, so collapsing the levels recovers the input.
//! Everything here is linear, and each operator has an explicit adjoint used to
//! back-propagate the pyramid loss.

use crate::real::Real;

const TAPS: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Reflect index `i` into `0..n` without repeating the edge sample.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// A single-channel image plane, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<F: Real> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Real> Plane<F> {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![F::zero(); h * w],
        }
    }

    pub fn new(h: usize, w: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), h * w);
        Self { h, w, data }
    }

    fn sub(&self, other: &Self) -> Self {
        Self::new(self.h, self.w, self.data.iter().zip(&other.data).map(|(a, b)| *a - *b).collect())
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

fn taps<F: Real>() -> [F; 5] {
    TAPS.map(F::lit)
}

fn blur_axis<F: Real>(p: &Plane<F>, horizontal: bool, scale: F) -> Plane<F> {
    let k = taps::<F>();
    let mut out = Plane::zeros(p.h, p.w);
    for y in 0..p.h {
        for x in 0..p.w {
            let mut acc = F::zero();
            for (t, kv) in k.iter().enumerate() {
                let off = t as isize - 2;
                let v = if horizontal {
                    p.data[y * p.w + reflect(x as isize + off, p.w)]
                } else {
                    p.data[reflect(y as isize + off, p.h) * p.w + x]
                };
                acc += *kv * v;
            }
            out.data[y * p.w + x] = acc * scale;
        }
    }
    out
}

fn blur_axis_adjoint<F: Real>(p: &Plane<F>, horizontal: bool, scale: F) -> Plane<F> {
    let k = taps::<F>();
    let mut out = Plane::zeros(p.h, p.w);
    for y in 0..p.h {
        for x in 0..p.w {
            let g = p.data[y * p.w + x] * scale;
            for (t, kv) in k.iter().enumerate() {
                let off = t as isize - 2;
                let idx = if horizontal {
                    y * p.w + reflect(x as isize + off, p.w)
                } else {
                    reflect(y as isize + off, p.h) * p.w + x
                };
                out.data[idx] += *kv * g;
            }
        }
    }
    out
}

pub fn blur<F: Real>(p: &Plane<F>) -> Plane<F> {
    blur_axis(&blur_axis(p, true, F::one()), false, F::one())
}

fn blur_adjoint<F: Real>(p: &Plane<F>, scale: F) -> Plane<F> {
    blur_axis_adjoint(&blur_axis_adjoint(p, false, scale), true, F::one())
}

/// Blur then keep even rows and columns; output is `⌈h/2⌉ × ⌈w/2⌉`.
pub fn downsample<F: Real>(p: &Plane<F>) -> Plane<F> {
    let b = blur(p);
    let (h2, w2) = (p.h.div_ceil(2), p.w.div_ceil(2));
    let mut out = Plane::zeros(h2, w2);
    for y in 0..h2 {
        for x in 0..w2 {
            out.data[y * w2 + x] = b.data[2 * y * p.w + 2 * x];
        }
    }
    out
}

fn downsample_adjoint<F: Real>(g: &Plane<F>, h: usize, w: usize) -> Plane<F> {
    let mut z = Plane::zeros(h, w);
    for y in 0..g.h {
        for x in 0..g.w {
            z.data[2 * y * w + 2 * x] = g.data[y * g.w + x];
        }
    }
    blur_adjoint(&z, F::one())
}

/// Zero-insertion to `h × w` followed by a blur with gain 4.
pub fn upsample<F: Real>(p: &Plane<F>, h: usize, w: usize) -> Plane<F> {
    let mut z = Plane::zeros(h, w);
    for y in 0..p.h {
        for x in 0..p.w {
            z.data[2 * y * w + 2 * x] = p.data[y * p.w + x];
        }
    }
    let four = F::lit(4.0);
    blur_axis(&blur_axis(&z, true, F::one()), false, four)
}

fn upsample_adjoint<F: Real>(g: &Plane<F>, h2: usize, w2: usize) -> Plane<F> {
    let b = blur_adjoint(g, F::lit(4.0));
    let mut out = Plane::zeros(h2, w2);
    for y in 0..h2 {
        for x in 0..w2 {
            out.data[y * w2 + x] = b.data[2 * y * g.w + 2 * x];
        }
    }
    out
}

/// Decomposes `p` into `levels` bands (details then residual).
pub fn decompose<F: Real>(p: &Plane<F>, levels: usize) -> Vec<Plane<F>> {
    assert!(levels >= 1);
    let mut out = Vec::with_capacity(levels);
    let mut g = p.clone();
    for _ in 0..levels - 1 {
        let next = downsample(&g);
        out.push(g.sub(&upsample(&next, g.h, g.w)));
        g = next;
    }
    out.push(g);
    out
}

/// Inverse of [`decompose`].
pub fn collapse<F: Real>(bands: &[Plane<F>]) -> Plane<F> {
    let mut g = bands.last().expect("at least one band").clone();
    for band in bands.iter().rev().skip(1) {
        let mut up = upsample(&g, band.h, band.w);
        up.add_assign(band);
        g = up;
    }
    g
}

/// Adjoint of [`decompose`]: maps per-band gradients back to the input plane.
pub fn decompose_adjoint<F: Real>(grads: &[Plane<F>]) -> Plane<F> {
    let levels = grads.len();
    // grad w.r.t. G_{J-1}
    let mut acc = grads[levels - 1].clone();
    for j in (0..levels - 1).rev() {
        // L_j = G_j − U(G_{j+1}) contributes −Uᵀ g_j to G_{j+1}
        let mut gnext = acc;
        let ut = upsample_adjoint(&grads[j], gnext.h, gnext.w);
        for (a, b) in gnext.data.iter_mut().zip(&ut.data) {
            *a -= *b;
        }
        // G_{j+1} = D(G_j)
        let mut gj = downsample_adjoint(&gnext, grads[j].h, grads[j].w);
        gj.add_assign(&grads[j]);
        acc = gj;
    }
    acc
}
