//! Independent numerical oracles shared by the integration tests.

#![allow(dead_code)]

use std::f64::consts::PI;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One 7/15-point Gauss–Kronrod panel: (Kronrod estimate, error estimate).
fn gk15(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let x = h * XGK[i];
        let s = f(c - x) + f(c + x);
        k += WGK[i] * s;
        if i % 2 == 1 {
            g += WG[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Adaptive Gauss–Kronrod quadrature on `[a, b]` to absolute tolerance `tol`.
pub fn integrate(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let (v, err) = gk15(f, a, b);
        if err <= tol || depth >= 40 {
            return v;
        }
        let m = 0.5 * (a + b);
        rec(f, a, m, 0.5 * tol, depth + 1) + rec(f, m, b, 0.5 * tol, depth + 1)
    }
    rec(f, a, b, tol, 0)
}

/// Integral over `[a, b]` split into `pieces` panels first, so narrow peaks
/// are not missed by the initial rule.
pub fn integrate_pieces(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64, pieces: usize, tol: f64) -> f64 {
    let w = (b - a) / pieces as f64;
    (0..pieces)
        .map(|i| integrate(f, a + i as f64 * w, a + (i + 1) as f64 * w, tol / pieces as f64))
        .sum()
}

/// 1D Gaussian described by mean and variance.
#[derive(Debug, Clone, Copy)]
pub struct Gauss1 {
    pub mean: f64,
    pub var: f64,
}

impl Gauss1 {
    pub fn ln_pdf(&self, x: f64) -> f64 {
        -0.5 * (2.0 * PI * self.var).ln() - (x - self.mean).powi(2) / (2.0 * self.var)
    }
}

/// KL(N(m1, v1) ‖ N(m2, v2)) written out for scalars.
pub fn kl_1d(p: Gauss1, q: Gauss1) -> f64 {
    0.5 * ((q.var / p.var).ln() + (p.var + (p.mean - q.mean).powi(2)) / q.var - 1.0)
}

/// JSG by literal integration: unnormalised `g = h^{1−λ} h*^λ`, its
/// normaliser, then the two KL integrals against `g / Z`.
pub fn jsg_quadrature_1d(h: Gauss1, hs: Gauss1, lambda: f64) -> f64 {
    let sd = h.var.sqrt().max(hs.var.sqrt());
    let lo = h.mean.min(hs.mean) - 40.0 * sd;
    let hi = h.mean.max(hs.mean) + 40.0 * sd;
    let ln_g = |x: f64| (1.0 - lambda) * h.ln_pdf(x) + lambda * hs.ln_pdf(x);
    let z = integrate_pieces(&mut |x| ln_g(x).exp(), lo, hi, 64, 1e-14);
    let ln_z = z.ln();
    let kl_to = |other: Gauss1| {
        integrate_pieces(
            &mut |x| {
                let lg = ln_g(x);
                let g = lg.exp() / z;
                if g == 0.0 {
                    0.0
                } else {
                    g * (lg - ln_z - other.ln_pdf(x))
                }
            },
            lo,
            hi,
            64,
            1e-13,
        )
    };
    (1.0 - lambda) * kl_to(h) + lambda * kl_to(hs)
}

/// Bivariate Gaussian with explicit 2×2 algebra.
#[derive(Debug, Clone, Copy)]
pub struct Gauss2 {
    pub mean: [f64; 2],
    /// (var1, cov12, var2)
    pub cov: [f64; 3],
}

impl Gauss2 {
    pub fn ln_pdf(&self, x: f64, y: f64) -> f64 {
        let [a, b, c] = self.cov;
        let det = a * c - b * b;
        let (dx, dy) = (x - self.mean[0], y - self.mean[1]);
        let q = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
        -(2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * q
    }
}

fn integrate_2d(f: &dyn Fn(f64, f64) -> f64, box_: [f64; 4], tol: f64) -> f64 {
    let [x0, x1, y0, y1] = box_;
    integrate_pieces(
        &mut |x| integrate_pieces(&mut |y| f(x, y), y0, y1, 16, tol * 1e-2),
        x0,
        x1,
        16,
        tol,
    )
}

pub fn jsg_quadrature_2d(h: Gauss2, hs: Gauss2, lambda: f64) -> f64 {
    let sd = [h.cov[0], h.cov[2], hs.cov[0], hs.cov[2]]
        .iter()
        .fold(0.0f64, |m, v| m.max(v.sqrt()));
    let box_ = [
        h.mean[0].min(hs.mean[0]) - 14.0 * sd,
        h.mean[0].max(hs.mean[0]) + 14.0 * sd,
        h.mean[1].min(hs.mean[1]) - 14.0 * sd,
        h.mean[1].max(hs.mean[1]) + 14.0 * sd,
    ];
    let ln_g = |x: f64, y: f64| (1.0 - lambda) * h.ln_pdf(x, y) + lambda * hs.ln_pdf(x, y);
    let z = integrate_2d(&|x, y| ln_g(x, y).exp(), box_, 1e-11);
    let ln_z = z.ln();
    let kl_to = |other: Gauss2| {
        integrate_2d(
            &|x, y| {
                let lg = ln_g(x, y);
                let g = lg.exp() / z;
                if g == 0.0 {
                    0.0
                } else {
                    g * (lg - ln_z - other.ln_pdf(x, y))
                }
            },
            box_,
            1e-10,
        )
    };
    (1.0 - lambda) * kl_to(h) + lambda * kl_to(hs)
}

/// JSG between scalar Gaussians through the geometric-mean law, by scalar
/// precision arithmetic.
pub fn jsg_1d_scalar(h: Gauss1, hs: Gauss1, lambda: f64) -> f64 {
    let prec = (1.0 - lambda) / h.var + lambda / hs.var;
    let var = 1.0 / prec;
    let mean = var * ((1.0 - lambda) * h.mean / h.var + lambda * hs.mean / hs.var);
    let g = Gauss1 { mean, var };
    (1.0 - lambda) * kl_1d(g, h) + lambda * kl_1d(g, hs)
}

/// Expected divergence between two scalar conditional models
/// `N(α y + y^β μ, y^{2β} σ²)`, integrating against the unit exponential on
/// `(u, y_cap]`, normalised.
pub fn expected_jsg_quadrature_1d(a: [f64; 4], b: [f64; 4], u: f64, y_cap: f64, lambda: f64) -> f64 {
    let law = |p: [f64; 4], y: f64| {
        let [alpha, beta, mu, var] = p;
        let s = y.powf(beta);
        Gauss1 {
            mean: alpha * y + s * mu,
            var: s * s * var,
        }
    };
    let mass = 1.0 - (-(y_cap - u)).exp();
    integrate_pieces(
        &mut |y| jsg_1d_scalar(law(a, y), law(b, y), lambda) * (-(y - u)).exp(),
        u,
        y_cap,
        8,
        1e-13,
    ) / mass
}
