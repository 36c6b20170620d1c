//! Closed-form divergences between multivariate Gaussians and the expected
//! conditional divergence between two fitted conditional extremes models.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::ce_fit::CeFit;
use crate::error::{Error, Result};
use crate::linalg::{is_symmetric, SpdFactor};
use crate::rng::substream;

/// Mean vector and covariance matrix of a multivariate Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct MvnParams {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl MvnParams {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || !cov.is_square() {
            return Err(Error::InvalidArgument(format!(
                "mean of length {} with a {}x{} covariance",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        if !is_symmetric(&cov, 1e-12) {
            return Err(Error::InvalidArgument("covariance is not symmetric".into()));
        }
        SpdFactor::new(&cov, "covariance")?;
        Ok(MvnParams { mean, cov })
    }

    /// Univariate `N(mean, var)`.
    pub fn univariate(mean: f64, var: f64) -> Result<Self> {
        Self::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn same_dims(h: &MvnParams, h_star: &MvnParams) -> Result<()> {
    if h.dim() != h_star.dim() {
        return Err(Error::InvalidArgument(format!(
            "dimension mismatch: {} vs {}",
            h.dim(),
            h_star.dim()
        )));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("skew weight {lambda} outside [0, 1]")));
    }
    Ok(())
}

fn clamp_nonnegative(v: f64, what: &str) -> f64 {
    debug_assert!(v >= -1e-12, "{what} = {v} is negative");
    v.max(0.0)
}

/// Kullback–Leibler divergence `KL(h ‖ h*)`.
pub fn kl_mvn(h: &MvnParams, h_star: &MvnParams) -> Result<f64> {
    same_dims(h, h_star)?;
    let f = SpdFactor::new(&h.cov, "h covariance")?;
    let fs = SpdFactor::new(&h_star.cov, "h* covariance")?;
    let m = h.dim() as f64;
    let trace = fs.solve_mat(&h.cov).trace();
    let diff = &h_star.mean - &h.mean;
    let v = 0.5 * (trace + fs.quad_form(&diff) - m + fs.ln_det() - f.ln_det());
    Ok(clamp_nonnegative(v, "KL"))
}

/// Normalized weighted geometric mean `h^{1−λ} (h*)^λ`, itself Gaussian.
pub fn geometric_mean_mvn(h: &MvnParams, h_star: &MvnParams, lambda: f64) -> Result<MvnParams> {
    same_dims(h, h_star)?;
    check_lambda(lambda)?;
    let f = SpdFactor::new(&h.cov, "h covariance")?;
    let fs = SpdFactor::new(&h_star.cov, "h* covariance")?;
    if lambda == 0.0 || h == h_star {
        return Ok(h.clone());
    }
    if lambda == 1.0 {
        return Ok(h_star.clone());
    }
    let prec = f.inverse() * (1.0 - lambda) + fs.inverse() * lambda;
    let b = f.solve_vec(&h.mean) * (1.0 - lambda) + fs.solve_vec(&h_star.mean) * lambda;
    let fl = SpdFactor::new(&prec, "geometric-mean precision")?;
    Ok(MvnParams {
        mean: fl.solve_vec(&b),
        cov: fl.inverse(),
    })
}

/// Skew-geometric Jensen–Shannon divergence, closed form.
pub fn jsg_mvn(h: &MvnParams, h_star: &MvnParams, lambda: f64) -> Result<f64> {
    same_dims(h, h_star)?;
    check_lambda(lambda)?;
    let f = SpdFactor::new(&h.cov, "h covariance")?;
    let fs = SpdFactor::new(&h_star.cov, "h* covariance")?;
    if h == h_star || lambda == 0.0 || lambda == 1.0 {
        return Ok(0.0);
    }
    let w0 = 1.0 - lambda;
    let w1 = lambda;
    let prec = f.inverse() * w0 + fs.inverse() * w1;
    let b = f.solve_vec(&h.mean) * w0 + fs.solve_vec(&h_star.mean) * w1;
    let fl = SpdFactor::new(&prec, "geometric-mean precision")?;
    let quad = w0 * f.quad_form(&h.mean) + w1 * fs.quad_form(&h_star.mean);
    let ln_dets = w0 * f.ln_det() + w1 * fs.ln_det();
    // ln|Ω_λ| = −ln|Ω_λ⁻¹|
    let v = 0.5 * ((quad - fl.quad_form(&b)) + (ln_dets + fl.ln_det()));
    Ok(clamp_nonnegative(v, "JSG"))
}

/// The same divergence through its definition,
/// `(1−λ) KL(G_λ ‖ h) + λ KL(G_λ ‖ h*)`.
pub fn jsg_mvn_via_kl(h: &MvnParams, h_star: &MvnParams, lambda: f64) -> Result<f64> {
    let g = geometric_mean_mvn(h, h_star, lambda)?;
    Ok((1.0 - lambda) * kl_mvn(&g, h)? + lambda * kl_mvn(&g, h_star)?)
}

/// Conditional law of the non-conditioning components given `Y_i = y`:
/// mean `α y + y^β μ`, covariance `diag(y^β) Σ diag(y^β)`.
pub fn conditional_mvn(fit: &CeFit, y: f64) -> Result<MvnParams> {
    if !(y > fit.threshold_u) {
        return Err(Error::Domain(format!(
            "conditioning value {y} does not exceed the threshold {}",
            fit.threshold_u
        )));
    }
    let scale: Vec<f64> = fit.beta.iter().map(|b| y.powf(*b)).collect();
    let m = fit.dim();
    let mean = DVector::from_fn(m, |j, _| fit.alpha[j] * y + scale[j] * fit.mu[j]);
    let cov = DMatrix::from_fn(m, m, |a, b| scale[a] * fit.sigma[(a, b)] * scale[b]);
    Ok(MvnParams { mean, cov })
}

/// Settings of the expected divergence.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceConfig {
    pub lambda: f64,
    /// Monte Carlo draws per pair.
    pub n_mc: usize,
    /// Pooled quantile level of the truncation point.
    pub y_cap_quantile: f64,
    pub seed: u64,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        DivergenceConfig {
            lambda: 0.5,
            n_mc: 10_000,
            y_cap_quantile: 0.99,
            seed: 0,
        }
    }
}

impl DivergenceConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if self.n_mc == 0 {
            return Err(Error::InvalidArgument("n_mc must be at least 1".into()));
        }
        if !(self.y_cap_quantile > 0.0 && self.y_cap_quantile < 1.0) {
            return Err(Error::Domain(format!(
                "truncation quantile {} outside (0, 1)",
                self.y_cap_quantile
            )));
        }
        Ok(())
    }
}

/// Monte Carlo mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JsgEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Stream label shared by both orderings of a pair.
pub fn pair_stream_label(cond_var: usize, site_a: &str, site_b: &str) -> String {
    let (lo, hi) = if site_a <= site_b {
        (site_a, site_b)
    } else {
        (site_b, site_a)
    };
    format!("pair/{cond_var}/{lo}|{hi}")
}

/// Inverse-CDF draw from the unit-rate exponential on `(u, y_cap]`.
///
/// `v` must lie in `(0, 1]`.
pub fn truncated_exceedance(u: f64, y_cap: f64, v: f64) -> f64 {
    u - (v * (-(y_cap - u)).exp_m1()).ln_1p()
}

/// Per-fit quantities reused across draws.
struct Prepared<'a> {
    fit: &'a CeFit,
    sigma_inv: Vec<f64>,
    ln_det_sigma: f64,
}

impl<'a> Prepared<'a> {
    fn new(fit: &'a CeFit) -> Result<Self> {
        let f = SpdFactor::new(&fit.sigma, &format!("Σ of site `{}`", fit.site))?;
        Ok(Prepared {
            fit,
            sigma_inv: f.inverse().as_slice().to_vec(),
            ln_det_sigma: f.ln_det(),
        })
    }

    /// Precision, precision·mean, meanᵀ·precision·mean and ln|cov| at `y`.
    fn terms(&self, y: f64, prec: &mut [f64], pm: &mut [f64]) -> (f64, f64) {
        let m = self.fit.dim();
        let ln_y = y.ln();
        let mut inv_scale = [0.0; 16];
        let mut mean = [0.0; 16];
        let mut sum_beta = 0.0;
        for j in 0..m {
            let s = (self.fit.beta[j] * ln_y).exp();
            inv_scale[j] = 1.0 / s;
            mean[j] = self.fit.alpha[j] * y + s * self.fit.mu[j];
            sum_beta += self.fit.beta[j];
        }
        let mut quad = 0.0;
        for a in 0..m {
            let mut acc = 0.0;
            for b in 0..m {
                // column-major, symmetric
                let p = self.sigma_inv[a + b * m] * inv_scale[a] * inv_scale[b];
                prec[a + b * m] = p;
                acc += p * mean[b];
            }
            pm[a] = acc;
            quad += mean[a] * acc;
        }
        (quad, self.ln_det_sigma + 2.0 * sum_beta * ln_y)
    }
}

/// In-place Cholesky of a column-major SPD matrix; returns `ln|A|` and
/// leaves the lower factor in `a`.
fn small_cholesky(a: &mut [f64], m: usize) -> Option<f64> {
    let mut ln_det = 0.0;
    for j in 0..m {
        let mut d = a[j + j * m];
        for k in 0..j {
            d -= a[j + k * m] * a[j + k * m];
        }
        if !(d > 0.0) {
            return None;
        }
        let l = d.sqrt();
        a[j + j * m] = l;
        ln_det += 2.0 * l.ln();
        for i in (j + 1)..m {
            let mut v = a[i + j * m];
            for k in 0..j {
                v -= a[i + k * m] * a[j + k * m];
            }
            a[i + j * m] = v / l;
        }
    }
    Some(ln_det)
}

/// `‖L⁻¹ b‖²` for a lower factor `L` stored in `a`.
fn small_quad(a: &[f64], m: usize, b: &[f64]) -> f64 {
    let mut w = [0.0; 16];
    let mut total = 0.0;
    for i in 0..m {
        let mut v = b[i];
        for k in 0..i {
            v -= a[i + k * m] * w[k];
        }
        w[i] = v / a[i + i * m];
        total += w[i] * w[i];
    }
    total
}

const MAX_DIM: usize = 16;

fn check_pair(fit_s: &CeFit, fit_t: &CeFit, y_cap: f64) -> Result<()> {
    if fit_s.cond_var != fit_t.cond_var {
        return Err(Error::Contract(format!(
            "fits condition on different variables ({} vs {})",
            fit_s.cond_var, fit_t.cond_var
        )));
    }
    if fit_s.quantile_q != fit_t.quantile_q || fit_s.threshold_u != fit_t.threshold_u {
        return Err(Error::Contract(format!(
            "fits use different thresholds (q {} vs {})",
            fit_s.quantile_q, fit_t.quantile_q
        )));
    }
    if fit_s.dim() != fit_t.dim() {
        return Err(Error::Contract("fits have different dimensions".into()));
    }
    if fit_s.dim() > MAX_DIM {
        return Err(Error::InvalidArgument(format!(
            "at most {} non-conditioning variables are supported",
            MAX_DIM
        )));
    }
    if !(y_cap > fit_s.threshold_u) {
        return Err(Error::Contract(format!(
            "truncation point {y_cap} does not exceed the threshold {}",
            fit_s.threshold_u
        )));
    }
    Ok(())
}

/// Expected conditional divergence with its Monte Carlo standard error.
pub fn expected_jsg_estimate(fit_s: &CeFit, fit_t: &CeFit, cfg: &DivergenceConfig, y_cap: f64) -> Result<JsgEstimate> {
    cfg.validate()?;
    check_pair(fit_s, fit_t, y_cap)?;
    if fit_s.alpha == fit_t.alpha && fit_s.beta == fit_t.beta && fit_s.mu == fit_t.mu && fit_s.sigma == fit_t.sigma {
        return Ok(JsgEstimate {
            mean: 0.0,
            std_error: 0.0,
        });
    }
    let ps = Prepared::new(fit_s)?;
    let pt = Prepared::new(fit_t)?;
    let m = fit_s.dim();
    let u = fit_s.threshold_u;
    let (w0, w1) = (1.0 - cfg.lambda, cfg.lambda);

    let mut rng = substream(cfg.seed, &pair_stream_label(fit_s.cond_var, &fit_s.site, &fit_t.site));
    let mut prec_s = vec![0.0; m * m];
    let mut prec_t = vec![0.0; m * m];
    let mut pm_s = vec![0.0; m];
    let mut pm_t = vec![0.0; m];
    let mut prec_l = vec![0.0; m * m];
    let mut b = vec![0.0; m];

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..cfg.n_mc {
        let v = 1.0 - rng.random::<f64>();
        let y = truncated_exceedance(u, y_cap, v);
        let (q_s, ld_s) = ps.terms(y, &mut prec_s, &mut pm_s);
        let (q_t, ld_t) = pt.terms(y, &mut prec_t, &mut pm_t);
        for k in 0..m * m {
            prec_l[k] = w0 * prec_s[k] + w1 * prec_t[k];
        }
        for k in 0..m {
            b[k] = w0 * pm_s[k] + w1 * pm_t[k];
        }
        let ld_prec = small_cholesky(&mut prec_l, m).ok_or_else(|| Error::NotPositiveDefinite {
            name: format!("geometric-mean precision of `{}` and `{}`", fit_s.site, fit_t.site),
        })?;
        let quad = w0 * q_s + w1 * q_t;
        let ln_dets = w0 * ld_s + w1 * ld_t;
        let v = 0.5 * ((quad - small_quad(&prec_l, m, &b)) + (ln_dets + ld_prec));
        let v = clamp_nonnegative(v, "JSG");
        sum += v;
        sum_sq += v * v;
    }
    let n = cfg.n_mc as f64;
    let mean = sum / n;
    let var = if cfg.n_mc > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(JsgEstimate {
        mean,
        std_error: (var / n).sqrt(),
    })
}

/// Expected conditional divergence between two fits sharing a conditioning
/// variable and threshold, truncated at `y_cap`.
pub fn expected_jsg(fit_s: &CeFit, fit_t: &CeFit, cfg: &DivergenceConfig, y_cap: f64) -> Result<f64> {
    expected_jsg_estimate(fit_s, fit_t, cfg, y_cap).map(|e| e.mean)
}
