//! Conditional extremes regression with Gaussian working residuals.
//!
//! For a conditioning variable `Y_i` above a threshold `u`, each remaining
//! component follows `Y_j = α_j y + y^{β_j} Z_j`. Estimation runs in two
//! stages:
//!
//! 1. for every component `j` separately, maximize the Gaussian likelihood
//!    with mean `α_j y + y^{β_j} μ_j` and standard deviation `y^{β_j} σ_j`
//!    over `α_j ∈ [−1, 1]`, `β_j ∈ [−1, 1]`, `σ_j > 0`, by multi-start
//!    Nelder–Mead;
//! 2. form the residuals `Z = (y_{−i} − α y) / y^β` at the optimum and take
//!    their sample mean and covariance as `μ` and `Σ`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::min_eigenvalue;
use crate::margins::{laplace_quantile, Margins, PanelData};
use crate::optim::{nelder_mead, Bounds, NelderMeadOptions};
use crate::rng::substream;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// A fitted conditional extremes model for one (site, conditioning variable).
#[derive(Debug, Clone, PartialEq)]
pub struct CeFit {
    pub site: String,
    /// Zero-based index of the conditioning variable.
    pub cond_var: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: DMatrix<f64>,
    pub threshold_u: f64,
    pub quantile_q: f64,
    pub n_exceed: usize,
    /// Stage-1 negative log-likelihood, summed over components.
    pub nll: f64,
}

impl CeFit {
    /// Number of modelled components, `d − 1`.
    pub fn dim(&self) -> usize {
        self.alpha.len()
    }
}

/// Stage-1 parameters: one entry per modelled component.
#[derive(Debug, Clone, PartialEq)]
pub struct CeParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub mu: Vec<f64>,
    pub sd: Vec<f64>,
}

/// Rows where the conditioning variable exceeds the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ExceedanceRows {
    /// Conditioning values `y`, all above the threshold.
    pub cond: Vec<f64>,
    /// `others[j][r]`: component `j` in row `r`.
    pub others: Vec<Vec<f64>>,
}

impl ExceedanceRows {
    pub fn len(&self) -> usize {
        self.cond.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cond.is_empty()
    }

    /// Rows of `site` with `series(cond_var) > u`, other variables in
    /// ascending index order.
    pub fn from_panel(panel: &PanelData, site: usize, cond_var: usize, u: f64) -> Self {
        let y = panel.series(site, cond_var);
        let keep: Vec<usize> = (0..y.len()).filter(|&t| y[t] > u).collect();
        let others = (0..panel.n_vars())
            .filter(|&j| j != cond_var)
            .map(|j| {
                let s = panel.series(site, j);
                keep.iter().map(|&t| s[t]).collect()
            })
            .collect();
        ExceedanceRows {
            cond: keep.iter().map(|&t| y[t]).collect(),
            others,
        }
    }
}

/// Negative log-likelihood of one component; `ln_y` holds `ln y` per row.
fn component_nll(y: &[f64], ln_y: &[f64], yj: &[f64], p: [f64; 4]) -> f64 {
    let [alpha, beta, mu, ln_sd] = p;
    let mut total = 0.0;
    for ((&y, &ly), &x) in y.iter().zip(ln_y).zip(yj) {
        let scale = (beta * ly).exp();
        let z = (x - alpha * y - scale * mu) / scale;
        total += HALF_LN_2PI + beta * ly + ln_sd + 0.5 * z * z * (-2.0 * ln_sd).exp();
    }
    total
}

/// Stage-1 objective: Gaussian negative log-likelihood summed over
/// exceedances and components.
pub fn negative_log_likelihood(params: &CeParams, rows: &ExceedanceRows) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::TooFewExceedances { count: 0, required: 1 });
    }
    let m = rows.others.len();
    if [params.alpha.len(), params.beta.len(), params.mu.len(), params.sd.len()]
        .iter()
        .any(|&l| l != m)
    {
        return Err(Error::InvalidArgument(format!(
            "parameter vectors must have length {m}"
        )));
    }
    if let Some(&y) = rows.cond.iter().find(|&&y| !(y > 0.0)) {
        return Err(Error::Domain(format!(
            "conditioning value {y} must be positive to raise it to a real power"
        )));
    }
    if let Some(&s) = params.sd.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::Domain(format!("standard deviation {s} must be positive")));
    }
    let ln_y: Vec<f64> = rows.cond.iter().map(|y| y.ln()).collect();
    Ok((0..m)
        .map(|j| {
            component_nll(
                &rows.cond,
                &ln_y,
                &rows.others[j],
                [params.alpha[j], params.beta[j], params.mu[j], params.sd[j].ln()],
            )
        })
        .sum())
}

/// Tuning of the constrained likelihood search.
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Minimum number of exceedances required to fit.
    pub min_exceedances: usize,
    /// Lower clamp on every β.
    pub beta_lower: f64,
    pub ftol: f64,
    pub max_evals: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            min_exceedances: 20,
            beta_lower: -1.0,
            ftol: 1e-8,
            max_evals: 20_000,
        }
    }
}

const ALPHA_STARTS: [f64; 3] = [-0.5, 0.0, 0.5];
const BETA_STARTS: [f64; 2] = [0.1, 0.5];
const LN_SD_BOUNDS: (f64, f64) = (-15.0, 10.0);
const MU_BOUND: f64 = 1e3;

/// Best stage-1 parameters `[α, β, μ, ln σ]` for one component.
fn fit_component(y: &[f64], ln_y: &[f64], yj: &[f64], opts: &FitOptions) -> Result<([f64; 4], f64)> {
    let bounds = Bounds {
        lower: vec![-1.0, opts.beta_lower, -MU_BOUND, LN_SD_BOUNDS.0],
        upper: vec![1.0, 1.0, MU_BOUND, LN_SD_BOUNDS.1],
    };
    let nm = NelderMeadOptions {
        step: vec![0.1, 0.1, 0.1, 0.2],
        ftol: opts.ftol,
        max_evals: opts.max_evals,
        max_restarts: 3,
    };
    let objective = |p: &[f64]| component_nll(y, ln_y, yj, [p[0], p[1], p[2], p[3]]);

    let mut best: Option<([f64; 4], f64)> = None;
    let mut best_unconverged: Option<([f64; 4], f64)> = None;
    for &a0 in &ALPHA_STARTS {
        for &b0 in &BETA_STARTS {
            // residual scale at the starting (α, β) with μ = 0
            let ms = y
                .iter()
                .zip(ln_y)
                .zip(yj)
                .map(|((&y, &ly), &x)| ((x - a0 * y) / (b0 * ly).exp()).powi(2))
                .sum::<f64>()
                / y.len() as f64;
            let ln_sd0 = (0.5 * ms.ln()).clamp(LN_SD_BOUNDS.0, LN_SD_BOUNDS.1);
            let m = nelder_mead(&objective, &[a0, b0, 0.0, ln_sd0], &bounds, &nm);
            let p = [m.x[0], m.x[1], m.x[2], m.x[3]];
            let slot = if m.converged { &mut best } else { &mut best_unconverged };
            // strict improvement: ties go to the earlier start
            if slot.is_none_or(|(_, f)| m.fx < f) {
                *slot = Some((p, m.fx));
            }
        }
    }
    match (best, best_unconverged) {
        (Some(b), _) => Ok(b),
        (None, Some((p, f))) => Err(Error::NoConvergence {
            best_params: p.to_vec(),
            best_value: f,
        }),
        (None, None) => unreachable!("at least one start"),
    }
}

/// Fit the two-stage model to a set of exceedance rows.
pub fn fit_exceedances(rows: &ExceedanceRows, site: &str, cond_var: usize, q: f64, opts: &FitOptions) -> Result<CeFit> {
    let u = laplace_quantile(q)?;
    let n = rows.len();
    if n < opts.min_exceedances.max(2) {
        return Err(Error::TooFewExceedances {
            count: n,
            required: opts.min_exceedances.max(2),
        });
    }
    let m = rows.others.len();
    if m == 0 {
        return Err(Error::InvalidArgument(
            "need at least two variables to fit a conditional model".into(),
        ));
    }
    if let Some(&y) = rows.cond.iter().find(|&&y| !(y > u) || !(y > 0.0)) {
        return Err(Error::Domain(format!(
            "conditioning value {y} does not exceed the threshold {u}"
        )));
    }
    let ln_y: Vec<f64> = rows.cond.iter().map(|y| y.ln()).collect();

    let mut alpha = Vec::with_capacity(m);
    let mut beta = Vec::with_capacity(m);
    let mut nll = 0.0;
    for j in 0..m {
        let (p, f) = fit_component(&rows.cond, &ln_y, &rows.others[j], opts)?;
        alpha.push(p[0]);
        beta.push(p[1]);
        nll += f;
    }

    // stage 2: empirical residual mean and covariance
    let z: Vec<Vec<f64>> = (0..m)
        .map(|j| {
            rows.cond
                .iter()
                .zip(&ln_y)
                .zip(&rows.others[j])
                .map(|((&y, &ly), &x)| (x - alpha[j] * y) / (beta[j] * ly).exp())
                .collect()
        })
        .collect();
    let nf = n as f64;
    let mu: Vec<f64> = z.iter().map(|zj| zj.iter().sum::<f64>() / nf).collect();
    let mut sigma = DMatrix::from_fn(m, m, |a, b| {
        z[a].iter()
            .zip(&z[b])
            .map(|(x, y)| (x - mu[a]) * (y - mu[b]))
            .sum::<f64>()
            / (nf - 1.0)
    });
    if min_eigenvalue(&sigma) < 1e-10 {
        let mut eps = (1e-8 * sigma.trace() / m as f64).max(1e-12);
        let base = sigma.clone();
        loop {
            sigma = &base + DMatrix::identity(m, m) * eps;
            if min_eigenvalue(&sigma) > 0.0 {
                break;
            }
            eps *= 10.0;
        }
    }

    Ok(CeFit {
        site: site.to_string(),
        cond_var,
        alpha,
        beta,
        mu,
        sigma,
        threshold_u: u,
        quantile_q: q,
        n_exceed: n,
        nll,
    })
}

/// Fit the model at `site` conditioning on `cond_var` above the Laplace
/// `q`-quantile.
pub fn fit_ce(panel: &PanelData, site: usize, cond_var: usize, q: f64, opts: &FitOptions) -> Result<CeFit> {
    if panel.margins() != Margins::Laplace {
        return Err(Error::InvalidArgument(
            "conditional extremes fits need a panel on Laplace margins".into(),
        ));
    }
    if site >= panel.n_sites() || cond_var >= panel.n_vars() {
        return Err(Error::InvalidArgument(format!(
            "site {site} / variable {cond_var} out of range"
        )));
    }
    let u = laplace_quantile(q)?;
    let rows = ExceedanceRows::from_panel(panel, site, cond_var, u);
    fit_exceedances(&rows, &panel.site_ids()[site], cond_var, q, opts)
}

/// Refit on the rows `times` of `site` (with replacement), re-ranked onto
/// Laplace margins.
pub fn fit_resampled(
    panel: &PanelData,
    site: usize,
    cond_var: usize,
    q: f64,
    times: &[usize],
    opts: &FitOptions,
) -> Result<CeFit> {
    let resampled = panel.resample_site(site, times)?.to_laplace()?;
    fit_ce(&resampled, 0, cond_var, q, opts)
}

/// Bootstrap replicates of one fit; failed replicates are kept with their
/// error.
#[derive(Debug, Clone)]
pub struct BootstrapFits {
    pub fits: Vec<(usize, CeFit)>,
    pub failures: Vec<(usize, Error)>,
}

fn bootstrap_indices(panel: &PanelData, site: usize, cond_var: usize, seed: u64, b: usize) -> Vec<usize> {
    use rand::Rng;
    let n = panel.n_times();
    let mut rng = substream(seed, &format!("bootstrap/{}/{}/{b}", panel.site_ids()[site], cond_var));
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// `B` nonparametric bootstrap fits: rows resampled with replacement,
/// re-ranked, refitted.
///
/// Fails only when more than half of the replicates fail.
pub fn bootstrap_ce(
    panel: &PanelData,
    site: usize,
    cond_var: usize,
    q: f64,
    replicates: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<BootstrapFits> {
    if replicates == 0 {
        return Err(Error::InvalidArgument("need at least one bootstrap replicate".into()));
    }
    let resamples: Vec<Vec<usize>> = (0..replicates)
        .map(|b| bootstrap_indices(panel, site, cond_var, seed, b))
        .collect();
    bootstrap_with_resamples(panel, site, cond_var, q, &resamples, opts)
}

/// Bootstrap over caller-supplied resamples (one index vector per replicate).
pub fn bootstrap_with_resamples(
    panel: &PanelData,
    site: usize,
    cond_var: usize,
    q: f64,
    resamples: &[Vec<usize>],
    opts: &FitOptions,
) -> Result<BootstrapFits> {
    let outcomes: Vec<Result<CeFit>> = resamples
        .par_iter()
        .map(|times| fit_resampled(panel, site, cond_var, q, times, opts))
        .collect();
    let mut fits = Vec::new();
    let mut failures = Vec::new();
    for (b, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(mut f) => {
                f.site = panel.site_ids()[site].clone();
                fits.push((b, f));
            }
            Err(e) => failures.push((b, e)),
        }
    }
    if 2 * failures.len() > resamples.len() {
        return Err(Error::BootstrapFailed {
            failed: failures.len(),
            total: resamples.len(),
        });
    }
    Ok(BootstrapFits { fits, failures })
}

/// Which fit a stability row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Replicate {
    Full,
    Bootstrap(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRow {
    pub q: f64,
    pub replicate: Replicate,
    /// `(alpha, beta)` estimates, or the failure message.
    pub estimates: std::result::Result<(Vec<f64>, Vec<f64>), String>,
}

/// Full-data and bootstrap estimates across a grid of quantile levels.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityTable {
    pub site: String,
    pub cond_var: usize,
    pub rows: Vec<StabilityRow>,
}

/// Tabulate estimates over `q_grid`; per-level failures are recorded and the
/// run continues.
pub fn threshold_stability(
    panel: &PanelData,
    site: usize,
    cond_var: usize,
    q_grid: &[f64],
    replicates: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<StabilityTable> {
    if q_grid.is_empty() {
        return Err(Error::InvalidArgument("empty quantile grid".into()));
    }
    if q_grid.iter().any(|&q| !(q > 0.5 && q < 1.0)) || q_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "quantile grid must be strictly increasing within (0.5, 1)".into(),
        ));
    }
    let resamples: Vec<Vec<usize>> = (0..replicates)
        .map(|b| bootstrap_indices(panel, site, cond_var, seed, b))
        .collect();
    let mut rows = Vec::new();
    for &q in q_grid {
        let est = |r: Result<CeFit>| r.map(|f| (f.alpha, f.beta)).map_err(|e| e.to_string());
        rows.push(StabilityRow {
            q,
            replicate: Replicate::Full,
            estimates: est(fit_ce(panel, site, cond_var, q, opts)),
        });
        let boots: Vec<Result<CeFit>> = resamples
            .par_iter()
            .map(|times| fit_resampled(panel, site, cond_var, q, times, opts))
            .collect();
        for (b, r) in boots.into_iter().enumerate() {
            rows.push(StabilityRow {
                q,
                replicate: Replicate::Bootstrap(b),
                estimates: est(r),
            });
        }
    }
    Ok(StabilityTable {
        site: panel.site_ids()[site].clone(),
        cond_var,
        rows,
    })
}
