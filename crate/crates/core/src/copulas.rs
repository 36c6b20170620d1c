//! Gaussian, Student-t and half-half mixture copula samplers on Laplace
//! margins, plus the multi-site simulation designs with known clusters.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::linalg::psd_cholesky;
use crate::margins::{laplace_from_tails, Margins, PanelData};
use crate::rng::substream;

/// `d × d` correlation matrix with every off-diagonal entry equal to `rho`.
pub fn equicorrelation(d: usize, rho: f64) -> Result<DMatrix<f64>> {
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be positive".into()));
    }
    let lower = if d > 1 { -1.0 / (d as f64 - 1.0) } else { -1.0 };
    if !(rho > lower && rho <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "equicorrelation {rho} must lie in ({lower}, 1] for dimension {d}"
        )));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { rho }))
}

fn normal_tails(x: f64) -> (f64, f64) {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    (0.5 * erfc(-x * s), 0.5 * erfc(x * s))
}

fn check_corr(corr: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !corr.is_square() || corr.nrows() == 0 {
        return Err(Error::InvalidArgument(
            "correlation matrix must be square and non-empty".into(),
        ));
    }
    if corr.diagonal().iter().any(|&v| (v - 1.0).abs() > 1e-12) {
        return Err(Error::InvalidArgument(
            "correlation matrix needs a unit diagonal".into(),
        ));
    }
    psd_cholesky(corr, "correlation matrix")
}

fn correlated_normal<R: Rng + ?Sized>(chol: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let z = DVector::from_fn(chol.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    chol * z
}

/// `n` i.i.d. rows from a Gaussian copula, mapped onto standard Laplace
/// margins through the exact normal CDF.
pub fn sample_gaussian_copula<R: Rng + ?Sized>(n: usize, corr: &DMatrix<f64>, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let chol = check_corr(corr)?;
    Ok((0..n)
        .map(|_| {
            correlated_normal(&chol, rng)
                .iter()
                .map(|&x| {
                    let (lo, hi) = normal_tails(x);
                    laplace_from_tails(lo, hi)
                })
                .collect()
        })
        .collect())
}

/// `n` i.i.d. rows from a Student-t copula with `dof` degrees of freedom,
/// mapped onto Laplace margins through the exact t CDF.
pub fn sample_t_copula<R: Rng + ?Sized>(n: usize, corr: &DMatrix<f64>, dof: f64, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let chol = check_corr(corr)?;
    let t = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::InvalidArgument(format!("t distribution: {e}")))?;
    let chi2 = ChiSquared::new(dof).map_err(|e| Error::InvalidArgument(format!("chi-squared: {e}")))?;
    Ok((0..n)
        .map(|_| {
            let g = correlated_normal(&chol, rng);
            let w: f64 = chi2.sample(rng);
            let scale = (dof / w).sqrt();
            g.iter()
                .map(|&x| {
                    let x = x * scale;
                    laplace_from_tails(t.cdf(x), t.cdf(-x))
                })
                .collect()
        })
        .collect())
}

/// Which copula generates each site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CopulaFamily {
    /// All rows from the Gaussian copula; `rho_t` is ignored.
    Gaussian,
    /// First half Gaussian copula rows, second half t-copula rows.
    #[default]
    Mixture,
}

fn default_dof() -> f64 {
    3.0
}

/// A multi-site simulation design with known cluster structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureDesign {
    /// Observations per site.
    pub n: usize,
    /// Variables per site.
    pub d: usize,
    /// Sites per cluster, in label order.
    pub cluster_sizes: Vec<usize>,
    /// Gaussian-copula correlation of each cluster.
    pub rho_gauss: Vec<f64>,
    /// t-copula correlation of each cluster.
    #[serde(default)]
    pub rho_t: Vec<f64>,
    #[serde(default = "default_dof")]
    pub t_dof: f64,
    /// Half-width of the per-site uniform perturbation of `rho_t`.
    #[serde(default)]
    pub perturb_halfwidth: f64,
    #[serde(default)]
    pub family: CopulaFamily,
    #[serde(default)]
    pub seed: u64,
}

/// Largest correlation a perturbed `rho_t` is clipped to.
const RHO_T_MAX: f64 = 1.0 - 1e-6;

impl MixtureDesign {
    pub fn n_sites(&self) -> usize {
        self.cluster_sizes.iter().sum()
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_sizes.len()
    }

    /// Two clusters of six sites differing only in their t-copula correlation.
    pub fn two_cluster(rho_gauss: f64, rho_t1: f64, rho_t2: f64, d: usize, seed: u64) -> Self {
        MixtureDesign {
            n: 1000,
            d,
            cluster_sizes: vec![6, 6],
            rho_gauss: vec![rho_gauss; 2],
            rho_t: vec![rho_t1, rho_t2],
            t_dof: 3.0,
            perturb_halfwidth: 0.0,
            family: CopulaFamily::Mixture,
            seed,
        }
    }

    /// Twelve sites from pure Gaussian copulas in three clusters of four.
    pub fn gaussian_three_cluster(seed: u64) -> Self {
        MixtureDesign {
            n: 1000,
            d: 2,
            cluster_sizes: vec![4, 4, 4],
            rho_gauss: vec![0.1, 0.5, 0.9],
            rho_t: Vec::new(),
            t_dof: 3.0,
            perturb_halfwidth: 0.0,
            family: CopulaFamily::Gaussian,
            seed,
        }
    }

    /// Sixty sites in clusters of 10, 20 and 30 with perturbed `rho_t`.
    pub fn unequal_three_cluster(rho_t: [f64; 3], seed: u64) -> Self {
        MixtureDesign {
            n: 1000,
            d: 2,
            cluster_sizes: vec![10, 20, 30],
            rho_gauss: vec![0.5; 3],
            rho_t: rho_t.to_vec(),
            t_dof: 3.0,
            perturb_halfwidth: 0.05,
            family: CopulaFamily::Mixture,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.cluster_sizes.len();
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if k == 0 || self.cluster_sizes.contains(&0) {
            return bad("cluster sizes must be positive and non-empty".into());
        }
        if self.d == 0 {
            return bad("need at least one variable".into());
        }
        if self.n < 2 {
            return bad("need at least two observations per site".into());
        }
        if self.rho_gauss.len() != k {
            return bad(format!("{} rho_gauss values for {k} clusters", self.rho_gauss.len()));
        }
        let check_rho = |r: f64| (0.0..=1.0).contains(&r);
        if !self.rho_gauss.iter().all(|&r| check_rho(r)) {
            return bad("rho_gauss values must lie in [0, 1]".into());
        }
        if self.family == CopulaFamily::Mixture {
            if !self.n.is_multiple_of(2) {
                return bad(format!("mixture designs need an even n, got {}", self.n));
            }
            if self.rho_t.len() != k {
                return bad(format!("{} rho_t values for {k} clusters", self.rho_t.len()));
            }
            if !self.rho_t.iter().all(|&r| check_rho(r)) {
                return bad("rho_t values must lie in [0, 1]".into());
            }
            if !(self.t_dof > 0.0) {
                return bad("t degrees of freedom must be positive".into());
            }
        }
        if !(self.perturb_halfwidth >= 0.0) {
            return bad("perturbation half-width must be non-negative".into());
        }
        Ok(())
    }

    /// Ground-truth labels, 1-based, sites in cluster order.
    pub fn labels(&self) -> Vec<usize> {
        self.cluster_sizes
            .iter()
            .enumerate()
            .flat_map(|(c, &size)| std::iter::repeat_n(c + 1, size))
            .collect()
    }
}

/// A simulated panel together with its ground truth.
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub panel: PanelData,
    pub labels: Vec<usize>,
    pub rho_gauss: Vec<f64>,
    /// Per-site t-copula correlation after perturbation (empty for the
    /// Gaussian family).
    pub rho_t: Vec<f64>,
}

/// Simulate every site of `design` and rank-transform each site's pooled
/// sample onto Laplace margins.
pub fn sample_mixture_panel(design: &MixtureDesign) -> Result<SimulatedPanel> {
    design.validate()?;
    let labels = design.labels();
    let n_sites = labels.len();
    let rho_gauss: Vec<f64> = labels.iter().map(|&c| design.rho_gauss[c - 1]).collect();

    let rho_t: Vec<f64> = if design.family == CopulaFamily::Mixture {
        let mut prng = substream(design.seed, "perturb");
        let h = design.perturb_halfwidth;
        labels
            .iter()
            .map(|&c| {
                let base = design.rho_t[c - 1];
                if h > 0.0 {
                    let e: f64 = prng.sample(Uniform::new_inclusive(-h, h).expect("valid range"));
                    (base + e).clamp(0.0, RHO_T_MAX)
                } else {
                    base
                }
            })
            .collect()
    } else {
        Vec::new()
    };

    let site_series: Vec<Vec<Vec<f64>>> = (0..n_sites)
        .into_par_iter()
        .map(|s| -> Result<Vec<Vec<f64>>> {
            let mut rng = substream(design.seed, &format!("site/{s}"));
            let corr_g = equicorrelation(design.d, rho_gauss[s])?;
            let rows = match design.family {
                CopulaFamily::Gaussian => sample_gaussian_copula(design.n, &corr_g, &mut rng)?,
                CopulaFamily::Mixture => {
                    let half = design.n / 2;
                    let mut rows = sample_gaussian_copula(half, &corr_g, &mut rng)?;
                    let corr_t = equicorrelation(design.d, rho_t[s])?;
                    rows.extend(sample_t_copula(half, &corr_t, design.t_dof, &mut rng)?);
                    rows
                }
            };
            Ok((0..design.d).map(|i| rows.iter().map(|r| r[i]).collect()).collect())
        })
        .collect::<Result<_>>()?;

    let site_ids = (1..=n_sites).map(|s| format!("s{s:02}")).collect();
    let variable_names = (1..=design.d).map(|i| format!("x{i}")).collect();
    let raw = PanelData::from_series(site_ids, variable_names, site_series, Margins::Raw)?;
    Ok(SimulatedPanel {
        panel: raw.to_laplace()?,
        labels,
        rho_gauss,
        rho_t,
    })
}
