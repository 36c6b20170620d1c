//! Standard Laplace margins.
//!
//! Rank-based probability integral transform onto the standard Laplace scale,
//! Laplace quantiles and upper-tail densities, and the empirical tail
//! dependence coefficient χ(u).

use crate::error::{Error, Result};

/// Scale a panel's values live on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Margins {
    Raw,
    Laplace,
}

impl Margins {
    pub fn as_str(self) -> &'static str {
        match self {
            Margins::Raw => "raw",
            Margins::Laplace => "laplace",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "raw" => Ok(Margins::Raw),
            "laplace" => Ok(Margins::Laplace),
            other => Err(Error::InvalidArgument(format!("unknown margins `{other}`"))),
        }
    }
}

/// Observations indexed by (site, time, variable).
///
/// Storage is site-major, then variable, then time, so that every
/// (site, variable) series is a contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    values: Vec<f64>,
    n_times: usize,
    site_ids: Vec<String>,
    variable_names: Vec<String>,
    margins: Margins,
}

impl PanelData {
    /// Build a panel from `series[site][variable][time]`.
    ///
    /// Rejects ragged input and non-finite cells. Panels flagged as Laplace
    /// must have every series' median within `3/√n` of zero.
    pub fn from_series(
        site_ids: Vec<String>,
        variable_names: Vec<String>,
        series: Vec<Vec<Vec<f64>>>,
        margins: Margins,
    ) -> Result<Self> {
        let n_sites = site_ids.len();
        let n_vars = variable_names.len();
        if n_sites == 0 || n_vars == 0 {
            return Err(Error::InvalidArgument(
                "panel needs at least one site and one variable".into(),
            ));
        }
        if series.len() != n_sites {
            return Err(Error::InvalidArgument(format!(
                "{} site ids but {} site series",
                n_sites,
                series.len()
            )));
        }
        let n_times = series[0].first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(n_sites * n_vars * n_times);
        for (s, site) in series.into_iter().enumerate() {
            if site.len() != n_vars {
                return Err(Error::InvalidArgument(format!(
                    "site `{}` has {} variables, expected {}",
                    site_ids[s],
                    site.len(),
                    n_vars
                )));
            }
            for (i, var) in site.into_iter().enumerate() {
                if var.len() != n_times {
                    return Err(Error::InvalidArgument(format!(
                        "site `{}` variable `{}` has {} observations, expected {}",
                        site_ids[s],
                        variable_names[i],
                        var.len(),
                        n_times
                    )));
                }
                if let Some(t) = var.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        site: s,
                        time: t,
                        variable: i,
                    });
                }
                values.extend(var);
            }
        }
        let panel = PanelData {
            values,
            n_times,
            site_ids,
            variable_names,
            margins,
        };
        if margins == Margins::Laplace {
            panel.check_laplace_medians()?;
        }
        Ok(panel)
    }

    fn check_laplace_medians(&self) -> Result<()> {
        if self.n_times == 0 {
            return Ok(());
        }
        let tol = 3.0 / (self.n_times as f64).sqrt();
        for s in 0..self.n_sites() {
            for i in 0..self.n_vars() {
                let med = empirical_quantile(self.series(s, i), 0.5)?;
                if med.abs() > tol {
                    return Err(Error::InvalidArgument(format!(
                        "series at site `{}` variable `{}` has median {med}, not on Laplace margins",
                        self.site_ids[s], self.variable_names[i]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_sites(&self) -> usize {
        self.site_ids.len()
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn n_vars(&self) -> usize {
        self.variable_names.len()
    }

    pub fn site_ids(&self) -> &[String] {
        &self.site_ids
    }

    pub fn variable_names(&self) -> &[String] {
        &self.variable_names
    }

    pub fn margins(&self) -> Margins {
        self.margins
    }

    pub fn site_index(&self, site_id: &str) -> Option<usize> {
        self.site_ids.iter().position(|s| s == site_id)
    }

    /// The time series of `variable` at `site`.
    pub fn series(&self, site: usize, variable: usize) -> &[f64] {
        let start = (site * self.n_vars() + variable) * self.n_times;
        &self.values[start..start + self.n_times]
    }

    /// All series of one site, `[variable][time]`.
    pub fn site_series(&self, site: usize) -> Vec<Vec<f64>> {
        (0..self.n_vars()).map(|i| self.series(site, i).to_vec()).collect()
    }

    /// A single-site panel holding rows `times` of `site` (rows may repeat).
    pub fn resample_site(&self, site: usize, times: &[usize]) -> Result<PanelData> {
        if let Some(&t) = times.iter().find(|&&t| t >= self.n_times) {
            return Err(Error::InvalidArgument(format!(
                "time index {t} out of range for {} observations",
                self.n_times
            )));
        }
        let series = (0..self.n_vars())
            .map(|i| {
                let s = self.series(site, i);
                times.iter().map(|&t| s[t]).collect()
            })
            .collect();
        PanelData::from_series(
            vec![self.site_ids[site].clone()],
            self.variable_names.clone(),
            vec![series],
            Margins::Raw,
        )
    }

    /// Pool the rows of several sites into one synthetic site.
    pub fn pool_sites(&self, sites: &[usize], pooled_id: &str) -> Result<PanelData> {
        let series = (0..self.n_vars())
            .map(|i| sites.iter().flat_map(|&s| self.series(s, i).iter().copied()).collect())
            .collect();
        PanelData::from_series(
            vec![pooled_id.to_string()],
            self.variable_names.clone(),
            vec![series],
            self.margins,
        )
    }

    /// Transform every series to standard Laplace margins through its
    /// empirical rank transform.
    pub fn to_laplace(&self) -> Result<PanelData> {
        if self.n_times < 2 {
            return Err(Error::InvalidArgument(format!(
                "rank transform needs at least 2 observations per series, got {}",
                self.n_times
            )));
        }
        let mut values = Vec::with_capacity(self.values.len());
        for s in 0..self.n_sites() {
            for i in 0..self.n_vars() {
                let series = self.series(s, i);
                if series.iter().all(|&v| v == series[0]) {
                    return Err(Error::ConstantSeries {
                        site: self.site_ids[s].clone(),
                        variable: self.variable_names[i].clone(),
                    });
                }
                values.extend(series_to_laplace(series));
            }
        }
        Ok(PanelData {
            values,
            n_times: self.n_times,
            site_ids: self.site_ids.clone(),
            variable_names: self.variable_names.clone(),
            margins: Margins::Laplace,
        })
    }
}

/// Average ranks (1-based) of `x`; ties share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) share rank mean((i+1)..=j)
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Plug-in CDF values `rank/(n+1)`, strictly inside (0, 1).
pub fn empirical_cdf_values(x: &[f64]) -> Vec<f64> {
    let denom = x.len() as f64 + 1.0;
    average_ranks(x).into_iter().map(|r| r / denom).collect()
}

/// Rank transform a single series onto Laplace margins.
pub fn series_to_laplace(x: &[f64]) -> Vec<f64> {
    empirical_cdf_values(x).into_iter().map(laplace_from_uniform).collect()
}

/// Map a probability in (0, 1) onto the standard Laplace scale.
pub fn laplace_from_uniform(p: f64) -> f64 {
    if p < 0.5 {
        (2.0 * p).ln()
    } else {
        -(2.0 * (1.0 - p)).ln()
    }
}

/// Laplace value of a point with lower tail `F(x)` and upper tail `1 − F(x)`.
///
/// Taking whichever tail is smaller avoids the cancellation in `1 − F(x)`
/// when `F(x)` is close to one.
pub fn laplace_from_tails(lower: f64, upper: f64) -> f64 {
    if lower < upper {
        (2.0 * lower).ln()
    } else {
        -(2.0 * upper).ln()
    }
}

pub fn laplace_cdf(y: f64) -> f64 {
    if y < 0.0 {
        0.5 * y.exp()
    } else {
        1.0 - 0.5 * (-y).exp()
    }
}

/// The `q`th standard Laplace quantile.
pub fn laplace_quantile(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain(format!("quantile level {q} outside (0, 1)")));
    }
    Ok(laplace_from_uniform(q))
}

/// Density of a standard Laplace variable at `y` given it exceeds `u >= 0`.
///
/// The threshold itself gets the right-limit value 1.
pub fn laplace_exceedance_density(y: f64, u: f64) -> Result<f64> {
    if !(u >= 0.0) {
        return Err(Error::Domain(format!(
            "threshold {u} must be non-negative (upper tail)"
        )));
    }
    Ok(if y >= u { (-(y - u)).exp() } else { 0.0 })
}

/// Empirical χ(u): the share of rows where `x2` exceeds its `u`-level that
/// also have `x1` above its `u`-level, both on the rank scale.
pub fn empirical_chi(x1: &[f64], x2: &[f64], u: f64) -> Result<f64> {
    if x1.len() != x2.len() {
        return Err(Error::InvalidArgument(format!(
            "series lengths differ: {} vs {}",
            x1.len(),
            x2.len()
        )));
    }
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!("level {u} outside (0, 1)")));
    }
    let f1 = empirical_cdf_values(x1);
    let f2 = empirical_cdf_values(x2);
    let mut cond = 0usize;
    let mut joint = 0usize;
    for (a, b) in f1.iter().zip(&f2) {
        if *b > u {
            cond += 1;
            if *a > u {
                joint += 1;
            }
        }
    }
    if cond == 0 {
        return Err(Error::NoExceedances);
    }
    Ok(joint as f64 / cond as f64)
}

/// Sample quantile with linear interpolation between order statistics
/// (Hyndman–Fan type 7).
pub fn empirical_quantile(x: &[f64], p: f64) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("quantile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Kolmogorov distance between a sample and the standard Laplace CDF.
pub fn laplace_ks_statistic(sample: &[f64]) -> f64 {
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(k, &y)| {
            let f = laplace_cdf(y);
            let lo = f - k as f64 / n;
            let hi = (k + 1) as f64 / n - f;
            lo.max(hi)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic 99% critical value of the one-sample Kolmogorov statistic.
pub fn ks_critical_99(n: usize) -> f64 {
    1.63 / (n as f64).sqrt()
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn rank_transform_preserves_order(x in prop::collection::vec(-1e6f64..1e6, 2..200)) {
            let y = series_to_laplace(&x);
            for a in 0..x.len() {
                for b in 0..x.len() {
                    if x[a] < x[b] {
                        prop_assert!(y[a] < y[b]);
                    } else if x[a] == x[b] {
                        prop_assert_eq!(y[a], y[b]);
                    }
                }
            }
        }

        #[test]
        fn chi_is_a_probability(
            x in prop::collection::vec(-10f64..10.0, 20..200),
            seed in any::<u64>(),
            u in 0.5f64..0.95,
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut y = x.clone();
            y.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            if let Ok(c) = empirical_chi(&x, &y, u) {
                prop_assert!((0.0..=1.0).contains(&c));
            }
        }
    }
}
