//! Pairwise dissimilarity matrices built from expected conditional
//! divergences, one per conditioning variable, and their elementwise mean.

use nalgebra::DMatrix;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::ce_fit::CeFit;
use crate::divergence::{expected_jsg, DivergenceConfig};
use crate::error::{Error, Result};
use crate::margins::{empirical_quantile, PanelData};

/// Which conditioning variable a matrix was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixSource {
    /// 0-based conditioning variable.
    CondVar(usize),
    Aggregated,
}

impl MatrixSource {
    /// `cond_var=<1-based index>` or `aggregated`.
    pub fn label(&self) -> String {
        match self {
            MatrixSource::CondVar(i) => format!("cond_var={}", i + 1),
            MatrixSource::Aggregated => "aggregated".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "aggregated" {
            return Ok(MatrixSource::Aggregated);
        }
        s.strip_prefix("cond_var=")
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&v| v >= 1)
            .map(|v| MatrixSource::CondVar(v - 1))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown matrix source `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DissimMatrix {
    pub values: DMatrix<f64>,
    pub site_ids: Vec<String>,
    pub source: MatrixSource,
    pub fingerprint: String,
}

impl DissimMatrix {
    /// Checks symmetry, zero diagonal, nonnegativity and finiteness.
    pub fn new(values: DMatrix<f64>, site_ids: Vec<String>, source: MatrixSource, fingerprint: String) -> Result<Self> {
        let d = site_ids.len();
        if d == 0 || values.nrows() != d || values.ncols() != d {
            return Err(Error::InvalidArgument(format!(
                "{}x{} matrix for {} sites",
                values.nrows(),
                values.ncols(),
                d
            )));
        }
        let scale = values.amax().max(1.0);
        for s in 0..d {
            if values[(s, s)] != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "nonzero diagonal at site `{}`",
                    site_ids[s]
                )));
            }
            for t in 0..d {
                let v = values[(s, t)];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "entry ({}, {}) = {v} is not a finite nonnegative value",
                        site_ids[s], site_ids[t]
                    )));
                }
                if (v - values[(t, s)]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidArgument(format!(
                        "matrix is not symmetric at ({}, {})",
                        site_ids[s], site_ids[t]
                    )));
                }
            }
        }
        let mut seen = std::collections::HashSet::new();
        for id in &site_ids {
            if !seen.insert(id) {
                return Err(Error::InvalidArgument(format!("duplicate site `{id}`")));
            }
        }
        Ok(DissimMatrix {
            values,
            site_ids,
            source,
            fingerprint,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.site_ids.len()
    }

    pub fn get(&self, s: usize, t: usize) -> f64 {
        self.values[(s, t)]
    }

    /// Site `perm[j]` of `self` becomes site `j` of the result.
    pub fn permuted(&self, perm: &[usize]) -> DissimMatrix {
        let d = self.n_sites();
        DissimMatrix {
            values: DMatrix::from_fn(d, d, |a, b| self.values[(perm[a], perm[b])]),
            site_ids: perm.iter().map(|&p| self.site_ids[p].clone()).collect(),
            source: self.source,
            fingerprint: self.fingerprint.clone(),
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the settings that determine a per-variable matrix.
pub fn config_fingerprint(q: f64, lambda: f64, n_mc: usize, seed: u64, y_cap: f64) -> String {
    let mut h = Sha256::new();
    h.update(b"tailclust/dissim/v1");
    for v in [q.to_bits(), lambda.to_bits(), n_mc as u64, seed, y_cap.to_bits()] {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize()[..8])
}

pub fn aggregate_fingerprint(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(b"tailclust/aggregate/v1");
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex(&h.finalize()[..8])
}

/// Pooled type-7 quantile of the Laplace-scale conditioning variable over
/// all sites.
pub fn pooled_y_cap(panel: &PanelData, cond_var: usize, quantile: f64) -> Result<f64> {
    if cond_var >= panel.n_vars() {
        return Err(Error::InvalidArgument(format!(
            "conditioning variable {} out of range",
            cond_var + 1
        )));
    }
    let pooled: Vec<f64> = (0..panel.n_sites())
        .flat_map(|s| panel.series(s, cond_var).iter().copied())
        .collect();
    empirical_quantile(&pooled, quantile)
}

/// Per-variable matrix of expected divergences between all pairs of fits.
pub fn build_matrix(fits: &[CeFit], cfg: &DivergenceConfig, y_cap: f64) -> Result<DissimMatrix> {
    cfg.validate()?;
    let first = fits
        .first()
        .ok_or_else(|| Error::InvalidArgument("no fits to compare".into()))?;
    for f in fits {
        if f.cond_var != first.cond_var || f.quantile_q != first.quantile_q || f.threshold_u != first.threshold_u {
            return Err(Error::Contract(format!(
                "fit for site `{}` does not share the conditioning variable and threshold of site `{}`",
                f.site, first.site
            )));
        }
    }
    let d = fits.len();
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|s| ((s + 1)..d).map(move |t| (s, t))).collect();
    let entries: Vec<f64> = pairs
        .par_iter()
        .map(|&(s, t)| {
            expected_jsg(&fits[s], &fits[t], cfg, y_cap).map_err(|e| {
                if e.is_numerical() {
                    e
                } else {
                    Error::Contract(format!("pair (`{}`, `{}`): {e}", fits[s].site, fits[t].site))
                }
            })
        })
        .collect::<Result<_>>()?;
    let mut values = DMatrix::zeros(d, d);
    for (&(s, t), v) in pairs.iter().zip(entries) {
        values[(s, t)] = v;
        values[(t, s)] = v;
    }
    DissimMatrix::new(
        values,
        fits.iter().map(|f| f.site.clone()).collect(),
        MatrixSource::CondVar(first.cond_var),
        config_fingerprint(first.quantile_q, cfg.lambda, cfg.n_mc, cfg.seed, y_cap),
    )
}

/// Elementwise mean of per-variable matrices over the same sites.
pub fn aggregate(matrices: &[DissimMatrix]) -> Result<DissimMatrix> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::InvalidArgument("no matrices to aggregate".into()))?;
    let mut sources = Vec::new();
    for m in matrices {
        if m.site_ids != first.site_ids {
            return Err(Error::Contract("matrices cover different site sets".into()));
        }
        match m.source {
            MatrixSource::CondVar(i) if !sources.contains(&i) => sources.push(i),
            MatrixSource::CondVar(i) => {
                return Err(Error::Contract(format!(
                    "conditioning variable {} appears twice",
                    i + 1
                )))
            }
            MatrixSource::Aggregated => return Err(Error::Contract("cannot aggregate an aggregated matrix".into())),
        }
    }
    let mut sum = DMatrix::zeros(first.n_sites(), first.n_sites());
    for m in matrices {
        sum += &m.values;
    }
    let values = sum / matrices.len() as f64;
    let parts: Vec<&str> = matrices.iter().map(|m| m.fingerprint.as_str()).collect();
    DissimMatrix::new(
        values,
        first.site_ids.clone(),
        MatrixSource::Aggregated,
        aggregate_fingerprint(&parts),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::margins::laplace_quantile;

    fn fit(site: &str, alpha: f64) -> CeFit {
        CeFit {
            site: site.into(),
            cond_var: 0,
            alpha: vec![alpha],
            beta: vec![0.0],
            mu: vec![0.0],
            sigma: DMatrix::from_element(1, 1, 1.0),
            threshold_u: laplace_quantile(0.9).unwrap(),
            quantile_q: 0.9,
            n_exceed: 100,
            nll: 0.0,
        }
    }

    fn cfg() -> DivergenceConfig {
        DivergenceConfig {
            n_mc: 2000,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn single_site_is_zero() {
        let m = build_matrix(&[fit("a", 0.3)], &cfg(), 4.0).unwrap();
        assert_eq!(m.values, DMatrix::zeros(1, 1));
    }

    #[test]
    fn identical_fits_give_zero_matrix() {
        let m = build_matrix(&[fit("a", 0.3), fit("b", 0.3)], &cfg(), 4.0).unwrap();
        assert_eq!(m.values, DMatrix::zeros(2, 2));
    }

    #[test]
    fn alpha_separation_is_monotone() {
        let fits = [fit("a", 0.1), fit("b", 0.5), fit("c", 0.9)];
        let m = build_matrix(&fits, &cfg(), 4.0).unwrap();
        assert!(m.get(0, 2) > m.get(0, 1));
        assert!(m.get(0, 2) > m.get(1, 2));
        assert_eq!(m.values, m.values.transpose());
    }

    #[test]
    fn mismatched_thresholds_are_rejected() {
        let mut b = fit("b", 0.5);
        b.quantile_q = 0.95;
        b.threshold_u = laplace_quantile(0.95).unwrap();
        assert!(matches!(
            build_matrix(&[fit("a", 0.1), b], &cfg(), 4.0),
            Err(Error::Contract(_))
        ));
        let err = build_matrix(&[fit("a", 0.1), fit("b", 0.5)], &cfg(), 1.0).unwrap_err();
        assert!(
            err.to_string().contains("`a`") && err.to_string().contains("`b`"),
            "{err}"
        );
    }

    #[test]
    fn permutation_conjugates_matrix() {
        let fits = vec![fit("a", 0.1), fit("b", 0.5), fit("c", 0.9), fit("d", 0.7)];
        let m = build_matrix(&fits, &cfg(), 4.0).unwrap();
        let perm = [2, 0, 3, 1];
        let shuffled: Vec<CeFit> = perm.iter().map(|&p| fits[p].clone()).collect();
        let mp = build_matrix(&shuffled, &cfg(), 4.0).unwrap();
        assert_eq!(mp, m.permuted(&perm));
    }

    #[test]
    fn deterministic_rebuild() {
        let fits = [fit("a", 0.1), fit("b", 0.5), fit("c", 0.9)];
        assert_eq!(
            build_matrix(&fits, &cfg(), 4.0).unwrap(),
            build_matrix(&fits, &cfg(), 4.0).unwrap()
        );
    }

    fn two_site(v: f64, var: usize) -> DissimMatrix {
        DissimMatrix::new(
            DMatrix::from_row_slice(2, 2, &[0.0, v, v, 0.0]),
            vec!["a".into(), "b".into()],
            MatrixSource::CondVar(var),
            format!("fp{var}"),
        )
        .unwrap()
    }

    #[test]
    fn aggregation_examples() {
        let one = aggregate(&[two_site(0.2, 0)]).unwrap();
        assert_eq!(one.values, two_site(0.2, 0).values);
        assert_eq!(one.source, MatrixSource::Aggregated);
        let same = aggregate(&[two_site(0.2, 0), two_site(0.2, 1)]).unwrap();
        assert_eq!(same.values, two_site(0.2, 0).values);
        let mean = aggregate(&[two_site(0.2, 0), two_site(0.4, 1)]).unwrap();
        assert!((mean.get(0, 1) - 0.3).abs() < 1e-15);
        assert!(aggregate(&[two_site(0.2, 0), two_site(0.4, 0)]).is_err());
        let mut other = two_site(0.4, 1);
        other.site_ids[1] = "c".into();
        assert!(aggregate(&[two_site(0.2, 0), other]).is_err());
    }

    #[test]
    fn invariants_checked_on_construction() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let bad = |vals: [f64; 4]| {
            DissimMatrix::new(
                DMatrix::from_row_slice(2, 2, &vals),
                ids.clone(),
                MatrixSource::Aggregated,
                String::new(),
            )
        };
        assert!(bad([0.0, 0.1, 0.2, 0.0]).is_err());
        assert!(bad([0.1, 0.1, 0.1, 0.0]).is_err());
        assert!(bad([0.0, -0.1, -0.1, 0.0]).is_err());
        assert!(bad([0.0, f64::NAN, f64::NAN, 0.0]).is_err());
        assert!(bad([0.0, 0.1, 0.1, 0.0]).is_ok());
    }

    #[test]
    fn source_labels_round_trip() {
        for s in [
            MatrixSource::CondVar(0),
            MatrixSource::CondVar(4),
            MatrixSource::Aggregated,
        ] {
            assert_eq!(MatrixSource::parse(&s.label()).unwrap(), s);
        }
        assert!(MatrixSource::parse("cond_var=0").is_err());
    }
}
