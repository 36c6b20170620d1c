//! PAM k-medoids, total within-group dissimilarity, elbow curves and the
//! adjusted Rand index.
//!
//! PAM alternates an assignment step (nearest medoid, ties to the smallest
//! medoid index) with a medoid update (member minimizing the within-cluster
//! dissimilarity sum, ties to the smallest site index). Medoids are kept in
//! ascending site order so cluster `c` is the one whose medoid is the
//! `c`-th smallest.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rayon::prelude::*;

use crate::dissim::DissimMatrix;
use crate::error::{Error, Result};
use crate::rng::substream;

pub const DEFAULT_RESTARTS: usize = 20;
pub const DEFAULT_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Cluster label in `1..=k` per site.
    pub assignments: Vec<usize>,
    /// Site index of each cluster's medoid, ascending.
    pub medoids: Vec<usize>,
    pub twgss: f64,
    pub k: usize,
    pub n_restarts: usize,
    pub seed: u64,
    pub converged: bool,
}

/// Result of a single PAM run from given initial medoids.
#[derive(Debug, Clone, PartialEq)]
pub struct PamRun {
    pub assignments: Vec<usize>,
    pub medoids: Vec<usize>,
    pub twgss: f64,
    pub initial_twgss: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `a < b` beyond summation round-off; closer values count as tied.
fn strictly_less(a: f64, b: f64) -> bool {
    a < b - 1e-12 * a.abs().max(b.abs())
}

fn assign(m: &DissimMatrix, medoids: &[usize]) -> Vec<usize> {
    (0..m.n_sites())
        .map(|s| {
            if let Some(c) = medoids.iter().position(|&p| p == s) {
                return c + 1;
            }
            let mut best = 0;
            for c in 1..medoids.len() {
                if strictly_less(m.get(s, medoids[c]), m.get(s, medoids[best])) {
                    best = c;
                }
            }
            best + 1
        })
        .collect()
}

fn cost(m: &DissimMatrix, assignments: &[usize], medoids: &[usize]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(s, &c)| m.get(s, medoids[c - 1]))
        .sum()
}

/// New medoid per cluster, in label order.
fn update(m: &DissimMatrix, assignments: &[usize], k: usize) -> Vec<usize> {
    (1..=k)
        .map(|c| {
            let members: Vec<usize> = (0..m.n_sites()).filter(|&s| assignments[s] == c).collect();
            assert!(!members.is_empty(), "cluster {c} is empty");
            let within = |p: usize| members.iter().map(|&q| m.get(p, q)).sum::<f64>();
            let mut best = members[0];
            let mut best_sum = within(best);
            for &p in &members[1..] {
                let v = within(p);
                if strictly_less(v, best_sum) {
                    best = p;
                    best_sum = v;
                }
            }
            best
        })
        .collect()
}

/// Sorts medoids ascending and relabels `assignments` to match.
fn reorder(medoids: &mut [usize], assignments: &mut [usize]) {
    let old = medoids.to_vec();
    medoids.sort_unstable();
    let relabel: Vec<usize> = old
        .iter()
        .map(|p| medoids.iter().position(|q| q == p).expect("medoid present") + 1)
        .collect();
    for a in assignments.iter_mut() {
        *a = relabel[*a - 1];
    }
}

fn check_k(m: &DissimMatrix, k: usize) -> Result<()> {
    if k < 1 || k > m.n_sites() {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={}", m.n_sites())));
    }
    Ok(())
}

/// PAM from the given distinct initial medoids.
pub fn pam_from_medoids(m: &DissimMatrix, initial: &[usize], max_iter: usize) -> Result<PamRun> {
    let k = initial.len();
    check_k(m, k)?;
    let mut medoids = initial.to_vec();
    medoids.sort_unstable();
    medoids.dedup();
    if medoids.len() != k || medoids.iter().any(|&p| p >= m.n_sites()) {
        return Err(Error::InvalidArgument("initial medoids must be distinct sites".into()));
    }
    let mut assignments = assign(m, &medoids);
    let initial_twgss = cost(m, &assignments, &medoids);
    let mut current = initial_twgss;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        medoids = update(m, &assignments, k);
        let after_update = cost(m, &assignments, &medoids);
        reorder(&mut medoids, &mut assignments);
        let next = assign(m, &medoids);
        let after_assign = cost(m, &next, &medoids);
        let tol = 1e-12 * current.abs().max(1.0);
        assert!(after_update <= current + tol, "update increased TWGSS");
        assert!(after_assign <= after_update + tol, "assignment increased TWGSS");
        current = after_assign;
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
    }
    Ok(PamRun {
        twgss: cost(m, &assignments, &medoids),
        assignments,
        medoids,
        initial_twgss,
        iterations,
        converged,
    })
}

/// Best of `n_restarts` PAM runs from uniformly drawn initial medoids.
pub fn pam(m: &DissimMatrix, k: usize, seed: u64, n_restarts: usize, max_iter: usize) -> Result<Clustering> {
    check_k(m, k)?;
    if n_restarts == 0 || max_iter == 0 {
        return Err(Error::InvalidArgument(
            "n_restarts and max_iter must be positive".into(),
        ));
    }
    let mut runs: Vec<PamRun> = (0..n_restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(seed, &format!("pam/restart/{r}"));
            let init = sample(&mut rng, m.n_sites(), k).into_vec();
            pam_from_medoids(m, &init, max_iter)
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for r in 1..runs.len() {
        if runs[r].twgss < runs[best].twgss {
            best = r;
        }
    }
    let run = runs.swap_remove(best);
    Ok(Clustering {
        assignments: run.assignments,
        medoids: run.medoids,
        twgss: run.twgss,
        k,
        n_restarts,
        seed,
        converged: run.converged,
    })
}

/// Sum over sites of the dissimilarity to their cluster's medoid.
pub fn twgss(m: &DissimMatrix, clustering: &Clustering) -> Result<f64> {
    if clustering.assignments.len() != m.n_sites() {
        return Err(Error::InvalidArgument(format!(
            "{} assignments for {} sites",
            clustering.assignments.len(),
            m.n_sites()
        )));
    }
    for (c, &p) in clustering.medoids.iter().enumerate() {
        if p >= m.n_sites() || clustering.assignments[p] != c + 1 {
            return Err(Error::Contract(format!(
                "medoid of cluster {} is not a member of it",
                c + 1
            )));
        }
    }
    if clustering
        .assignments
        .iter()
        .any(|&c| c < 1 || c > clustering.medoids.len())
    {
        return Err(Error::InvalidArgument("cluster label out of range".into()));
    }
    Ok(cost(m, &clustering.assignments, &clustering.medoids))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElbowCurve {
    pub points: Vec<(usize, f64)>,
    /// `k` with the largest discrete second difference, if any interior
    /// point exists.
    pub suggested: Option<usize>,
}

/// Largest `twgss(k−1) − 2 twgss(k) + twgss(k+1)`, ties to the smallest `k`.
pub fn suggest_elbow(points: &[(usize, f64)]) -> Option<usize> {
    let lookup: BTreeMap<usize, f64> = points.iter().copied().collect();
    let mut best: Option<(usize, f64)> = None;
    for (&k, &v) in &lookup {
        if k == 0 {
            continue;
        }
        let (Some(&lo), Some(&hi)) = (lookup.get(&(k - 1)), lookup.get(&(k + 1))) else {
            continue;
        };
        let d2 = lo - 2.0 * v + hi;
        if best.is_none_or(|(_, b)| d2 > b) {
            best = Some((k, d2));
        }
    }
    best.map(|(k, _)| k)
}

/// TWGSS of the best PAM clustering at each `k`.
pub fn elbow_curve(
    m: &DissimMatrix,
    k_range: &[usize],
    seed: u64,
    n_restarts: usize,
    max_iter: usize,
) -> Result<ElbowCurve> {
    if k_range.is_empty() {
        return Err(Error::InvalidArgument("empty k range".into()));
    }
    let mut ks = k_range.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let points = ks
        .iter()
        .map(|&k| pam(m, k, seed, n_restarts, max_iter).map(|c| (k, c.twgss)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ElbowCurve {
        suggested: suggest_elbow(&points),
        points,
    })
}

fn pairs(n: u64) -> f64 {
    (n * n.saturating_sub(1) / 2) as f64
}

/// Hubert–Arabie adjusted Rand index. Two partitions that are both trivial
/// in the same way score 1.
pub fn adjusted_rand_index(labels_a: &[usize], labels_b: &[usize]) -> Result<f64> {
    if labels_a.len() != labels_b.len() {
        return Err(Error::InvalidArgument(format!(
            "label vectors of length {} and {}",
            labels_a.len(),
            labels_b.len()
        )));
    }
    if labels_a.len() < 2 {
        return Err(Error::InvalidArgument("at least two items are required".into()));
    }
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&a, &b) in labels_a.iter().zip(labels_b) {
        *table.entry((a, b)).or_default() += 1;
        *rows.entry(a).or_default() += 1;
        *cols.entry(b).or_default() += 1;
    }
    let index: f64 = table.values().map(|&n| pairs(n)).sum();
    let sum_a: f64 = rows.values().map(|&n| pairs(n)).sum();
    let sum_b: f64 = cols.values().map(|&n| pairs(n)).sum();
    let expected = sum_a * sum_b / pairs(labels_a.len() as u64);
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}
