//! End-to-end commands: fit every (site, conditioning variable), build the
//! dissimilarity matrices, cluster, and the simulation-study drivers.
//!
//! Each `cmd_*` function computes its result, writes the artifact files into
//! the output directory and returns the in-memory result. Output file names:
//!
//! - `panel.csv`, `labels.csv` (simulate)
//! - `fits.csv`, `fit_failures.csv` (fit)
//! - `matrix_cond{i}.csv` per conditioning variable and `matrix_aggregated.csv`
//! - `clustering.csv`, `elbow.csv`
//! - `chi.csv`, `stability.csv`, `experiment.csv`
//! - `log.txt`, the only file with wall-clock content

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ce_fit::{fit_ce, threshold_stability, CeFit, FitOptions, StabilityTable};
use crate::cluster::{
    adjusted_rand_index, elbow_curve, pam, Clustering, ElbowCurve, DEFAULT_MAX_ITER, DEFAULT_RESTARTS,
};
use crate::copulas::{sample_mixture_panel, MixtureDesign, SimulatedPanel};
use crate::dissim::{aggregate, build_matrix, pooled_y_cap, DissimMatrix, MatrixSource};
use crate::divergence::DivergenceConfig;
use crate::error::{Error, Result};
use crate::io::{self, FitFailure, MatrixMeta, Table};
use crate::margins::{empirical_chi, Margins, PanelData};
use crate::rng::derive_seed;

fn default_q() -> f64 {
    0.85
}
fn default_lambda() -> f64 {
    0.5
}
fn default_n_mc() -> usize {
    10_000
}
fn default_y_cap_quantile() -> f64 {
    0.99
}
fn default_restarts() -> usize {
    DEFAULT_RESTARTS
}
fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}
fn default_bootstrap() -> usize {
    100
}
fn default_q_grid() -> Vec<f64> {
    vec![0.8, 0.85, 0.9, 0.95]
}
fn default_chi_u() -> f64 {
    0.95
}
fn default_chi_vars() -> [usize; 2] {
    [1, 2]
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// Settings shared by all commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Long-form panel file.
    #[serde(default)]
    pub input: Option<PathBuf>,
    /// Simulation design, used when no input file is given.
    #[serde(default)]
    pub design: Option<MixtureDesign>,
    #[serde(default = "default_q")]
    pub quantile_q: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    #[serde(default = "default_y_cap_quantile")]
    pub y_cap_quantile: f64,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub k_range: Option<Vec<usize>>,
    #[serde(default = "default_restarts")]
    pub n_restarts: usize,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default = "default_q_grid")]
    pub q_grid: Vec<f64>,
    #[serde(default = "default_chi_u")]
    pub chi_u: f64,
    /// 1-based variable pair for χ.
    #[serde(default = "default_chi_vars")]
    pub chi_vars: [usize; 2],
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            design: None,
            quantile_q: default_q(),
            lambda: default_lambda(),
            n_mc: default_n_mc(),
            y_cap_quantile: default_y_cap_quantile(),
            k: None,
            k_range: None,
            n_restarts: default_restarts(),
            max_iter: default_max_iter(),
            bootstrap: default_bootstrap(),
            q_grid: default_q_grid(),
            chi_u: default_chi_u(),
            chi_vars: default_chi_vars(),
            seed: 0,
            output: default_output(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.quantile_q > 0.5 && self.quantile_q < 1.0) {
            return bad(format!("quantile_q = {} outside (0.5, 1)", self.quantile_q));
        }
        if self.n_restarts == 0 || self.max_iter == 0 || self.bootstrap == 0 {
            return bad("counts must be positive".into());
        }
        if self.k == Some(0) || self.k_range.as_ref().is_some_and(|r| r.is_empty() || r.contains(&0)) {
            return bad("cluster counts must be positive".into());
        }
        self.divergence().validate()
    }

    pub fn divergence(&self) -> DivergenceConfig {
        DivergenceConfig {
            lambda: self.lambda,
            n_mc: self.n_mc,
            y_cap_quantile: self.y_cap_quantile,
            seed: self.seed,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.output.join(name)
    }

    fn prepare_output(&self) -> Result<()> {
        fs::create_dir_all(&self.output).map_err(|e| Error::Io(format!("{}: {e}", self.output.display())))
    }

    /// Appends a timestamped line to `log.txt`.
    pub fn log(&self, message: &str) -> Result<()> {
        self.prepare_output()?;
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path("log.txt"))?;
        writeln!(f, "[{secs}] {message}")?;
        Ok(())
    }

    /// The configured input panel, or the configured design simulated with
    /// the run seed.
    pub fn load_panel(&self) -> Result<PanelData> {
        match (&self.input, &self.design) {
            (Some(p), _) => io::read_panel(p),
            (None, Some(d)) => Ok(sample_mixture_panel(&MixtureDesign {
                seed: self.seed,
                ..d.clone()
            })?
            .panel),
            (None, None) => Err(Error::InvalidArgument(
                "no input panel or simulation design given".into(),
            )),
        }
    }
}

fn laplace(panel: &PanelData) -> Result<PanelData> {
    match panel.margins() {
        Margins::Laplace => Ok(panel.clone()),
        Margins::Raw => panel.to_laplace(),
    }
}

/// Simulate a design and write `panel.csv` and `labels.csv`.
pub fn cmd_simulate(cfg: &RunConfig, design: &MixtureDesign) -> Result<SimulatedPanel> {
    cfg.prepare_output()?;
    let sim = sample_mixture_panel(design)?;
    io::write_panel(&sim.panel, &cfg.path("panel.csv"))?;
    io::labels_table(sim.panel.site_ids(), &sim.labels)
        .meta("seed", design.seed)
        .write(&cfg.path("labels.csv"))?;
    cfg.log(&format!(
        "simulate: {} sites, {} variables, n = {}",
        sim.panel.n_sites(),
        sim.panel.n_vars(),
        sim.panel.n_times()
    ))?;
    Ok(sim)
}

/// All fits of a panel, ordered by conditioning variable then site.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub fits: Vec<CeFit>,
    pub failures: Vec<FitFailure>,
}

/// Fit every (site, conditioning variable) on Laplace margins at level `q`.
pub fn fit_all(laplace_panel: &PanelData, q: f64, opts: &FitOptions) -> Result<FitReport> {
    let jobs: Vec<(usize, usize)> = (0..laplace_panel.n_vars())
        .flat_map(|i| (0..laplace_panel.n_sites()).map(move |s| (i, s)))
        .collect();
    let outcomes: Vec<Result<CeFit>> = jobs
        .par_iter()
        .map(|&(i, s)| fit_ce(laplace_panel, s, i, q, opts))
        .collect();
    let mut fits = Vec::new();
    let mut failures = Vec::new();
    for (&(i, s), o) in jobs.iter().zip(outcomes) {
        match o {
            Ok(f) => fits.push(f),
            Err(e) if matches!(e, Error::InvalidArgument(_)) => return Err(e),
            Err(e) => failures.push(FitFailure {
                site: laplace_panel.site_ids()[s].clone(),
                cond_var: i,
                error: e.to_string(),
                numerical: e.is_numerical(),
            }),
        }
    }
    Ok(FitReport { fits, failures })
}

/// Fit the configured panel and write `fits.csv` and `fit_failures.csv`.
pub fn cmd_fit(cfg: &RunConfig, panel: &PanelData) -> Result<FitReport> {
    cfg.validate()?;
    cfg.prepare_output()?;
    let lp = laplace(panel)?;
    let report = fit_all(&lp, cfg.quantile_q, &FitOptions::default())?;
    let fp = io::panel_fingerprint(panel);
    io::fits_table(&report.fits, panel.variable_names(), cfg.quantile_q, &fp).write(&cfg.path("fits.csv"))?;
    io::fit_failures_table(&report.failures, panel.variable_names()).write(&cfg.path("fit_failures.csv"))?;
    cfg.log(&format!(
        "fit: {} fits, {} failures at q = {}",
        report.fits.len(),
        report.failures.len(),
        cfg.quantile_q
    ))?;
    Ok(report)
}

/// Per-variable matrices with their settings, plus the aggregate.
#[derive(Debug, Clone)]
pub struct MatrixSet {
    pub per_variable: Vec<(DissimMatrix, MatrixMeta)>,
    pub aggregated: (DissimMatrix, MatrixMeta),
}

/// Build one matrix per conditioning variable from `fits` (which must cover
/// every site for every variable) and their mean.
pub fn build_matrices(laplace_panel: &PanelData, fits: &[CeFit], cfg: &RunConfig) -> Result<MatrixSet> {
    let dcfg = cfg.divergence();
    let mut per_variable = Vec::new();
    for i in 0..laplace_panel.n_vars() {
        let mut group = Vec::with_capacity(laplace_panel.n_sites());
        for site in laplace_panel.site_ids() {
            let f = fits
                .iter()
                .find(|f| f.cond_var == i && &f.site == site)
                .ok_or_else(|| {
                    Error::Contract(format!("no fit for site `{site}` conditioning on variable {}", i + 1))
                })?;
            group.push(f.clone());
        }
        let y_cap = pooled_y_cap(laplace_panel, i, cfg.y_cap_quantile)?;
        let m = build_matrix(&group, &dcfg, y_cap)?;
        let meta = MatrixMeta {
            q: group[0].quantile_q,
            lambda: dcfg.lambda,
            n_mc: dcfg.n_mc,
            seed: dcfg.seed,
            y_caps: vec![y_cap],
            components: vec![],
        };
        per_variable.push((m, meta));
    }
    let mats: Vec<DissimMatrix> = per_variable.iter().map(|(m, _)| m.clone()).collect();
    let agg = aggregate(&mats)?;
    let agg_meta = MatrixMeta {
        q: per_variable[0].1.q,
        lambda: dcfg.lambda,
        n_mc: dcfg.n_mc,
        seed: dcfg.seed,
        y_caps: per_variable.iter().map(|(_, m)| m.y_caps[0]).collect(),
        components: mats.iter().map(|m| m.fingerprint.clone()).collect(),
    };
    Ok(MatrixSet {
        per_variable,
        aggregated: (agg, agg_meta),
    })
}

fn matrix_file(source: MatrixSource) -> String {
    match source {
        MatrixSource::CondVar(i) => format!("matrix_cond{}.csv", i + 1),
        MatrixSource::Aggregated => "matrix_aggregated.csv".into(),
    }
}

/// Check a fits table against the panel it claims to come from.
pub fn check_fits(fits_table: &Table, panel: &PanelData) -> Result<Vec<CeFit>> {
    let fits = io::fits_from_table(fits_table)?;
    if let Some(fp) = fits_table.get_meta("panel_fingerprint") {
        let actual = io::panel_fingerprint(panel);
        if fp != actual {
            return Err(Error::Contract(format!(
                "fits were produced from panel {fp}, not from this panel ({actual})"
            )));
        }
    }
    if let Some(first) = fits.first() {
        if let Some(f) = fits
            .iter()
            .find(|f| f.quantile_q != first.quantile_q || f.threshold_u != first.threshold_u)
        {
            return Err(Error::Contract(format!(
                "fits mix thresholds: site `{}` uses q = {} but site `{}` uses q = {}",
                f.site, f.quantile_q, first.site, first.quantile_q
            )));
        }
    }
    Ok(fits)
}

/// Build and write all matrices.
pub fn cmd_dissim(cfg: &RunConfig, panel: &PanelData, fits: &[CeFit]) -> Result<MatrixSet> {
    cfg.validate()?;
    cfg.prepare_output()?;
    let lp = laplace(panel)?;
    let set = build_matrices(&lp, fits, cfg)?;
    for (m, meta) in set.per_variable.iter().chain(std::iter::once(&set.aggregated)) {
        io::matrix_table(m, meta).write(&cfg.path(&matrix_file(m.source)))?;
    }
    cfg.log(&format!(
        "dissim: {} per-variable matrices over {} sites",
        set.per_variable.len(),
        lp.n_sites()
    ))?;
    Ok(set)
}

/// Clustering at `k` and, when a range is configured, the elbow curve.
pub fn cmd_cluster(cfg: &RunConfig, m: &DissimMatrix) -> Result<(Option<Clustering>, Option<ElbowCurve>)> {
    cfg.validate()?;
    cfg.prepare_output()?;
    let curve = match &cfg.k_range {
        Some(r) => Some(cmd_elbow_inner(cfg, m, r)?),
        None => None,
    };
    let k = cfg.k.or_else(|| curve.as_ref().and_then(|c| c.suggested));
    let clustering = match k {
        Some(k) => {
            let c = pam(m, k, cfg.seed, cfg.n_restarts, cfg.max_iter)?;
            io::clustering_table(m, &c).write(&cfg.path("clustering.csv"))?;
            cfg.log(&format!("cluster: k = {k}, twgss = {}", c.twgss))?;
            Some(c)
        }
        None if curve.is_none() => {
            return Err(Error::InvalidArgument("give k or a k range".into()));
        }
        None => None,
    };
    Ok((clustering, curve))
}

fn cmd_elbow_inner(cfg: &RunConfig, m: &DissimMatrix, range: &[usize]) -> Result<ElbowCurve> {
    let curve = elbow_curve(m, range, cfg.seed, cfg.n_restarts, cfg.max_iter)?;
    io::elbow_table(m, &curve, cfg.seed, cfg.n_restarts).write(&cfg.path("elbow.csv"))?;
    cfg.log(&format!("elbow: suggested k = {:?}", curve.suggested))?;
    Ok(curve)
}

/// Elbow curve over the configured range (default `1..=min(D, 8)`).
pub fn cmd_elbow(cfg: &RunConfig, m: &DissimMatrix) -> Result<ElbowCurve> {
    cfg.validate()?;
    cfg.prepare_output()?;
    let range = cfg
        .k_range
        .clone()
        .unwrap_or_else(|| (1..=m.n_sites().min(8)).collect());
    cmd_elbow_inner(cfg, m, &range)
}

/// Read a matrix file, verifying its fingerprint.
pub fn read_matrix(path: &Path) -> Result<DissimMatrix> {
    io::matrix_from_table(&Table::read(path)?).map(|(m, _)| m)
}

/// Fit, build matrices and cluster the aggregated matrix.
pub fn cmd_pipeline(cfg: &RunConfig, panel: &PanelData) -> Result<(FitReport, MatrixSet, Option<Clustering>)> {
    let report = cmd_fit(cfg, panel)?;
    if let Some(f) = report.failures.first() {
        return Err(Error::Contract(format!(
            "fit failed for site `{}` conditioning on variable {}: {}",
            f.site,
            f.cond_var + 1,
            f.error
        )));
    }
    let set = cmd_dissim(cfg, panel, &report.fits)?;
    let (clustering, _) = if cfg.k.is_some() || cfg.k_range.is_some() {
        cmd_cluster(cfg, &set.aggregated.0)?
    } else {
        (None, None)
    };
    Ok((report, set, clustering))
}

/// Per-site χ(u) for a variable pair; `None` where the level has no
/// exceedances.
pub fn chi_per_site(panel: &PanelData, u: f64, vars: (usize, usize)) -> Result<Vec<Option<f64>>> {
    if vars.0 >= panel.n_vars() || vars.1 >= panel.n_vars() {
        return Err(Error::InvalidArgument("χ variable index out of range".into()));
    }
    (0..panel.n_sites())
        .map(
            |s| match empirical_chi(panel.series(s, vars.0), panel.series(s, vars.1), u) {
                Ok(c) => Ok(Some(c)),
                Err(Error::NoExceedances) => Ok(None),
                Err(e) => Err(e),
            },
        )
        .collect()
}

pub fn cmd_chi(cfg: &RunConfig, panel: &PanelData) -> Result<Vec<Option<f64>>> {
    cfg.prepare_output()?;
    let [a, b] = cfg.chi_vars;
    if a == 0 || b == 0 {
        return Err(Error::InvalidArgument("χ variables are 1-based".into()));
    }
    let chi = chi_per_site(panel, cfg.chi_u, (a - 1, b - 1))?;
    let names = panel.variable_names();
    io::chi_table(panel.site_ids(), &chi, cfg.chi_u, (&names[a - 1], &names[b - 1])).write(&cfg.path("chi.csv"))?;
    cfg.log(&format!("chi: u = {}", cfg.chi_u))?;
    Ok(chi)
}

/// Threshold-stability tables for every (site, conditioning variable).
pub fn cmd_stability(cfg: &RunConfig, panel: &PanelData) -> Result<Vec<StabilityTable>> {
    cfg.prepare_output()?;
    let lp = laplace(panel)?;
    let opts = FitOptions::default();
    let mut tables = Vec::new();
    for i in 0..lp.n_vars() {
        for s in 0..lp.n_sites() {
            tables.push(threshold_stability(
                &lp,
                s,
                i,
                &cfg.q_grid,
                cfg.bootstrap,
                cfg.seed,
                &opts,
            )?);
        }
    }
    io::stability_table(&tables, cfg.seed, cfg.bootstrap).write(&cfg.path("stability.csv"))?;
    cfg.log(&format!("stability: {} tables", tables.len()))?;
    Ok(tables)
}

/// Outcome of one simulate → fit → divergence → PAM replicate.
#[derive(Debug, Clone)]
pub struct ReplicateOutcome {
    pub sim: SimulatedPanel,
    pub fits: Vec<CeFit>,
    pub matrices: MatrixSet,
    pub clustering: Clustering,
    pub ari: f64,
}

/// Run one replicate of `design` with `k` equal to its number of clusters.
pub fn run_replicate(design: &MixtureDesign, cfg: &RunConfig) -> Result<ReplicateOutcome> {
    let sim = sample_mixture_panel(design)?;
    let report = fit_all(&sim.panel, cfg.quantile_q, &FitOptions::default())?;
    if let Some(f) = report.failures.first() {
        return Err(Error::Contract(format!(
            "fit failed for site `{}` conditioning on variable {}: {}",
            f.site,
            f.cond_var + 1,
            f.error
        )));
    }
    let rcfg = RunConfig {
        seed: design.seed,
        ..cfg.clone()
    };
    let matrices = build_matrices(&sim.panel, &report.fits, &rcfg)?;
    let clustering = pam(
        &matrices.aggregated.0,
        design.n_clusters(),
        design.seed,
        cfg.n_restarts,
        cfg.max_iter,
    )?;
    let ari = adjusted_rand_index(&clustering.assignments, &sim.labels)?;
    Ok(ReplicateOutcome {
        sim,
        fits: report.fits,
        matrices,
        clustering,
        ari,
    })
}

/// Grid of designs, each replicated `reps` times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentGrid {
    pub reps: usize,
    /// Cell designs; their `seed` fields are replaced per replicate.
    pub cells: Vec<MixtureDesign>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub cell: usize,
    pub rep: usize,
    pub seed: u64,
    pub ari: Option<f64>,
    pub runtime_ms: u128,
    pub error: Option<String>,
}

/// Seed of replicate `rep` of cell `cell`.
pub fn replicate_seed(master: u64, cell: usize, rep: usize) -> u64 {
    derive_seed(master, &format!("experiment/cell/{cell}/rep/{rep}"))
}

fn experiment_table(grid: &ExperimentGrid, rows: &[ExperimentRow], cfg: &RunConfig) -> Table {
    let list = |v: &[f64]| v.iter().map(|x| io::fmt_f64(*x)).collect::<Vec<_>>().join(" ");
    let mut t = Table::new(&[
        "cell",
        "rep",
        "seed",
        "rho_gauss",
        "rho_t",
        "d",
        "n_sites",
        "ari",
        "runtime_ms",
        "error",
    ])
    .meta("master_seed", cfg.seed)
    .meta("q", io::fmt_f64(cfg.quantile_q))
    .meta("lambda", io::fmt_f64(cfg.lambda))
    .meta("n_mc", cfg.n_mc)
    .meta("n_restarts", cfg.n_restarts);
    for r in rows {
        let d = &grid.cells[r.cell];
        t.push(vec![
            (r.cell + 1).to_string(),
            (r.rep + 1).to_string(),
            r.seed.to_string(),
            list(&d.rho_gauss),
            list(&d.rho_t),
            d.d.to_string(),
            d.n_sites().to_string(),
            r.ari.map_or_else(|| "NA".into(), io::fmt_f64),
            r.runtime_ms.to_string(),
            r.error.clone().unwrap_or_default(),
        ]);
    }
    t
}

/// Run every replicate of every cell and write `experiment.csv`.
/// Replicate failures are recorded in their row.
pub fn cmd_experiment(cfg: &RunConfig, grid: &ExperimentGrid) -> Result<Vec<ExperimentRow>> {
    cfg.validate()?;
    cfg.prepare_output()?;
    if grid.reps == 0 || grid.cells.is_empty() {
        return Err(Error::InvalidArgument("experiment needs cells and replicates".into()));
    }
    for d in &grid.cells {
        d.validate()?;
    }
    let mut rows = Vec::new();
    for (c, cell) in grid.cells.iter().enumerate() {
        for r in 0..grid.reps {
            let seed = replicate_seed(cfg.seed, c, r);
            let design = MixtureDesign { seed, ..cell.clone() };
            let start = Instant::now();
            let outcome = run_replicate(&design, cfg);
            rows.push(ExperimentRow {
                cell: c,
                rep: r,
                seed,
                ari: outcome.as_ref().ok().map(|o| o.ari),
                runtime_ms: start.elapsed().as_millis(),
                error: outcome.err().map(|e| e.to_string()),
            });
        }
    }
    experiment_table(grid, &rows, cfg).write(&cfg.path("experiment.csv"))?;
    cfg.log(&format!("experiment: {} rows", rows.len()))?;
    Ok(rows)
}
