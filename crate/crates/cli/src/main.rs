//! `tailclust` command-line interface.
//!
//! Settings come from an optional TOML file (`--config`) whose top-level keys
//! mirror the run settings; command-line flags override it. An
//! `[experiment]` table in the same file holds the experiment grid.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tailclust::copulas::{CopulaFamily, MixtureDesign};
use tailclust::io::Table;
use tailclust::pipeline::{self, ExperimentGrid, RunConfig};
use tailclust::Error;

#[derive(Parser, Debug)]
#[command(name = "tailclust", version, about = "Clustering of multivariate tail dependence")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(flatten)]
    run: RunFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct RunFlags {
    /// Long-form panel CSV.
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Conditioning quantile level q in (0.5, 1).
    #[arg(long = "q", global = true)]
    quantile_q: Option<f64>,
    /// Geometric-mean skew λ in [0, 1].
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Monte Carlo draws per site pair.
    #[arg(long, global = true)]
    n_mc: Option<usize>,
    /// Level of the pooled quantile that truncates the exceedance integral.
    #[arg(long, global = true)]
    y_cap_quantile: Option<f64>,
    /// Number of clusters.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Range such as `1..8` (inclusive) or a list `2,3,4`.
    #[arg(long, global = true, value_parser = parse_k_range)]
    k_range: Option<KRange>,
    /// PAM random restarts.
    #[arg(long, global = true)]
    n_restarts: Option<usize>,
    /// PAM iteration cap per restart.
    #[arg(long, global = true)]
    max_iter: Option<usize>,
    /// Bootstrap replicates.
    #[arg(long, global = true)]
    bootstrap: Option<usize>,
    /// Comma-separated quantile levels for the stability check.
    #[arg(long, global = true, value_delimiter = ',')]
    q_grid: Option<Vec<f64>>,
    /// Uniform-scale level u of the χ(u) estimate.
    #[arg(long, global = true)]
    chi_u: Option<f64>,
    /// 1-based variable pair, e.g. `1,2`.
    #[arg(long, global = true, value_delimiter = ',', num_args = 2)]
    chi_vars: Option<Vec<usize>>,
    /// Master seed for simulation, Monte Carlo and restarts.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct DesignFlags {
    /// Sites per cluster, e.g. `6,6`.
    #[arg(long, value_delimiter = ',')]
    cluster_sizes: Option<Vec<usize>>,
    /// Gaussian-copula correlation per cluster (one value is broadcast).
    #[arg(long, value_delimiter = ',')]
    rho_gauss: Option<Vec<f64>>,
    /// t-copula correlation per cluster (one value is broadcast).
    #[arg(long, value_delimiter = ',')]
    rho_t: Option<Vec<f64>>,
    /// Variables per site.
    #[arg(long)]
    d: Option<usize>,
    /// Observations per site.
    #[arg(long)]
    n: Option<usize>,
    /// Degrees of freedom of the t copula.
    #[arg(long)]
    t_dof: Option<f64>,
    /// Half-width of the per-site uniform perturbation of the t correlation.
    #[arg(long)]
    perturb: Option<f64>,
    /// `mixture` or `gaussian`.
    #[arg(long)]
    family: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a design; writes panel.csv and labels.csv.
    Simulate(DesignFlags),
    /// Fit every (site, conditioning variable); writes fits.csv.
    Fit,
    /// Bootstrap threshold-stability table; writes stability.csv.
    Stability,
    /// Dissimilarity matrices from a panel and its fits.
    Dissim {
        /// Fits table (default: <output>/fits.csv).
        #[arg(long)]
        fits: Option<PathBuf>,
    },
    /// PAM clustering of a matrix, with an elbow curve if a k range is given.
    Cluster {
        /// Matrix file (default: <output>/matrix_aggregated.csv).
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// TWGSS over a range of k with a suggested elbow.
    Elbow {
        /// Matrix file (default: <output>/matrix_aggregated.csv).
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// Per-site empirical χ(u).
    Chi,
    /// Replicated simulation experiment scored by ARI.
    Experiment {
        /// TOML file with `reps` and `[[cells]]` (default: `[experiment]` of the config).
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Fit, dissimilarity and clustering in one run.
    Pipeline(DesignFlags),
}

#[derive(Debug, Clone)]
struct KRange(Vec<usize>);

fn parse_k_range(s: &str) -> Result<KRange, String> {
    let bad = || format!("`{s}` is not a k range (use `1..8` or `2,3,4`)");
    if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim_start_matches('=').trim().parse().map_err(|_| bad())?;
        if a == 0 || a > b {
            return Err(bad());
        }
        return Ok(KRange((a..=b).collect()));
    }
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| bad()))
        .collect::<Result<_, _>>()
        .map(KRange)
}

enum Failure {
    Usage(String),
    Run(Error),
    /// Already reported; exit with this code.
    Exit(u8),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn read_config(path: Option<&Path>) -> Result<(RunConfig, Option<ExperimentGrid>), Failure> {
    let Some(path) = path else {
        return Ok((RunConfig::default(), None));
    };
    let text =
        std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let grid = match table.remove("experiment") {
        Some(v) => Some(
            v.try_into::<ExperimentGrid>()
                .map_err(|e| Failure::Usage(format!("{}: [experiment]: {e}", path.display())))?,
        ),
        None => None,
    };
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    Ok((cfg, grid))
}

fn apply_flags(cfg: &mut RunConfig, f: RunFlags) -> Result<(), Failure> {
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = f.$field { cfg.$field = v; })*
        };
    }
    set!(
        output,
        quantile_q,
        lambda,
        n_mc,
        y_cap_quantile,
        n_restarts,
        max_iter,
        bootstrap,
        q_grid,
        chi_u,
        seed
    );
    if let Some(p) = f.input {
        cfg.input = Some(p);
    }
    if let Some(k) = f.k {
        cfg.k = Some(k);
    }
    if let Some(r) = f.k_range {
        cfg.k_range = Some(r.0);
    }
    if let Some(v) = f.chi_vars {
        cfg.chi_vars = [v[0], v[1]];
    }
    Ok(())
}

/// Design from the config's `[design]` table, overridden by flags. Without
/// either, the default two-cluster design.
fn design(cfg: &RunConfig, f: DesignFlags) -> Result<MixtureDesign, Failure> {
    let mut d = match &cfg.design {
        Some(d) => d.clone(),
        None => MixtureDesign::two_cluster(0.5, 0.9, 0.1, 2, cfg.seed),
    };
    if let Some(v) = f.cluster_sizes {
        d.cluster_sizes = v;
    }
    let k = d.cluster_sizes.len();
    let broadcast = |v: Vec<f64>| if v.len() == 1 { vec![v[0]; k] } else { v };
    if let Some(v) = f.rho_gauss {
        d.rho_gauss = broadcast(v);
    }
    if let Some(v) = f.rho_t {
        d.rho_t = broadcast(v);
    }
    if let Some(v) = f.d {
        d.d = v;
    }
    if let Some(v) = f.n {
        d.n = v;
    }
    if let Some(v) = f.t_dof {
        d.t_dof = v;
    }
    if let Some(v) = f.perturb {
        d.perturb_halfwidth = v;
    }
    if let Some(v) = f.family {
        d.family = match v.as_str() {
            "mixture" => CopulaFamily::Mixture,
            "gaussian" => CopulaFamily::Gaussian,
            other => return Err(Failure::Usage(format!("unknown copula family `{other}`"))),
        };
    }
    d.seed = cfg.seed;
    Ok(d)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let (mut cfg, file_grid) = read_config(cli.config.as_deref())?;
    apply_flags(&mut cfg, cli.run)?;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    match cli.command {
        Command::Simulate(f) => {
            let d = design(&cfg, f)?;
            pipeline::cmd_simulate(&cfg, &d)?;
        }
        Command::Fit => {
            let panel = cfg.load_panel()?;
            let report = pipeline::cmd_fit(&cfg, &panel)?;
            println!("{} fits, {} failures", report.fits.len(), report.failures.len());
            if !report.failures.is_empty() {
                for f in &report.failures {
                    eprintln!(
                        "fit failed: site `{}`, conditioning variable {}: {}",
                        f.site,
                        f.cond_var + 1,
                        f.error
                    );
                }
                let numerical = report.failures.iter().all(|f| f.numerical);
                return Err(Failure::Exit(if numerical { 3 } else { 2 }));
            }
        }
        Command::Stability => {
            let panel = cfg.load_panel()?;
            pipeline::cmd_stability(&cfg, &panel)?;
        }
        Command::Dissim { fits } => {
            let panel = cfg.load_panel()?;
            let path = fits.unwrap_or_else(|| cfg.output.join("fits.csv"));
            let fits = pipeline::check_fits(&Table::read(&path)?, &panel)?;
            pipeline::cmd_dissim(&cfg, &panel, &fits)?;
        }
        Command::Cluster { matrix } => {
            if cfg.k.is_none() && cfg.k_range.is_none() {
                return Err(Failure::Usage("cluster needs --k or --k-range".into()));
            }
            let path = matrix.unwrap_or_else(|| cfg.output.join("matrix_aggregated.csv"));
            let m = pipeline::read_matrix(&path)?;
            let (c, curve) = pipeline::cmd_cluster(&cfg, &m)?;
            if let Some(curve) = curve {
                println!(
                    "suggested elbow: {}",
                    curve.suggested.map_or("none".into(), |k| k.to_string())
                );
            }
            if let Some(c) = c {
                println!("k = {}, twgss = {}", c.k, c.twgss);
            }
        }
        Command::Elbow { matrix } => {
            let path = matrix.unwrap_or_else(|| cfg.output.join("matrix_aggregated.csv"));
            let m = pipeline::read_matrix(&path)?;
            let curve = pipeline::cmd_elbow(&cfg, &m)?;
            println!(
                "suggested elbow: {}",
                curve.suggested.map_or("none".into(), |k| k.to_string())
            );
        }
        Command::Chi => {
            let panel = cfg.load_panel()?;
            pipeline::cmd_chi(&cfg, &panel)?;
        }
        Command::Experiment { grid } => {
            let grid = match grid {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?;
                    toml::from_str::<ExperimentGrid>(&text)
                        .map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
                }
                None => file_grid
                    .ok_or_else(|| Failure::Usage("experiment needs --grid or an [experiment] table".into()))?,
            };
            let rows = pipeline::cmd_experiment(&cfg, &grid)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!("{} replicates, {} failed", rows.len(), failed);
        }
        Command::Pipeline(f) => {
            let panel = match &cfg.input {
                Some(_) => cfg.load_panel()?,
                None => pipeline::cmd_simulate(&cfg, &design(&cfg, f)?)?.panel,
            };
            let (_, _, c) = pipeline::cmd_pipeline(&cfg, &panel)?;
            if let Some(c) = c {
                println!("k = {}, twgss = {}", c.k, c.twgss);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
        Err(Failure::Exit(code)) => ExitCode::from(code),
    }
}
