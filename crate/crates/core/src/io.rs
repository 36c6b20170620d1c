//! Delimited-text artifacts.
//!
//! Every file is UTF-8 CSV preceded by a metadata block of `# key=value`
//! lines. Floats are written in shortest round-trip form so a table read
//! back reproduces the values bit for bit.
//!
//! | file | columns |
//! |------|---------|
//! | panel | `site_id,time_index,variable_name,value` |
//! | labels | `site_id,label` |
//! | fits | `site_id,cond_var,cond_name,q,threshold_u,n_exceed,nll,alpha,beta,mu,sigma` |
//! | fit failures | `site_id,cond_var,cond_name,error` |
//! | matrix | `site_id,<site ids…>` |
//! | clustering | `site_id,label` |
//! | elbow | `k,twgss` |
//! | chi | `site_id,chi,defined` |
//! | stability | `site_id,cond_var,q,replicate,component,alpha,beta,error` |
//!
//! In the fits table `cond_var` is 1-based and vector fields are
//! space-separated; `sigma` is the row-major flattening of Σ.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::ce_fit::{CeFit, Replicate, StabilityTable};
use crate::cluster::{Clustering, ElbowCurve};
use crate::dissim::{aggregate_fingerprint, config_fingerprint, DissimMatrix, MatrixSource};
use crate::error::{Error, Result};
use crate::margins::{Margins, PanelData};

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn parse_f64(s: &str, line: usize, what: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("`{s}` is not a number ({what})"),
    })
}

fn parse_usize(s: &str, line: usize, what: &str) -> Result<usize> {
    s.trim().parse::<usize>().map_err(|_| Error::Parse {
        line,
        message: format!("`{s}` is not a non-negative integer ({what})"),
    })
}

fn parse_list(s: &str, line: usize, what: &str) -> Result<Vec<f64>> {
    s.split_whitespace().map(|v| parse_f64(v, line, what)).collect()
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(" ")
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A metadata block, a header and string rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub meta: Vec<(String, String)>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// 1-based line number of each row in the source file.
    pub lines: Vec<usize>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        }
    }

    pub fn meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.into(), value.to_string()));
        self
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn get_meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.get_meta(key).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing metadata `{key}`"),
        })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.header.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            line: self.meta.len() + 1,
            message: format!("missing column `{name}`"),
        })
    }

    fn line(&self, row: usize) -> usize {
        self.lines.get(row).copied().unwrap_or(0)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut out = String::new();
        for (k, v) in &self.meta {
            out.push_str(&format!("# {k}={v}\n"));
        }
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(&self.header).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        out.push_str(&String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))?);
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Table> {
        let mut meta = Vec::new();
        let mut body_start = 0;
        let mut n_meta_lines = 0;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim_end_matches(['\r', '\n']);
            let Some(rest) = trimmed.strip_prefix('#') else {
                break;
            };
            n_meta_lines += 1;
            body_start += line.len();
            if let Some((k, v)) = rest.trim().split_once('=') {
                meta.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .comment(Some(b'#'))
            .from_reader(&text.as_bytes()[body_start..]);
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| parse_err(e, n_meta_lines))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        if header.iter().all(|h| h.is_empty()) {
            return Err(Error::Parse {
                line: n_meta_lines + 1,
                message: "missing header row".into(),
            });
        }
        let mut rows = Vec::new();
        let mut lines = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| parse_err(e, n_meta_lines))?;
            let line = n_meta_lines + rec.position().map_or(0, |p| p.line() as usize);
            if rec.len() != header.len() {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {} fields, found {}", header.len(), rec.len()),
                });
            }
            rows.push(rec.iter().map(|f| f.to_string()).collect());
            lines.push(line);
        }
        Ok(Table {
            meta,
            header,
            rows,
            lines,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()?).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Table> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Table::parse(&text)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

fn parse_err(e: csv::Error, offset: usize) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize) + offset;
    match e.kind() {
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => Error::Parse {
            line,
            message: format!("expected {expected_len} fields, found {len}"),
        },
        _ => Error::Parse {
            line,
            message: e.to_string(),
        },
    }
}

/// Content hash of a panel.
pub fn panel_fingerprint(panel: &PanelData) -> String {
    let mut h = Sha256::new();
    h.update(panel.margins().as_str().as_bytes());
    for id in panel.site_ids().iter().chain(panel.variable_names()) {
        h.update((id.len() as u64).to_le_bytes());
        h.update(id.as_bytes());
    }
    for s in 0..panel.n_sites() {
        for i in 0..panel.n_vars() {
            for v in panel.series(s, i) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
    }
    hex(&h.finalize()[..8])
}

pub fn panel_table(panel: &PanelData) -> Table {
    let mut t =
        Table::new(&["site_id", "time_index", "variable_name", "value"]).meta("margins", panel.margins().as_str());
    for (s, site) in panel.site_ids().iter().enumerate() {
        for time in 0..panel.n_times() {
            for (i, var) in panel.variable_names().iter().enumerate() {
                t.push(vec![
                    site.clone(),
                    time.to_string(),
                    var.clone(),
                    fmt_f64(panel.series(s, i)[time]),
                ]);
            }
        }
    }
    t
}

/// Long-form panel. Sites and variables keep their order of first
/// appearance; every site must carry the same time indices for every
/// variable.
pub fn panel_from_table(t: &Table) -> Result<PanelData> {
    let margins = match t.get_meta("margins") {
        Some(m) => Margins::parse(m)?,
        None => Margins::Raw,
    };
    let (c_site, c_time, c_var, c_val) = (
        t.column("site_id")?,
        t.column("time_index")?,
        t.column("variable_name")?,
        t.column("value")?,
    );
    let mut sites: Vec<String> = Vec::new();
    let mut vars: Vec<String> = Vec::new();
    let mut site_pos = HashMap::new();
    let mut var_pos = HashMap::new();
    let mut cells: HashMap<(usize, usize, usize), f64> = HashMap::new();
    let mut times = std::collections::BTreeSet::new();
    for (r, row) in t.rows.iter().enumerate() {
        let line = t.line(r);
        let site = row[c_site].trim();
        let var = row[c_var].trim();
        if site.is_empty() || var.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty site or variable name".into(),
            });
        }
        let time = parse_usize(&row[c_time], line, "time_index")?;
        let value = parse_f64(&row[c_val], line, "value")?;
        if !value.is_finite() {
            return Err(Error::Parse {
                line,
                message: format!("non-finite value at site `{site}`, time {time}, variable `{var}`"),
            });
        }
        let s = *site_pos.entry(site.to_string()).or_insert_with(|| {
            sites.push(site.to_string());
            sites.len() - 1
        });
        let i = *var_pos.entry(var.to_string()).or_insert_with(|| {
            vars.push(var.to_string());
            vars.len() - 1
        });
        times.insert(time);
        if cells.insert((s, i, time), value).is_some() {
            return Err(Error::Parse {
                line,
                message: format!("duplicate cell: site `{site}`, time {time}, variable `{var}`"),
            });
        }
    }
    if sites.is_empty() {
        return Err(Error::Parse {
            line: t.meta.len() + 1,
            message: "panel has no rows".into(),
        });
    }
    let times: Vec<usize> = times.into_iter().collect();
    let mut series = Vec::with_capacity(sites.len());
    for (s, site) in sites.iter().enumerate() {
        let mut per_var = Vec::with_capacity(vars.len());
        for (i, var) in vars.iter().enumerate() {
            let mut v = Vec::with_capacity(times.len());
            for &time in &times {
                let x = cells.get(&(s, i, time)).ok_or_else(|| Error::Parse {
                    line: 0,
                    message: format!("missing cell: site `{site}`, time {time}, variable `{var}`"),
                })?;
                v.push(*x);
            }
            per_var.push(v);
        }
        series.push(per_var);
    }
    PanelData::from_series(sites, vars, series, margins)
}

pub fn write_panel(panel: &PanelData, path: &Path) -> Result<()> {
    panel_table(panel).write(path)
}

pub fn read_panel(path: &Path) -> Result<PanelData> {
    panel_from_table(&Table::read(path)?)
}

/// `site_id,label` pairs, as written for ground truth and clusterings.
pub fn labels_table(site_ids: &[String], labels: &[usize]) -> Table {
    let mut t = Table::new(&["site_id", "label"]);
    for (s, l) in site_ids.iter().zip(labels) {
        t.push(vec![s.clone(), l.to_string()]);
    }
    t
}

pub fn labels_from_table(t: &Table) -> Result<(Vec<String>, Vec<usize>)> {
    let (cs, cl) = (t.column("site_id")?, t.column("label")?);
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for (r, row) in t.rows.iter().enumerate() {
        ids.push(row[cs].trim().to_string());
        labels.push(parse_usize(&row[cl], t.line(r), "label")?);
    }
    Ok((ids, labels))
}

/// A fit that failed, kept for the failures table.
#[derive(Debug, Clone, PartialEq)]
pub struct FitFailure {
    pub site: String,
    pub cond_var: usize,
    pub error: String,
    /// Whether the failure was numerical rather than a data problem.
    pub numerical: bool,
}

const FIT_COLUMNS: [&str; 11] = [
    "site_id",
    "cond_var",
    "cond_name",
    "q",
    "threshold_u",
    "n_exceed",
    "nll",
    "alpha",
    "beta",
    "mu",
    "sigma",
];

pub fn fits_table(fits: &[CeFit], variable_names: &[String], q: f64, panel_fp: &str) -> Table {
    let mut t = Table::new(&FIT_COLUMNS)
        .meta("q", fmt_f64(q))
        .meta("panel_fingerprint", panel_fp)
        .meta("variables", variable_names.join(" "));
    for f in fits {
        let m = f.dim();
        let sigma: Vec<f64> = (0..m)
            .flat_map(|a| (0..m).map(move |b| (a, b)))
            .map(|(a, b)| f.sigma[(a, b)])
            .collect();
        t.push(vec![
            f.site.clone(),
            (f.cond_var + 1).to_string(),
            variable_names.get(f.cond_var).cloned().unwrap_or_default(),
            fmt_f64(f.quantile_q),
            fmt_f64(f.threshold_u),
            f.n_exceed.to_string(),
            fmt_f64(f.nll),
            fmt_list(&f.alpha),
            fmt_list(&f.beta),
            fmt_list(&f.mu),
            fmt_list(&sigma),
        ]);
    }
    t
}

pub fn fits_from_table(t: &Table) -> Result<Vec<CeFit>> {
    let cols: Vec<usize> = FIT_COLUMNS.iter().map(|c| t.column(c)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (r, row) in t.rows.iter().enumerate() {
        let line = t.line(r);
        let f = |k: usize| row[cols[k]].as_str();
        let cond_var = parse_usize(f(1), line, "cond_var")?;
        if cond_var == 0 {
            return Err(Error::Parse {
                line,
                message: "cond_var is 1-based".into(),
            });
        }
        let alpha = parse_list(f(7), line, "alpha")?;
        let beta = parse_list(f(8), line, "beta")?;
        let mu = parse_list(f(9), line, "mu")?;
        let sigma = parse_list(f(10), line, "sigma")?;
        let m = alpha.len();
        if beta.len() != m || mu.len() != m || sigma.len() != m * m || m == 0 {
            return Err(Error::Parse {
                line,
                message: "parameter vectors have inconsistent lengths".into(),
            });
        }
        out.push(CeFit {
            site: f(0).trim().to_string(),
            cond_var: cond_var - 1,
            alpha,
            beta,
            mu,
            sigma: DMatrix::from_row_slice(m, m, &sigma),
            threshold_u: parse_f64(f(4), line, "threshold_u")?,
            quantile_q: parse_f64(f(3), line, "q")?,
            n_exceed: parse_usize(f(5), line, "n_exceed")?,
            nll: parse_f64(f(6), line, "nll")?,
        });
    }
    Ok(out)
}

pub fn fit_failures_table(failures: &[FitFailure], variable_names: &[String]) -> Table {
    let mut t = Table::new(&["site_id", "cond_var", "cond_name", "error"]);
    for f in failures {
        t.push(vec![
            f.site.clone(),
            (f.cond_var + 1).to_string(),
            variable_names.get(f.cond_var).cloned().unwrap_or_default(),
            f.error.clone(),
        ]);
    }
    t
}

/// Settings recorded alongside a matrix so its fingerprint can be checked.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixMeta {
    pub q: f64,
    pub lambda: f64,
    pub n_mc: usize,
    pub seed: u64,
    /// One truncation point per conditioning variable covered.
    pub y_caps: Vec<f64>,
    /// Fingerprints of the per-variable inputs of an aggregated matrix.
    pub components: Vec<String>,
}

pub fn matrix_table(m: &DissimMatrix, meta: &MatrixMeta) -> Table {
    let mut header = vec!["site_id"];
    header.extend(m.site_ids.iter().map(String::as_str));
    let mut t = Table::new(&header)
        .meta("source", m.source.label())
        .meta("fingerprint", &m.fingerprint)
        .meta("q", fmt_f64(meta.q))
        .meta("lambda", fmt_f64(meta.lambda))
        .meta("n_mc", meta.n_mc)
        .meta("seed", meta.seed)
        .meta("y_cap", fmt_list(&meta.y_caps));
    if !meta.components.is_empty() {
        t = t.meta("components", meta.components.join(" "));
    }
    for (s, id) in m.site_ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend((0..m.n_sites()).map(|c| fmt_f64(m.get(s, c))));
        t.push(row);
    }
    t
}

/// Reads a matrix and verifies that its fingerprint matches its metadata.
pub fn matrix_from_table(t: &Table) -> Result<(DissimMatrix, MatrixMeta)> {
    let meta_line = 1;
    let num = |k: &str| -> Result<f64> { parse_f64(t.require_meta(k)?, meta_line, k) };
    let meta = MatrixMeta {
        q: num("q")?,
        lambda: num("lambda")?,
        n_mc: parse_usize(t.require_meta("n_mc")?, meta_line, "n_mc")?,
        seed: t.require_meta("seed")?.parse().map_err(|_| Error::Parse {
            line: meta_line,
            message: "seed is not a 64-bit integer".into(),
        })?,
        y_caps: parse_list(t.require_meta("y_cap")?, meta_line, "y_cap")?,
        components: t
            .get_meta("components")
            .map(|c| c.split_whitespace().map(String::from).collect())
            .unwrap_or_default(),
    };
    let source = MatrixSource::parse(t.require_meta("source")?)?;
    let fingerprint = t.require_meta("fingerprint")?.to_string();
    let expected = match source {
        MatrixSource::CondVar(_) => match meta.y_caps.as_slice() {
            [y_cap] => config_fingerprint(meta.q, meta.lambda, meta.n_mc, meta.seed, *y_cap),
            _ => {
                return Err(Error::Parse {
                    line: meta_line,
                    message: "per-variable matrix needs exactly one y_cap".into(),
                })
            }
        },
        MatrixSource::Aggregated => {
            let parts: Vec<&str> = meta.components.iter().map(String::as_str).collect();
            aggregate_fingerprint(&parts)
        }
    };
    if expected != fingerprint {
        return Err(Error::Contract(format!(
            "matrix fingerprint {fingerprint} does not match its settings ({expected})"
        )));
    }
    let ids: Vec<String> = t.header[1..].iter().map(|s| s.trim().to_string()).collect();
    let d = ids.len();
    if t.rows.len() != d {
        return Err(Error::Parse {
            line: t.line(t.rows.len().saturating_sub(1)),
            message: format!("{} rows for {d} columns", t.rows.len()),
        });
    }
    let mut values = DMatrix::zeros(d, d);
    for (r, row) in t.rows.iter().enumerate() {
        if row[0].trim() != ids[r] {
            return Err(Error::Parse {
                line: t.line(r),
                message: format!("row `{}` does not match column `{}`", row[0], ids[r]),
            });
        }
        for c in 0..d {
            values[(r, c)] = parse_f64(&row[c + 1], t.line(r), "matrix entry")?;
        }
    }
    Ok((DissimMatrix::new(values, ids, source, fingerprint)?, meta))
}

pub fn clustering_table(m: &DissimMatrix, c: &Clustering) -> Table {
    let medoid_ids: Vec<&str> = c.medoids.iter().map(|&p| m.site_ids[p].as_str()).collect();
    let mut t = Table::new(&["site_id", "label"])
        .meta("k", c.k)
        .meta("seed", c.seed)
        .meta("n_restarts", c.n_restarts)
        .meta("twgss", fmt_f64(c.twgss))
        .meta("medoids", medoid_ids.join(" "))
        .meta("converged", c.converged)
        .meta("matrix_fingerprint", &m.fingerprint);
    for (s, l) in m.site_ids.iter().zip(&c.assignments) {
        t.push(vec![s.clone(), l.to_string()]);
    }
    t
}

pub fn elbow_table(m: &DissimMatrix, curve: &ElbowCurve, seed: u64, n_restarts: usize) -> Table {
    let mut t = Table::new(&["k", "twgss"])
        .meta("seed", seed)
        .meta("n_restarts", n_restarts)
        .meta(
            "suggested_elbow",
            curve.suggested.map_or_else(|| "none".to_string(), |k| k.to_string()),
        )
        .meta("matrix_fingerprint", &m.fingerprint);
    for (k, v) in &curve.points {
        t.push(vec![k.to_string(), fmt_f64(*v)]);
    }
    t
}

/// One χ estimate per site; `None` when the level has no exceedances.
pub fn chi_table(site_ids: &[String], chi: &[Option<f64>], u: f64, vars: (&str, &str)) -> Table {
    let mut t = Table::new(&["site_id", "chi", "defined"])
        .meta("u", fmt_f64(u))
        .meta("variables", format!("{} {}", vars.0, vars.1));
    for (s, c) in site_ids.iter().zip(chi) {
        t.push(vec![
            s.clone(),
            c.map_or_else(|| "NA".to_string(), fmt_f64),
            c.is_some().to_string(),
        ]);
    }
    t
}

pub fn stability_table(tables: &[StabilityTable], seed: u64, replicates: usize) -> Table {
    let mut t = Table::new(&[
        "site_id",
        "cond_var",
        "q",
        "replicate",
        "component",
        "alpha",
        "beta",
        "error",
    ])
    .meta("seed", seed)
    .meta("bootstrap", replicates);
    for st in tables {
        for row in &st.rows {
            let rep = match row.replicate {
                Replicate::Full => "full".to_string(),
                Replicate::Bootstrap(b) => b.to_string(),
            };
            let base = vec![st.site.clone(), (st.cond_var + 1).to_string(), fmt_f64(row.q), rep];
            match &row.estimates {
                Ok((alpha, beta)) => {
                    for (j, (a, b)) in alpha.iter().zip(beta).enumerate() {
                        let mut r = base.clone();
                        r.extend([(j + 1).to_string(), fmt_f64(*a), fmt_f64(*b), String::new()]);
                        t.push(r);
                    }
                }
                Err(e) => {
                    let mut r = base;
                    r.extend([String::new(), String::new(), String::new(), e.clone()]);
                    t.push(r);
                }
            }
        }
    }
    t
}
