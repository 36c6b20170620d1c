use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tailclust::dissim::{DissimMatrix, MatrixSource};
use tailclust::io::{self, MatrixMeta, Table};
use tempfile::TempDir;

fn tailclust(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tailclust"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = tailclust(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Deterministic pseudo-random value in (0, 1).
fn hash01(a: u64, b: u64) -> f64 {
    let mut x = a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 29;
    ((x >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// Long-form CSV: `sites × n` rows per variable, with `value(site, var, t)`.
fn write_panel(path: &Path, sites: &[&str], vars: &[&str], n: usize, value: impl Fn(usize, usize, usize) -> f64) {
    let mut text = String::from("site_id,time_index,variable_name,value\n");
    for (si, site) in sites.iter().enumerate() {
        for t in 0..n {
            for (vi, var) in vars.iter().enumerate() {
                text.push_str(&format!("{site},{t},{var},{}\n", value(si, vi, t)));
            }
        }
    }
    fs::write(path, text).unwrap();
}

/// Two dependent variables: a shared component plus noise.
fn dependent(si: usize, vi: usize, t: usize) -> f64 {
    let common = -hash01(si as u64, t as u64).ln();
    common + 0.5 * hash01(1000 + si as u64 * 7 + vi as u64, t as u64)
}

fn rows(path: &Path) -> Table {
    Table::read(path).unwrap()
}

fn read_matrix(path: &Path) -> DissimMatrix {
    io::matrix_from_table(&rows(path)).unwrap().0
}

#[test]
fn fit_toy_panel_gives_one_record_per_site_and_variable() {
    let dir = TempDir::new().unwrap();
    let panel = dir.path().join("toy.csv");
    write_panel(&panel, &["a", "b"], &["x", "y"], 200, dependent);
    let out = dir.path().join("out");
    ok(&["fit", "--input", s(&panel), "--output", s(&out)]);
    let fits = io::fits_from_table(&rows(&out.join("fits.csv"))).unwrap();
    assert_eq!(fits.len(), 4);
    assert!(rows(&out.join("fit_failures.csv")).rows.is_empty());
}

#[test]
fn constant_column_is_a_data_error_naming_the_series() {
    let dir = TempDir::new().unwrap();
    let panel = dir.path().join("const.csv");
    write_panel(&panel, &["a", "b"], &["x", "y"], 200, |si, vi, t| {
        if si == 1 && vi == 0 {
            3.0
        } else {
            dependent(si, vi, t)
        }
    });
    let out = tailclust(&["fit", "--input", s(&panel), "--output", s(&dir.path().join("out"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`b`") && err.contains("`x`"), "{err}");
}

#[test]
fn malformed_input_reports_line_number() {
    let dir = TempDir::new().unwrap();
    let panel = dir.path().join("bad.csv");
    fs::write(&panel, "site_id,time_index,variable_name,value\na,0,x,1\na,1,x,zz\n").unwrap();
    let out = tailclust(&["fit", "--input", s(&panel), "--output", s(&dir.path().join("out"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(tailclust(&["no-such-verb"]).status.code(), Some(1));
    assert_eq!(tailclust(&["fit", "--q", "0.4"]).status.code(), Some(1));
    assert_eq!(tailclust(&["cluster"]).status.code(), Some(1));
    assert_eq!(tailclust(&["--help"]).status.code(), Some(0));
}

#[test]
fn simulate_fit_dissim_on_two_cluster_design() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    ok(&["simulate", "--seed", "11", "--output", s(&out)]);
    let labels = io::labels_from_table(&rows(&out.join("labels.csv"))).unwrap().1;
    assert_eq!(labels, [1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2]);
    let panel = out.join("panel.csv");
    ok(&["fit", "--input", s(&panel), "--output", s(&out)]);
    assert_eq!(io::fits_from_table(&rows(&out.join("fits.csv"))).unwrap().len(), 24);
    ok(&["dissim", "--input", s(&panel), "--output", s(&out), "--n-mc", "500"]);
    for name in ["matrix_cond1.csv", "matrix_cond2.csv", "matrix_aggregated.csv"] {
        let m = read_matrix(&out.join(name));
        assert_eq!(m.n_sites(), 12);
        assert_eq!(m.values, m.values.transpose());
    }

    // a fits table from another panel is refused
    let other = dir.path().join("other");
    ok(&["simulate", "--seed", "12", "--output", s(&other)]);
    let out2 = tailclust(&[
        "dissim",
        "--input",
        s(&other.join("panel.csv")),
        "--fits",
        s(&out.join("fits.csv")),
        "--output",
        s(&other),
    ]);
    assert_eq!(out2.status.code(), Some(2));
}

#[test]
fn duplicated_site_is_closer_than_typical() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    ok(&["simulate", "--seed", "5", "--output", s(&out)]);
    // site 2 becomes a copy of site 1
    let mut t = rows(&out.join("panel.csv"));
    let firsts: Vec<Vec<String>> = t.rows.iter().filter(|r| r[0] == "s01").cloned().collect();
    t.rows.retain(|r| r[0] != "s02");
    for mut r in firsts {
        r[0] = "s02".into();
        t.rows.push(r);
    }
    let panel = dir.path().join("dup.csv");
    t.write(&panel).unwrap();
    ok(&["fit", "--input", s(&panel), "--output", s(&out)]);
    ok(&["dissim", "--input", s(&panel), "--output", s(&out), "--n-mc", "500"]);
    let m = read_matrix(&out.join("matrix_aggregated.csv"));
    let a = m.site_ids.iter().position(|x| x == "s01").unwrap();
    let b = m.site_ids.iter().position(|x| x == "s02").unwrap();
    let mut off: Vec<f64> = (0..12)
        .flat_map(|i| ((i + 1)..12).map(move |j| (i, j)))
        .map(|(i, j)| m.get(i, j))
        .collect();
    off.sort_by(f64::total_cmp);
    let median = off[off.len() / 2];
    assert!(m.get(a, b) < median, "{} vs median {median}", m.get(a, b));
}

#[test]
fn single_site_gives_zero_matrices() {
    let dir = TempDir::new().unwrap();
    let panel = dir.path().join("one.csv");
    write_panel(&panel, &["only"], &["x", "y"], 300, dependent);
    let out = dir.path().join("out");
    ok(&["fit", "--input", s(&panel), "--output", s(&out)]);
    ok(&["dissim", "--input", s(&panel), "--output", s(&out), "--n-mc", "100"]);
    for name in ["matrix_cond1.csv", "matrix_cond2.csv", "matrix_aggregated.csv"] {
        let m = read_matrix(&out.join(name));
        assert_eq!(m.n_sites(), 1);
        assert_eq!(m.get(0, 0), 0.0);
    }
}

fn write_block_matrix(path: &Path, sizes: &[usize]) {
    let labels: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    let d = labels.len();
    let values = nalgebra::DMatrix::from_fn(d, d, |a, b| {
        if a == b {
            0.0
        } else if labels[a] == labels[b] {
            0.01
        } else {
            1.0
        }
    });
    let meta = MatrixMeta {
        q: 0.85,
        lambda: 0.5,
        n_mc: 1,
        seed: 0,
        y_caps: vec![4.0],
        components: vec![],
    };
    let fp = tailclust::dissim::config_fingerprint(0.85, 0.5, 1, 0, 4.0);
    let m = DissimMatrix::new(
        values,
        (0..d).map(|i| format!("b{i}")).collect(),
        MatrixSource::CondVar(0),
        fp,
    )
    .unwrap();
    io::matrix_table(&m, &meta).write(path).unwrap();
}

#[test]
fn cluster_block_matrix() {
    let dir = TempDir::new().unwrap();
    let matrix = dir.path().join("block.csv");
    write_block_matrix(&matrix, &[3, 4]);
    let out = dir.path().join("out");
    ok(&["cluster", "--matrix", s(&matrix), "--k", "2", "--output", s(&out)]);
    let t = rows(&out.join("clustering.csv"));
    assert_eq!(io::labels_from_table(&t).unwrap().1, [1, 1, 1, 2, 2, 2, 2]);
    let twgss: f64 = t.get_meta("twgss").unwrap().parse().unwrap();
    assert!((twgss - 0.05).abs() < 1e-12);

    ok(&["cluster", "--matrix", s(&matrix), "--k", "7", "--output", s(&out)]);
    let t = rows(&out.join("clustering.csv"));
    assert_eq!(io::labels_from_table(&t).unwrap().1, [1, 2, 3, 4, 5, 6, 7]);

    write_block_matrix(&matrix, &[4, 4, 4]);
    let stdout = ok(&[
        "elbow",
        "--matrix",
        s(&matrix),
        "--k-range",
        "1..6",
        "--output",
        s(&out),
    ])
    .stdout;
    assert!(String::from_utf8_lossy(&stdout).contains("suggested elbow: 3"));
    assert_eq!(rows(&out.join("elbow.csv")).rows.len(), 6);

    // tampering with the settings breaks the fingerprint
    let text = fs::read_to_string(&matrix).unwrap().replace("# q=0.85", "# q=0.9");
    fs::write(&matrix, text).unwrap();
    let bad = tailclust(&["cluster", "--matrix", s(&matrix), "--k", "2", "--output", s(&out)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn chi_tables() {
    let dir = TempDir::new().unwrap();
    let panel = dir.path().join("como.csv");
    write_panel(&panel, &["a", "b"], &["x", "y"], 200, |si, vi, t| {
        let v = hash01(si as u64, t as u64);
        if vi == 0 {
            v
        } else {
            v.exp()
        }
    });
    let out = dir.path().join("out");
    ok(&["chi", "--input", s(&panel), "--output", s(&out)]);
    let t = rows(&out.join("chi.csv"));
    assert!(t.rows.iter().all(|r| r[1] == "1.0" && r[2] == "true"), "{:?}", t.rows);

    ok(&["chi", "--input", s(&panel), "--chi-u", "0.999", "--output", s(&out)]);
    let t = rows(&out.join("chi.csv"));
    assert!(t.rows.iter().all(|r| r[1] == "NA" && r[2] == "false"), "{:?}", t.rows);
}

fn experiment_grid(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("grid.toml");
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn experiment_counts_rows() {
    let dir = TempDir::new().unwrap();
    let grid = experiment_grid(
        dir.path(),
        r#"
reps = 3

[[cells]]
n = 200
d = 2
cluster_sizes = [2, 2]
rho_gauss = [0.5, 0.5]
rho_t = [0.9, 0.1]

[[cells]]
n = 200
d = 2
cluster_sizes = [2, 2]
rho_gauss = [0.5, 0.5]
rho_t = [0.5, 0.5]
"#,
    );
    let out = dir.path().join("out");
    ok(&[
        "experiment",
        "--grid",
        s(&grid),
        "--seed",
        "3",
        "--n-mc",
        "200",
        "--n-restarts",
        "5",
        "--output",
        s(&out),
    ]);
    let t = rows(&out.join("experiment.csv"));
    assert_eq!(t.rows.len(), 6);
    let seeds: std::collections::HashSet<&String> = t.rows.iter().map(|r| &r[2]).collect();
    assert_eq!(seeds.len(), 6);
}

#[test]
fn experiment_separable_cell_scores_one() {
    let dir = TempDir::new().unwrap();
    let grid = experiment_grid(
        dir.path(),
        r#"
reps = 1

[[cells]]
n = 1000
d = 2
cluster_sizes = [6, 6]
rho_gauss = [0.5, 0.5]
rho_t = [0.9, 0.1]
"#,
    );
    let out = dir.path().join("out");
    ok(&[
        "experiment",
        "--grid",
        s(&grid),
        "--seed",
        "1",
        "--n-mc",
        "2000",
        "--output",
        s(&out),
    ]);
    let t = rows(&out.join("experiment.csv"));
    assert_eq!(t.rows[0][7], "1.0", "{:?}", t.rows);
}

#[test]
fn config_file_with_flag_override() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        format!(
            r#"
output = "{}"
seed = 4
quantile_q = 0.9
n_mc = 300

[design]
n = 400
d = 2
cluster_sizes = [3, 3]
rho_gauss = [0.5, 0.5]
rho_t = [0.9, 0.1]
"#,
            s(&out)
        ),
    )
    .unwrap();
    ok(&["--config", s(&cfg), "pipeline", "--k", "2", "--q", "0.8"]);
    let fits = rows(&out.join("fits.csv"));
    assert_eq!(fits.get_meta("q"), Some("0.8"));
    assert_eq!(
        io::labels_from_table(&rows(&out.join("clustering.csv")))
            .unwrap()
            .1
            .len(),
        6
    );

    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    assert_eq!(tailclust(&["--config", s(&cfg), "fit"]).status.code(), Some(1));
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "log.txt")
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn pipeline_is_byte_identical_across_runs_and_thread_counts() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        ok(&[
            "pipeline",
            "--seed",
            "21",
            "--n-mc",
            "1000",
            "--k-range",
            "1..5",
            "--threads",
            threads,
            "--output",
            s(&out),
        ]);
        dir_contents(&out)
    };
    let a = run("a", "1");
    let b = run("b", "1");
    let c = run("c", "2");
    assert!(a.iter().any(|(n, _)| n == "clustering.csv"));
    assert!(a.iter().any(|(n, _)| n == "elbow.csv"));
    assert_eq!(a, b);
    assert_eq!(a, c);
}
