mod common;

use common::{expected_jsg_quadrature_1d, jsg_quadrature_1d, jsg_quadrature_2d, kl_1d, Gauss1, Gauss2};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use tailclust::ce_fit::CeFit;
use tailclust::dissim::build_matrix;
use tailclust::divergence::{expected_jsg_estimate, jsg_mvn, kl_mvn, DivergenceConfig, MvnParams};
use tailclust::margins::laplace_quantile;
use tailclust::rng::{substream, StreamRng};

fn random_1d(rng: &mut StreamRng) -> Gauss1 {
    Gauss1 {
        mean: rng.random_range(-2.0..2.0),
        var: rng.random_range(0.3f64..2.0).powi(2),
    }
}

fn random_2d(rng: &mut StreamRng) -> Gauss2 {
    let (s1, s2) = (rng.random_range(0.4..1.6), rng.random_range(0.4..1.6));
    let r: f64 = rng.random_range(-0.7..0.7);
    Gauss2 {
        mean: [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)],
        cov: [s1 * s1, r * s1 * s2, s2 * s2],
    }
}

fn mvn1(g: Gauss1) -> MvnParams {
    MvnParams::univariate(g.mean, g.var).unwrap()
}

fn mvn2(g: Gauss2) -> MvnParams {
    let [a, b, c] = g.cov;
    MvnParams::new(
        DVector::from_row_slice(&g.mean),
        DMatrix::from_row_slice(2, 2, &[a, b, b, c]),
    )
    .unwrap()
}

fn random_mvn(rng: &mut StreamRng, m: usize) -> MvnParams {
    let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
    let cov = &a * a.transpose() + DMatrix::identity(m, m) * 0.2;
    let cov = (&cov + cov.transpose()) * 0.5;
    MvnParams::new(DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0)), cov).unwrap()
}

#[test]
fn quadrature_integrates_a_gaussian_kernel() {
    let v = common::integrate(&mut |x: f64| (-x * x).exp(), -10.0, 10.0, 1e-14);
    assert!((v - std::f64::consts::PI.sqrt()).abs() < 1e-13);
}

#[test]
fn closed_form_matches_quadrature_in_1d() {
    let mut rng = substream(2, "jsg-1d");
    for _ in 0..20 {
        let (h, hs) = (random_1d(&mut rng), random_1d(&mut rng));
        let lambda = rng.random_range(0.05..0.95);
        let got = jsg_mvn(&mvn1(h), &mvn1(hs), lambda).unwrap();
        let want = jsg_quadrature_1d(h, hs, lambda);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn closed_form_matches_quadrature_in_2d() {
    let mut rng = substream(3, "jsg-2d");
    for _ in 0..5 {
        let (h, hs) = (random_2d(&mut rng), random_2d(&mut rng));
        let lambda = rng.random_range(0.05..0.95);
        let got = jsg_mvn(&mvn2(h), &mvn2(hs), lambda).unwrap();
        let want = jsg_quadrature_2d(h, hs, lambda);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn kl_matches_scalar_formula() {
    let mut rng = substream(4, "kl-1d");
    for _ in 0..100 {
        let (h, hs) = (random_1d(&mut rng), random_1d(&mut rng));
        let got = kl_mvn(&mvn1(h), &mvn1(hs)).unwrap();
        assert!((got - kl_1d(h, hs)).abs() < 1e-10);
    }
}

#[test]
fn jeffreys_bound_and_symmetry() {
    let mut rng = substream(5, "jeffreys");
    for i in 0..1000 {
        let m = 1 + i % 4;
        let (h, hs) = (random_mvn(&mut rng, m), random_mvn(&mut rng, m));
        let lambda = rng.random::<f64>();
        let j = kl_mvn(&h, &hs).unwrap() + kl_mvn(&hs, &h).unwrap();
        let jsg = jsg_mvn(&h, &hs, lambda).unwrap();
        assert!(jsg >= 0.0);
        assert!(jsg <= 0.5 * lambda.max(1.0 - lambda) * j + 1e-10, "{jsg} vs J {j}");
        if i < 20 {
            let (a, b) = (jsg_mvn(&h, &hs, 0.5).unwrap(), jsg_mvn(&hs, &h, 0.5).unwrap());
            assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }
}

fn scalar_fit(site: &str, alpha: f64, beta: f64, q: f64) -> CeFit {
    CeFit {
        site: site.into(),
        cond_var: 0,
        alpha: vec![alpha],
        beta: vec![beta],
        mu: vec![0.0],
        sigma: DMatrix::from_element(1, 1, 1.0),
        threshold_u: laplace_quantile(q).unwrap(),
        quantile_q: q,
        n_exceed: 100,
        nll: 0.0,
    }
}

#[test]
fn expected_divergence_matches_quadrature() {
    let (u, cap) = (laplace_quantile(0.9).unwrap(), laplace_quantile(0.99).unwrap());
    let cfg = DivergenceConfig {
        n_mc: 10_000,
        ..Default::default()
    };
    let cases = [
        ((0.2, 0.0), (0.8, 0.0)),
        ((0.5, 0.3), (0.1, 0.6)),
        ((-0.2, 0.5), (0.4, -0.3)),
    ];
    for ((a1, b1), (a2, b2)) in cases {
        let est =
            expected_jsg_estimate(&scalar_fit("s", a1, b1, 0.9), &scalar_fit("t", a2, b2, 0.9), &cfg, cap).unwrap();
        let want = expected_jsg_quadrature_1d([a1, b1, 0.0, 1.0], [a2, b2, 0.0, 1.0], u, cap, 0.5);
        assert!(
            (est.mean - want).abs() <= 3.0 * est.std_error,
            "{} ± {} vs {want}",
            est.mean,
            est.std_error
        );
    }
}

#[test]
fn monte_carlo_estimate_settles_when_doubling_draws() {
    let cap = laplace_quantile(0.99).unwrap();
    let mut rng = substream(6, "mc-doubling");
    let mut ok = 0;
    for trial in 0..100u64 {
        let s = scalar_fit("s", rng.random_range(-0.5..0.9), rng.random_range(0.0..0.6), 0.9);
        let t = scalar_fit("t", rng.random_range(-0.5..0.9), rng.random_range(0.0..0.6), 0.9);
        let small = DivergenceConfig {
            n_mc: 2000,
            seed: trial,
            ..Default::default()
        };
        let big = DivergenceConfig {
            n_mc: 4000,
            ..small.clone()
        };
        let a = expected_jsg_estimate(&s, &t, &small, cap).unwrap();
        let b = expected_jsg_estimate(&s, &t, &big, cap).unwrap();
        if (a.mean - b.mean).abs() < 4.0 * a.std_error {
            ok += 1;
        }
    }
    assert!(ok >= 99, "{ok}/100");
}

#[test]
fn matrix_separation_follows_the_quadrature_oracle() {
    let (u, cap) = (laplace_quantile(0.9).unwrap(), laplace_quantile(0.99).unwrap());
    let alphas = [0.1, 0.5, 0.9];
    let fits: Vec<CeFit> = alphas
        .iter()
        .enumerate()
        .map(|(i, &a)| scalar_fit(&format!("s{i}"), a, 0.0, 0.9))
        .collect();
    let cfg = DivergenceConfig {
        n_mc: 10_000,
        ..Default::default()
    };
    let m = build_matrix(&fits, &cfg, cap).unwrap();
    let oracle = |i: usize, j: usize| {
        expected_jsg_quadrature_1d([alphas[i], 0.0, 0.0, 1.0], [alphas[j], 0.0, 0.0, 1.0], u, cap, 0.5)
    };
    let (o12, o13, o23) = (oracle(0, 1), oracle(0, 2), oracle(1, 2));
    assert!(o13 > o12 && o13 > o23);
    assert!(m.get(0, 2) > m.get(0, 1) && m.get(0, 2) > m.get(1, 2));
    for (i, j, o) in [(0, 1, o12), (0, 2, o13), (1, 2, o23)] {
        assert!((m.get(i, j) - o).abs() < 0.02 * o, "({i},{j}) {} vs {o}", m.get(i, j));
    }
}
