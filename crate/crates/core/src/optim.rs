//! Box-constrained Nelder–Mead simplex search.
//!
//! Trial points are projected onto the box before evaluation. Convergence is
//! declared when a full simplex cycle (`n + 1` iterations) improves the best
//! value by less than `ftol` and the simplex values agree to within `ftol`;
//! the search is then restarted once around the best point and accepted only
//! if the restart cannot improve on it either.

#[derive(Debug, Clone)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn project(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    /// Initial simplex edge per coordinate.
    pub step: Vec<f64>,
    pub ftol: f64,
    pub max_evals: usize,
    /// Restarts allowed after the first convergence.
    pub max_restarts: usize,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub fx: f64,
    pub evals: usize,
    pub converged: bool,
}

struct Counted<'a, F> {
    f: &'a F,
    bounds: &'a Bounds,
    evals: usize,
}

impl<F: Fn(&[f64]) -> f64> Counted<'_, F> {
    fn eval(&mut self, x: &mut [f64]) -> f64 {
        self.bounds.project(x);
        self.evals += 1;
        let v = (self.f)(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }
}

/// Minimize `f` from `x0` inside `bounds`.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(f: &F, x0: &[f64], bounds: &Bounds, opts: &NelderMeadOptions) -> Minimum {
    let mut counted = Counted { f, bounds, evals: 0 };
    let mut start = x0.to_vec();
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut restarts = 0;
    loop {
        let (x, fx, ok) = run_simplex(&mut counted, &start, opts);
        let improved = match &best {
            Some((_, fb)) => fx < fb - opts.ftol,
            None => true,
        };
        if best.as_ref().is_none_or(|(_, fb)| fx < *fb) {
            best = Some((x.clone(), fx));
        }
        let (bx, bf) = best.clone().expect("at least one run");
        if !ok || !improved || restarts >= opts.max_restarts {
            return Minimum {
                x: bx,
                fx: bf,
                evals: counted.evals,
                converged: ok,
            };
        }
        restarts += 1;
        start = bx;
    }
}

fn run_simplex<F: Fn(&[f64]) -> f64>(
    c: &mut Counted<'_, F>,
    x0: &[f64],
    opts: &NelderMeadOptions,
) -> (Vec<f64>, f64, bool) {
    let n = x0.len();
    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut first = x0.to_vec();
    c.bounds.project(&mut first);
    pts.push(first.clone());
    for i in 0..n {
        let mut p = first.clone();
        let step = opts.step[i];
        // step inward if the vertex would land outside the box
        p[i] = if p[i] + step <= c.bounds.upper[i] {
            p[i] + step
        } else {
            p[i] - step
        };
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter_mut().map(|p| c.eval(p)).collect();

    let mut iter = 0usize;
    let mut checkpoint = f64::INFINITY;
    loop {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&k| pts[k].clone()).collect();
        vals = order.iter().map(|&k| vals[k]).collect();

        if iter.is_multiple_of(n + 1) {
            let spread = vals[n] - vals[0];
            if checkpoint - vals[0] < opts.ftol && spread.abs() < opts.ftol {
                return (pts.swap_remove(0), vals[0], true);
            }
            checkpoint = vals[0];
        }
        if c.evals >= opts.max_evals {
            return (pts.swap_remove(0), vals[0], false);
        }
        iter += 1;

        let centroid: Vec<f64> = (0..n)
            .map(|j| pts[..n].iter().map(|p| p[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&pts[n])
                .map(|(cj, wj)| cj + t * (cj - wj))
                .collect()
        };

        let mut xr = along(1.0);
        let fr = c.eval(&mut xr);
        if fr < vals[0] {
            let mut xe = along(2.0);
            let fe = c.eval(&mut xe);
            if fe < fr {
                pts[n] = xe;
                vals[n] = fe;
            } else {
                pts[n] = xr;
                vals[n] = fr;
            }
            continue;
        }
        if fr < vals[n - 1] {
            pts[n] = xr;
            vals[n] = fr;
            continue;
        }
        let (mut xc, outside) = if fr < vals[n] {
            (along(0.5), true)
        } else {
            (along(-0.5), false)
        };
        let fc = c.eval(&mut xc);
        if (outside && fc <= fr) || (!outside && fc < vals[n]) {
            pts[n] = xc;
            vals[n] = fc;
            continue;
        }
        // shrink toward the best vertex
        for k in 1..=n {
            let mut p: Vec<f64> = pts[0].iter().zip(&pts[k]).map(|(b, x)| b + 0.5 * (x - b)).collect();
            vals[k] = c.eval(&mut p);
            pts[k] = p;
        }
    }
}
