#![allow(dead_code)]

use dic_core::qp::{QpProblem, SparseMatrix};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn dense(m: &SparseMatrix) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(m.nrows, m.ncols);
    for &(i, j, v) in &m.entries {
        d[(i, j)] += v;
    }
    d
}

pub fn dense_quadratic(p: &QpProblem) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(p.n, p.n);
    for &(i, j, v) in &p.quadratic.entries {
        q[(i, j)] += v;
        if i != j {
            q[(j, i)] += v;
        }
    }
    q
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Random strictly convex QP with `meq` equality rows and `mineq` one-sided
/// inequality rows, feasible by construction. Returns the problem and an
/// interior point.
pub fn random_qp<R: Rng>(rng: &mut R, n: usize, meq: usize, mineq: usize) -> (QpProblem, Vec<f64>) {
    let mut p = QpProblem::new(n);
    let r = rng.random_range(1..=n);
    let m = DMatrix::from_fn(r, n, |_, _| if rng.random_bool(0.5) { normal(rng) } else { 0.0 });
    let q = m.transpose() * &m + DMatrix::identity(n, n) * 0.05;
    for j in 0..n {
        for i in 0..=j {
            if q[(i, j)] != 0.0 {
                p.add_quadratic(i, j, q[(i, j)]);
            }
        }
    }
    p.linear = (0..n).map(|_| 3.0 * normal(rng)).collect();

    let x0: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
    let row = |rng: &mut R| -> Vec<(usize, f64)> {
        let mut coeffs = Vec::new();
        for j in 0..n {
            if rng.random_bool(0.4) {
                coeffs.push((j, normal(rng)));
            }
        }
        if coeffs.is_empty() {
            coeffs.push((rng.random_range(0..n), 1.0));
        }
        coeffs
    };
    let dot = |coeffs: &[(usize, f64)]| coeffs.iter().map(|&(j, v)| v * x0[j]).sum::<f64>();
    // Each equality row owns a pivot column, so the rows are independent.
    assert!(meq < n);
    for r in 0..meq {
        let mut c: Vec<(usize, f64)> = row(rng).into_iter().filter(|&(j, _)| j >= meq).collect();
        c.push((r, 1.0 + normal(rng).abs()));
        p.add_eq(&c, dot(&c));
    }
    for _ in 0..mineq {
        let c = row(rng);
        let margin = rng.random_range(0.01..1.0);
        if rng.random_bool(0.5) {
            p.add_ineq(&c, dot(&c) - margin, f64::INFINITY);
        } else {
            p.add_ineq(&c, f64::NEG_INFINITY, dot(&c) + margin);
        }
    }
    (p, x0)
}

pub struct OracleSolution {
    pub x: Vec<f64>,
    pub objective: f64,
}

/// Enumerates every subset of the inequality rows as the active set, solves
/// the equality-constrained KKT system for each and keeps the best point
/// that is feasible with correctly signed multipliers. Rows must be
/// one-sided.
pub fn brute_force(p: &QpProblem) -> Option<OracleSolution> {
    let n = p.n;
    let q = dense_quadratic(p);
    let a = dense(&p.eq);
    let c = dense(&p.ineq);
    let m = p.n_ineq();
    assert!(m <= 16, "too many inequality rows for enumeration");
    let mut best: Option<OracleSolution> = None;
    for mask in 0u32..(1 << m) {
        let active: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let k = p.n_eq() + active.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&q);
        for j in 0..n {
            rhs[j] = -p.linear[j];
        }
        for r in 0..p.n_eq() {
            for j in 0..n {
                kkt[(n + r, j)] = a[(r, j)];
                kkt[(j, n + r)] = a[(r, j)];
            }
            rhs[n + r] = p.eq_rhs[r];
        }
        for (t, &i) in active.iter().enumerate() {
            let r = n + p.n_eq() + t;
            for j in 0..n {
                kkt[(r, j)] = c[(i, j)];
                kkt[(j, r)] = c[(i, j)];
            }
            rhs[r] = if p.lower[i].is_finite() { p.lower[i] } else { p.upper[i] };
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        if sol.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let x: Vec<f64> = sol.rows(0, n).iter().copied().collect();
        let cx = &c * DVector::from_column_slice(&x);
        let feasible = (0..m).all(|i| {
            let slack = 1e-8 * (1.0 + cx[i].abs());
            cx[i] >= p.lower[i] - slack && cx[i] <= p.upper[i] + slack
        });
        let nu_scale = 1e-8 * (1.0 + sol.rows(n, k).amax());
        let signs_ok = active.iter().enumerate().all(|(t, &i)| {
            let nu = sol[n + p.n_eq() + t];
            if p.lower[i].is_finite() {
                nu <= nu_scale
            } else {
                nu >= -nu_scale
            }
        });
        if !feasible || !signs_ok {
            continue;
        }
        let objective = p.objective(&x);
        if best.as_ref().is_none_or(|b| objective < b.objective) {
            best = Some(OracleSolution { x, objective });
        }
    }
    best
}

/// Points `x0 + t d` with `d` in the null space of the equality rows, shrunk
/// until every inequality holds.
pub fn random_feasible_points<R: Rng>(rng: &mut R, p: &QpProblem, x0: &[f64], count: usize) -> Vec<Vec<f64>> {
    let n = p.n;
    let a = dense(&p.eq);
    let c = dense(&p.ineq);
    let aat_inv = if p.n_eq() > 0 { (&a * a.transpose()).try_inverse() } else { None };
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut d = DVector::from_fn(n, |_, _| normal(rng));
        if let Some(inv) = &aat_inv {
            d -= a.transpose() * (inv * (&a * &d));
        }
        let mut t = rng.random_range(0.1..3.0);
        loop {
            let x: Vec<f64> = (0..n).map(|j| x0[j] + t * d[j]).collect();
            let cx = &c * DVector::from_column_slice(&x);
            if (0..p.n_ineq()).all(|i| cx[i] >= p.lower[i] && cx[i] <= p.upper[i]) {
                out.push(x);
                break;
            }
            t *= 0.5;
        }
    }
    out
}

/// `f(x) - g(y)` for a primal-dual pair, with `g` the Lagrangian dual
/// evaluated through `x`.
pub fn duality_gap(p: &QpProblem, x: &[f64], y_eq: &[f64], y_ineq: &[f64]) -> f64 {
    let qx = p.quadratic_mul(x);
    let xqx: f64 = qx.iter().zip(x).map(|(a, b)| a * b).sum();
    let mut dual = -0.5 * xqx;
    dual -= p.eq_rhs.iter().zip(y_eq).map(|(b, y)| b * y).sum::<f64>();
    for i in 0..p.n_ineq() {
        let y = y_ineq[i];
        if y > 0.0 && p.upper[i].is_finite() {
            dual -= p.upper[i] * y;
        } else if y < 0.0 && p.lower[i].is_finite() {
            dual -= p.lower[i] * y;
        }
    }
    p.objective(x) - dual
}
