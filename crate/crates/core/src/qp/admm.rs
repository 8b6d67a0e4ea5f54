//! ADMM iteration with Ruiz equilibration, adaptive step size and
//! active-set polishing.

use super::kkt::kkt_residuals;
use super::ldl::Ldl;
use super::sparse::{inf_norm, Csc};
use super::{QpProblem, QpSolution, QpStatus, SolverSettings, WarmStart};
use crate::error::{Error, Result};

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_FACTOR: f64 = 1e3;
const SCALE_MIN: f64 = 1e-4;
const SCALE_MAX: f64 = 1e4;
const POLISH_DELTA: f64 = 1e-6;
const POLISH_ATTEMPTS: usize = 8;
/// Active-set rounds of a polish tried while ADMM is still running.
const EARLY_POLISH_ATTEMPTS: usize = 2;
const POLISH_FEAS: f64 = 1e-9;
/// Iterations before the first polish tried while ADMM runs; the gap
/// doubles after every failure.
const POLISH_INTERVAL: usize = 100;
const TINY: f64 = 1e-30;

/// Problem data after equilibration: `P = c D Q D`, `q = c D q`,
/// `A = E [A; C] D`, `l, u = E l, E u`.
struct Scaled {
    n: usize,
    m: usize,
    p_full: Csc,
    p_upper: Csc,
    a: Csc,
    at: Csc,
    q: Vec<f64>,
    l: Vec<f64>,
    u: Vec<f64>,
    d: Vec<f64>,
    e: Vec<f64>,
    c: f64,
    /// Unscaled stacked bounds, used for infeasibility certificates.
    l_raw: Vec<f64>,
    u_raw: Vec<f64>,
}

fn limit(v: f64) -> f64 {
    if v < SCALE_MIN {
        1.0
    } else {
        v.min(SCALE_MAX)
    }
}

fn equilibrate(problem: &QpProblem, iters: usize) -> Scaled {
    let n = problem.n;
    let meq = problem.n_eq();
    let m = meq + problem.n_ineq();

    let mut pt = Vec::with_capacity(2 * problem.quadratic.entries.len());
    for &(i, j, v) in &problem.quadratic.entries {
        pt.push((i, j, v));
        if i != j {
            pt.push((j, i, v));
        }
    }
    let mut at: Vec<(usize, usize, f64)> = problem.eq.entries.clone();
    at.extend(problem.ineq.entries.iter().map(|&(i, j, v)| (i + meq, j, v)));

    let mut p_full = Csc::from_triplets(n, n, &pt);
    let mut a = Csc::from_triplets(m, n, &at);
    let mut q = problem.linear.clone();
    let mut l: Vec<f64> = problem.eq_rhs.iter().chain(&problem.lower).copied().collect();
    let mut u: Vec<f64> = problem.eq_rhs.iter().chain(&problem.upper).copied().collect();
    let l_raw = l.clone();
    let u_raw = u.clone();

    let mut d = vec![1.0; n];
    let mut e = vec![1.0; m];
    let mut c = 1.0;
    for _ in 0..iters {
        let pn = p_full.col_inf_norms();
        let an = a.col_inf_norms();
        let dt: Vec<f64> = (0..n).map(|j| 1.0 / limit(pn[j].max(an[j])).sqrt()).collect();
        let et: Vec<f64> = a.row_inf_norms().iter().map(|&v| 1.0 / limit(v).sqrt()).collect();
        p_full.scale(&dt, &dt);
        a.scale(&et, &dt);
        for j in 0..n {
            q[j] *= dt[j];
            d[j] *= dt[j];
        }
        for i in 0..m {
            e[i] *= et[i];
        }

        let mean_p = if n > 0 { p_full.col_inf_norms().iter().sum::<f64>() / n as f64 } else { 0.0 };
        let ct = 1.0 / limit(mean_p.max(limit(inf_norm(&q))));
        p_full.vals.iter_mut().for_each(|v| *v *= ct);
        q.iter_mut().for_each(|v| *v *= ct);
        c *= ct;
    }
    for i in 0..m {
        l[i] *= e[i];
        u[i] *= e[i];
    }

    let mut upper = Vec::with_capacity(p_full.nnz());
    for j in 0..n {
        for (i, v) in p_full.col(j) {
            if i <= j {
                upper.push((i, j, v));
            }
        }
    }
    let p_upper = Csc::from_triplets(n, n, &upper);
    let at = a.transpose();
    Scaled { n, m, p_full, p_upper, a, at, q, l, u, d, e, c, l_raw, u_raw }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RowKind {
    Free,
    Equality,
    Inequality,
}

fn row_kinds(s: &Scaled) -> Vec<RowKind> {
    (0..s.m)
        .map(|i| {
            if s.l[i] == f64::NEG_INFINITY && s.u[i] == f64::INFINITY {
                RowKind::Free
            } else if s.l[i] == s.u[i] {
                RowKind::Equality
            } else {
                RowKind::Inequality
            }
        })
        .collect()
}

fn rho_vector(kinds: &[RowKind], rho: f64) -> Vec<f64> {
    kinds
        .iter()
        .map(|k| match k {
            RowKind::Free => RHO_MIN,
            RowKind::Equality => (RHO_EQ_FACTOR * rho).min(RHO_MAX),
            RowKind::Inequality => rho,
        })
        .collect()
}

/// Upper triangle of `[[P + sigma I, A'], [A, -diag(1/rho)]]` and the
/// positions of the `-1/rho` entries in its value array.
fn assemble_kkt(s: &Scaled, sigma: f64, rho: &[f64]) -> (Csc, Vec<usize>) {
    let n = s.n;
    let mut t = Vec::with_capacity(s.p_upper.nnz() + s.a.nnz() + n + s.m);
    for j in 0..n {
        for (i, v) in s.p_upper.col(j) {
            t.push((i, j, v));
        }
        t.push((j, j, sigma));
    }
    for i in 0..s.m {
        for (j, v) in s.at.col(i) {
            t.push((j, n + i, v));
        }
        t.push((n + i, n + i, -1.0 / rho[i]));
    }
    let kkt = Csc::from_triplets(n + s.m, n + s.m, &t);
    let pos = (0..s.m).map(|i| kkt.colptr[n + i + 1] - 1).collect();
    (kkt, pos)
}

struct Residuals {
    /// Largest row residual relative to its own tolerance
    /// `tol * (1 + max(|a_i x|, |z_i|))`.
    prim_ratio: f64,
    /// Same, per component of the Lagrangian gradient.
    dual_ratio: f64,
    eps_prim: f64,
    eps_dual: f64,
    // scaled quantities for the step-size heuristic
    prim_scaled: f64,
    dual_scaled: f64,
    prim_norm_scaled: f64,
    dual_norm_scaled: f64,
}

impl Residuals {
    fn converged(&self) -> bool {
        self.prim_ratio <= 1.0 && self.dual_ratio <= 1.0
    }
}

struct Work<'a> {
    s: &'a Scaled,
    tol: f64,
    ax: Vec<f64>,
    px: Vec<f64>,
    aty: Vec<f64>,
}

impl Work<'_> {
    fn residuals(&mut self, x: &[f64], z: &[f64], y: &[f64]) -> Residuals {
        let s = self.s;
        let tol = self.tol;
        s.a.mul_vec_into(x, &mut self.ax);
        s.p_full.mul_vec_into(x, &mut self.px);
        s.a.tr_mul_vec_into(y, &mut self.aty);

        let (mut prim_ratio, mut eps_prim) = (0.0f64, 0.0f64);
        let (mut prim_s, mut ax_s, mut z_s) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..s.m {
            let r = self.ax[i] - z[i];
            let ru = (r / s.e[i]).abs();
            let eps = tol + tol * (self.ax[i] / s.e[i]).abs().max((z[i] / s.e[i]).abs());
            prim_ratio = prim_ratio.max(ru / eps);
            eps_prim = eps_prim.max(eps);
            prim_s = prim_s.max(r.abs());
            ax_s = ax_s.max(self.ax[i].abs());
            z_s = z_s.max(z[i].abs());
        }
        let (mut dual_ratio, mut eps_dual) = (0.0f64, 0.0f64);
        let (mut dual_s, mut px_s, mut aty_s, mut q_s) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for j in 0..s.n {
            let k = 1.0 / (s.c * s.d[j]);
            let r = self.px[j] + s.q[j] + self.aty[j];
            let ru = (r * k).abs();
            let scale = self.px[j].abs().max(self.aty[j].abs()).max(s.q[j].abs()) * k;
            let eps = tol + tol * scale;
            dual_ratio = dual_ratio.max(ru / eps);
            eps_dual = eps_dual.max(eps);
            dual_s = dual_s.max(r.abs());
            px_s = px_s.max(self.px[j].abs());
            aty_s = aty_s.max(self.aty[j].abs());
            q_s = q_s.max(s.q[j].abs());
        }
        Residuals {
            prim_ratio,
            dual_ratio,
            eps_prim: eps_prim.max(tol),
            eps_dual: eps_dual.max(tol),
            prim_scaled: prim_s,
            dual_scaled: dual_s,
            prim_norm_scaled: ax_s.max(z_s),
            dual_norm_scaled: px_s.max(aty_s).max(q_s),
        }
    }

    /// Checks whether `dy` (scaled) certifies primal infeasibility; returns
    /// the normalized unscaled certificate if so.
    ///
    /// Besides the usual test (`A'dy ~ 0` and a negative support value), the
    /// support value must beat `|A'dy|_inf * |x|_1` at the current iterate:
    /// weak duality bounds it from below by that product for any feasible
    /// point of that size, so large right-hand sides cannot turn dual noise
    /// into a certificate.
    fn infeasibility_certificate(&mut self, dy: &[f64], x: &[f64], eps: f64) -> Option<Vec<f64>> {
        let s = self.s;
        if s.m == 0 {
            return None;
        }
        let dy_u: Vec<f64> = (0..s.m).map(|i| s.e[i] * dy[i] / s.c).collect();
        let norm = inf_norm(&dy_u);
        if norm < TINY {
            return None;
        }
        let mut support = 0.0;
        for i in 0..s.m {
            let v = dy_u[i];
            if v > 0.0 {
                if s.u_raw[i] == f64::INFINITY {
                    if v > eps * norm {
                        return None;
                    }
                } else {
                    support += s.u_raw[i] * v;
                }
            } else if v < 0.0 {
                if s.l_raw[i] == f64::NEG_INFINITY {
                    if -v > eps * norm {
                        return None;
                    }
                } else {
                    support += s.l_raw[i] * v;
                }
            }
        }
        if support >= -eps * norm {
            return None;
        }
        s.a.tr_mul_vec_into(dy, &mut self.aty);
        let aty_u = (0..s.n).map(|j| (self.aty[j] / (s.c * s.d[j])).abs()).fold(0.0f64, f64::max);
        if aty_u >= eps * norm {
            return None;
        }
        let x_l1: f64 = (0..s.n).map(|j| (x[j] * s.d[j]).abs()).sum();
        if support >= -2.0 * aty_u * x_l1 {
            return None;
        }
        Some(dy_u.iter().map(|v| v / norm).collect())
    }
}

fn project(v: f64, l: f64, u: f64) -> f64 {
    v.max(l).min(u)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Active {
    Lower,
    Upper,
    Fixed,
}

/// Solves the equality-constrained problem obtained by fixing the guessed
/// active constraints. Each candidate is checked with wrong-signed
/// multipliers set to zero; if it fails the termination test, rows with
/// wrong-signed multipliers leave the guess and violated rows join it.
/// Works on scaled data; returns a certified `(x, z, y)` and its residuals.
fn polish(
    work: &mut Work,
    kinds: &[RowKind],
    z: &[f64],
    y: &[f64],
    refine: usize,
    attempts: usize,
) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>, Residuals)> {
    let s = work.s;
    let n = s.n;
    let mut active: Vec<(usize, Active)> = Vec::new();
    for i in 0..s.m {
        match kinds[i] {
            RowKind::Free => {}
            RowKind::Equality => active.push((i, Active::Fixed)),
            RowKind::Inequality => {
                if z[i] - s.l[i] < -y[i] {
                    active.push((i, Active::Lower));
                } else if s.u[i] - z[i] < y[i] {
                    active.push((i, Active::Upper));
                }
            }
        }
    }

    for _ in 0..attempts {
        let k = active.len();
        let mut t = Vec::with_capacity(s.p_upper.nnz() + n + k);
        for j in 0..n {
            for (i, v) in s.p_upper.col(j) {
                t.push((i, j, v));
            }
            t.push((j, j, POLISH_DELTA));
        }
        for (r, &(i, _)) in active.iter().enumerate() {
            for (j, v) in s.at.col(i) {
                t.push((j, n + r, v));
            }
            t.push((n + r, n + r, -POLISH_DELTA));
        }
        let kkt = Csc::from_triplets(n + k, n + k, &t);
        let ldl = Ldl::new(&kkt).ok()?;

        let mut rhs = Vec::with_capacity(n + k);
        rhs.extend(s.q.iter().map(|v| -v));
        for &(i, kind) in &active {
            rhs.push(match kind {
                Active::Upper => s.u[i],
                _ => s.l[i],
            });
        }
        let mut sol = rhs.clone();
        ldl.solve(&mut sol);

        // Iterative refinement against the unregularized system.
        let mut px = vec![0.0; n];
        for _ in 0..refine {
            s.p_full.mul_vec_into(&sol[..n], &mut px);
            let mut r = rhs.clone();
            for j in 0..n {
                r[j] -= px[j];
            }
            for (row, &(i, _)) in active.iter().enumerate() {
                let nu = sol[n + row];
                let mut ax = 0.0;
                for (j, v) in s.at.col(i) {
                    r[j] -= v * nu;
                    ax += v * sol[j];
                }
                r[n + row] -= ax;
            }
            ldl.solve(&mut r);
            for (a, b) in sol.iter_mut().zip(&r) {
                *a += b;
            }
        }

        let scale = sol[n..].iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let thresh = 1e-9 * scale;
        let xp = sol[..n].to_vec();
        let mut ax = vec![0.0; s.m];
        s.a.mul_vec_into(&xp, &mut ax);
        let zp: Vec<f64> = (0..s.m).map(|i| project(ax[i], s.l[i], s.u[i])).collect();
        let mut yp = vec![0.0; s.m];
        let mut kept = Vec::with_capacity(active.len());
        let mut changed = false;
        for (row, &(i, kind)) in active.iter().enumerate() {
            let nu = sol[n + row];
            let (wrong, clipped) = match kind {
                Active::Lower => (nu > thresh, nu.min(0.0)),
                Active::Upper => (nu < -thresh, nu.max(0.0)),
                Active::Fixed => (false, nu),
            };
            yp[i] = clipped;
            if wrong {
                changed = true;
            } else {
                kept.push((i, kind));
            }
        }
        let res = work.residuals(&xp, &zp, &yp);
        if res.converged() {
            return Some((xp, zp, yp, res));
        }

        // Rows outside the guess that the candidate violates join the set.
        let mut in_set = vec![false; s.m];
        for &(i, _) in &active {
            in_set[i] = true;
        }
        for i in 0..s.m {
            if in_set[i] || kinds[i] != RowKind::Inequality {
                continue;
            }
            if ax[i] < s.l[i] - POLISH_FEAS * (1.0 + s.l[i].abs()) {
                kept.push((i, Active::Lower));
                changed = true;
            } else if ax[i] > s.u[i] + POLISH_FEAS * (1.0 + s.u[i].abs()) {
                kept.push((i, Active::Upper));
                changed = true;
            }
        }
        if !changed {
            return None;
        }
        active = kept;
    }
    None
}

/// Solves `problem`. Returns an error only for malformed input; an
/// infeasible or unsolved problem is reported through the status.
pub fn solve(problem: &QpProblem, settings: &SolverSettings, warm: Option<&WarmStart>) -> Result<QpSolution> {
    problem.validate()?;
    let s = equilibrate(problem, settings.scaling_iters);
    let (n, m) = (s.n, s.m);
    let meq = problem.n_eq();
    let kinds = row_kinds(&s);
    let sigma = settings.sigma;
    let alpha = settings.alpha;

    let mut rho = settings.rho.clamp(RHO_MIN, RHO_MAX);
    let mut rho_vec = rho_vector(&kinds, rho);
    let (mut kkt, rho_pos) = assemble_kkt(&s, sigma, &rho_vec);
    let mut ldl = Ldl::new(&kkt).map_err(|e| Error::Problem(format!("KKT factorization failed: {e:?}")))?;

    let mut x = vec![0.0; n];
    let mut z = vec![0.0; m];
    let mut y = vec![0.0; m];
    if let Some(w) = warm {
        if w.x.len() == n {
            for j in 0..n {
                x[j] = w.x[j] / s.d[j];
            }
        }
        if w.y_eq.len() == meq && w.y_ineq.len() == m - meq {
            for (i, yi) in w.y_eq.iter().chain(&w.y_ineq).enumerate() {
                y[i] = yi * s.c / s.e[i];
            }
        }
    }
    let mut work = Work { s: &s, tol: settings.tol, ax: vec![0.0; m], px: vec![0.0; n], aty: vec![0.0; n] };
    s.a.mul_vec_into(&x, &mut work.ax);
    for i in 0..m {
        z[i] = project(work.ax[i], s.l[i], s.u[i]);
    }

    let mut rhs = vec![0.0; n + m];
    let mut x_prev = vec![0.0; n];
    let mut z_tilde = vec![0.0; m];
    let mut dy = vec![0.0; m];
    let check = settings.check_interval.max(1);
    // The interval doubles after every update so rho settles eventually;
    // ADMM need not converge while the step size keeps moving.
    let mut adapt = settings.adaptive_rho_interval.max(1);
    let mut next_adapt = adapt;

    let mut status = QpStatus::MaxIter;
    let mut certificate = None;
    let mut iterations = 0;
    let mut last = None;
    let mut early_polish = false;
    let mut polish_gap = POLISH_INTERVAL;
    let mut next_polish = POLISH_INTERVAL;

    for iter in 1..=settings.max_iter {
        iterations = iter;
        x_prev.copy_from_slice(&x);
        for j in 0..n {
            rhs[j] = sigma * x[j] - s.q[j];
        }
        for i in 0..m {
            rhs[n + i] = z[i] - y[i] / rho_vec[i];
        }
        ldl.solve(&mut rhs);
        for i in 0..m {
            z_tilde[i] = z[i] + (rhs[n + i] - y[i]) / rho_vec[i];
        }
        for j in 0..n {
            x[j] = alpha * rhs[j] + (1.0 - alpha) * x_prev[j];
        }
        for i in 0..m {
            let relaxed = alpha * z_tilde[i] + (1.0 - alpha) * z[i];
            let z_new = project(relaxed + y[i] / rho_vec[i], s.l[i], s.u[i]);
            dy[i] = rho_vec[i] * (relaxed - z_new);
            y[i] += dy[i];
            z[i] = z_new;
        }

        let final_iter = iter == settings.max_iter;
        let do_check = iter % check == 0 || final_iter;
        let do_adapt = settings.adaptive_rho && iter == next_adapt;
        if !do_check && !do_adapt {
            continue;
        }
        let res = work.residuals(&x, &z, &y);
        if do_check {
            if res.converged() {
                status = QpStatus::Optimal;
                last = Some(res);
                break;
            }
            if settings.polish && iter >= next_polish {
                polish_gap *= 2;
                next_polish = iter + polish_gap;
                if let Some((xp, _, yp, pres)) =
                    polish(&mut work, &kinds, &z, &y, settings.polish_refine_iters, EARLY_POLISH_ATTEMPTS)
                {
                    x = xp;
                    y = yp;
                    status = QpStatus::Optimal;
                    early_polish = true;
                    last = Some(pres);
                    break;
                }
            }
            if let Some(cert) = work.infeasibility_certificate(&dy, &x, settings.infeasibility_tol) {
                status = QpStatus::Infeasible;
                certificate = Some(cert);
                last = Some(res);
                break;
            }
            if final_iter {
                last = Some(res);
                break;
            }
        }
        if do_adapt {
            next_adapt = iter + adapt;
            let p = res.prim_scaled / res.prim_norm_scaled.max(TINY);
            let d = res.dual_scaled / res.dual_norm_scaled.max(TINY);
            let new_rho = (rho * (p / d.max(TINY)).sqrt()).clamp(RHO_MIN, RHO_MAX);
            if new_rho.is_finite() && (new_rho > 5.0 * rho || new_rho < 0.2 * rho) {
                rho = new_rho;
                adapt *= 2;
                next_adapt = iter + adapt;
                rho_vec = rho_vector(&kinds, rho);
                for i in 0..m {
                    kkt.vals[rho_pos[i]] = -1.0 / rho_vec[i];
                }
                ldl.refactor(&kkt).map_err(|e| Error::Problem(format!("KKT refactorization failed: {e:?}")))?;
            }
        }
    }
    let mut res = match last {
        Some(r) => r,
        None => work.residuals(&x, &z, &y),
    };

    let mut polished = early_polish;
    if settings.polish && !early_polish && status != QpStatus::Infeasible {
        if let Some((xp, _, yp, pres)) =
            polish(&mut work, &kinds, &z, &y, settings.polish_refine_iters, POLISH_ATTEMPTS)
        {
            let better = status != QpStatus::Optimal
                || pres.prim_ratio.max(pres.dual_ratio) <= res.prim_ratio.max(res.dual_ratio);
            if better {
                x = xp;
                y = yp;
                res = pres;
                polished = true;
                status = QpStatus::Optimal;
            }
        }
    }

    let x_out: Vec<f64> = (0..n).map(|j| x[j] * s.d[j]).collect();
    let y_out: Vec<f64> = (0..m).map(|i| y[i] * s.e[i] / s.c).collect();
    let (y_eq, y_ineq) = (y_out[..meq].to_vec(), y_out[meq..].to_vec());
    let kkt_res = kkt_residuals(problem, &x_out, &y_eq, &y_ineq);
    if status == QpStatus::Optimal {
        debug_assert!(
            kkt_res.primal <= res.eps_prim * 1.01 + 1e-12 && kkt_res.dual <= res.eps_dual * 1.01 + 1e-12,
            "solution failed certification: {kkt_res:?} vs ({}, {})",
            res.eps_prim,
            res.eps_dual
        );
    }
    Ok(QpSolution {
        objective: problem.objective(&x_out),
        x: x_out,
        y_eq,
        y_ineq,
        status,
        primal_residual: kkt_res.primal,
        dual_residual: kkt_res.dual,
        iterations,
        polished,
        certificate,
    })
}
