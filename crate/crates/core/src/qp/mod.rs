//! Convex quadratic programming.
//!
//! Problems have the form
//!
//! ```text
//! minimize    1/2 x'Qx + q'x
//! subject to  A x  = b
//!             l <= C x <= u
//! ```
//!
//! with `Q` symmetric positive semidefinite, and are solved with an
//! operator-splitting (ADMM) iteration on the equilibrated problem, followed
//! by an active-set polishing step. Every solve can be certified with
//! [`kkt_residuals`].

mod admm;
pub mod io;
mod kkt;
pub mod ldl;
pub mod sparse;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use admm::solve;
pub use kkt::{kkt_residuals, KktResiduals};
pub use sparse::{Csc, SparseMatrix};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QpProblem {
    pub n: usize,
    /// Upper triangle (`row <= col`) of the symmetric matrix `Q`.
    pub quadratic: SparseMatrix,
    pub linear: Vec<f64>,
    pub eq: SparseMatrix,
    pub eq_rhs: Vec<f64>,
    pub ineq: SparseMatrix,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Optional variable names, used in diagnostics.
    pub names: Vec<String>,
}

impl QpProblem {
    pub fn new(n: usize) -> Self {
        QpProblem {
            n,
            quadratic: SparseMatrix::new(n, n),
            linear: vec![0.0; n],
            eq: SparseMatrix::new(0, n),
            eq_rhs: Vec::new(),
            ineq: SparseMatrix::new(0, n),
            lower: Vec::new(),
            upper: Vec::new(),
            names: Vec::new(),
        }
    }

    pub fn n_eq(&self) -> usize {
        self.eq_rhs.len()
    }

    pub fn n_ineq(&self) -> usize {
        self.lower.len()
    }

    /// Adds `value` to `Q[i][j]` and `Q[j][i]` (once, for the diagonal).
    pub fn add_quadratic(&mut self, i: usize, j: usize, value: f64) {
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        self.quadratic.push(r, c, value);
    }

    pub fn add_eq(&mut self, coeffs: &[(usize, f64)], rhs: f64) -> usize {
        let row = self.eq_rhs.len();
        self.eq.nrows += 1;
        for &(j, v) in coeffs {
            self.eq.push(row, j, v);
        }
        self.eq_rhs.push(rhs);
        row
    }

    pub fn add_ineq(&mut self, coeffs: &[(usize, f64)], lower: f64, upper: f64) -> usize {
        let row = self.lower.len();
        self.ineq.nrows += 1;
        for &(j, v) in coeffs {
            self.ineq.push(row, j, v);
        }
        self.lower.push(lower);
        self.upper.push(upper);
        row
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut quad = 0.0;
        for &(i, j, v) in &self.quadratic.entries {
            if i == j {
                quad += v * x[i] * x[i];
            } else {
                quad += 2.0 * v * x[i] * x[j];
            }
        }
        0.5 * quad + self.linear.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }

    /// `Q x` using the symmetric expansion of the stored upper triangle.
    pub fn quadratic_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for &(i, j, v) in &self.quadratic.entries {
            y[i] += v * x[j];
            if i != j {
                y[j] += v * x[i];
            }
        }
        y
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Problem(msg));
        if self.linear.len() != self.n {
            return bad(format!("linear term has length {} for n = {}", self.linear.len(), self.n));
        }
        if self.quadratic.nrows != self.n || self.quadratic.ncols != self.n {
            return bad("quadratic term must be n x n".into());
        }
        if self.quadratic.entries.iter().any(|&(i, j, _)| i > j) {
            return bad("quadratic term must be stored as its upper triangle".into());
        }
        if self.eq.ncols != self.n || self.eq.nrows != self.eq_rhs.len() {
            return bad("equality block dimensions are inconsistent".into());
        }
        if self.ineq.ncols != self.n || self.ineq.nrows != self.lower.len() || self.lower.len() != self.upper.len() {
            return bad("inequality block dimensions are inconsistent".into());
        }
        let entries_ok =
            |m: &SparseMatrix| m.entries.iter().all(|&(i, j, v)| i < m.nrows && j < m.ncols && v.is_finite());
        if !entries_ok(&self.quadratic) || !entries_ok(&self.eq) || !entries_ok(&self.ineq) {
            return bad("matrix entries out of range or not finite".into());
        }
        if self.linear.iter().chain(&self.eq_rhs).any(|v| !v.is_finite()) {
            return bad("linear term and equality right-hand side must be finite".into());
        }
        for (i, (l, u)) in self.lower.iter().zip(&self.upper).enumerate() {
            if l.is_nan() || u.is_nan() || l > u || *l == f64::INFINITY || *u == f64::NEG_INFINITY {
                return bad(format!("inequality row {i} has invalid bounds [{l}, {u}]"));
            }
        }
        if !self.names.is_empty() && self.names.len() != self.n {
            return bad("names must be empty or have one entry per variable".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Multipliers of the equality rows.
    pub y_eq: Vec<f64>,
    /// Multipliers of the inequality rows: positive when the upper bound is
    /// active, negative when the lower bound is.
    pub y_ineq: Vec<f64>,
    pub status: QpStatus,
    /// `max(|Ax - b|, violation of l <= Cx <= u)`, infinity norm.
    pub primal_residual: f64,
    /// `|Qx + q + A'y_eq + C'y_ineq|`, infinity norm.
    pub dual_residual: f64,
    pub iterations: usize,
    pub objective: f64,
    pub polished: bool,
    /// Normalized dual ray proving infeasibility, stacked equality rows first.
    pub certificate: Option<Vec<f64>>,
}

impl QpSolution {
    pub fn warm_start(&self) -> WarmStart {
        WarmStart { x: self.x.clone(), y_eq: self.y_eq.clone(), y_ineq: self.y_ineq.clone() }
    }
}

/// Starting point for the iteration, in the problem's own units.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WarmStart {
    pub x: Vec<f64>,
    pub y_eq: Vec<f64>,
    pub y_ineq: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    /// Absolute and relative residual tolerance.
    pub tol: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation factor in (0, 2).
    pub alpha: f64,
    pub scaling_iters: usize,
    pub adaptive_rho: bool,
    pub adaptive_rho_interval: usize,
    pub check_interval: usize,
    pub polish: bool,
    pub polish_refine_iters: usize,
    pub infeasibility_tol: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            tol: 1e-5,
            max_iter: 20_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            scaling_iters: 10,
            adaptive_rho: true,
            adaptive_rho_interval: 25,
            check_interval: 5,
            polish: true,
            polish_refine_iters: 3,
            infeasibility_tol: 1e-5,
        }
    }
}
