use super::QpProblem;

/// Optimality residuals of a primal-dual pair, infinity norms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// Equality residual and bound violation.
    pub primal: f64,
    /// Gradient of the Lagrangian.
    pub dual: f64,
    /// `y+ * (u - Cx)` and `y- * (Cx - l)` over finite bounds.
    pub complementarity: f64,
    /// Multiplier mass pushing against an infinite bound.
    pub sign: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.complementarity).max(self.sign)
    }
}

pub fn kkt_residuals(problem: &QpProblem, x: &[f64], y_eq: &[f64], y_ineq: &[f64]) -> KktResiduals {
    let ax = problem.eq.mul_vec(x);
    let cx = problem.ineq.mul_vec(x);

    let mut primal = 0.0f64;
    for (v, b) in ax.iter().zip(&problem.eq_rhs) {
        primal = primal.max((v - b).abs());
    }
    let mut complementarity = 0.0f64;
    let mut sign = 0.0f64;
    for i in 0..cx.len() {
        let (l, u, v, yi) = (problem.lower[i], problem.upper[i], cx[i], y_ineq[i]);
        primal = primal.max(l - v).max(v - u);
        if yi > 0.0 {
            if u.is_finite() {
                complementarity = complementarity.max(yi * (u - v).abs());
            } else {
                sign = sign.max(yi);
            }
        } else if yi < 0.0 {
            if l.is_finite() {
                complementarity = complementarity.max(-yi * (v - l).abs());
            } else {
                sign = sign.max(-yi);
            }
        }
    }

    let mut grad = problem.quadratic_mul(x);
    for (g, q) in grad.iter_mut().zip(&problem.linear) {
        *g += q;
    }
    for (g, v) in grad.iter_mut().zip(problem.eq.tr_mul_vec(y_eq)) {
        *g += v;
    }
    for (g, v) in grad.iter_mut().zip(problem.ineq.tr_mul_vec(y_ineq)) {
        *g += v;
    }
    let dual = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    KktResiduals { primal, dual, complementarity, sign }
}
