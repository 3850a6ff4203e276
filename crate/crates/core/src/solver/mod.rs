//! Dense convex quadratic programming.
//!
//! ```text
//!     minimize    1/2 v' H v + g' v
//!     subject to  A_eq v  = b_eq
//!                 lo <= v <= hi
//!                 A_in v <= b_in
//! ```
//!
//! Solved with a primal active-set method. A feasible start comes from an
//! elastic Phase-1 LP; a positive Phase-1 optimum is reported as
//! [`QpStatus::Infeasible`], which is a result and not an error.

mod active_set;
mod householder;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use active_set::{Fix, Outcome};

/// Every tolerance the solver uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    /// Phase-1 objective above this means infeasible; also the residual bound on returned points.
    pub feasibility_tol: f64,
    /// Bound on the KKT stationarity residual of an optimal point.
    pub stationarity_tol: f64,
    /// Active-set iterations allowed per phase.
    pub max_iterations: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            feasibility_tol: 1e-7,
            stationarity_tol: 1e-6,
            max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
}

impl QpProblem {
    /// Zero objective, free variables, no constraints.
    pub fn new(n: usize) -> Self {
        QpProblem {
            hessian: DMatrix::zeros(n, n),
            linear: DVector::zeros(n),
            eq_matrix: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
            ineq_matrix: DMatrix::zeros(0, n),
            ineq_rhs: DVector::zeros(0),
        }
    }

    pub fn with_objective(mut self, hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        self.hessian = hessian;
        self.linear = linear;
        self
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.eq_matrix = a;
        self.eq_rhs = b;
        self
    }

    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.ineq_matrix = a;
        self.ineq_rhs = b;
        self
    }

    pub fn num_vars(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, v: &DVector<f64>) -> f64 {
        0.5 * v.dot(&(&self.hessian * v)) + self.linear.dot(v)
    }

    /// Largest violation of any constraint at `v` (zero when feasible).
    pub fn max_violation(&self, v: &DVector<f64>) -> f64 {
        let mut worst = 0.0f64;
        if self.eq_matrix.nrows() > 0 {
            worst = worst.max((&self.eq_matrix * v - &self.eq_rhs).amax());
        }
        if self.ineq_matrix.nrows() > 0 {
            let r = &self.ineq_matrix * v - &self.ineq_rhs;
            worst = worst.max(r.max().max(0.0));
        }
        for j in 0..v.len() {
            worst = worst.max(self.lower[j] - v[j]).max(v[j] - self.upper[j]);
        }
        worst
    }

    fn validate(&self) -> Result<()> {
        let n = self.num_vars();
        let dims_ok = self.hessian.shape() == (n, n)
            && self.eq_matrix.ncols() == n
            && self.eq_matrix.nrows() == self.eq_rhs.len()
            && self.ineq_matrix.ncols() == n
            && self.ineq_matrix.nrows() == self.ineq_rhs.len()
            && self.lower.len() == n
            && self.upper.len() == n;
        if !dims_ok {
            return Err(Error::Contract("QP dimensions are inconsistent".into()));
        }
        let finite = self.hessian.iter().all(|v| v.is_finite())
            && self.linear.iter().all(|v| v.is_finite())
            && self.eq_matrix.iter().all(|v| v.is_finite())
            && self.eq_rhs.iter().all(|v| v.is_finite())
            && self.ineq_matrix.iter().all(|v| v.is_finite())
            && self.ineq_rhs.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Contract("QP data must be finite".into()));
        }
        for j in 0..n {
            if self.lower[j].is_nan() || self.upper[j].is_nan() || self.lower[j] > self.upper[j] {
                return Err(Error::Contract(format!("bad bounds on variable {j}")));
            }
        }
        let scale = 1.0 + self.hessian.amax();
        if (&self.hessian - self.hessian.transpose()).amax() > 1e-12 * scale {
            return Err(Error::Contract("Hessian is not symmetric".into()));
        }
        if !self.hessian_is_zero() {
            let shifted = &self.hessian + DMatrix::<f64>::identity(n, n) * (1e-9 * scale);
            if shifted.cholesky().is_none() {
                return Err(Error::Contract(
                    "Hessian is not positive semidefinite".into(),
                ));
            }
        }
        Ok(())
    }

    fn hessian_is_zero(&self) -> bool {
        self.hessian.iter().all(|&v| v == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    IterationLimit,
    Unbounded,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub eq_multipliers: DVector<f64>,
    pub ineq_multipliers: DVector<f64>,
    /// Positive when the upper bound is active, negative for the lower bound.
    pub bound_multipliers: DVector<f64>,
    pub iterations: usize,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }

    /// Infinity norm of `H v + g + A_eq' y + A_in' z + bound multipliers`.
    pub fn stationarity_residual(&self, p: &QpProblem) -> f64 {
        let mut r = &p.hessian * &self.x + &p.linear + &self.bound_multipliers;
        if p.eq_matrix.nrows() > 0 {
            r += p.eq_matrix.transpose() * &self.eq_multipliers;
        }
        if p.ineq_matrix.nrows() > 0 {
            r += p.ineq_matrix.transpose() * &self.ineq_multipliers;
        }
        r.amax()
    }
}

/// Solve a convex QP. `Err` only for malformed problems.
pub fn solve_qp(p: &QpProblem, settings: &SolverSettings) -> Result<QpSolution> {
    solve_qp_from(p, settings, None)
}

/// As [`solve_qp`], with an optional starting guess for Phase 1.
pub fn solve_qp_from(
    p: &QpProblem,
    settings: &SolverSettings,
    start: Option<&DVector<f64>>,
) -> Result<QpSolution> {
    p.validate()?;
    let n = p.num_vars();
    let m_eq = p.eq_matrix.nrows();
    let m_in = p.ineq_matrix.nrows();

    let v0 = DVector::from_iterator(
        n,
        (0..n).map(|j| {
            let guess = start.map_or(0.0, |s| s[j]);
            guess.clamp(p.lower[j], p.upper[j])
        }),
    );

    let (mut state, phase1, phase1_iters) = phase_one(p, settings, v0)?;
    if phase1 != QpStatus::Optimal {
        return Ok(finish(p, state.x, phase1, None, phase1_iters));
    }

    let mut rows = DMatrix::<f64>::zeros(m_eq + m_in, n);
    rows.rows_mut(0, m_eq).copy_from(&p.eq_matrix);
    rows.rows_mut(m_eq, m_in).copy_from(&p.ineq_matrix);
    let mut rhs = DVector::<f64>::zeros(m_eq + m_in);
    rhs.rows_mut(0, m_eq).copy_from(&p.eq_rhs);
    rhs.rows_mut(m_eq, m_in).copy_from(&p.ineq_rhs);
    let problem = active_set::Problem {
        hessian: &p.hessian,
        hessian_is_zero: p.hessian_is_zero(),
        linear: &p.linear,
        rows: &rows,
        rhs: &rhs,
        n_eq: m_eq,
        lower: &p.lower,
        upper: &p.upper,
    };
    let rep = active_set::run(&problem, &mut state, settings.max_iterations, None);
    let status = match rep.outcome {
        Outcome::Optimal | Outcome::Threshold => QpStatus::Optimal,
        Outcome::IterationLimit => QpStatus::IterationLimit,
        Outcome::Unbounded => QpStatus::Unbounded,
    };
    Ok(finish(p, state.x, status, Some(rep), phase1_iters))
}

fn finish(
    p: &QpProblem,
    x: DVector<f64>,
    status: QpStatus,
    rep: Option<active_set::Report>,
    phase1_iters: usize,
) -> QpSolution {
    let m_eq = p.eq_matrix.nrows();
    let m_in = p.ineq_matrix.nrows();
    let n = x.len();
    let (eq_m, in_m, b_m, iters) = match rep {
        Some(r) => (
            DVector::from_iterator(m_eq, r.row_multipliers[..m_eq].iter().cloned()),
            DVector::from_iterator(m_in, r.row_multipliers[m_eq..].iter().cloned()),
            DVector::from_vec(r.bound_multipliers),
            r.iterations,
        ),
        None => (
            DVector::zeros(m_eq),
            DVector::zeros(m_in),
            DVector::zeros(n),
            0,
        ),
    };
    QpSolution {
        objective: p.objective(&x),
        x,
        status,
        eq_multipliers: eq_m,
        ineq_multipliers: in_m,
        bound_multipliers: b_m,
        iterations: phase1_iters + iters,
    }
}

/// Elastic feasibility LP:
/// `min sum(e+) + sum(e-) + t` s.t. `A_eq v + e+ - e- = b_eq`, `A_in v - t <= b_in`,
/// bounds on `v`, and `e+, e-, t >= 0`. The starting point is feasible by construction.
fn phase_one(
    p: &QpProblem,
    settings: &SolverSettings,
    v0: DVector<f64>,
) -> Result<(active_set::State, QpStatus, usize)> {
    let n = p.num_vars();
    let m_eq = p.eq_matrix.nrows();
    let m_in = p.ineq_matrix.nrows();
    let has_t = m_in > 0;
    let ny = n + 2 * m_eq + usize::from(has_t);
    let t_idx = n + 2 * m_eq;

    let mut rows = DMatrix::<f64>::zeros(m_eq + m_in, ny);
    let mut rhs = DVector::<f64>::zeros(m_eq + m_in);
    for i in 0..m_eq {
        for j in 0..n {
            rows[(i, j)] = p.eq_matrix[(i, j)];
        }
        rows[(i, n + i)] = 1.0;
        rows[(i, n + m_eq + i)] = -1.0;
        rhs[i] = p.eq_rhs[i];
    }
    for i in 0..m_in {
        for j in 0..n {
            rows[(m_eq + i, j)] = p.ineq_matrix[(i, j)];
        }
        rows[(m_eq + i, t_idx)] = -1.0;
        rhs[m_eq + i] = p.ineq_rhs[i];
    }
    let mut lower = DVector::<f64>::zeros(ny);
    let mut upper = DVector::<f64>::from_element(ny, f64::INFINITY);
    lower.rows_mut(0, n).copy_from(&p.lower);
    upper.rows_mut(0, n).copy_from(&p.upper);
    let mut linear = DVector::<f64>::zeros(ny);
    for j in n..ny {
        linear[j] = 1.0;
    }
    let hessian = DMatrix::<f64>::zeros(0, 0);

    let mut y = DVector::<f64>::zeros(ny);
    y.rows_mut(0, n).copy_from(&v0);
    if m_eq > 0 {
        let r = &p.eq_rhs - &p.eq_matrix * &v0;
        for i in 0..m_eq {
            y[n + i] = r[i].max(0.0);
            y[n + m_eq + i] = (-r[i]).max(0.0);
        }
    }
    if has_t {
        let r = &p.ineq_matrix * &v0 - &p.ineq_rhs;
        y[t_idx] = r.max().max(0.0);
    }

    let mut fixed = vec![Fix::Free; ny];
    for j in 0..ny {
        if y[j] == lower[j] {
            fixed[j] = Fix::Lower;
        } else if y[j] == upper[j] {
            fixed[j] = Fix::Upper;
        }
    }
    let mut state = active_set::State {
        x: y,
        fixed,
        active: vec![false; m_eq + m_in],
    };
    let problem = active_set::Problem {
        hessian: &hessian,
        hessian_is_zero: true,
        linear: &linear,
        rows: &rows,
        rhs: &rhs,
        n_eq: m_eq,
        lower: &lower,
        upper: &upper,
    };
    let scale = 1.0 + p.eq_rhs.amax().max(p.ineq_rhs.amax());
    let rep = active_set::run(
        &problem,
        &mut state,
        settings.max_iterations,
        Some(1e-13 * scale),
    );
    let infeasibility = active_set::objective(&problem, &state.x);
    let status = match rep.outcome {
        Outcome::Threshold => QpStatus::Optimal,
        _ if infeasibility <= settings.feasibility_tol => QpStatus::Optimal,
        Outcome::Optimal => QpStatus::Infeasible,
        Outcome::IterationLimit | Outcome::Unbounded => QpStatus::IterationLimit,
    };

    let mut x = state.x.rows(0, n).into_owned();
    for j in 0..n {
        x[j] = x[j].clamp(p.lower[j], p.upper[j]);
    }
    let fixed: Vec<Fix> = state.fixed[..n].to_vec();
    let active: Vec<bool> = state.active.clone();
    Ok((
        active_set::State { x, fixed, active },
        status,
        rep.iterations,
    ))
}
