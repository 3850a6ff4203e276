//! Primal active-set iterations for a convex QP started from a feasible point.
//!
//! Variable bounds enter the working set by fixing the variable, so only the
//! general rows (equalities plus active inequalities) are factorized, over the
//! free variables. Steps are taken in the null space of those rows: a Newton
//! step when the reduced Hessian is positive definite, otherwise a descent
//! direction of zero curvature (which covers the LP case `H = 0`).

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::householder::PivotedQr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Fix {
    Free,
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Outcome {
    Optimal,
    IterationLimit,
    Unbounded,
    /// Early stop requested by the caller (objective fell below the threshold).
    Threshold,
}

pub(crate) struct Problem<'a> {
    pub hessian: &'a DMatrix<f64>,
    pub hessian_is_zero: bool,
    pub linear: &'a DVector<f64>,
    /// Equality rows first, then inequality rows (`a x <= b`).
    pub rows: &'a DMatrix<f64>,
    pub rhs: &'a DVector<f64>,
    pub n_eq: usize,
    pub lower: &'a DVector<f64>,
    pub upper: &'a DVector<f64>,
}

pub(crate) struct State {
    pub x: DVector<f64>,
    pub fixed: Vec<Fix>,
    pub active: Vec<bool>,
}

pub(crate) struct Report {
    pub outcome: Outcome,
    pub iterations: usize,
    /// One multiplier per row (zero for inactive inequalities).
    pub row_multipliers: Vec<f64>,
    /// Signed bound multipliers: positive at an upper bound, negative at a lower bound.
    pub bound_multipliers: Vec<f64>,
}

const RANK_TOL: f64 = 1e-10;
const ZERO_STEP: f64 = 1e-14;
/// Consecutive degenerate steps tolerated before switching to Bland's rule.
const DEGENERATE_LIMIT: usize = 25;

pub(crate) fn run(
    p: &Problem<'_>,
    st: &mut State,
    max_iterations: usize,
    stop_below: Option<f64>,
) -> Report {
    let n = st.x.len();
    let m = p.rows.nrows();
    let mut iterations = 0;
    let mut degenerate = 0usize;
    let mut bland = false;

    loop {
        if let Some(threshold) = stop_below {
            if objective(p, &st.x) <= threshold {
                return report(p, st, Outcome::Threshold, iterations);
            }
        }
        if iterations >= max_iterations {
            return report(p, st, Outcome::IterationLimit, iterations);
        }
        iterations += 1;

        let grad = gradient(p, &st.x);
        let gnorm = grad.amax();
        let free: Vec<usize> = (0..n).filter(|&j| st.fixed[j] == Fix::Free).collect();
        let act: Vec<usize> = (0..m).filter(|&i| i < p.n_eq || st.active[i]).collect();
        let nf = free.len();

        let mut at = DMatrix::<f64>::zeros(nf, act.len());
        for (c, &i) in act.iter().enumerate() {
            for (r, &j) in free.iter().enumerate() {
                at[(r, c)] = p.rows[(i, j)];
            }
        }
        let qr = PivotedQr::new(&at, RANK_TOL);
        let z = qr.null_basis();
        let g_free = DVector::from_iterator(nf, free.iter().map(|&j| grad[j]));
        let zg = z.transpose() * &g_free;
        let stat_tol = 1e-9 * (1.0 + gnorm);

        let direction = if zg.amax() <= stat_tol || z.ncols() == 0 {
            None
        } else {
            Some(null_space_step(p, &free, &z, &zg, stat_tol))
        };

        let Some((dir_free, step_max)) = direction else {
            // Stationary on the current face: check multiplier signs.
            let (mu, bound_mult) = multipliers(p, st, &qr, &free, &act, &grad);
            let dual_tol = 1e-9 * (1.0 + gnorm);
            let mut drop: Option<(usize, f64)> = None; // index in [bounds..., rows...]
            for (j, &v) in bound_mult.iter().enumerate().take(n) {
                let wrong = match st.fixed[j] {
                    Fix::Free => false,
                    _ if p.lower[j] == p.upper[j] => false,
                    Fix::Upper => v < -dual_tol,
                    Fix::Lower => v > dual_tol,
                };
                if wrong {
                    let score = -v.abs();
                    if drop.is_none() || (!bland && score < drop.unwrap().1) {
                        drop = Some((j, score));
                    }
                }
            }
            for (c, &i) in act.iter().enumerate() {
                if i < p.n_eq {
                    continue;
                }
                if mu[c] < -dual_tol {
                    let score = mu[c];
                    if drop.is_none() || (!bland && score < drop.unwrap().1) {
                        drop = Some((n + i, score));
                    }
                }
            }
            match drop {
                None => return report(p, st, Outcome::Optimal, iterations),
                Some((idx, _)) if idx < n => st.fixed[idx] = Fix::Free,
                Some((idx, _)) => st.active[idx - n] = false,
            }
            continue;
        };

        // Ratio test along the direction.
        let pnorm = dir_free.amax();
        let eps = 1e-12 * pnorm;
        let mut alpha = step_max;
        let mut blocking: Option<usize> = None; // bound j or row n+i
        for (r, &j) in free.iter().enumerate() {
            let d = dir_free[r];
            let dist = if d > eps && p.upper[j].is_finite() {
                (p.upper[j] - st.x[j]).max(0.0) / d
            } else if d < -eps && p.lower[j].is_finite() {
                (p.lower[j] - st.x[j]).min(0.0) / d
            } else {
                continue;
            };
            if dist < alpha {
                alpha = dist;
                blocking = Some(j);
            }
        }
        for i in p.n_eq..m {
            if st.active[i] {
                continue;
            }
            let mut ap = 0.0;
            let mut anorm = 0.0f64;
            for (r, &j) in free.iter().enumerate() {
                let a = p.rows[(i, j)];
                ap += a * dir_free[r];
                anorm = anorm.max(a.abs());
            }
            if ap <= eps * anorm.max(1.0) {
                continue;
            }
            let slack = p.rhs[i] - row_dot(p.rows, i, &st.x);
            let dist = slack.max(0.0) / ap;
            if dist < alpha {
                alpha = dist;
                blocking = Some(n + i);
            }
        }
        if !alpha.is_finite() {
            return report(p, st, Outcome::Unbounded, iterations);
        }

        for (r, &j) in free.iter().enumerate() {
            st.x[j] += alpha * dir_free[r];
        }
        match blocking {
            Some(j) if j < n => {
                if dir_free[free.iter().position(|&f| f == j).unwrap()] > 0.0 {
                    st.x[j] = p.upper[j];
                    st.fixed[j] = Fix::Upper;
                } else {
                    st.x[j] = p.lower[j];
                    st.fixed[j] = Fix::Lower;
                }
            }
            Some(i) => st.active[i - n] = true,
            None => {}
        }

        if alpha * pnorm <= ZERO_STEP * (1.0 + st.x.amax()) {
            degenerate += 1;
            if degenerate > DEGENERATE_LIMIT {
                bland = true;
            }
        } else {
            degenerate = 0;
        }
    }
}

/// Minimizing direction restricted to the null space `Z`.
/// Returns the free-variable direction and the maximal step length.
fn null_space_step(
    p: &Problem<'_>,
    free: &[usize],
    z: &DMatrix<f64>,
    zg: &DVector<f64>,
    stat_tol: f64,
) -> (DVector<f64>, f64) {
    let nf = free.len();
    let h_free_zero = p.hessian_is_zero
        || free
            .iter()
            .all(|&i| free.iter().all(|&j| p.hessian[(i, j)] == 0.0));
    if h_free_zero {
        return (-(z * zg), f64::INFINITY);
    }
    let mut hff = DMatrix::<f64>::zeros(nf, nf);
    for (r, &i) in free.iter().enumerate() {
        for (c, &j) in free.iter().enumerate() {
            hff[(r, c)] = p.hessian[(i, j)];
        }
    }
    let hz = z.transpose() * &hff * z;
    let scale = hz.diagonal().amax().max(1e-300);
    if let Some(chol) = hz.clone().cholesky() {
        let l = chol.l_dirty();
        let min_pivot = (0..l.nrows())
            .map(|k| l[(k, k)])
            .fold(f64::INFINITY, f64::min);
        if min_pivot * min_pivot > 1e-12 * scale {
            let pz = -chol.solve(zg);
            return (z * pz, 1.0);
        }
    }
    // Singular reduced Hessian: go along a zero-curvature descent direction if one exists.
    let eig = SymmetricEigen::new(hz);
    let lmax = eig.eigenvalues.amax().max(1e-300);
    let k = zg.len();
    let mut null_part = DVector::<f64>::zeros(k);
    let mut newton = DVector::<f64>::zeros(k);
    for e in 0..k {
        let v = eig.eigenvectors.column(e);
        let coef = v.dot(zg);
        if eig.eigenvalues[e] <= 1e-10 * lmax {
            null_part += v * coef;
        } else {
            newton -= v * (coef / eig.eigenvalues[e]);
        }
    }
    if null_part.amax() > stat_tol {
        (-(z * null_part), f64::INFINITY)
    } else {
        (z * newton, 1.0)
    }
}

fn multipliers(
    p: &Problem<'_>,
    st: &State,
    qr: &PivotedQr,
    free: &[usize],
    act: &[usize],
    grad: &DVector<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let rhs: Vec<f64> = free.iter().map(|&j| -grad[j]).collect();
    let mu = if act.is_empty() {
        Vec::new()
    } else {
        qr.solve_least_squares(&rhs)
    };
    let n = st.x.len();
    let mut bound_mult = vec![0.0; n];
    for j in 0..n {
        if st.fixed[j] == Fix::Free {
            continue;
        }
        let mut r = grad[j];
        for (c, &i) in act.iter().enumerate() {
            r += mu[c] * p.rows[(i, j)];
        }
        bound_mult[j] = -r;
    }
    (mu, bound_mult)
}

fn report(p: &Problem<'_>, st: &State, outcome: Outcome, iterations: usize) -> Report {
    let n = st.x.len();
    let m = p.rows.nrows();
    let grad = gradient(p, &st.x);
    let free: Vec<usize> = (0..n).filter(|&j| st.fixed[j] == Fix::Free).collect();
    let act: Vec<usize> = (0..m).filter(|&i| i < p.n_eq || st.active[i]).collect();
    let mut at = DMatrix::<f64>::zeros(free.len(), act.len());
    for (c, &i) in act.iter().enumerate() {
        for (r, &j) in free.iter().enumerate() {
            at[(r, c)] = p.rows[(i, j)];
        }
    }
    let qr = PivotedQr::new(&at, RANK_TOL);
    let (mu, bound_multipliers) = multipliers(p, st, &qr, &free, &act, &grad);
    let mut row_multipliers = vec![0.0; m];
    for (c, &i) in act.iter().enumerate() {
        row_multipliers[i] = mu[c];
    }
    Report {
        outcome,
        iterations,
        row_multipliers,
        bound_multipliers,
    }
}

pub(crate) fn gradient(p: &Problem<'_>, x: &DVector<f64>) -> DVector<f64> {
    if p.hessian_is_zero {
        p.linear.clone()
    } else {
        p.hessian * x + p.linear
    }
}

pub(crate) fn objective(p: &Problem<'_>, x: &DVector<f64>) -> f64 {
    let lin = p.linear.dot(x);
    if p.hessian_is_zero {
        lin
    } else {
        0.5 * x.dot(&(p.hessian * x)) + lin
    }
}

fn row_dot(rows: &DMatrix<f64>, i: usize, x: &DVector<f64>) -> f64 {
    let mut s = 0.0;
    for j in 0..x.len() {
        s += rows[(i, j)] * x[j];
    }
    s
}
