//! Householder QR with column pivoting that also materializes the full
//! orthogonal factor, so callers get both a range basis and a null-space basis.

use nalgebra::DMatrix;

/// `A P = Q R` for an `m x w` matrix `A`.
pub(crate) struct PivotedQr {
    /// Full `m x m` orthogonal factor.
    pub q: DMatrix<f64>,
    /// `m x w` upper-trapezoidal factor (in pivoted column order).
    pub r: DMatrix<f64>,
    /// `perm[k]` is the original column stored at position `k`.
    pub perm: Vec<usize>,
    pub rank: usize,
}

impl PivotedQr {
    pub fn new(a: &DMatrix<f64>, rel_tol: f64) -> Self {
        let (m, w) = a.shape();
        let mut r = a.clone();
        let mut perm: Vec<usize> = (0..w).collect();
        let mut reflectors: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut col_norms: Vec<f64> = (0..w).map(|j| r.column(j).norm_squared()).collect();
        let first_norm = col_norms.iter().cloned().fold(0.0, f64::max).sqrt();
        let mut rank = 0;

        for k in 0..w.min(m) {
            // pivot: largest remaining column norm, lowest index on ties
            let mut best = k;
            for j in k + 1..w {
                if col_norms[j] > col_norms[best] {
                    best = j;
                }
            }
            if best != k {
                r.swap_columns(k, best);
                col_norms.swap(k, best);
                perm.swap(k, best);
            }
            let norm: f64 = (k..m).map(|i| r[(i, k)] * r[(i, k)]).sum::<f64>().sqrt();
            if norm <= rel_tol * first_norm.max(f64::MIN_POSITIVE) {
                break;
            }
            let alpha = if r[(k, k)] > 0.0 { -norm } else { norm };
            let mut v: Vec<f64> = (k..m).map(|i| r[(i, k)]).collect();
            v[0] -= alpha;
            let vnorm2: f64 = v.iter().map(|x| x * x).sum();
            if vnorm2 > 0.0 {
                for j in k..w {
                    let dot: f64 = (k..m).map(|i| v[i - k] * r[(i, j)]).sum();
                    let f = 2.0 * dot / vnorm2;
                    for i in k..m {
                        r[(i, j)] -= f * v[i - k];
                    }
                }
                reflectors.push((k, v));
            }
            for i in k + 1..m {
                r[(i, k)] = 0.0;
            }
            for j in k + 1..w {
                col_norms[j] = (k + 1..m).map(|i| r[(i, j)] * r[(i, j)]).sum();
            }
            rank += 1;
        }

        // Q = H_0 H_1 ... H_{r-1}, accumulated right to left onto the identity.
        let mut q = DMatrix::<f64>::identity(m, m);
        for (k, v) in reflectors.iter().rev() {
            let vnorm2: f64 = v.iter().map(|x| x * x).sum();
            for j in 0..m {
                let dot: f64 = (*k..m).map(|i| v[i - k] * q[(i, j)]).sum();
                if dot == 0.0 {
                    continue;
                }
                let f = 2.0 * dot / vnorm2;
                for i in *k..m {
                    q[(i, j)] -= f * v[i - k];
                }
            }
        }
        PivotedQr { q, r, perm, rank }
    }

    /// Orthonormal basis of the null space of `A^T` (columns `rank..m` of `Q`).
    pub fn null_basis(&self) -> DMatrix<f64> {
        let m = self.q.nrows();
        self.q.columns(self.rank, m - self.rank).into_owned()
    }

    /// Least-squares solve of `A y = b` restricted to the independent columns;
    /// dependent columns get a zero coefficient.
    pub fn solve_least_squares(&self, b: &[f64]) -> Vec<f64> {
        let m = self.q.nrows();
        let w = self.r.ncols();
        let rk = self.rank;
        let mut qtb = vec![0.0; rk];
        for (k, slot) in qtb.iter_mut().enumerate() {
            *slot = (0..m).map(|i| self.q[(i, k)] * b[i]).sum();
        }
        let mut y_perm = vec![0.0; w];
        for k in (0..rk).rev() {
            let mut s = qtb[k];
            for (j, y) in y_perm.iter().enumerate().take(rk).skip(k + 1) {
                s -= self.r[(k, j)] * y;
            }
            y_perm[k] = s / self.r[(k, k)];
        }
        let mut y = vec![0.0; w];
        for (k, &col) in self.perm.iter().enumerate() {
            y[col] = y_perm[k];
        }
        y
    }
}
