//! Dense linear algebra for the small matrices this crate works with
//! (cluster sizes and parameter blocks are at most a few dozen).

use ndarray::{Array1, Array2};

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix,
/// or None if the matrix is not positive definite.
pub fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    cholesky_with_tol(a, 0.0)
}

/// Cholesky with a relative pivot threshold: pivots below
/// `rel_tol * max_diag` count as singular. Use a positive threshold when the
/// factorization backs a linear solve rather than a positive-definiteness
/// test.
pub fn cholesky_with_tol(a: &Array2<f64>, rel_tol: f64) -> Option<Array2<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let max_diag = (0..n).fold(0.0f64, |m, i| m.max(a[[i, i]].abs())).max(1e-300);
    let floor = rel_tol * max_diag;
    let mut l = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= floor || !sum.is_finite() {
                    return None;
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Solve L L^T x = b given the lower Cholesky factor.
pub fn chol_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in 0..n {
        for k in 0..i {
            let v = x[k];
            x[i] -= l[[i, k]] * v;
        }
        x[i] /= l[[i, i]];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            let v = x[k];
            x[i] -= l[[k, i]] * v;
        }
        x[i] /= l[[i, i]];
    }
    x
}

/// Inverse from a lower Cholesky factor.
pub fn chol_inverse(l: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut inv = Array2::zeros((n, n));
    for j in 0..n {
        let mut e = Array1::zeros(n);
        e[j] = 1.0;
        let col = chol_solve(l, &e);
        for i in 0..n {
            inv[[i, j]] = col[i];
        }
    }
    // Symmetrize to wash out round-off.
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (inv[[i, j]] + inv[[j, i]]);
            inv[[i, j]] = v;
            inv[[j, i]] = v;
        }
    }
    inv
}

/// LU decomposition with partial pivoting; returns None if singular.
pub struct Lu {
    lu: Array2<f64>,
    piv: Vec<usize>,
}

impl Lu {
    pub fn new(a: &Array2<f64>) -> Option<Self> {
        let n = a.nrows();
        debug_assert_eq!(n, a.ncols());
        let mut lu = a.clone();
        let mut piv: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let mut pivot = col;
            let mut max = lu[[col, col]].abs();
            for r in col + 1..n {
                let v = lu[[r, col]].abs();
                if v > max {
                    max = v;
                    pivot = r;
                }
            }
            if max < 1e-300 || !max.is_finite() {
                return None;
            }
            if pivot != col {
                for c in 0..n {
                    let tmp = lu[[col, c]];
                    lu[[col, c]] = lu[[pivot, c]];
                    lu[[pivot, c]] = tmp;
                }
                piv.swap(col, pivot);
            }
            for r in col + 1..n {
                let f = lu[[r, col]] / lu[[col, col]];
                lu[[r, col]] = f;
                for c in col + 1..n {
                    lu[[r, c]] -= f * lu[[col, c]];
                }
            }
        }
        Some(Lu { lu, piv })
    }

    pub fn solve(&self, b: &Array1<f64>) -> Array1<f64> {
        let n = self.lu.nrows();
        let mut x = Array1::zeros(n);
        for i in 0..n {
            x[i] = b[self.piv[i]];
        }
        for i in 0..n {
            for k in 0..i {
                let v = x[k];
                x[i] -= self.lu[[i, k]] * v;
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let v = x[k];
                x[i] -= self.lu[[i, k]] * v;
            }
            x[i] /= self.lu[[i, i]];
        }
        x
    }
}

/// Solve a x = b for a general square matrix.
pub fn solve(a: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    Lu::new(a).map(|lu| lu.solve(b))
}

/// tr(J H^{-1}) via column solves, without forming the inverse.
pub fn trace_solve(j: &Array2<f64>, h: &Array2<f64>) -> Option<f64> {
    let n = h.nrows();
    let lu = Lu::new(h)?;
    let mut tr = 0.0;
    for col in 0..n {
        let b = j.column(col).to_owned();
        let x = lu.solve(&b);
        tr += x[col];
    }
    Some(tr)
}

/// Force exact symmetry by averaging off-diagonal pairs.
pub fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
}

/// Check that the symmetric matrix has smallest eigenvalue >= floor,
/// via a Cholesky attempt on a - floor * I.
pub fn min_eig_at_least(a: &Array2<f64>, floor: f64) -> bool {
    let n = a.nrows();
    let mut shifted = a.clone();
    for i in 0..n {
        shifted[[i, i]] -= floor;
    }
    cholesky(&shifted).is_some()
}
