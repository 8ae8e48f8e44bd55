//! Dense symmetric quasidefinite LDL^T factorization.
//!
//! KKT blocks are symmetric with a positive-definite variable part followed
//! by a negative-definite constraint part. With static regularization added
//! to both parts, such matrices factor as L D L^T in the natural order
//! without pivoting; near-zero pivots are floored at `eps` with the sign the
//! position is expected to carry, and the outer solver runs a couple of
//! iterative-refinement rounds to absorb the perturbation.

/// In-place LDL^T of the lower triangle of the row-major `n x n` matrix `a`.
/// The first `npos` pivots are expected positive, the rest negative. After
/// the call the strict lower triangle holds unit `L` and the diagonal holds
/// `D`.
pub fn ldlt_factor(a: &mut [f64], n: usize, npos: usize, eps: f64) {
    debug_assert_eq!(a.len(), n * n);
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            let l = a[j * n + k];
            d -= l * l * a[k * n + k];
        }
        if d.abs() < eps {
            d = if j < npos { eps } else { -eps };
        }
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k] * a[k * n + k];
            }
            a[i * n + j] = v / d;
        }
    }
}

/// Solves `L D L^T x = rhs` in place using a factor from [`ldlt_factor`].
pub fn ldlt_solve(a: &[f64], n: usize, rhs: &mut [f64]) {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(rhs.len(), n);
    for i in 0..n {
        let mut v = rhs[i];
        for k in 0..i {
            v -= a[i * n + k] * rhs[k];
        }
        rhs[i] = v;
    }
    for i in 0..n {
        rhs[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut v = rhs[i];
        for k in (i + 1)..n {
            v -= a[k * n + i] * rhs[k];
        }
        rhs[i] = v;
    }
}

/// Solves against several right-hand sides stored as rows of `rhs`
/// (`count x n`, row-major).
pub fn ldlt_solve_many(a: &[f64], n: usize, rhs: &mut [f64], count: usize) {
    debug_assert_eq!(rhs.len(), n * count);
    for r in 0..count {
        ldlt_solve(a, n, &mut rhs[r * n..(r + 1) * n]);
    }
}
