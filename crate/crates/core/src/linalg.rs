//! Small dense helpers that nalgebra does not cover directly.

use nalgebra::DMatrix;

/// Relative tolerance below which a pivot is treated as an exact zero.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Lower-triangular factor `L` with `L Lᵀ = A` for a symmetric positive
/// *semi*-definite `A`.
///
/// Zero pivots (within `PSD_TOLERANCE` scaled by the largest diagonal entry)
/// produce a zero column instead of failing, so rank-deficient covariances
/// such as the all-zero matrix factor cleanly. Returns `None` when a pivot is
/// negative beyond tolerance or the input is not square/finite.
pub fn psd_cholesky(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || a.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let scale = (0..n)
        .map(|i| a[(i, i)].abs())
        .fold(0.0_f64, f64::max)
        .max(1.0);
    let tol = PSD_TOLERANCE * scale;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = 0.5 * (a[(j, j)] + a[(j, j)]);
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -tol {
            return None;
        }
        if d <= tol {
            // Column stays zero; remaining rows must not need it.
            for i in (j + 1)..n {
                let mut s = 0.5 * (a[(i, j)] + a[(j, i)]);
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if s.abs() > (tol * scale).sqrt() {
                    return None;
                }
            }
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = 0.5 * (a[(i, j)] + a[(j, i)]);
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Some(l)
}

/// `(A + Aᵀ) / 2` in place.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}
