//! Cholesky factorization with a jitter ladder, plus the directional
//! derivative of the factor.
//!
//! Gram matrices that mix value and derivative channels are often close to
//! singular (derivative channels of nearby points are strongly correlated),
//! so a plain factorization is given several chances with a growing diagonal
//! boost before the model is declared singular.

use nalgebra::{DMatrix, DVector};

/// Result of a successful factorization: the lower factor and the jitter
/// that was added to the diagonal (0.0 when none was needed).
#[derive(Debug, Clone)]
pub struct CholFactor {
    pub l: DMatrix<f64>,
    pub jitter: f64,
}

/// Attempts `chol(g + jitter I)` over the ladder
/// `jitter in {0, 1e-10 s, 1e-9 s, ..., 1e-4 s}` with `s` the mean diagonal
/// of `g`. On failure returns the pivot index of the last attempt.
pub fn cholesky_with_jitter(g: &DMatrix<f64>) -> Result<CholFactor, usize> {
    assert_eq!(g.nrows(), g.ncols(), "Gram matrix must be square");
    let n = g.nrows();
    if n == 0 {
        return Ok(CholFactor { l: DMatrix::zeros(0, 0), jitter: 0.0 });
    }
    let scale = g.diagonal().iter().sum::<f64>() / n as f64;
    // The floor keeps the ladder meaningful for matrices that are numerically
    // zero, e.g. the fantasy covariance of a point whose outcome is already
    // known exactly.
    let scale = if scale.is_finite() { scale.max(1e-8) } else { 1.0 };

    let mut last_pivot = 0;
    let mut ladder = vec![0.0];
    for e in 0..=6 {
        ladder.push(scale * 1e-10 * 10f64.powi(e));
    }
    for jitter in ladder {
        match raw_cholesky(g, jitter, scale) {
            Ok(l) => {
                if jitter > 0.0 {
                    log::debug!("cholesky needed jitter {jitter:.3e} (n = {n})");
                }
                return Ok(CholFactor { l, jitter });
            }
            Err(p) => last_pivot = p,
        }
    }
    Err(last_pivot)
}

fn raw_cholesky(g: &DMatrix<f64>, jitter: f64, scale: f64) -> Result<DMatrix<f64>, usize> {
    let n = g.nrows();
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = g[(j, j)] + jitter;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        // A pivot this far below the matrix scale means the factorization is
        // numerically meaningless even if d is still positive.
        if !(d > scale * 1e-15) || !d.is_finite() {
            return Err(j);
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut v = g[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / dj;
        }
    }
    Ok(l)
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in 0..n {
        for k in 0..i {
            let v = x[k];
            x[i] -= l[(i, k)] * v;
        }
        x[i] /= l[(i, i)];
    }
    x
}

/// Solves `L^T x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let v = x[k];
            x[i] -= l[(k, i)] * v;
        }
        x[i] /= l[(i, i)];
    }
    x
}

/// Solves `L X = B` column by column.
pub fn solve_lower_matrix(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let m = b.ncols();
    let mut x = b.clone();
    for c in 0..m {
        for i in 0..n {
            for k in 0..i {
                let v = x[(k, c)];
                x[(i, c)] -= l[(i, k)] * v;
            }
            x[(i, c)] /= l[(i, i)];
        }
    }
    x
}

/// Solves `G x = b` given the lower Cholesky factor of `G`.
pub fn solve_posdef(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    solve_lower_transpose(l, &solve_lower(l, b))
}

/// Solves `G X = B` column by column given the lower Cholesky factor of `G`.
pub fn solve_posdef_matrix(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let m = b.ncols();
    let mut x = solve_lower_matrix(l, b);
    for c in 0..m {
        for i in (0..n).rev() {
            for k in i + 1..n {
                let v = x[(k, c)];
                x[(i, c)] -= l[(k, i)] * v;
            }
            x[(i, c)] /= l[(i, i)];
        }
    }
    x
}

/// The map `Phi` appearing in the differential of the Cholesky factor: for a
/// symmetric perturbation `dC` of `C = L L^T`,
///
/// ```text
/// dL = L Phi(L^{-1} dC L^{-T})
/// ```
///
/// where `Phi` keeps the strict lower triangle and halves the diagonal.
/// Returns `Phi(L^{-1} dc L^{-T})`.
pub fn chol_pushforward(l: &DMatrix<f64>, dc: &DMatrix<f64>) -> DMatrix<f64> {
    // X = L^{-1} dc, A = X L^{-T} = (L^{-1} X^T)^T.
    let x = solve_lower_matrix(l, dc);
    let mut a = solve_lower_matrix(l, &x.transpose()).transpose();
    let n = a.nrows();
    for i in 0..n {
        a[(i, i)] *= 0.5;
        for j in (i + 1)..n {
            a[(i, j)] = 0.0;
        }
    }
    a
}
