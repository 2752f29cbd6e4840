//! Unconstrained parameterizations used by the samplers.
//!
//! Correlation matrices are built from canonical partial correlations
//! `z = tanh(y)`. Row `i` of the Cholesky factor is
//! `L[i][j] = z_j * sqrt(w_j)` with `w_0 = 1`, `w_{j+1} = w_j (1 - z_j^2)`
//! and `L[i][i] = sqrt(w_i)`, so every row has unit norm.

use nalgebra::DMatrix;

/// Number of unconstrained values for an `n x n` correlation matrix.
pub fn corr_len(n: usize) -> usize {
    n * (n - 1) / 2
}

/// Cholesky factor of a correlation matrix together with the log Jacobian
/// of the transform plus an LKJ(`eta`) log prior on the correlation.
pub fn corr_cholesky(y: &[f64], n: usize, eta: f64) -> (DMatrix<f64>, f64) {
    debug_assert_eq!(y.len(), corr_len(n));
    let mut l = DMatrix::zeros(n, n);
    let mut extra = 0.0;
    let mut k = 0;
    for i in 0..n {
        let mut w: f64 = 1.0;
        for j in 0..i {
            let z = y[k].tanh();
            l[(i, j)] = z * w.sqrt();
            let one_minus = (1.0 - z * z).max(f64::MIN_POSITIVE);
            extra += coefficient(i, j, eta) * one_minus.ln();
            w *= one_minus;
            k += 1;
        }
        l[(i, i)] = w.sqrt();
    }
    (l, extra)
}

fn coefficient(row: usize, m: usize, eta: f64) -> f64 {
    1.0 + 0.5 * (row - 1 - m) as f64 + (eta - 1.0)
}

/// Gradient with respect to `y` of `<grad_l, L(y)> + extra(y)`.
pub fn corr_cholesky_backward(y: &[f64], n: usize, eta: f64, l: &DMatrix<f64>, grad_l: &DMatrix<f64>) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    let mut k = 0;
    for i in 0..n {
        // suffix[m] = sum_{j > m, j <= i} gL[i][j] * L[i][j]
        let mut suffix = vec![0.0; i + 1];
        let mut acc = 0.0;
        for j in (0..=i).rev() {
            suffix[j] = acc;
            acc += grad_l[(i, j)] * l[(i, j)];
        }
        let mut w: f64 = 1.0;
        for m in 0..i {
            let z = y[k].tanh();
            let one_minus = 1.0 - z * z;
            let s = w.sqrt();
            out[k] = grad_l[(i, m)] * s * one_minus - z * suffix[m] - 2.0 * coefficient(i, m, eta) * z;
            w *= one_minus;
            k += 1;
        }
    }
    out
}
