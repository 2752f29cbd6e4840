use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub coefficients: DVector<f64>,
    pub residuals: DVector<f64>,
}

impl OlsFit {
    pub fn predict(&self, row: &[f64]) -> f64 {
        row.iter().zip(self.coefficients.iter()).map(|(x, b)| x * b).sum()
    }
}

/// Relative size below which a column is treated as dependent on the
/// columns before it.
const RANK_TOL: f64 = 1e-10;

pub fn ols_fit(design: &DMatrix<f64>, response: &DVector<f64>) -> Result<OlsFit> {
    let names: Vec<String> = (0..design.ncols()).map(|j| format!("column {j}")).collect();
    ols_fit_named(design, response, &names)
}

/// Least squares through a Householder QR factorization.
pub fn ols_fit_named(design: &DMatrix<f64>, response: &DVector<f64>, names: &[String]) -> Result<OlsFit> {
    let (n, p) = design.shape();
    if response.len() != n {
        return Err(Error::InvalidInput(format!(
            "design has {n} rows but response has {}",
            response.len()
        )));
    }
    if p == 0 || n < p {
        return Err(Error::InvalidInput(format!(
            "need at least as many rows as columns, got {n} x {p}"
        )));
    }
    if design.iter().chain(response.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value in regression data".into()));
    }
    let qr = design.clone().qr();
    let r = qr.r();
    let dependent: Vec<String> = (0..p)
        .filter(|&j| {
            let norm = design.column(j).norm();
            norm == 0.0 || r[(j, j)].abs() <= RANK_TOL * norm.max(1.0)
        })
        .map(|j| names.get(j).cloned().unwrap_or_else(|| format!("column {j}")))
        .collect();
    if !dependent.is_empty() {
        return Err(Error::SingularDesign { columns: dependent });
    }
    let qty = qr.q().transpose() * response;
    let coefficients = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let residuals = response - design * &coefficients;
    Ok(OlsFit {
        coefficients,
        residuals,
    })
}
