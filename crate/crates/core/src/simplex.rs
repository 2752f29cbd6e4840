//! Party canon and the share-vector types every model exchanges.
//!
//! A full [`ShareVector`] lives on the probability simplex over the canon's
//! `L` parties. The polls model works in the `L - 1` dimensional
//! [`ReducedVector`] space obtained by dropping the pivot party, which is
//! always stored last.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartyCanon {
    labels: Vec<String>,
}

impl PartyCanon {
    /// Builds a canon from ordered labels, moving `pivot` to the last slot.
    pub fn new<S: AsRef<str>>(labels: &[S], pivot: &str) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "a party canon needs at least 2 labels, got {}",
                labels.len()
            )));
        }
        let mut out: Vec<String> = Vec::with_capacity(labels.len());
        for l in labels {
            let l = l.as_ref().trim();
            if l.is_empty() {
                return Err(Error::InvalidInput("empty party label".into()));
            }
            if out.iter().any(|x| x == l) {
                return Err(Error::InvalidInput(format!("duplicate party label `{l}`")));
            }
            out.push(l.to_string());
        }
        let at = out
            .iter()
            .position(|x| x == pivot)
            .ok_or_else(|| Error::InvalidInput(format!("pivot `{pivot}` is not in the canon")))?;
        let p = out.remove(at);
        out.push(p);
        Ok(PartyCanon { labels: out })
    }

    /// Canon whose last label is the pivot.
    pub fn with_last_as_pivot<S: AsRef<str>>(labels: &[S]) -> Result<Self> {
        let last = labels
            .last()
            .map(|s| s.as_ref().to_string())
            .unwrap_or_default();
        Self::new(labels, &last)
    }

    /// PSOE, PP, Podemos, C's and the residual "others" pivot.
    pub fn spain() -> Self {
        Self::with_last_as_pivot(&["PSOE", "PP", "PODEMOS", "CS", "OTHERS"])
            .expect("static canon is valid")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of free (non-pivot) dimensions, `L - 1`.
    pub fn reduced_len(&self) -> usize {
        self.labels.len() - 1
    }

    pub fn pivot_index(&self) -> usize {
        self.labels.len() - 1
    }

    pub fn pivot(&self) -> &str {
        &self.labels[self.pivot_index()]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareVector(Vec<f64>);

impl ShareVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("empty share vector".into()));
        }
        let mut sum = 0.0;
        for &v in &values {
            if !v.is_finite() || !(-SUM_TOL..=1.0 + SUM_TOL).contains(&v) {
                return Err(Error::InvalidInput(format!("share {v} outside [0, 1]")));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::OutOfSimplex { sum });
        }
        Ok(ShareVector(values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()))
    }

    /// Rescales non-negative weights onto the simplex.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let sum: f64 = values.iter().sum();
        if !(sum > 0.0) || values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidInput(
                "cannot normalize: weights must be non-negative with positive sum".into(),
            ));
        }
        Ok(ShareVector(values.into_iter().map(|v| v / sum).collect()))
    }

    pub fn uniform(len: usize) -> Self {
        ShareVector(vec![1.0 / len as f64; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for ShareVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedVector(Vec<f64>);

impl ReducedVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite reduced entry {v}")));
        }
        Ok(ReducedVector(values))
    }

    pub fn zeros(len: usize) -> Self {
        ReducedVector(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }
}

impl std::ops::Index<usize> for ReducedVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Symmetric positive semidefinite matrix in squared share points.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix(DMatrix<f64>);

impl CovMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::InvalidInput("covariance must be square".into()));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("covariance has non-finite entries".into()));
        }
        let n = m.nrows();
        for i in 0..n {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 {
                    return Err(Error::InvalidInput(format!(
                        "covariance not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        if n > 0 {
            let min = m.clone().symmetric_eigenvalues().min();
            if min < -1e-10 {
                return Err(Error::InvalidInput(format!(
                    "covariance not positive semidefinite (eigenvalue {min:e})"
                )));
            }
        }
        Ok(CovMatrix(m))
    }

    pub fn zeros(n: usize) -> Self {
        CovMatrix(DMatrix::zeros(n, n))
    }

    pub fn scaled_identity(n: usize, variance: f64) -> Self {
        CovMatrix(DMatrix::identity(n, n) * variance)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Max-shifted softmax; exactly invariant to adding a constant to `scores`.
pub fn softmax(scores: &[f64]) -> Result<ShareVector> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("softmax of an empty vector".into()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite score {s}")));
    }
    let mut out = vec![0.0; scores.len()];
    softmax_into(scores, &mut out);
    Ok(ShareVector(out))
}

/// Unchecked softmax into a caller buffer. Used on hot paths where the
/// scores are known to be finite.
pub(crate) fn softmax_into(scores: &[f64], out: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, s) in out.iter_mut().zip(scores) {
        *o = (s - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Drops the pivot (last) component.
pub fn reduce(full: &ShareVector, canon: &PartyCanon) -> Result<ReducedVector> {
    if full.len() != canon.len() {
        return Err(Error::InvalidInput(format!(
            "share vector has {} entries, canon has {}",
            full.len(),
            canon.len()
        )));
    }
    Ok(ReducedVector(full.0[..canon.reduced_len()].to_vec()))
}

/// Restores the pivot as one minus the sum of the free components.
pub fn lift(reduced: &ReducedVector, canon: &PartyCanon) -> Result<ShareVector> {
    if reduced.len() != canon.reduced_len() {
        return Err(Error::InvalidInput(format!(
            "reduced vector has {} entries, canon expects {}",
            reduced.len(),
            canon.reduced_len()
        )));
    }
    let sum: f64 = reduced.0.iter().sum();
    if sum > 1.0 + SUM_TOL || reduced.0.iter().any(|v| *v < -SUM_TOL) {
        return Err(Error::OutOfSimplex { sum });
    }
    let mut v: Vec<f64> = reduced.0.iter().map(|x| x.max(0.0)).collect();
    v.push((1.0 - sum).max(0.0));
    Ok(ShareVector(v))
}

/// Whether a reduced vector lifts to a valid point of the simplex.
pub fn in_simplex(reduced: &[f64]) -> bool {
    reduced.iter().all(|v| *v >= 0.0) && reduced.iter().sum::<f64>() <= 1.0
}
