use serde::Serialize;

use super::ChainSet;
use crate::error::{Error, Result};

/// Split-chain potential scale reduction per dimension.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RhatReport {
    pub values: Vec<f64>,
    /// Dimensions whose within-chain variance is zero.
    pub degenerate: Vec<bool>,
}

impl RhatReport {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(1.0, f64::max)
    }

    pub fn converged(&self, bound: f64) -> bool {
        self.values.iter().all(|v| *v < bound)
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

pub fn rhat(set: &ChainSet) -> Result<RhatReport> {
    if set.chains() < 2 {
        return Err(Error::InsufficientChains {
            needed: 2,
            got: set.chains(),
        });
    }
    let n = set.iterations();
    if n < 4 {
        return Err(Error::Config(format!(
            "split R-hat needs at least 4 draws per chain, got {n}"
        )));
    }
    let half = n / 2;
    let mut values = Vec::with_capacity(set.dim());
    let mut degenerate = Vec::with_capacity(set.dim());
    let mut buf = Vec::with_capacity(half);
    for d in 0..set.dim() {
        let mut means = Vec::new();
        let mut vars = Vec::new();
        for chain in &set.draws {
            for part in [&chain[..half], &chain[n - half..]] {
                buf.clear();
                buf.extend(part.iter().map(|x| x[d]));
                let (m, v) = mean_var(&buf);
                means.push(m);
                vars.push(v);
            }
        }
        let w = vars.iter().sum::<f64>() / vars.len() as f64;
        let (_, b_over_n) = mean_var(&means);
        let nf = half as f64;
        if w <= 0.0 {
            degenerate.push(true);
            values.push(if b_over_n > 0.0 { f64::INFINITY } else { 1.0 });
            continue;
        }
        let var_plus = (nf - 1.0) / nf * w + b_over_n;
        values.push((var_plus / w).sqrt().max(1.0 - 1e-6));
        degenerate.push(false);
    }
    Ok(RhatReport { values, degenerate })
}

/// Multi-chain effective sample size per dimension, using Geyer's initial
/// monotone sequence on the combined autocorrelation.
pub fn effective_sample_size(set: &ChainSet) -> Vec<f64> {
    let m = set.chains();
    let n = set.iterations();
    let total = (m * n) as f64;
    (0..set.dim())
        .map(|d| {
            let series: Vec<Vec<f64>> = set
                .draws
                .iter()
                .map(|c| c.iter().map(|x| x[d]).collect())
                .collect();
            let stats: Vec<(f64, f64)> = series.iter().map(|s| mean_var(s)).collect();
            let w = stats.iter().map(|s| s.1).sum::<f64>() / m as f64;
            if !(w > 0.0) || n < 4 {
                return total;
            }
            let b_over_n = if m > 1 {
                mean_var(&stats.iter().map(|s| s.0).collect::<Vec<_>>()).1
            } else {
                0.0
            };
            let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;
            let autocov = |lag: usize| -> f64 {
                series
                    .iter()
                    .zip(&stats)
                    .map(|(s, (mu, _))| {
                        (0..n - lag).map(|t| (s[t] - mu) * (s[t + lag] - mu)).sum::<f64>() / n as f64
                    })
                    .sum::<f64>()
                    / m as f64
            };
            let rho = |lag: usize| 1.0 - (w - autocov(lag)) / var_plus;
            let mut tau = -1.0;
            let mut prev_pair = f64::INFINITY;
            let mut lag = 0;
            while lag + 1 < n {
                let pair = rho(lag) + rho(lag + 1);
                if pair < 0.0 {
                    break;
                }
                let pair = pair.min(prev_pair);
                tau += 2.0 * pair;
                prev_pair = pair;
                lag += 2;
            }
            total / tau.max(1.0 / total.log10().max(1.0))
        })
        .collect()
}

/// Per-dimension summary used in posterior reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainSummary {
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub q95: f64,
    pub rhat: f64,
    pub ess: f64,
}
