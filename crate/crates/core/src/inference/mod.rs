//! Posterior sampling, convergence diagnostics and least squares.

mod diagnostics;
mod hmc;
mod ols;
pub mod transforms;

pub use diagnostics::{effective_sample_size, rhat, ChainSummary, RhatReport};
pub use hmc::{hmc_sample, ChainSet, LogDensityTarget, SamplerConfig};
pub use ols::{ols_fit, ols_fit_named, OlsFit};

/// Central finite-difference gradient of `target` at `x`.
pub fn finite_difference_gradient<T: LogDensityTarget + ?Sized>(target: &T, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = target.log_density(&p);
            p[i] = orig - h;
            let down = target.log_density(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error between an analytic and a finite-difference
/// gradient, with the denominator floored at 1.
pub fn gradient_relative_error<T: LogDensityTarget + ?Sized>(target: &T, x: &[f64], h: f64) -> f64 {
    let mut analytic = vec![0.0; x.len()];
    target.log_density_and_gradient(x, &mut analytic);
    let fd = finite_difference_gradient(target, x, h);
    analytic
        .iter()
        .zip(&fd)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(1.0))
        .fold(0.0, f64::max)
}
