mod common;

use votacast::inference::{hmc_sample, rhat, LogDensityTarget, SamplerConfig};

#[test]
fn gradients_match_finite_differences() {
    let c = common::gradient_checks();
    assert!(c.passed, "{}", c.detail);
}

#[test]
fn synthesis_identities_hold() {
    let c = common::synthesis_identities();
    assert!(c.passed, "{}", c.detail);
}

#[test]
fn least_squares_matches_normal_equations() {
    assert!(common::ols_oracle_error(50) < 1e-9);
}

#[test]
fn benchmark_alternatives_rebuild_from_covariates() {
    let c = common::benchmark_check();
    assert!(c.passed, "{}", c.detail);
}

#[test]
fn toy_poll_marginal_agrees_with_monte_carlo() {
    let (exact, mc, se) = common::toy_marginal(20_000);
    assert!((exact - mc).abs() <= 3.0 * se, "{exact} vs {mc} +- {se}");
}

struct Gaussian {
    sd: Vec<f64>,
}

impl LogDensityTarget for Gaussian {
    fn dim(&self) -> usize {
        self.sd.len()
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.sd).map(|(x, s)| -0.5 * (x / s).powi(2)).sum()
    }
    fn log_density_and_gradient(&self, x: &[f64], g: &mut [f64]) -> f64 {
        for ((g, x), s) in g.iter_mut().zip(x).zip(&self.sd) {
            *g = -x / (s * s);
        }
        self.log_density(x)
    }
}

#[test]
fn sampler_recovers_badly_scaled_gaussian() {
    let target = Gaussian { sd: vec![0.01, 1.0, 30.0] };
    let cfg = SamplerConfig {
        chains: 4,
        iterations: 1000,
        seed: 2,
        ..SamplerConfig::default()
    };
    let set = hmc_sample(&target, &cfg).unwrap();
    let r = rhat(&set).unwrap();
    assert!(r.converged(1.05), "{}", r.max());
    assert_eq!(set.divergence_rate(), 0.0);
    for (i, s) in target.sd.iter().enumerate() {
        let xs: Vec<f64> = set.flat().map(|d| d[i]).collect();
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        assert!(m.abs() < 0.2 * s, "mean {m} for sd {s}");
        assert!((v.sqrt() / s - 1.0).abs() < 0.15, "sd {} for {s}", v.sqrt());
    }
}
