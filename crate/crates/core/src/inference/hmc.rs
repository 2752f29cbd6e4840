use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A differentiable log density on an unconstrained space.
///
/// Implementations must be safe to evaluate from several chains at once.
pub trait LogDensityTarget: Sync {
    fn dim(&self) -> usize;

    fn log_density(&self, x: &[f64]) -> f64;

    /// Writes the gradient into `grad` and returns the log density.
    fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64;

    /// Half-width of the uniform box initial points are drawn from.
    fn init_radius(&self) -> f64 {
        2.0
    }

    /// Draws a candidate initial point.
    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let radius = self.init_radius();
        (0..self.dim()).map(|_| rng.random_range(-radius..=radius)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub chains: usize,
    pub iterations: usize,
    pub warmup_fraction: f64,
    pub target_accept: f64,
    pub seed: u64,
    /// Trajectory length in metric-scaled units; the leapfrog count is
    /// `ceil(integration_time / step_size)`.
    pub integration_time: f64,
    pub max_leapfrog: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: 4,
            iterations: 2000,
            warmup_fraction: 0.5,
            target_accept: 0.8,
            seed: 20151220,
            integration_time: 2.5,
            max_leapfrog: 512,
        }
    }
}

impl SamplerConfig {
    pub fn warmup(&self) -> usize {
        (self.iterations as f64 * self.warmup_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.chains < 1 {
            return Err(Error::Config("at least one chain is required".into()));
        }
        if self.iterations < 2 {
            return Err(Error::Config("at least two iterations are required".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup fraction {} outside (0, 1)",
                self.warmup_fraction
            )));
        }
        if self.iterations <= self.warmup() {
            return Err(Error::Config("no post-warmup iterations requested".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("target acceptance must be in (0, 1)".into()));
        }
        if !(self.integration_time > 0.0) || self.max_leapfrog == 0 {
            return Err(Error::Config("integration time and leapfrog cap must be positive".into()));
        }
        Ok(())
    }
}

/// Post-warmup draws, `chains x iterations x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSet {
    pub draws: Vec<Vec<Vec<f64>>>,
    pub log_density: Vec<Vec<f64>>,
    pub warmup: usize,
    pub seed: u64,
    pub step_size: Vec<f64>,
    pub leapfrog_steps: Vec<usize>,
    pub divergences: Vec<usize>,
    pub accept_rate: Vec<f64>,
}

impl ChainSet {
    pub fn chains(&self) -> usize {
        self.draws.len()
    }

    pub fn iterations(&self) -> usize {
        self.draws.first().map_or(0, Vec::len)
    }

    pub fn dim(&self) -> usize {
        self.draws
            .first()
            .and_then(|c| c.first())
            .map_or(0, Vec::len)
    }

    /// Draws of all chains, concatenated chain by chain.
    pub fn flat(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.draws.iter().flatten()
    }

    pub fn divergence_rate(&self) -> f64 {
        let total = (self.chains() * self.iterations()).max(1);
        self.divergences.iter().sum::<usize>() as f64 / total as f64
    }

    /// More than 10% of post-warmup transitions diverged.
    pub fn too_many_divergences(&self) -> bool {
        self.divergence_rate() > 0.10
    }
}

const DIVERGENCE_ENERGY: f64 = 1000.0;

struct DualAveraging {
    mu: f64,
    log_eps_bar: f64,
    h_bar: f64,
    t: f64,
    target: f64,
}

impl DualAveraging {
    fn new(eps: f64, target: f64) -> Self {
        DualAveraging {
            mu: (10.0 * eps).ln(),
            log_eps_bar: 0.0,
            h_bar: 0.0,
            t: 0.0,
            target,
        }
    }

    fn update(&mut self, accept: f64) -> f64 {
        const GAMMA: f64 = 0.05;
        const T0: f64 = 10.0;
        const KAPPA: f64 = 0.75;
        self.t += 1.0;
        let w = 1.0 / (self.t + T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept);
        let log_eps = self.mu - self.t.sqrt() / GAMMA * self.h_bar;
        let eta = self.t.powf(-KAPPA);
        self.log_eps_bar = eta * log_eps + (1.0 - eta) * self.log_eps_bar;
        log_eps.exp()
    }

    fn final_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Welford accumulator for the diagonal metric.
struct VarianceEstimator {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl VarianceEstimator {
    fn new(dim: usize) -> Self {
        VarianceEstimator {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / self.n;
            *s += d * (v - *m);
        }
    }

    /// Variance shrunk toward 1e-3, as in common adaptive HMC practice.
    fn regularized(&self) -> Vec<f64> {
        let n = self.n;
        self.m2
            .iter()
            .map(|s| {
                let var = if n > 1.0 { s / (n - 1.0) } else { 1.0 };
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

/// Slow-adaptation windows `[start, end)` for the metric, doubling in size.
fn metric_windows(warmup: usize) -> Vec<(usize, usize)> {
    if warmup < 20 {
        return Vec::new();
    }
    let (init, term, base) = if warmup < 150 {
        let init = (0.15 * warmup as f64) as usize;
        let term = (0.1 * warmup as f64) as usize;
        (init, term, warmup - init - term)
    } else {
        (75, 50, 25)
    };
    let end = warmup - term;
    let mut out = Vec::new();
    let mut start = init;
    let mut size = base;
    while start < end {
        let mut stop = start + size;
        // absorb a trailing window that would be too short to double into
        if stop + 2 * size > end {
            stop = end;
        }
        out.push((start, stop.min(end)));
        start = stop;
        size *= 2;
    }
    out
}

struct Chain<'a, T: LogDensityTarget + ?Sized> {
    target: &'a T,
    rng: ChaCha8Rng,
    x: Vec<f64>,
    lp: f64,
    grad: Vec<f64>,
    inv_metric: Vec<f64>,
}

struct Transition {
    accept: f64,
    divergent: bool,
}

impl<T: LogDensityTarget + ?Sized> Chain<'_, T> {
    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(&self.inv_metric).map(|(p, m)| p * p * m).sum::<f64>()
    }

    fn momentum(&mut self) -> Vec<f64> {
        self.inv_metric
            .iter()
            .map(|m| {
                let z: f64 = self.rng.sample(StandardNormal);
                z / m.sqrt()
            })
            .collect()
    }

    fn transition(&mut self, eps: f64, steps: usize) -> Transition {
        let dim = self.x.len();
        let p0 = self.momentum();
        let h0 = -self.lp + self.kinetic(&p0);
        let mut x = self.x.clone();
        let mut p = p0;
        let mut g = self.grad.clone();
        let mut lp = self.lp;
        let mut divergent = false;
        for _ in 0..steps {
            for i in 0..dim {
                p[i] += 0.5 * eps * g[i];
                x[i] += eps * self.inv_metric[i] * p[i];
            }
            lp = self.target.log_density_and_gradient(&x, &mut g);
            if !lp.is_finite() || g.iter().any(|v| !v.is_finite()) {
                divergent = true;
                break;
            }
            for i in 0..dim {
                p[i] += 0.5 * eps * g[i];
            }
            let h = -lp + self.kinetic(&p);
            if h - h0 > DIVERGENCE_ENERGY {
                divergent = true;
                break;
            }
        }
        if divergent {
            return Transition {
                accept: 0.0,
                divergent: true,
            };
        }
        let h1 = -lp + self.kinetic(&p);
        let accept = if h1.is_finite() { (h0 - h1).exp().min(1.0) } else { 0.0 };
        let u: f64 = self.rng.random();
        if u < accept {
            self.x = x;
            self.lp = lp;
            self.grad = g;
        }
        Transition {
            accept,
            divergent: false,
        }
    }

    /// Doubles or halves the step until single-step acceptance crosses 1/2.
    fn reasonable_step(&mut self) -> f64 {
        let mut eps: f64 = 0.1;
        let probe = |chain: &mut Self, eps: f64| -> f64 {
            let saved = (chain.x.clone(), chain.lp, chain.grad.clone());
            let p0 = chain.momentum();
            let h0 = -chain.lp + chain.kinetic(&p0);
            let mut p = p0;
            let mut x = chain.x.clone();
            let mut g = chain.grad.clone();
            for i in 0..x.len() {
                p[i] += 0.5 * eps * g[i];
                x[i] += eps * chain.inv_metric[i] * p[i];
            }
            let lp = chain.target.log_density_and_gradient(&x, &mut g);
            for i in 0..x.len() {
                p[i] += 0.5 * eps * g[i];
            }
            let h1 = -lp + chain.kinetic(&p);
            (chain.x, chain.lp, chain.grad) = saved;
            let d = h0 - h1;
            if d.is_finite() { d } else { f64::NEG_INFINITY }
        };
        let first = probe(self, eps);
        let up = first > (0.5f64).ln();
        for _ in 0..60 {
            let d = probe(self, eps);
            if up && d <= (0.5f64).ln() {
                break;
            }
            if !up && d > (0.5f64).ln() {
                break;
            }
            eps = if up { eps * 2.0 } else { eps / 2.0 };
            if !(1e-10..=1e3).contains(&eps) {
                break;
            }
        }
        eps.clamp(1e-10, 1e3)
    }
}

fn steps_for(eps: f64, config: &SamplerConfig) -> usize {
    ((config.integration_time / eps).ceil() as usize).clamp(1, config.max_leapfrog)
}

struct ChainOutput {
    draws: Vec<Vec<f64>>,
    lps: Vec<f64>,
    step: f64,
    steps: usize,
    divergences: usize,
    accept: f64,
}

fn run_chain<T: LogDensityTarget + ?Sized>(target: &T, config: &SamplerConfig, chain_id: usize) -> Result<ChainOutput> {
    let dim = target.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(chain_id as u64 + 1);

    let mut grad = vec![0.0; dim];
    let mut init = None;
    for _ in 0..100 {
        let x = target.initial_point(&mut rng);
        let lp = target.log_density_and_gradient(&x, &mut grad);
        if lp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            init = Some((x, lp));
            break;
        }
    }
    let (x, lp) = init.ok_or(Error::Init { chain: chain_id })?;
    let mut chain = Chain {
        target,
        rng,
        x,
        lp,
        grad,
        inv_metric: vec![1.0; dim],
    };

    let warmup = config.warmup();
    let windows = metric_windows(warmup);
    let jitter = |rng: &mut ChaCha8Rng, eps: f64| eps * rng.random_range(0.9..1.1);

    let mut eps = chain.reasonable_step();
    let mut da = DualAveraging::new(eps, config.target_accept);
    let mut var = VarianceEstimator::new(dim);
    for it in 0..warmup {
        let e = jitter(&mut chain.rng, eps);
        let t = chain.transition(e, steps_for(eps, config));
        eps = da.update(t.accept);
        if let Some(&(_, end)) = windows.iter().find(|(s, e)| (*s..*e).contains(&it)) {
            var.add(&chain.x);
            if it + 1 == end {
                chain.inv_metric = var.regularized();
                var = VarianceEstimator::new(dim);
                eps = chain.reasonable_step();
                da = DualAveraging::new(eps, config.target_accept);
            }
        }
    }
    if warmup > 0 {
        eps = da.final_step();
    }
    let steps = steps_for(eps, config);

    let sampling = config.iterations - warmup;
    let mut draws = Vec::with_capacity(sampling);
    let mut lps = Vec::with_capacity(sampling);
    let mut divergences = 0;
    let mut accept = 0.0;
    for _ in 0..sampling {
        let e = jitter(&mut chain.rng, eps);
        let t = chain.transition(e, steps);
        divergences += usize::from(t.divergent);
        accept += t.accept;
        draws.push(chain.x.clone());
        lps.push(chain.lp);
    }
    Ok(ChainOutput {
        draws,
        lps,
        step: eps,
        steps,
        divergences,
        accept: accept / sampling as f64,
    })
}

/// Runs `config.chains` independent HMC chains, one thread each.
///
/// Each chain draws from its own ChaCha stream derived from the seed, so the
/// result is bit-identical for a fixed seed, config and target.
pub fn hmc_sample<T: LogDensityTarget + ?Sized>(target: &T, config: &SamplerConfig) -> Result<ChainSet> {
    config.validate()?;
    if target.dim() == 0 {
        return Err(Error::Config("target has dimension 0".into()));
    }
    let outputs: Vec<Result<ChainOutput>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..config.chains)
            .map(|c| s.spawn(move || run_chain(target, config, c)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sampler thread panicked"))
            .collect()
    });
    let mut set = ChainSet {
        draws: Vec::new(),
        log_density: Vec::new(),
        warmup: config.warmup(),
        seed: config.seed,
        step_size: Vec::new(),
        leapfrog_steps: Vec::new(),
        divergences: Vec::new(),
        accept_rate: Vec::new(),
    };
    for out in outputs {
        let out = out?;
        set.draws.push(out.draws);
        set.log_density.push(out.lps);
        set.step_size.push(out.step);
        set.leapfrog_steps.push(out.steps);
        set.divergences.push(out.divergences);
        set.accept_rate.push(out.accept);
    }
    if set.too_many_divergences() {
        log::warn!(
            "{:.1}% of post-warmup transitions diverged",
            100.0 * set.divergence_rate()
        );
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{effective_sample_size, rhat};

    pub(crate) struct StdNormal(pub usize);

    impl LogDensityTarget for StdNormal {
        fn dim(&self) -> usize {
            self.0
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            -0.5 * x.iter().map(|v| v * v).sum::<f64>()
        }
        fn log_density_and_gradient(&self, x: &[f64], g: &mut [f64]) -> f64 {
            for (g, v) in g.iter_mut().zip(x) {
                *g = -v;
            }
            self.log_density(x)
        }
    }

    /// Bivariate normal, unit variances, correlation `rho`.
    struct Correlated(f64);

    impl LogDensityTarget for Correlated {
        fn dim(&self) -> usize {
            2
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            let r = self.0;
            -0.5 * (x[0] * x[0] - 2.0 * r * x[0] * x[1] + x[1] * x[1]) / (1.0 - r * r)
        }
        fn log_density_and_gradient(&self, x: &[f64], g: &mut [f64]) -> f64 {
            let r = self.0;
            let d = 1.0 - r * r;
            g[0] = -(x[0] - r * x[1]) / d;
            g[1] = -(x[1] - r * x[0]) / d;
            self.log_density(x)
        }
    }

    fn moments(set: &ChainSet, i: usize) -> (f64, f64) {
        let xs: Vec<f64> = set.flat().map(|d| d[i]).collect();
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn standard_normal_moments() {
        let cfg = SamplerConfig { seed: 7, ..Default::default() };
        let set = hmc_sample(&StdNormal(10), &cfg).unwrap();
        assert_eq!(set.chains(), 4);
        assert_eq!(set.iterations(), 1000);
        let ess = effective_sample_size(&set);
        for i in 0..10 {
            let (m, v) = moments(&set, i);
            let se = (v / ess[i]).sqrt();
            assert!(m.abs() < 3.0 * se, "dim {i}: mean {m}, se {se}");
            assert!((0.8..=1.2).contains(&v), "dim {i}: var {v}");
        }
        let r = rhat(&set).unwrap();
        assert!(r.values.iter().all(|v| *v < 1.05), "{:?}", r.values);
        assert!(!set.too_many_divergences());
    }

    #[test]
    fn correlated_gaussian() {
        let cfg = SamplerConfig { seed: 11, ..Default::default() };
        let set = hmc_sample(&Correlated(0.9), &cfg).unwrap();
        let xs: Vec<&Vec<f64>> = set.flat().collect();
        let n = xs.len() as f64;
        let m0 = xs.iter().map(|d| d[0]).sum::<f64>() / n;
        let m1 = xs.iter().map(|d| d[1]).sum::<f64>() / n;
        let c = xs.iter().map(|d| (d[0] - m0) * (d[1] - m1)).sum::<f64>();
        let v0 = xs.iter().map(|d| (d[0] - m0).powi(2)).sum::<f64>();
        let v1 = xs.iter().map(|d| (d[1] - m1).powi(2)).sum::<f64>();
        let rho = c / (v0 * v1).sqrt();
        assert!((rho - 0.9).abs() <= 0.05, "rho {rho}");
    }

    #[test]
    fn one_dimensional_normal_is_preserved() {
        let cfg = SamplerConfig { seed: 3, chains: 2, ..Default::default() };
        let set = hmc_sample(&StdNormal(1), &cfg).unwrap();
        let (m, v) = moments(&set, 0);
        let ess = effective_sample_size(&set)[0];
        assert!(m.abs() < 3.0 * (v / ess).sqrt());
        assert!((v - 1.0).abs() < 0.15);
    }

    #[test]
    fn reproducible_for_fixed_seed() {
        let cfg = SamplerConfig { seed: 5, iterations: 200, chains: 2, ..Default::default() };
        let a = hmc_sample(&StdNormal(3), &cfg).unwrap();
        let b = hmc_sample(&StdNormal(3), &cfg).unwrap();
        assert_eq!(a, b);
        let c = hmc_sample(&StdNormal(3), &SamplerConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(a.draws, c.draws);
    }

    #[test]
    fn rejects_degenerate_configs() {
        let t = StdNormal(2);
        let no_sampling = SamplerConfig { iterations: 2, warmup_fraction: 0.99, ..Default::default() };
        assert!(matches!(hmc_sample(&t, &no_sampling), Err(Error::Config(_))));
        let no_chains = SamplerConfig { chains: 0, ..Default::default() };
        assert!(hmc_sample(&t, &no_chains).is_err());
        assert!(hmc_sample(&StdNormal(0), &SamplerConfig::default()).is_err());
    }

    struct NowhereFinite;
    impl LogDensityTarget for NowhereFinite {
        fn dim(&self) -> usize {
            1
        }
        fn log_density(&self, _: &[f64]) -> f64 {
            f64::NEG_INFINITY
        }
        fn log_density_and_gradient(&self, _: &[f64], g: &mut [f64]) -> f64 {
            g[0] = 0.0;
            f64::NEG_INFINITY
        }
    }

    #[test]
    fn init_failure_is_reported() {
        let cfg = SamplerConfig { iterations: 10, ..Default::default() };
        assert!(matches!(hmc_sample(&NowhereFinite, &cfg), Err(Error::Init { .. })));
    }

    #[test]
    fn windows_cover_slow_phase() {
        let w = metric_windows(1000);
        assert_eq!(w.first().unwrap().0, 75);
        assert_eq!(w.last().unwrap().1, 950);
        for pair in w.windows(2) {
            assert_eq!(pair[0].1, pair[1].0);
        }
        assert!(metric_windows(10).is_empty());
        let small = metric_windows(100);
        assert_eq!(small.first().unwrap().0, 15);
        assert_eq!(small.last().unwrap().1, 90);
    }
}
