//! Poll-error model: pollster house effects `gamma_j`, election effects
//! `delta_t` and linear trends `epsilon_t` (per day before the election),
//! with pollster-specific noise `Sigma_j`.
//!
//! A poll `k` of pollster `j` for election `t` published `d` days before it
//! satisfies `p_k = v_t + gamma_j + delta_t + d * epsilon_t + noise` in the
//! reduced (pivot-free) space. Parties absent from a poll are masked.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fundamental::FitDiagnostics;
use crate::inference::transforms::{corr_cholesky, corr_cholesky_backward, corr_len};
use crate::inference::{hmc_sample, LogDensityTarget, SamplerConfig};
use crate::simplex::{lift, CovMatrix, PartyCanon, ReducedVector, ShareVector};

const LN_2PI: f64 = 1.8378770664093453;

/// Jitter added to a covariance whose Cholesky factorization fails.
pub const JITTER: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poll {
    pub id: String,
    pub pollster: String,
    pub election: String,
    pub days_before: u32,
    /// One entry per canon party; `None` when the party is not reported.
    pub shares: Vec<Option<f64>>,
    pub sample_size: Option<u32>,
}

impl Poll {
    pub fn validate(&self, canon: &PartyCanon) -> Result<()> {
        if self.shares.len() != canon.len() {
            return Err(Error::InvalidInput(format!(
                "poll {} has {} shares, canon has {} parties",
                self.id,
                self.shares.len(),
                canon.len()
            )));
        }
        let present: Vec<f64> = self.shares.iter().flatten().copied().collect();
        if present.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::InvalidInput(format!("poll {} has a share outside [0, 1]", self.id)));
        }
        let sum: f64 = present.iter().sum();
        if sum > 1.0 + 1e-9 {
            return Err(Error::OutOfSimplex { sum });
        }
        Ok(())
    }

    /// Reduced-space indices of the reported parties.
    pub fn observed(&self, reduced_len: usize) -> Vec<usize> {
        (0..reduced_len).filter(|&i| self.shares[i].is_some()).collect()
    }
}

/// Keeps polls published at most `window_days` before their election.
pub fn within_window(polls: &[Poll], window_days: u32) -> Vec<Poll> {
    polls.iter().filter(|p| p.days_before <= window_days).cloned().collect()
}

/// Covariance hyperparameters of the marginal model.
#[derive(Debug, Clone, PartialEq)]
pub struct PollsHypers {
    pub sigma_gamma: CovMatrix,
    pub sigma_delta: CovMatrix,
    pub sigma_epsilon: CovMatrix,
    pub sigma_poll: BTreeMap<String, CovMatrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PollsParams {
    pub pollsters: Vec<String>,
    pub elections: Vec<String>,
    pub gamma: Vec<ReducedVector>,
    pub delta: Vec<ReducedVector>,
    pub epsilon: Vec<ReducedVector>,
    pub sigma_poll: Vec<CovMatrix>,
    pub sigma_gamma: CovMatrix,
    pub sigma_delta: CovMatrix,
    pub sigma_epsilon: CovMatrix,
}

impl PollsParams {
    pub fn pollster_index(&self, id: &str) -> Option<usize> {
        self.pollsters.iter().position(|p| p == id)
    }

    pub fn election_index(&self, id: &str) -> Option<usize> {
        self.elections.iter().position(|e| e == id)
    }

    pub fn hypers(&self) -> PollsHypers {
        PollsHypers {
            sigma_gamma: self.sigma_gamma.clone(),
            sigma_delta: self.sigma_delta.clone(),
            sigma_epsilon: self.sigma_epsilon.clone(),
            sigma_poll: self.pollsters.iter().cloned().zip(self.sigma_poll.iter().cloned()).collect(),
        }
    }

    /// Noise covariance for a pollster absent from training: the correlation
    /// of the first pollster with the mean scale of all of them.
    pub fn pooled_sigma_poll(&self) -> CovMatrix {
        let r = self.sigma_gamma.dim();
        if self.sigma_poll.is_empty() {
            return CovMatrix::zeros(r);
        }
        let n = self.sigma_poll.len() as f64;
        let scales: Vec<f64> = (0..r)
            .map(|a| self.sigma_poll.iter().map(|s| s.matrix()[(a, a)].sqrt()).sum::<f64>() / n)
            .collect();
        let first = self.sigma_poll[0].matrix();
        let m = DMatrix::from_fn(r, r, |a, b| {
            let denom = (first[(a, a)] * first[(b, b)]).sqrt();
            let corr = if denom > 0.0 {
                first[(a, b)] / denom
            } else if a == b {
                1.0
            } else {
                0.0
            };
            scales[a] * scales[b] * corr
        });
        CovMatrix::new(m).unwrap_or_else(|_| CovMatrix::zeros(r))
    }
}

/// Flat parameter names in [`PollsParams::to_flat`] order.
pub fn polls_parameter_names(pollsters: &[String], elections: &[String], canon: &PartyCanon) -> Vec<String> {
    let parties = &canon.labels()[..canon.reduced_len()];
    let mut out = Vec::new();
    for (block, ids) in [("gamma", pollsters), ("delta", elections), ("epsilon", elections)] {
        for id in ids {
            out.extend(parties.iter().map(|p| format!("{block}[{id},{p}]")));
        }
    }
    let mut cov = |name: &str| {
        for a in parties {
            out.extend(parties.iter().map(|b| format!("{name}[{a},{b}]")));
        }
    };
    for j in pollsters {
        cov(&format!("sigma_poll[{j}]"));
    }
    for name in ["sigma_gamma", "sigma_delta", "sigma_epsilon"] {
        cov(name);
    }
    out
}

impl PollsParams {
    /// Effects then full covariance matrices, row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for v in self.gamma.iter().chain(&self.delta).chain(&self.epsilon) {
            out.extend_from_slice(v.as_slice());
        }
        for m in self.sigma_poll.iter().chain([&self.sigma_gamma, &self.sigma_delta, &self.sigma_epsilon]) {
            let m = m.matrix();
            for a in 0..m.nrows() {
                out.extend((0..m.ncols()).map(|b| m[(a, b)]));
            }
        }
        out
    }

    pub fn from_flat(pollsters: &[String], elections: &[String], r: usize, x: &[f64]) -> Result<Self> {
        let (j, t) = (pollsters.len(), elections.len());
        let need = (j + 2 * t) * r + (j + 3) * r * r;
        if x.len() != need {
            return Err(Error::InvalidInput(format!("expected {need} polls parameters, got {}", x.len())));
        }
        let mut at = 0;
        let mut vecs = |n: usize| -> Result<Vec<ReducedVector>> {
            (0..n)
                .map(|_| {
                    at += r;
                    ReducedVector::new(x[at - r..at].to_vec())
                })
                .collect()
        };
        let gamma = vecs(j)?;
        let delta = vecs(t)?;
        let epsilon = vecs(t)?;
        let mut covs = (0..j + 3)
            .map(|_| {
                at += r * r;
                CovMatrix::new(DMatrix::from_row_slice(r, r, &x[at - r * r..at]))
            })
            .collect::<Result<Vec<_>>>()?;
        let sigma_epsilon = covs.pop().unwrap();
        let sigma_delta = covs.pop().unwrap();
        let sigma_gamma = covs.pop().unwrap();
        Ok(PollsParams {
            pollsters: pollsters.to_vec(),
            elections: elections.to_vec(),
            gamma,
            delta,
            epsilon,
            sigma_poll: covs,
            sigma_gamma,
            sigma_delta,
            sigma_epsilon,
        })
    }
}

/// `gamma_j + delta_t + d * epsilon_t`. With `allow_new`, unknown pollsters
/// and elections contribute their prior mean of zero.
pub fn poll_error_mean(params: &PollsParams, poll: &Poll, allow_new: bool) -> Result<ReducedVector> {
    let r = params.sigma_gamma.dim();
    let mut out = vec![0.0; r];
    let j = params.pollster_index(&poll.pollster);
    let t = params.election_index(&poll.election);
    if !allow_new {
        if j.is_none() {
            return Err(Error::Lookup {
                kind: "pollster",
                id: poll.pollster.clone(),
            });
        }
        if t.is_none() {
            return Err(Error::Lookup {
                kind: "election",
                id: poll.election.clone(),
            });
        }
    }
    if let Some(j) = j {
        for (o, g) in out.iter_mut().zip(params.gamma[j].as_slice()) {
            *o += g;
        }
    }
    if let Some(t) = t {
        let d = poll.days_before as f64;
        for ((o, dl), e) in out.iter_mut().zip(params.delta[t].as_slice()).zip(params.epsilon[t].as_slice()) {
            *o += dl + d * e;
        }
    }
    ReducedVector::new(out)
}

/// Reduced poll shares with masked entries set to zero.
fn reduced_shares(poll: &Poll, r: usize) -> Vec<f64> {
    poll.shares[..r].iter().map(|s| s.unwrap_or(0.0)).collect()
}

/// Stacked mean and covariance of all polls given the election results,
/// with every effect integrated out.
pub fn marginal_mean_cov(
    polls: &[Poll],
    results: &BTreeMap<String, ReducedVector>,
    hypers: &PollsHypers,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let r = hypers.sigma_gamma.dim();
    let n = polls.len() * r;
    let mut m = DVector::zeros(n);
    let mut c = DMatrix::zeros(n, n);
    for (k, pk) in polls.iter().enumerate() {
        let v = results.get(&pk.election).ok_or_else(|| Error::Lookup {
            kind: "election result",
            id: pk.election.clone(),
        })?;
        if v.len() != r {
            return Err(Error::InvalidInput(format!("result for {} has the wrong length", pk.election)));
        }
        m.rows_mut(k * r, r).copy_from_slice(v.as_slice());
        let own = hypers.sigma_poll.get(&pk.pollster).ok_or_else(|| Error::Lookup {
            kind: "pollster covariance",
            id: pk.pollster.clone(),
        })?;
        for (k2, p2) in polls.iter().enumerate() {
            let mut block = DMatrix::zeros(r, r);
            if pk.election == p2.election {
                block += hypers.sigma_delta.matrix();
                block += hypers.sigma_epsilon.matrix() * (pk.days_before as f64 * p2.days_before as f64);
            }
            if pk.pollster == p2.pollster {
                block += hypers.sigma_gamma.matrix();
            }
            if k == k2 {
                block += own.matrix();
            }
            c.view_mut((k * r, k2 * r), (r, r)).copy_from(&block);
        }
    }
    if n > 0 && repaired_cholesky(&c).is_none() {
        return Err(Error::Misconfigured {
            jitter: JITTER,
            detail: "stacked poll covariance is not positive semi-definite".into(),
        });
    }
    Ok((m, c))
}

/// Cholesky factor, retrying once with [`JITTER`] on the diagonal.
fn repaired_cholesky(c: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    c.clone().cholesky().or_else(|| {
        let n = c.nrows();
        (c + DMatrix::identity(n, n) * JITTER).cholesky()
    })
}

/// Condition number estimate from the symmetric eigenvalues.
fn condition(c: &DMatrix<f64>) -> f64 {
    let e = c.clone().symmetric_eigenvalues();
    let max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = e.iter().copied().fold(f64::INFINITY, f64::min);
    max.abs() / min.abs()
}

fn mvn_logpdf(resid: &DVector<f64>, c: &DMatrix<f64>) -> Result<f64> {
    let chol = repaired_cholesky(c).ok_or_else(|| {
        Error::Numerical(format!(
            "covariance of dimension {} is singular (condition number {:.3e})",
            c.nrows(),
            condition(c)
        ))
    })?;
    let l = chol.l();
    let z = l
        .solve_lower_triangular(resid)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let logdet: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(-0.5 * (z.norm_squared() + logdet + resid.len() as f64 * LN_2PI))
}

/// Indices into the stacked vector of the reported party dimensions.
fn stacked_observed(polls: &[Poll], r: usize) -> Vec<usize> {
    polls
        .iter()
        .enumerate()
        .flat_map(|(k, p)| p.observed(r).into_iter().map(move |i| k * r + i))
        .collect()
}

/// Marginal Gaussian log density of the stacked polls; masked dimensions
/// are dropped before evaluation.
pub fn log_lik_polls(polls: &[Poll], results: &BTreeMap<String, ReducedVector>, hypers: &PollsHypers) -> Result<f64> {
    let r = hypers.sigma_gamma.dim();
    let (m, c) = marginal_mean_cov(polls, results, hypers)?;
    let keep = stacked_observed(polls, r);
    if keep.is_empty() {
        return Ok(0.0);
    }
    let y: Vec<f64> = polls.iter().flat_map(|p| reduced_shares(p, r)).collect();
    let resid = DVector::from_iterator(keep.len(), keep.iter().map(|&i| y[i] - m[i]));
    let sub = c.select_rows(&keep).select_columns(&keep);
    mvn_logpdf(&resid, &sub)
}

/// Hyperprior settings of the hierarchical fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PollsPrior {
    /// Half-normal scale of the house, election and noise standard deviations.
    pub scale: f64,
    /// Half-normal scale of the trend standard deviations, per day.
    pub trend_scale: f64,
    /// LKJ concentration of every correlation matrix.
    pub lkj: f64,
}

impl Default for PollsPrior {
    fn default() -> Self {
        PollsPrior {
            scale: 0.05,
            trend_scale: 0.05,
            lkj: 2.0,
        }
    }
}

struct PreparedPoll {
    pollster: usize,
    election: usize,
    days: f64,
    observed: Vec<usize>,
    /// Observed `p - v` components.
    base: Vec<f64>,
}

/// Offsets of the parameter blocks in the unconstrained vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    r: usize,
    c: usize,
    j: usize,
    t: usize,
}

impl Layout {
    fn z_gamma(&self) -> usize {
        0
    }
    fn z_delta(&self) -> usize {
        self.j * self.r
    }
    fn z_eps(&self) -> usize {
        self.z_delta() + self.t * self.r
    }
    /// Log scales and correlation of hyper block `b` (0 gamma, 1 delta, 2 epsilon).
    fn hyper(&self, b: usize) -> usize {
        self.z_eps() + self.t * self.r + b * (self.r + self.c)
    }
    fn poll_scales(&self) -> usize {
        self.hyper(3)
    }
    fn poll_corr(&self) -> usize {
        self.poll_scales() + self.j * self.r
    }
    fn dim(&self) -> usize {
        self.poll_corr() + self.c
    }
}

/// Hierarchical sampling target with explicit effects in the non-centered
/// form `gamma_j = diag(tau) L z_j` and likewise for `delta_t`, `epsilon_t`.
/// Pollster noise is `diag(tau_j) Omega diag(tau_j)` with one correlation
/// `Omega` shared by all pollsters.
pub struct PollsTarget {
    polls: Vec<PreparedPoll>,
    layout: Layout,
    prior: PollsPrior,
}

struct Unpacked {
    tau: [Vec<f64>; 3],
    l: [DMatrix<f64>; 3],
    extra: f64,
    poll_tau: Vec<Vec<f64>>,
    poll_l: DMatrix<f64>,
    poll_omega: DMatrix<f64>,
    /// gamma, delta, epsilon effect vectors.
    effects: [Vec<Vec<f64>>; 3],
}

impl PollsTarget {
    pub fn new(
        polls: &[Poll],
        results: &BTreeMap<String, ReducedVector>,
        pollsters: &[String],
        elections: &[String],
        r: usize,
        prior: PollsPrior,
    ) -> Result<Self> {
        let mut prepared = Vec::with_capacity(polls.len());
        for p in polls {
            let pollster = pollsters.iter().position(|x| *x == p.pollster).ok_or_else(|| Error::Lookup {
                kind: "pollster",
                id: p.pollster.clone(),
            })?;
            let election = elections.iter().position(|x| *x == p.election).ok_or_else(|| Error::Lookup {
                kind: "election",
                id: p.election.clone(),
            })?;
            let v = results.get(&p.election).ok_or_else(|| Error::Lookup {
                kind: "election result",
                id: p.election.clone(),
            })?;
            let observed = p.observed(r);
            let base = observed.iter().map(|&i| p.shares[i].unwrap() - v.as_slice()[i]).collect();
            prepared.push(PreparedPoll {
                pollster,
                election,
                days: p.days_before as f64,
                observed,
                base,
            });
        }
        Ok(PollsTarget {
            polls: prepared,
            layout: Layout {
                r,
                c: corr_len(r),
                j: pollsters.len(),
                t: elections.len(),
            },
            prior,
        })
    }

    fn unpack(&self, x: &[f64]) -> Unpacked {
        let ly = self.layout;
        let r = ly.r;
        let mut extra = 0.0;
        let mut tau: [Vec<f64>; 3] = Default::default();
        let mut l: [DMatrix<f64>; 3] = Default::default();
        for b in 0..3 {
            let at = ly.hyper(b);
            let s = self.scale_of(b);
            tau[b] = x[at..at + r].iter().map(|u| s * u.exp()).collect();
            let (lb, e) = corr_cholesky(&x[at + r..at + r + ly.c], r, self.prior.lkj);
            l[b] = lb;
            extra += e;
        }
        let poll_tau = (0..ly.j)
            .map(|j| {
                x[ly.poll_scales() + j * r..ly.poll_scales() + (j + 1) * r]
                    .iter()
                    .map(|u| self.prior.scale * u.exp())
                    .collect()
            })
            .collect();
        let (poll_l, e) = corr_cholesky(&x[ly.poll_corr()..ly.poll_corr() + ly.c], r, self.prior.lkj);
        extra += e;
        let poll_omega = &poll_l * poll_l.transpose();
        let counts = [ly.j, ly.t, ly.t];
        let starts = [ly.z_gamma(), ly.z_delta(), ly.z_eps()];
        let effects = std::array::from_fn(|b| {
            (0..counts[b])
                .map(|i| {
                    let z = DVector::from_column_slice(&x[starts[b] + i * r..starts[b] + (i + 1) * r]);
                    let lz = &l[b] * z;
                    (0..r).map(|a| tau[b][a] * lz[a]).collect()
                })
                .collect()
        });
        Unpacked {
            tau,
            l,
            extra,
            poll_tau,
            poll_l,
            poll_omega,
            effects,
        }
    }

    fn scale_of(&self, b: usize) -> f64 {
        if b == 2 {
            self.prior.trend_scale
        } else {
            self.prior.scale
        }
    }

    fn eval(&self, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let ly = self.layout;
        let r = ly.r;
        let u = self.unpack(x);
        let mut lp = u.extra;
        // priors on z and on the log scales
        let n_z = ly.hyper(0);
        lp -= 0.5 * x[..n_z].iter().map(|v| v * v).sum::<f64>();
        for b in 0..3 {
            let s = self.scale_of(b);
            for a in 0..r {
                let t = u.tau[b][a];
                lp += x[ly.hyper(b) + a] - 0.5 * (t / s).powi(2);
            }
        }
        for j in 0..ly.j {
            for a in 0..r {
                let t = u.poll_tau[j][a];
                lp += x[ly.poll_scales() + j * r + a] - 0.5 * (t / self.prior.scale).powi(2);
            }
        }
        let want = grad.is_some();
        // gradients with respect to effects, pollster scales and Omega
        let mut g_eff: [Vec<Vec<f64>>; 3] = [vec![vec![0.0; r]; ly.j], vec![vec![0.0; r]; ly.t], vec![vec![0.0; r]; ly.t]];
        let mut g_poll_tau = vec![vec![0.0; r]; ly.j];
        let mut g_omega = DMatrix::zeros(r, r);
        for p in &self.polls {
            let n = p.observed.len();
            if n == 0 {
                continue;
            }
            let tj = &u.poll_tau[p.pollster];
            let sigma = DMatrix::from_fn(n, n, |a, b| {
                let (ia, ib) = (p.observed[a], p.observed[b]);
                tj[ia] * tj[ib] * u.poll_omega[(ia, ib)]
            });
            let resid = DVector::from_fn(n, |a, _| {
                let i = p.observed[a];
                p.base[a] - u.effects[0][p.pollster][i] - u.effects[1][p.election][i] - p.days * u.effects[2][p.election][i]
            });
            let Some(chol) = sigma.cholesky() else {
                return f64::NEG_INFINITY;
            };
            let alpha = chol.solve(&resid);
            let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            lp -= 0.5 * (resid.dot(&alpha) + logdet + n as f64 * LN_2PI);
            if want {
                let inv = chol.inverse();
                let g = (&alpha * alpha.transpose() - inv) * 0.5;
                for a in 0..n {
                    let ia = p.observed[a];
                    g_eff[0][p.pollster][ia] += alpha[a];
                    g_eff[1][p.election][ia] += alpha[a];
                    g_eff[2][p.election][ia] += p.days * alpha[a];
                    for b in 0..n {
                        let ib = p.observed[b];
                        g_poll_tau[p.pollster][ia] += 2.0 * g[(a, b)] * tj[ib] * u.poll_omega[(ia, ib)];
                        g_omega[(ia, ib)] += g[(a, b)] * tj[ia] * tj[ib];
                    }
                }
            }
        }
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        let Some(g) = grad else {
            return lp;
        };
        g.iter_mut().for_each(|v| *v = 0.0);
        for (gi, xi) in g[..n_z].iter_mut().zip(&x[..n_z]) {
            *gi = -xi;
        }
        let starts = [ly.z_gamma(), ly.z_delta(), ly.z_eps()];
        for b in 0..3 {
            let mut g_tau = vec![0.0; r];
            let mut g_l = DMatrix::zeros(r, r);
            for (i, ge) in g_eff[b].iter().enumerate() {
                let z = DVector::from_column_slice(&x[starts[b] + i * r..starts[b] + (i + 1) * r]);
                let lz = &u.l[b] * &z;
                let scaled = DVector::from_fn(r, |a, _| u.tau[b][a] * ge[a]);
                let gz = u.l[b].transpose() * &scaled;
                for a in 0..r {
                    g[starts[b] + i * r + a] += gz[a];
                    g_tau[a] += ge[a] * lz[a];
                    for c in 0..=a {
                        g_l[(a, c)] += scaled[a] * z[c];
                    }
                }
            }
            let at = ly.hyper(b);
            let s = self.scale_of(b);
            for a in 0..r {
                let t = u.tau[b][a];
                g[at + a] = g_tau[a] * t + 1.0 - (t / s).powi(2);
            }
            let y = &x[at + r..at + r + ly.c];
            let gy = corr_cholesky_backward(y, r, self.prior.lkj, &u.l[b], &g_l);
            g[at + r..at + r + ly.c].copy_from_slice(&gy);
        }
        for j in 0..ly.j {
            for a in 0..r {
                let t = u.poll_tau[j][a];
                g[ly.poll_scales() + j * r + a] = g_poll_tau[j][a] * t + 1.0 - (t / self.prior.scale).powi(2);
            }
        }
        let g_l = (&g_omega + g_omega.transpose()) * &u.poll_l;
        let g_l = DMatrix::from_fn(r, r, |a, b| if b <= a { g_l[(a, b)] } else { 0.0 });
        let y = &x[ly.poll_corr()..ly.poll_corr() + ly.c];
        let gy = corr_cholesky_backward(y, r, self.prior.lkj, &u.poll_l, &g_l);
        g[ly.poll_corr()..ly.poll_corr() + ly.c].copy_from_slice(&gy);
        lp
    }

    fn params_of(&self, x: &[f64], pollsters: &[String], elections: &[String]) -> Result<PollsParams> {
        let u = self.unpack(x);
        let cov = |tau: &[f64], l: &DMatrix<f64>| -> Result<CovMatrix> {
            let d = DMatrix::from_diagonal(&DVector::from_column_slice(tau));
            let m = &d * l * l.transpose() * &d;
            CovMatrix::new((&m + m.transpose()) * 0.5)
        };
        let vecs = |v: &Vec<Vec<f64>>| v.iter().map(|e| ReducedVector::new(e.clone())).collect::<Result<Vec<_>>>();
        Ok(PollsParams {
            pollsters: pollsters.to_vec(),
            elections: elections.to_vec(),
            gamma: vecs(&u.effects[0])?,
            delta: vecs(&u.effects[1])?,
            epsilon: vecs(&u.effects[2])?,
            sigma_poll: u.poll_tau.iter().map(|t| cov(t, &u.poll_l)).collect::<Result<_>>()?,
            sigma_gamma: cov(&u.tau[0], &u.l[0])?,
            sigma_delta: cov(&u.tau[1], &u.l[1])?,
            sigma_epsilon: cov(&u.tau[2], &u.l[2])?,
        })
    }
}

impl LogDensityTarget for PollsTarget {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        self.eval(x, None)
    }

    fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.eval(x, Some(grad))
    }

    /// Small effects and trend scales, so early trajectories stay near the data.
    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let ly = self.layout;
        let mut x: Vec<f64> = (0..ly.dim()).map(|_| rng.random_range(-0.5..=0.5)).collect();
        let trend = ly.hyper(2);
        for v in &mut x[trend..trend + ly.r] {
            *v -= 4.0;
        }
        for v in &mut x[ly.poll_scales()..ly.poll_corr()] {
            *v -= 1.0;
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub elections: Vec<String>,
    pub pollsters: Vec<String>,
    pub polls: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PollsPosterior {
    pub canon: PartyCanon,
    pub draws: Vec<PollsParams>,
    pub chain: Vec<usize>,
    pub training: TrainingSummary,
    pub config: SamplerConfig,
    pub prior: PollsPrior,
    pub diagnostics: FitDiagnostics,
}

/// Fits the hierarchical model to polls within `window_days` of elections
/// with known results.
pub fn fit_polls(
    canon: &PartyCanon,
    polls: &[Poll],
    results: &BTreeMap<String, ReducedVector>,
    window_days: u32,
    config: &SamplerConfig,
    prior: PollsPrior,
) -> Result<PollsPosterior> {
    for p in polls {
        p.validate(canon)?;
    }
    let training = within_window(polls, window_days);
    if training.len() < polls.len() {
        log::info!(
            "{} polls outside the {window_days}-day window excluded",
            polls.len() - training.len()
        );
    }
    if training.is_empty() {
        return Err(Error::InvalidInput("no training polls".into()));
    }
    let mut pollsters: Vec<String> = training.iter().map(|p| p.pollster.clone()).collect();
    pollsters.sort();
    pollsters.dedup();
    let mut elections: Vec<String> = training.iter().map(|p| p.election.clone()).collect();
    elections.sort();
    elections.dedup();
    let mut warnings = Vec::new();
    if elections.len() == 1 {
        warnings.push(format!(
            "only election {} in the training set: house and election effects are confounded",
            elections[0]
        ));
    }
    let target = PollsTarget::new(&training, results, &pollsters, &elections, canon.reduced_len(), prior.clone())?;
    log::info!(
        "fitting polls model: {} polls, {} pollsters, {} elections, {} parameters",
        training.len(),
        pollsters.len(),
        elections.len(),
        target.dim()
    );
    let chains = hmc_sample(&target, config)?;
    let mut diagnostics = FitDiagnostics::from_chains(&chains)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    diagnostics.warnings.extend(warnings);
    let mut draws = Vec::new();
    let mut chain = Vec::new();
    for (c, d) in chains.draws.iter().enumerate() {
        for x in d {
            draws.push(target.params_of(x, &pollsters, &elections)?);
            chain.push(c);
        }
    }
    Ok(PollsPosterior {
        canon: canon.clone(),
        draws,
        chain,
        training: TrainingSummary {
            elections,
            pollsters,
            polls: training.len(),
        },
        config: config.clone(),
        prior,
        diagnostics,
    })
}

/// Per-draw sufficient statistics of the new polls as a function of the
/// result `v`: the log density is `norm - (c - 2 q'v + v'P v) / 2`.
struct Component {
    p: DMatrix<f64>,
    q: DVector<f64>,
    c: f64,
    norm: f64,
}

/// Likelihood of a set of new polls for one election as a function of the
/// hypothesized result, averaged over thinned posterior draws.
pub struct PollsLikelihood {
    canon: PartyCanon,
    components: Vec<Component>,
}

/// Evenly spaced draw indices.
fn thin(available: usize, n: usize) -> Vec<usize> {
    let n = n.min(available).max(1);
    (0..n).map(|i| i * available / n).collect()
}

impl PollsLikelihood {
    /// Integrates the new election's `delta` and `epsilon` and the house
    /// effects of pollsters unseen in training; house effects of known
    /// pollsters are fixed at each draw's value.
    pub fn new(new_polls: &[Poll], posterior: &PollsPosterior, n_draws: usize) -> Result<Self> {
        let canon = &posterior.canon;
        if new_polls.is_empty() {
            return Err(Error::InvalidInput("no polls for the new election".into()));
        }
        if posterior.draws.is_empty() {
            return Err(Error::InvalidInput("polls posterior has no draws".into()));
        }
        let election = &new_polls[0].election;
        if let Some(p) = new_polls.iter().find(|p| &p.election != election) {
            return Err(Error::InvalidInput(format!(
                "new polls mix elections {election} and {}",
                p.election
            )));
        }
        for p in new_polls {
            p.validate(canon)?;
        }
        let unseen: Vec<&str> = {
            let mut u: Vec<&str> = new_polls
                .iter()
                .filter(|p| !posterior.training.pollsters.contains(&p.pollster))
                .map(|p| p.pollster.as_str())
                .collect();
            u.sort();
            u.dedup();
            u
        };
        if !unseen.is_empty() {
            log::info!("house effects integrated over their prior for unseen pollsters {unseen:?}");
        }
        let r = canon.reduced_len();
        let keep = stacked_observed(new_polls, r);
        let n = keep.len();
        if n == 0 {
            return Err(Error::InvalidInput("new polls report no modeled party".into()));
        }
        let components = thin(posterior.draws.len(), n_draws)
            .into_iter()
            .map(|d| Self::component(new_polls, &posterior.draws[d], &keep, r))
            .collect::<Result<Vec<_>>>()?;
        Ok(PollsLikelihood {
            canon: canon.clone(),
            components,
        })
    }

    fn component(polls: &[Poll], draw: &PollsParams, keep: &[usize], r: usize) -> Result<Component> {
        let n = keep.len();
        let pooled = draw.pooled_sigma_poll();
        let house: Vec<Option<usize>> = polls.iter().map(|p| draw.pollster_index(&p.pollster)).collect();
        let c = DMatrix::from_fn(n, n, |x, y| {
            let (k1, a) = (keep[x] / r, keep[x] % r);
            let (k2, b) = (keep[y] / r, keep[y] % r);
            let (p1, p2) = (&polls[k1], &polls[k2]);
            let mut v = draw.sigma_delta.matrix()[(a, b)]
                + p1.days_before as f64 * p2.days_before as f64 * draw.sigma_epsilon.matrix()[(a, b)];
            if house[k1].is_none() && p1.pollster == p2.pollster {
                v += draw.sigma_gamma.matrix()[(a, b)];
            }
            if k1 == k2 {
                v += match house[k1] {
                    Some(j) => draw.sigma_poll[j].matrix()[(a, b)],
                    None => pooled.matrix()[(a, b)],
                };
            }
            v
        });
        let b = DVector::from_fn(n, |x, _| {
            let (k, a) = (keep[x] / r, keep[x] % r);
            let offset = house[k].map_or(0.0, |j| draw.gamma[j].as_slice()[a]);
            polls[k].shares[a].unwrap() - offset
        });
        let a_mat = DMatrix::from_fn(n, r, |x, a| if keep[x] % r == a { 1.0 } else { 0.0 });
        let chol = repaired_cholesky(&c).ok_or_else(|| {
            Error::Numerical(format!(
                "new-poll covariance is singular (condition number {:.3e})",
                condition(&c)
            ))
        })?;
        let cinv_a = chol.solve(&a_mat);
        let cinv_b = chol.solve(&b);
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Component {
            p: a_mat.transpose() * &cinv_a,
            q: a_mat.transpose() * &cinv_b,
            c: b.dot(&cinv_b),
            norm: -0.5 * (logdet + n as f64 * LN_2PI),
        })
    }

    pub fn draws(&self) -> usize {
        self.components.len()
    }

    /// Log of the draw-averaged density of the polls at result `v`.
    pub fn log_density_at(&self, v: &ShareVector) -> Result<f64> {
        if v.len() != self.canon.len() {
            return Err(Error::InvalidInput("result has the wrong number of parties".into()));
        }
        let r = self.canon.reduced_len();
        let x = DVector::from_column_slice(&v.as_slice()[..r]);
        let lls: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.norm - 0.5 * (c.c - 2.0 * c.q.dot(&x) + (&c.p * &x).dot(&x)))
            .collect();
        let max = lls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = lls.iter().map(|l| (l - max).exp()).sum();
        Ok(max + (sum / lls.len() as f64).ln())
    }

    /// Draws from the flat-prior posterior of the result restricted to the
    /// simplex. Each component integrates to its own constant, so components
    /// are picked in proportion to it; draws outside the simplex are
    /// rejected.
    pub fn predictive_flat_prior(&self, s: usize, seed: u64) -> Result<(Vec<ShareVector>, usize)> {
        let r = self.canon.reduced_len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prepared = Vec::with_capacity(self.components.len());
        let mut log_mass = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let chol = c.p.clone().cholesky().ok_or_else(|| {
                Error::Numerical("new polls do not inform every party; the flat-prior predictive is improper".into())
            })?;
            let mean = chol.solve(&c.q);
            let half_logdet: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum();
            log_mass.push(c.norm - 0.5 * (c.c - c.q.dot(&mean)) - half_logdet);
            prepared.push((chol.l(), mean));
        }
        let max = log_mass.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pick = rand::distr::weighted::WeightedIndex::new(log_mass.iter().map(|l| (l - max).exp()))
            .map_err(|e| Error::Numerical(format!("predictive component masses: {e}")))?;
        let mut out = Vec::with_capacity(s);
        let mut rejected = 0usize;
        let max_tries = 1000 * s.max(1);
        let mut tries = 0;
        while out.len() < s {
            let (l, mean) = &prepared[pick.sample(&mut rng)];
            let z = DVector::from_fn(r, |_, _| StandardNormal.sample(&mut rng));
            // L' x = z gives x ~ N(0, (L L')^-1)
            let x = l.transpose().solve_upper_triangular(&z).unwrap() + mean;
            tries += 1;
            match ReducedVector::new(x.iter().copied().collect()).and_then(|v| lift(&v, &self.canon)) {
                Ok(v) if x.iter().all(|c| *c >= 0.0) => out.push(v),
                _ => {
                    rejected += 1;
                    if tries >= max_tries {
                        return Err(Error::Numerical(format!(
                            "flat-prior predictive rejected {rejected} of {tries} draws"
                        )));
                    }
                }
            }
        }
        if rejected * 2 > tries {
            log::warn!("flat-prior predictive rejected {rejected} of {tries} draws outside the simplex");
        } else {
            log::info!("flat-prior predictive rejected {rejected} of {tries} draws");
        }
        Ok((out, rejected))
    }
}

/// Log density of `new_polls` at result `v`, averaged over `n_draws`
/// thinned posterior draws.
pub fn polls_likelihood_at(v: &ShareVector, new_polls: &[Poll], posterior: &PollsPosterior, n_draws: usize) -> Result<f64> {
    PollsLikelihood::new(new_polls, posterior, n_draws)?.log_density_at(v)
}

pub fn predictive_flat_prior(
    new_polls: &[Poll],
    posterior: &PollsPosterior,
    s: usize,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<ShareVector>> {
    Ok(PollsLikelihood::new(new_polls, posterior, n_draws)?.predictive_flat_prior(s, seed)?.0)
}
