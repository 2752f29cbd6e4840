//! Survey multinomial-logit model with per-factor hierarchical priors,
//! post-stratification and simulation of province results.
//!
//! Every stratum's linear predictor is `f_l = alpha_l + sum_k beta[k][j_k][l]`
//! with the pivot entries fixed at zero. Factor 0 is always the province.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{hmc_sample, rhat, LogDensityTarget, SamplerConfig};
use crate::simplex::{softmax_into, PartyCanon, ShareVector};
use crate::synthesis::SimulationEnsemble;

/// Factor structure of the strata: provinces plus categorical factors whose
/// levels are coded `1..=levels`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorLayout {
    pub provinces: Vec<u32>,
    pub factors: Vec<(String, u32)>,
}

impl FactorLayout {
    pub fn new(mut provinces: Vec<u32>, factors: Vec<(String, u32)>) -> Result<Self> {
        provinces.sort_unstable();
        provinces.dedup();
        if provinces.is_empty() {
            return Err(Error::InvalidInput("layout has no provinces".into()));
        }
        if let Some((name, _)) = factors.iter().find(|(_, n)| *n == 0) {
            return Err(Error::InvalidInput(format!("factor `{name}` has no levels")));
        }
        Ok(FactorLayout { provinces, factors })
    }

    /// Municipality size, gender, age, education and activity.
    pub fn spain_factors() -> Vec<(String, u32)> {
        [("municipality_size", 3), ("gender", 2), ("age", 3), ("education", 3), ("activity", 3)]
            .into_iter()
            .map(|(n, l)| (n.to_string(), l))
            .collect()
    }

    /// Number of factors including the province.
    pub fn n_factors(&self) -> usize {
        self.factors.len() + 1
    }

    pub fn levels(&self, k: usize) -> usize {
        if k == 0 {
            self.provinces.len()
        } else {
            self.factors[k - 1].1 as usize
        }
    }

    pub fn factor_name(&self, k: usize) -> &str {
        if k == 0 {
            "province"
        } else {
            &self.factors[k - 1].0
        }
    }

    /// Code printed for level index `j` of factor `k`.
    pub fn level_code(&self, k: usize, j: usize) -> u32 {
        if k == 0 {
            self.provinces[j]
        } else {
            j as u32 + 1
        }
    }

    /// Cells per province.
    pub fn cells_per_province(&self) -> usize {
        self.factors.iter().map(|(_, n)| *n as usize).product()
    }

    /// Level indices of a stratum, one per factor including the province.
    pub fn indices(&self, stratum: &Stratum) -> Result<Vec<usize>> {
        if stratum.levels.len() != self.factors.len() {
            return Err(Error::InvalidStratum(format!(
                "expected {} factor levels, got {}",
                self.factors.len(),
                stratum.levels.len()
            )));
        }
        let p = self
            .provinces
            .binary_search(&stratum.province)
            .map_err(|_| Error::InvalidStratum(format!("unknown province {}", stratum.province)))?;
        let mut out = Vec::with_capacity(self.n_factors());
        out.push(p);
        for ((name, n), &code) in self.factors.iter().zip(&stratum.levels) {
            if code < 1 || code > *n {
                return Err(Error::InvalidStratum(format!(
                    "{name} level {code} outside 1..={n}"
                )));
            }
            out.push(code as usize - 1);
        }
        Ok(out)
    }
}

/// One demographic cell of one province.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub province: u32,
    /// Level codes of the non-province factors, in layout order.
    pub levels: Vec<u32>,
    /// Respondents per canon party.
    pub counts: Vec<u32>,
    /// Fraction of the province electorate in this cell.
    pub weight: f64,
}

impl Stratum {
    pub fn respondents(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

/// Strata with their layout, canon and per-province electorate sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct StrataSet {
    pub canon: PartyCanon,
    pub layout: FactorLayout,
    pub strata: Vec<Stratum>,
    pub electorate: BTreeMap<u32, f64>,
}

impl StrataSet {
    pub fn new(canon: PartyCanon, layout: FactorLayout, strata: Vec<Stratum>, electorate: BTreeMap<u32, f64>) -> Result<Self> {
        for s in &strata {
            layout.indices(s)?;
            if s.counts.len() != canon.len() {
                return Err(Error::InvalidStratum(format!(
                    "stratum in province {} has {} counts, canon has {} parties",
                    s.province,
                    s.counts.len(),
                    canon.len()
                )));
            }
            if !(s.weight >= 0.0 && s.weight.is_finite()) {
                return Err(Error::InvalidStratum(format!("weight {} is not a fraction", s.weight)));
            }
        }
        Ok(StrataSet {
            canon,
            layout,
            strata,
            electorate,
        })
    }

    pub fn respondents(&self) -> u64 {
        self.strata.iter().map(Stratum::respondents).sum()
    }
}

/// Coefficients of one draw. Vectors indexed by party have the full canon
/// length with the pivot (last) entry fixed at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FundamentalParams {
    pub alpha: Vec<f64>,
    /// `beta[k][j][l]` for factor `k` (0 = province), level `j`, party `l`.
    pub beta: Vec<Vec<Vec<f64>>>,
    /// `sigma[k][l]` over the non-pivot parties.
    pub sigma: Vec<Vec<f64>>,
}

impl FundamentalParams {
    pub fn zeros(layout: &FactorLayout, parties: usize) -> Self {
        FundamentalParams {
            alpha: vec![0.0; parties],
            beta: (0..layout.n_factors())
                .map(|k| vec![vec![0.0; parties]; layout.levels(k)])
                .collect(),
            sigma: vec![vec![1.0; parties - 1]; layout.n_factors()],
        }
    }

    pub fn parties(&self) -> usize {
        self.alpha.len()
    }

    /// Free entries in natural scale: alpha, beta, then sigma.
    pub fn to_natural(&self) -> Vec<f64> {
        let r = self.parties() - 1;
        let mut out: Vec<f64> = self.alpha[..r].to_vec();
        for levels in &self.beta {
            for b in levels {
                out.extend_from_slice(&b[..r]);
            }
        }
        for s in &self.sigma {
            out.extend_from_slice(s);
        }
        out
    }

    pub fn from_natural(layout: &FactorLayout, parties: usize, x: &[f64]) -> Self {
        let r = parties - 1;
        let mut p = Self::zeros(layout, parties);
        let mut at = 0;
        let mut take = |dst: &mut [f64]| {
            dst[..r].copy_from_slice(&x[at..at + r]);
            at += r;
        };
        take(&mut p.alpha);
        for levels in p.beta.iter_mut() {
            for b in levels.iter_mut() {
                take(b);
            }
        }
        for s in p.sigma.iter_mut() {
            take(s);
        }
        p
    }

    fn check(&self, layout: &FactorLayout) -> Result<()> {
        let l = self.parties();
        let shape_ok = l >= 2
            && self.beta.len() == layout.n_factors()
            && self.sigma.len() == layout.n_factors()
            && self
                .beta
                .iter()
                .enumerate()
                .all(|(k, lv)| lv.len() == layout.levels(k) && lv.iter().all(|b| b.len() == l))
            && self.sigma.iter().all(|s| s.len() == l - 1);
        if !shape_ok {
            return Err(Error::InvalidInput("parameters do not match the factor layout".into()));
        }
        Ok(())
    }
}

pub fn linear_predictor(params: &FundamentalParams, layout: &FactorLayout, stratum: &Stratum) -> Result<Vec<f64>> {
    params.check(layout)?;
    let idx = layout.indices(stratum)?;
    Ok(predictor_at(params, &idx))
}

fn predictor_at(params: &FundamentalParams, idx: &[usize]) -> Vec<f64> {
    let mut f = params.alpha.clone();
    for (k, &j) in idx.iter().enumerate() {
        for (fl, b) in f.iter_mut().zip(&params.beta[k][j]) {
            *fl += b;
        }
    }
    f
}

pub fn stratum_probabilities(params: &FundamentalParams, layout: &FactorLayout, stratum: &Stratum) -> Result<ShareVector> {
    let f = linear_predictor(params, layout, stratum)?;
    crate::simplex::softmax(&f)
}

/// Observed strata flattened for the likelihood loops.
struct Observed {
    /// Level index per factor, `n_factors` entries per stratum.
    idx: Vec<usize>,
    counts: Vec<f64>,
    totals: Vec<f64>,
}

impl Observed {
    fn new(set: &StrataSet) -> Result<Self> {
        let mut idx = Vec::new();
        let mut counts = Vec::new();
        let mut totals = Vec::new();
        for s in &set.strata {
            let n = s.respondents();
            if n == 0 {
                continue;
            }
            idx.extend(set.layout.indices(s)?);
            counts.extend(s.counts.iter().map(|&c| c as f64));
            totals.push(n as f64);
        }
        Ok(Observed { idx, counts, totals })
    }

    fn len(&self) -> usize {
        self.totals.len()
    }
}

/// Offsets of factor blocks in a `[level][reduced party]` flat table.
fn factor_offsets(layout: &FactorLayout, r: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(layout.n_factors() + 1);
    let mut at = 0;
    for k in 0..layout.n_factors() {
        out.push(at);
        at += layout.levels(k) * r;
    }
    out.push(at);
    out
}

/// Multinomial log likelihood (without the count-only constant) of `beta`
/// given as a flat table. Adds d/dalpha into `g_alpha` and d/dbeta into
/// `g_beta` when provided.
fn log_likelihood(
    obs: &Observed,
    offsets: &[usize],
    r: usize,
    alpha: &[f64],
    beta: &[f64],
    mut grads: Option<(&mut [f64], &mut [f64])>,
) -> f64 {
    let l = r + 1;
    let nf = offsets.len() - 1;
    let mut f = vec![0.0; l];
    let mut mu = vec![0.0; l];
    let mut total = 0.0;
    for n in 0..obs.len() {
        let idx = &obs.idx[n * nf..(n + 1) * nf];
        f[..r].copy_from_slice(alpha);
        f[r] = 0.0;
        for (k, &j) in idx.iter().enumerate() {
            let b = &beta[offsets[k] + j * r..offsets[k] + (j + 1) * r];
            for (fl, bl) in f.iter_mut().zip(b) {
                *fl += bl;
            }
        }
        softmax_into(&f, &mut mu);
        let counts = &obs.counts[n * l..(n + 1) * l];
        for (c, m) in counts.iter().zip(&mu) {
            if *c > 0.0 {
                total += c * m.ln();
            }
        }
        if let Some((ga, gb)) = grads.as_mut() {
            let nt = obs.totals[n];
            for p in 0..r {
                let g = counts[p] - nt * mu[p];
                ga[p] += g;
                for (k, &j) in idx.iter().enumerate() {
                    gb[offsets[k] + j * r + p] += g;
                }
            }
        }
    }
    total
}

fn flat_beta(params: &FundamentalParams, r: usize) -> Vec<f64> {
    params
        .beta
        .iter()
        .flat_map(|lv| lv.iter().flat_map(|b| b[..r].iter().copied()))
        .collect()
}

/// Log posterior in natural parameters, up to a constant: multinomial
/// likelihood, `alpha ~ N(0, 1)`, `beta[k][j][l] ~ N(0, sigma[k][l]^2)` and
/// `sigma ~ half-N(1)`.
pub fn log_posterior(params: &FundamentalParams, set: &StrataSet) -> Result<f64> {
    Ok(log_posterior_impl(params, set, false)?.0)
}

/// Gradient of [`log_posterior`] in the [`FundamentalParams::to_natural`]
/// ordering.
pub fn log_posterior_gradient(params: &FundamentalParams, set: &StrataSet) -> Result<Vec<f64>> {
    Ok(log_posterior_impl(params, set, true)?.1)
}

fn log_posterior_impl(params: &FundamentalParams, set: &StrataSet, with_grad: bool) -> Result<(f64, Vec<f64>)> {
    let layout = &set.layout;
    params.check(layout)?;
    if params.parties() != set.canon.len() {
        return Err(Error::InvalidInput("parameters do not match the canon".into()));
    }
    if params.sigma.iter().flatten().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidInput("prior scales must be positive".into()));
    }
    let r = params.parties() - 1;
    let obs = Observed::new(set)?;
    let offsets = factor_offsets(layout, r);
    let alpha = &params.alpha[..r];
    let beta = flat_beta(params, r);
    let mut ga = vec![0.0; r];
    let mut gb = vec![0.0; beta.len()];
    let mut lp = log_likelihood(
        &obs,
        &offsets,
        r,
        alpha,
        &beta,
        if with_grad { Some((&mut ga, &mut gb)) } else { None },
    );
    for (a, g) in alpha.iter().zip(ga.iter_mut()) {
        lp -= 0.5 * a * a;
        *g -= a;
    }
    let mut gs = vec![0.0; params.sigma.len() * r];
    for k in 0..layout.n_factors() {
        for j in 0..layout.levels(k) {
            for p in 0..r {
                let s = params.sigma[k][p];
                let b = beta[offsets[k] + j * r + p];
                lp -= 0.5 * (b / s).powi(2) + s.ln();
                gb[offsets[k] + j * r + p] -= b / (s * s);
                gs[k * r + p] += b * b / (s * s * s) - 1.0 / s;
            }
        }
        for p in 0..r {
            let s = params.sigma[k][p];
            lp -= 0.5 * s * s;
            gs[k * r + p] -= s;
        }
    }
    let mut grad = ga;
    grad.extend(gb);
    grad.extend(gs);
    Ok((lp, grad))
}

/// Sampling target with `sigma = exp(u)`. Effects are sampled directly: the
/// survey pins most of them, which makes a non-centered form a narrow ridge.
///
/// Layout: alpha (`r`), beta (`sum_k levels_k * r`), u (`n_factors * r`).
pub struct FundamentalTarget {
    obs: Observed,
    offsets: Vec<usize>,
    r: usize,
    levels: Vec<usize>,
}

impl FundamentalTarget {
    pub fn new(set: &StrataSet) -> Result<Self> {
        let obs = Observed::new(set)?;
        if obs.len() == 0 {
            return Err(Error::InvalidInput("the survey has no respondent with a reported intention".into()));
        }
        let r = set.canon.reduced_len();
        Ok(FundamentalTarget {
            offsets: factor_offsets(&set.layout, r),
            levels: (0..set.layout.n_factors()).map(|k| set.layout.levels(k)).collect(),
            obs,
            r,
        })
    }

    fn n_beta(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    fn beta_of<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[self.r..self.r + self.n_beta()]
    }

    /// Natural-scale parameters of an unconstrained point.
    pub fn params_of(&self, layout: &FactorLayout, x: &[f64]) -> FundamentalParams {
        let r = self.r;
        let beta = self.beta_of(x);
        let u = &x[r + self.n_beta()..];
        let mut p = FundamentalParams::zeros(layout, r + 1);
        p.alpha[..r].copy_from_slice(&x[..r]);
        for (k, lv) in p.beta.iter_mut().enumerate() {
            for (j, b) in lv.iter_mut().enumerate() {
                b[..r].copy_from_slice(&beta[self.offsets[k] + j * r..self.offsets[k] + (j + 1) * r]);
            }
        }
        for (k, s) in p.sigma.iter_mut().enumerate() {
            for (q, v) in s.iter_mut().enumerate() {
                *v = u[k * r + q].exp();
            }
        }
        p
    }

    fn eval(&self, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let r = self.r;
        let nb = self.n_beta();
        let alpha = &x[..r];
        let beta = self.beta_of(x);
        let u = &x[r + nb..];
        let mut ga = vec![0.0; r];
        let mut gb = vec![0.0; nb];
        let want = grad.is_some();
        let mut lp = log_likelihood(
            &self.obs,
            &self.offsets,
            r,
            alpha,
            beta,
            if want { Some((&mut ga, &mut gb)) } else { None },
        );
        lp -= 0.5 * alpha.iter().map(|a| a * a).sum::<f64>();
        // beta ~ N(0, sigma^2) per factor and party, half-normal(1) on sigma = exp(u)
        let mut gu = vec![0.0; u.len()];
        for (k, &n) in self.levels.iter().enumerate() {
            for p in 0..r {
                let q = k * r + p;
                let inv = (-2.0 * u[q]).exp();
                for j in 0..n {
                    let i = self.offsets[k] + j * r + p;
                    let b = beta[i];
                    lp -= 0.5 * b * b * inv;
                    gb[i] -= b * inv;
                    gu[q] += b * b * inv;
                }
                lp -= n as f64 * u[q];
                gu[q] -= n as f64;
            }
        }
        for (q, &v) in u.iter().enumerate() {
            lp += v - 0.5 * (2.0 * v).exp();
            gu[q] += 1.0 - (2.0 * v).exp();
        }
        if let Some(g) = grad {
            g[..r].iter_mut().zip(&ga).zip(alpha).for_each(|((g, a), x)| *g = a - x);
            g[r..r + nb].copy_from_slice(&gb);
            g[r + nb..].copy_from_slice(&gu);
        }
        if lp.is_finite() {
            lp
        } else {
            f64::NEG_INFINITY
        }
    }
}

impl LogDensityTarget for FundamentalTarget {
    fn dim(&self) -> usize {
        self.r + self.n_beta() + self.levels.len() * self.r
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        self.eval(x, None)
    }

    fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.eval(x, Some(grad))
    }

    fn init_radius(&self) -> f64 {
        1.0
    }
}

/// Convergence summary attached to fitted posteriors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub chains: usize,
    pub draws_per_chain: usize,
    pub max_rhat: f64,
    pub divergence_rate: f64,
    pub step_size: Vec<f64>,
    pub leapfrog_steps: Vec<usize>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

/// R-hat bound below which a fit counts as converged.
pub const RHAT_BOUND: f64 = 1.05;

impl FitDiagnostics {
    pub(crate) fn from_chains(set: &crate::inference::ChainSet) -> Result<Self> {
        let mut warnings = Vec::new();
        let max_rhat = if set.chains() >= 2 {
            rhat(set)?.max()
        } else {
            warnings.push("a single chain cannot be checked for convergence".to_string());
            f64::NAN
        };
        let converged = max_rhat < RHAT_BOUND && !set.too_many_divergences();
        if !(max_rhat < RHAT_BOUND) {
            warnings.push(format!("max split R-hat {max_rhat:.3} is not below {RHAT_BOUND}"));
        }
        if set.too_many_divergences() {
            warnings.push(format!(
                "{:.1}% of transitions diverged",
                100.0 * set.divergence_rate()
            ));
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok(FitDiagnostics {
            chains: set.chains(),
            draws_per_chain: set.iterations(),
            max_rhat,
            divergence_rate: set.divergence_rate(),
            step_size: set.step_size.clone(),
            leapfrog_steps: set.leapfrog_steps.clone(),
            converged,
            warnings,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalPosterior {
    pub canon: PartyCanon,
    pub layout: FactorLayout,
    pub draws: Vec<FundamentalParams>,
    /// Chain of each draw.
    pub chain: Vec<usize>,
    pub config: SamplerConfig,
    pub diagnostics: FitDiagnostics,
    /// Factor applied to the alpha draws, 1 when not inflated.
    pub inflation: f64,
}

impl FundamentalPosterior {
    pub fn inflated(&self) -> bool {
        self.inflation != 1.0
    }
}

pub fn fit_fundamental(set: &StrataSet, config: &SamplerConfig) -> Result<FundamentalPosterior> {
    let target = FundamentalTarget::new(set)?;
    log::info!(
        "fitting fundamental model: {} observed strata, {} respondents, {} parameters",
        target.obs.len(),
        set.respondents(),
        target.dim()
    );
    let chains = hmc_sample(&target, config)?;
    let diagnostics = FitDiagnostics::from_chains(&chains)?;
    let mut draws = Vec::with_capacity(chains.chains() * chains.iterations());
    let mut chain = Vec::with_capacity(draws.capacity());
    for (c, d) in chains.draws.iter().enumerate() {
        for x in d {
            draws.push(target.params_of(&set.layout, x));
            chain.push(c);
        }
    }
    Ok(FundamentalPosterior {
        canon: set.canon.clone(),
        layout: set.layout.clone(),
        draws,
        chain,
        config: config.clone(),
        diagnostics,
        inflation: 1.0,
    })
}

/// Scales every alpha draw by `factor`.
pub fn inflate_alpha(posterior: &FundamentalPosterior, factor: f64) -> Result<FundamentalPosterior> {
    if !(factor >= 1.0 && factor.is_finite()) {
        return Err(Error::InvalidInput(format!("inflation factor must be at least 1, got {factor}")));
    }
    let mut out = posterior.clone();
    for d in out.draws.iter_mut() {
        for a in d.alpha.iter_mut() {
            *a *= factor;
        }
    }
    out.inflation *= factor;
    Ok(out)
}

/// Census cells of one province with their strata level indices.
struct ProvinceCells {
    province: u32,
    cells: Vec<(Vec<usize>, f64)>,
}

fn province_cells(set: &StrataSet) -> Result<Vec<ProvinceCells>> {
    let mut by: BTreeMap<u32, Vec<(Vec<usize>, f64)>> = BTreeMap::new();
    for s in &set.strata {
        let idx = set.layout.indices(s)?;
        by.entry(s.province).or_default().push((idx, s.weight));
    }
    let mut out = Vec::new();
    for &p in &set.layout.provinces {
        let cells = by.remove(&p).unwrap_or_default();
        let total: f64 = cells.iter().map(|c| c.1).sum();
        if !(total > 0.0) {
            return Err(Error::MissingCensus { province: p });
        }
        let cells = cells
            .into_iter()
            .filter(|c| c.1 > 0.0)
            .map(|(i, w)| (i, w / total))
            .collect();
        out.push(ProvinceCells { province: p, cells });
    }
    Ok(out)
}

fn poststratify_cells(params: &FundamentalParams, cells: &[ProvinceCells], out: &mut Vec<f64>) {
    let l = params.parties();
    let mut mu = vec![0.0; l];
    for pc in cells {
        let start = out.len();
        out.resize(start + l, 0.0);
        for (idx, w) in &pc.cells {
            let f = predictor_at(params, idx);
            softmax_into(&f, &mut mu);
            for (o, m) in out[start..].iter_mut().zip(&mu) {
                *o += w * m;
            }
        }
    }
}

/// Census-weighted average of the stratum probabilities in every province.
pub fn poststratify(params: &FundamentalParams, set: &StrataSet) -> Result<Vec<(u32, ShareVector)>> {
    params.check(&set.layout)?;
    let cells = province_cells(set)?;
    let mut flat = Vec::new();
    poststratify_cells(params, &cells, &mut flat);
    let l = params.parties();
    cells
        .iter()
        .zip(flat.chunks(l))
        .map(|(pc, v)| Ok((pc.province, ShareVector::normalized(v.to_vec())?)))
        .collect()
}

/// Draw indices used for `s` simulations: an even thinning when enough
/// draws exist, otherwise every draw once plus a seeded resample.
fn simulation_indices(available: usize, s: usize, seed: u64) -> Vec<usize> {
    if s <= available {
        return (0..s).map(|i| i * available / s).collect();
    }
    log::info!("resampling {} of {s} simulations with replacement from {available} posterior draws", s - available);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<usize> = (0..available).collect();
    out.extend((available..s).map(|_| rng.random_range(0..available)));
    out
}

/// Province results for `s` posterior draws plus their electorate-weighted
/// national aggregates.
pub fn simulate_local_results(
    posterior: &FundamentalPosterior,
    set: &StrataSet,
    s: usize,
    seed: u64,
    force: bool,
) -> Result<SimulationEnsemble> {
    if !posterior.diagnostics.converged && !force {
        return Err(Error::InvalidInput(
            "the fundamental posterior is flagged non-converged; pass force to simulate anyway".into(),
        ));
    }
    if posterior.draws.is_empty() || s == 0 {
        return Err(Error::InvalidInput("need at least one posterior draw and one simulation".into()));
    }
    if posterior.layout != set.layout || posterior.canon != set.canon {
        return Err(Error::InvalidInput("strata do not match the fitted layout".into()));
    }
    let cells = province_cells(set)?;
    let electorate: Vec<f64> = cells
        .iter()
        .map(|pc| {
            set.electorate
                .get(&pc.province)
                .copied()
                .filter(|e| *e > 0.0)
                .ok_or(Error::MissingCensus { province: pc.province })
        })
        .collect::<Result<_>>()?;
    let picks = simulation_indices(posterior.draws.len(), s, seed);
    let local: Vec<Vec<f64>> = crate::par::map_indices(picks.len(), |i| {
        let mut v = Vec::with_capacity(cells.len() * set.canon.len());
        poststratify_cells(&posterior.draws[picks[i]], &cells, &mut v);
        v
    });
    SimulationEnsemble::new(
        set.canon.clone(),
        cells.iter().map(|c| c.province).collect(),
        electorate,
        local.concat(),
    )
}

/// Per-parameter names in [`FundamentalParams::to_natural`] order.
pub fn parameter_names(layout: &FactorLayout, canon: &PartyCanon) -> Vec<String> {
    let r = canon.reduced_len();
    let parties = &canon.labels()[..r];
    let mut out: Vec<String> = parties.iter().map(|p| format!("alpha[{p}]")).collect();
    for k in 0..layout.n_factors() {
        for j in 0..layout.levels(k) {
            for p in parties {
                out.push(format!("beta[{}={},{p}]", layout.factor_name(k), layout.level_code(k, j)));
            }
        }
    }
    for k in 0..layout.n_factors() {
        for p in parties {
            out.push(format!("sigma[{},{p}]", layout.factor_name(k)));
        }
    }
    out
}

/// Groups of parameter names: `alpha`, `beta[<factor>]`, `sigma`.
pub fn parameter_groups(layout: &FactorLayout, canon: &PartyCanon) -> Vec<String> {
    let r = canon.reduced_len();
    let mut out = vec!["alpha".to_string(); r];
    for k in 0..layout.n_factors() {
        out.extend(std::iter::repeat_n(format!("beta[{}]", layout.factor_name(k)), layout.levels(k) * r));
    }
    out.extend(std::iter::repeat_n("sigma".to_string(), layout.n_factors() * r));
    out
}

/// Province code lookup for level indices.
pub fn province_index(layout: &FactorLayout) -> HashMap<u32, usize> {
    layout.provinces.iter().enumerate().map(|(i, p)| (*p, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::gradient_relative_error;
    use rand_distr::{Distribution, Normal};

    fn small_layout() -> FactorLayout {
        FactorLayout::new(vec![1, 2], vec![("gender".into(), 2), ("age".into(), 3)]).unwrap()
    }

    fn canon3() -> PartyCanon {
        PartyCanon::with_last_as_pivot(&["A", "B", "O"]).unwrap()
    }

    fn random_params(layout: &FactorLayout, parties: usize, rng: &mut ChaCha8Rng) -> FundamentalParams {
        let mut p = FundamentalParams::zeros(layout, parties);
        let n = Normal::new(0.0, 0.7).unwrap();
        for a in p.alpha[..parties - 1].iter_mut() {
            *a = n.sample(rng);
        }
        for lv in p.beta.iter_mut() {
            for b in lv.iter_mut() {
                for v in b[..parties - 1].iter_mut() {
                    *v = n.sample(rng);
                }
            }
        }
        for s in p.sigma.iter_mut().flatten() {
            *s = rng.random_range(0.3..2.0);
        }
        p
    }

    fn full_grid(layout: &FactorLayout, parties: usize, rng: &mut ChaCha8Rng) -> Vec<Stratum> {
        let mut out = Vec::new();
        for &prov in &layout.provinces {
            for g in 1..=2 {
                for a in 1..=3 {
                    out.push(Stratum {
                        province: prov,
                        levels: vec![g, a],
                        counts: (0..parties).map(|_| rng.random_range(0..6)).collect(),
                        weight: 1.0 / 6.0,
                    });
                }
            }
        }
        out
    }

    fn set_with(strata: Vec<Stratum>) -> StrataSet {
        let layout = small_layout();
        let electorate = layout.provinces.iter().map(|p| (*p, 1000.0 * *p as f64)).collect();
        StrataSet::new(canon3(), layout, strata, electorate).unwrap()
    }

    #[test]
    fn zero_params_give_zero_predictor_and_uniform_shares() {
        let layout = small_layout();
        let p = FundamentalParams::zeros(&layout, 3);
        let s = Stratum {
            province: 2,
            levels: vec![1, 3],
            counts: vec![0; 3],
            weight: 0.0,
        };
        assert_eq!(linear_predictor(&p, &layout, &s).unwrap(), vec![0.0; 3]);
        let mu = stratum_probabilities(&p, &layout, &s).unwrap();
        assert!(mu.as_slice().iter().all(|m| (m - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn predictor_sums_intercept_and_levels() {
        let layout = small_layout();
        let mut p = FundamentalParams::zeros(&layout, 3);
        p.alpha = vec![1.0, 0.0, 0.0];
        let s = Stratum {
            province: 1,
            levels: vec![2, 2],
            counts: vec![0; 3],
            weight: 0.0,
        };
        assert_eq!(linear_predictor(&p, &layout, &s).unwrap(), vec![1.0, 0.0, 0.0]);
        p.beta[0][0] = vec![0.5, -0.25, 0.0];
        p.beta[1][1] = vec![0.125, 2.0, 0.0];
        p.beta[2][1] = vec![-1.0, 0.5, 0.0];
        p.beta[2][2] = vec![9.0, 9.0, 0.0];
        assert_eq!(linear_predictor(&p, &layout, &s).unwrap(), vec![0.625, 2.25, 0.0]);
    }

    #[test]
    fn saturation() {
        let layout = small_layout();
        let mut p = FundamentalParams::zeros(&layout, 3);
        p.alpha[1] = 20.0;
        let s = Stratum {
            province: 1,
            levels: vec![1, 1],
            counts: vec![0; 3],
            weight: 0.0,
        };
        assert!(stratum_probabilities(&p, &layout, &s).unwrap()[1] > 0.999);
    }

    #[test]
    fn unknown_levels_are_rejected() {
        let layout = small_layout();
        let p = FundamentalParams::zeros(&layout, 3);
        for (province, levels) in [(3, vec![1, 1]), (1, vec![3, 1]), (1, vec![1, 0]), (1, vec![1])] {
            let s = Stratum {
                province,
                levels,
                counts: vec![0; 3],
                weight: 0.0,
            };
            assert!(matches!(linear_predictor(&p, &layout, &s), Err(Error::InvalidStratum(_))));
        }
    }

    #[test]
    fn single_observation_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layout = small_layout();
        let p = random_params(&layout, 3, &mut rng);
        let s = Stratum {
            province: 2,
            levels: vec![1, 2],
            counts: vec![0, 1, 0],
            weight: 1.0,
        };
        let empty = Stratum {
            counts: vec![0; 3],
            ..s.clone()
        };
        let with = log_posterior(&p, &set_with(vec![s.clone()])).unwrap();
        let without = log_posterior(&p, &set_with(vec![empty])).unwrap();
        let mu = stratum_probabilities(&p, &layout, &s).unwrap();
        assert!((with - without - mu[1].ln()).abs() < 1e-12);
    }

    #[test]
    fn likelihood_is_linear_in_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layout = small_layout();
        let p = random_params(&layout, 3, &mut rng);
        let strata = full_grid(&layout, 3, &mut rng);
        let doubled: Vec<Stratum> = strata
            .iter()
            .map(|s| Stratum {
                counts: s.counts.iter().map(|c| 2 * c).collect(),
                ..s.clone()
            })
            .collect();
        let none: Vec<Stratum> = strata
            .iter()
            .map(|s| Stratum {
                counts: vec![0; 3],
                ..s.clone()
            })
            .collect();
        let prior = log_posterior(&p, &set_with(none)).unwrap();
        let one = log_posterior(&p, &set_with(strata)).unwrap() - prior;
        let two = log_posterior(&p, &set_with(doubled)).unwrap() - prior;
        assert!((two - 2.0 * one).abs() < 1e-9 * one.abs());
    }

    struct Natural<'a> {
        set: &'a StrataSet,
    }

    impl LogDensityTarget for Natural<'_> {
        fn dim(&self) -> usize {
            FundamentalParams::zeros(&self.set.layout, 3).to_natural().len()
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            log_posterior(&FundamentalParams::from_natural(&self.set.layout, 3, x), self.set).unwrap()
        }
        fn log_density_and_gradient(&self, x: &[f64], g: &mut [f64]) -> f64 {
            let p = FundamentalParams::from_natural(&self.set.layout, 3, x);
            g.copy_from_slice(&log_posterior_gradient(&p, self.set).unwrap());
            log_posterior(&p, self.set).unwrap()
        }
    }

    #[test]
    fn natural_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layout = small_layout();
        let set = set_with(full_grid(&layout, 3, &mut rng));
        let target = Natural { set: &set };
        for _ in 0..20 {
            let x = random_params(&layout, 3, &mut rng).to_natural();
            let err = gradient_relative_error(&target, &x, 1e-5);
            assert!(err < 1e-5, "relative error {err}");
        }
    }

    #[test]
    fn sampling_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layout = small_layout();
        let set = set_with(full_grid(&layout, 3, &mut rng));
        let target = FundamentalTarget::new(&set).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..target.dim()).map(|_| rng.random_range(-1.5..1.5)).collect();
            let err = gradient_relative_error(&target, &x, 1e-5);
            assert!(err < 1e-5, "relative error {err}");
        }
    }

    #[test]
    fn sampling_target_agrees_with_natural_posterior() {
        // Differences between two points must match once the log Jacobian
        // of sigma = exp(u) is accounted for.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layout = small_layout();
        let set = set_with(full_grid(&layout, 3, &mut rng));
        let target = FundamentalTarget::new(&set).unwrap();
        let log_jac = |x: &[f64]| {
            let p = target.params_of(&layout, x);
            let r = 2;
            (0..layout.n_factors())
                .map(|k| (0..r).map(|q| p.sigma[k][q].ln()).sum::<f64>())
                .sum::<f64>()
        };
        let x: Vec<f64> = (0..target.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..target.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let nat = |v: &[f64]| log_posterior(&target.params_of(&layout, v), &set).unwrap() + log_jac(v);
        let d_target = target.log_density(&x) - target.log_density(&y);
        assert!((d_target - (nat(&x) - nat(&y))).abs() < 1e-9);
    }

    #[test]
    fn empty_survey_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layout = small_layout();
        let strata = full_grid(&layout, 3, &mut rng)
            .into_iter()
            .map(|s| Stratum {
                counts: vec![0; 3],
                ..s
            })
            .collect();
        assert!(fit_fundamental(&set_with(strata), &SamplerConfig::default()).is_err());
    }

    #[test]
    fn inflation_scales_alpha_only() {
        let layout = small_layout();
        let mut p = FundamentalParams::zeros(&layout, 3);
        p.alpha = vec![0.2, -0.4, 0.0];
        p.beta[1][0] = vec![0.1, 0.3, 0.0];
        let post = FundamentalPosterior {
            canon: canon3(),
            layout: layout.clone(),
            draws: vec![p.clone()],
            chain: vec![0],
            config: SamplerConfig::default(),
            diagnostics: FitDiagnostics {
                chains: 1,
                draws_per_chain: 1,
                max_rhat: 1.0,
                divergence_rate: 0.0,
                step_size: vec![],
                leapfrog_steps: vec![],
                converged: true,
                warnings: vec![],
            },
            inflation: 1.0,
        };
        assert_eq!(inflate_alpha(&post, 1.0).unwrap().draws, post.draws);
        let inf = inflate_alpha(&post, 1.5).unwrap();
        assert!((inf.draws[0].alpha[0] - 0.3).abs() < 1e-15);
        assert!((inf.draws[0].alpha[1] + 0.6).abs() < 1e-15);
        assert_eq!(inf.draws[0].beta, p.beta);
        assert!(inf.inflated());
        assert!(inflate_alpha(&post, 0.9).is_err());
    }

    #[test]
    fn poststratification_examples() {
        let layout = FactorLayout::new(vec![7], vec![("gender".into(), 2)]).unwrap();
        let canon = PartyCanon::with_last_as_pivot(&["A", "O"]).unwrap();
        let mut p = FundamentalParams::zeros(&layout, 2);
        // softmax(f, 0) = (0.5, 0.5) and (0.1, 0.9)
        p.beta[1][1] = vec![(0.1f64 / 0.9).ln(), 0.0];
        let strata = vec![
            Stratum {
                province: 7,
                levels: vec![1],
                counts: vec![0, 0],
                weight: 0.6,
            },
            Stratum {
                province: 7,
                levels: vec![2],
                counts: vec![0, 0],
                weight: 0.4,
            },
        ];
        let set = StrataSet::new(canon, layout, strata, BTreeMap::from([(7, 10.0)])).unwrap();
        let out = poststratify(&p, &set).unwrap();
        assert_eq!(out[0].0, 7);
        assert!((out[0].1[0] - 0.34).abs() < 1e-12);
        assert!((out[0].1[1] - 0.66).abs() < 1e-12);
    }

    #[test]
    fn zero_census_weight_is_missing_census() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let layout = small_layout();
        let strata = full_grid(&layout, 3, &mut rng)
            .into_iter()
            .map(|s| Stratum {
                weight: if s.province == 2 { 0.0 } else { s.weight },
                ..s
            })
            .collect();
        let p = FundamentalParams::zeros(&layout, 3);
        assert!(matches!(
            poststratify(&p, &set_with(strata)),
            Err(Error::MissingCensus { province: 2 })
        ));
    }

    #[test]
    fn poststratified_shares_lie_in_the_hull_of_strata() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layout = small_layout();
        for _ in 0..50 {
            let p = random_params(&layout, 3, &mut rng);
            let mut strata = full_grid(&layout, 3, &mut rng);
            for s in strata.iter_mut() {
                s.weight = rng.random_range(0.0..1.0);
            }
            let set = set_with(strata.clone());
            for (prov, share) in poststratify(&p, &set).unwrap() {
                let probs: Vec<ShareVector> = strata
                    .iter()
                    .filter(|s| s.province == prov)
                    .map(|s| stratum_probabilities(&p, &layout, s).unwrap())
                    .collect();
                assert!((share.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for l in 0..3 {
                    let lo = probs.iter().map(|m| m[l]).fold(f64::INFINITY, f64::min);
                    let hi = probs.iter().map(|m| m[l]).fold(f64::NEG_INFINITY, f64::max);
                    assert!(share[l] >= lo - 1e-12 && share[l] <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn simulation_indices_thin_or_resample() {
        assert_eq!(simulation_indices(10, 5, 0), vec![0, 2, 4, 6, 8]);
        let r = simulation_indices(3, 7, 1);
        assert_eq!(r.len(), 7);
        assert_eq!(&r[..3], &[0, 1, 2]);
        assert!(r.iter().all(|i| *i < 3));
    }

    #[test]
    fn parameter_names_match_natural_layout() {
        let layout = small_layout();
        let names = parameter_names(&layout, &canon3());
        assert_eq!(names.len(), FundamentalParams::zeros(&layout, 3).to_natural().len());
        assert_eq!(names[0], "alpha[A]");
        assert_eq!(names[2], "beta[province=1,A]");
        assert_eq!(names.last().unwrap(), "sigma[age,B]");
        assert_eq!(parameter_groups(&layout, &canon3()).len(), names.len());
    }
}
