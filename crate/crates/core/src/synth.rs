//! Synthetic surveys, censuses and poll archives with known parameters.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::fundamental::{FactorLayout, FundamentalParams};
use crate::ingest::{CellKey, Census, Respondent, SurveyCounts};
use crate::polls::{Poll, PollsParams};
use crate::simplex::{softmax, CovMatrix, PartyCanon, ReducedVector, ShareVector};

/// Every factor level combination of one province, in lexicographic order.
pub fn factor_grid(factors: &[(String, u32)]) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new()];
    for (_, n) in factors {
        out = out
            .into_iter()
            .flat_map(|prefix: Vec<u32>| {
                (1..=*n).map(move |l| {
                    let mut v = prefix.clone();
                    v.push(l);
                    v
                })
            })
            .collect();
    }
    out
}

/// Parameters drawn from the model's prior.
pub fn prior_params<R: Rng>(layout: &FactorLayout, parties: usize, rng: &mut R) -> FundamentalParams {
    let mut p = FundamentalParams::zeros(layout, parties);
    let r = parties - 1;
    for a in &mut p.alpha[..r] {
        *a = rng.sample(StandardNormal);
    }
    for (k, levels) in p.beta.iter_mut().enumerate() {
        for l in 0..r {
            let s: f64 = rng.sample::<f64, _>(StandardNormal).abs();
            p.sigma[k][l] = s;
            for b in levels.iter_mut() {
                b[l] = s * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    p
}

fn log_ratios(v: &ShareVector) -> Vec<f64> {
    let pivot = v[v.len() - 1].max(1e-6);
    v.as_slice().iter().map(|x| (x.max(1e-6) / pivot).ln()).collect()
}

/// Parameters whose province effects reproduce `province_shares`, plus
/// demographic effects that tilt the old parties towards older, rural
/// voters and the new ones towards younger, urban and educated voters.
pub fn calibrated_params<R: Rng>(
    layout: &FactorLayout,
    canon: &PartyCanon,
    province_shares: &BTreeMap<u32, ShareVector>,
    rng: &mut R,
) -> Result<FundamentalParams> {
    let l = canon.len();
    let mut p = FundamentalParams::zeros(layout, l);
    let mut national = vec![0.0; l];
    for s in province_shares.values() {
        for (n, x) in national.iter_mut().zip(s.as_slice()) {
            *n += x / province_shares.len() as f64;
        }
    }
    p.alpha = log_ratios(&ShareVector::normalized(national)?);
    for (j, prov) in layout.provinces.iter().enumerate() {
        let s = province_shares.get(prov).ok_or(Error::MissingCensus { province: *prov })?;
        let lr = log_ratios(s);
        for i in 0..l {
            p.beta[0][j][i] = lr[i] - p.alpha[i];
        }
    }
    let noise = Normal::new(0.0, 0.1).unwrap();
    for k in 1..layout.n_factors() {
        let n = layout.levels(k);
        for j in 0..n {
            // centred position of the level in [-1, 1]
            let pos = if n > 1 { 2.0 * j as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
            for i in 0..l - 1 {
                let old = i < 2;
                let tilt = match (layout.factor_name(k), old) {
                    ("age", true) => 0.25 * pos,
                    ("age", false) => -0.3 * pos,
                    ("municipality_size", true) => -0.25 * pos,
                    ("education", false) => 0.2 * pos,
                    _ => 0.0,
                };
                p.beta[k][j][i] = tilt + noise.sample(rng);
            }
        }
    }
    for k in 0..layout.n_factors() {
        for i in 0..l - 1 {
            let xs: Vec<f64> = p.beta[k].iter().map(|b| b[i]).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
            p.sigma[k][i] = (v + m * m).sqrt().max(0.05);
        }
    }
    Ok(p)
}

/// Census counts per cell: independent random marginals per province
/// scaled to the province electorate.
pub fn synthetic_census<R: Rng>(layout: &FactorLayout, electorate: &BTreeMap<u32, f64>, rng: &mut R) -> Result<BTreeMap<CellKey, f64>> {
    let grid = factor_grid(&layout.factors);
    let mut out = BTreeMap::new();
    for &prov in &layout.provinces {
        let e = *electorate.get(&prov).ok_or(Error::MissingCensus { province: prov })?;
        let marginals: Vec<Vec<f64>> = layout
            .factors
            .iter()
            .map(|(_, n)| {
                let w: Vec<f64> = (0..*n).map(|_| rng.random_range(0.5..1.5)).collect();
                let t: f64 = w.iter().sum();
                w.into_iter().map(|x| x / t).collect()
            })
            .collect();
        for cell in &grid {
            let share: f64 = cell.iter().zip(&marginals).map(|(c, m)| m[*c as usize - 1]).product();
            out.insert((prov, cell.clone()), (e * share).round().max(1.0));
        }
    }
    Ok(out)
}

/// Census with weights normalized per province.
pub fn census_from_counts(counts: &BTreeMap<CellKey, f64>, electorate: &BTreeMap<u32, f64>) -> Census {
    let mut totals: BTreeMap<u32, f64> = BTreeMap::new();
    let mut coverage: BTreeMap<u32, usize> = BTreeMap::new();
    for ((p, _), c) in counts {
        *totals.entry(*p).or_default() += c;
        *coverage.entry(*p).or_default() += 1;
    }
    Census {
        weights: counts.iter().map(|(k, c)| (k.clone(), c / totals[&k.0])).collect(),
        electorate: electorate.clone(),
        coverage,
    }
}

/// `n` respondents drawn across cells in proportion to the census counts,
/// with intentions from the model; a `missing_rate` fraction report none.
pub fn synthetic_survey<R: Rng>(
    params: &FundamentalParams,
    layout: &FactorLayout,
    counts: &BTreeMap<CellKey, f64>,
    n: usize,
    missing_rate: f64,
    rng: &mut R,
) -> Result<Vec<Respondent>> {
    let cells: Vec<(&CellKey, f64)> = counts.iter().map(|(k, c)| (k, *c)).collect();
    let pick = WeightedIndex::new(cells.iter().map(|c| c.1)).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut probs: BTreeMap<&CellKey, WeightedIndex<f64>> = BTreeMap::new();
    let mut out = Vec::with_capacity(n);
    for id in 0..n {
        let key = cells[pick.sample(rng)].0;
        if !probs.contains_key(key) {
            let stratum = crate::fundamental::Stratum {
                province: key.0,
                levels: key.1.clone(),
                counts: vec![0; params.parties()],
                weight: 0.0,
            };
            let mu = crate::fundamental::stratum_probabilities(params, layout, &stratum)?;
            probs.insert(key, WeightedIndex::new(mu.as_slice()).map_err(|e| Error::InvalidInput(e.to_string()))?);
        }
        let party = probs[key].sample(rng);
        let missing = rng.random::<f64>() < missing_rate;
        out.push(Respondent {
            id: id as u32 + 1,
            province: key.0,
            levels: key.1.clone(),
            intention: (!missing).then_some(party as u32 + 1),
        });
    }
    Ok(out)
}

/// Per-stratum intention counts of a respondent list.
pub fn survey_counts(respondents: &[Respondent], parties: usize) -> SurveyCounts {
    let mut counts: BTreeMap<CellKey, Vec<u32>> = BTreeMap::new();
    let mut dropped = 0;
    for r in respondents {
        let c = counts.entry((r.province, r.levels.clone())).or_insert_with(|| vec![0; parties]);
        match r.intention {
            Some(i) => c[i as usize - 1] += 1,
            None => dropped += 1,
        }
    }
    SurveyCounts {
        counts,
        respondents: respondents.len(),
        dropped,
    }
}

/// Standard deviations of the synthetic poll-error truth.
#[derive(Debug, Clone, Copy)]
pub struct PollErrorScales {
    pub house: f64,
    pub election: f64,
    /// Per day before the election.
    pub trend: f64,
    pub noise: f64,
    /// Correlation between every pair of components.
    pub correlation: f64,
}

impl Default for PollErrorScales {
    fn default() -> Self {
        PollErrorScales {
            house: 0.012,
            election: 0.01,
            trend: 0.0002,
            noise: 0.012,
            correlation: -0.2,
        }
    }
}

fn equicorrelated(r: usize, sd: f64, rho: f64) -> Result<CovMatrix> {
    CovMatrix::new(DMatrix::from_fn(r, r, |a, b| if a == b { sd * sd } else { rho * sd * sd }))
}

fn mvn<R: Rng>(cov: &CovMatrix, rng: &mut R) -> Result<Vec<f64>> {
    let r = cov.dim();
    let l = cov
        .matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("synthetic covariance is not positive definite".into()))?
        .l();
    let z = DVector::from_fn(r, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok((l * z).iter().copied().collect())
}

/// Effects and covariances of a known poll-error process.
pub fn polls_truth<R: Rng>(pollsters: &[String], elections: &[String], r: usize, scales: PollErrorScales, rng: &mut R) -> Result<PollsParams> {
    let rho = scales.correlation;
    let sigma_gamma = equicorrelated(r, scales.house, rho)?;
    let sigma_delta = equicorrelated(r, scales.election, rho)?;
    let sigma_epsilon = equicorrelated(r, scales.trend, rho)?;
    let draw = |n: usize, c: &CovMatrix, rng: &mut R| -> Result<Vec<ReducedVector>> {
        (0..n).map(|_| ReducedVector::new(mvn(c, rng)?)).collect()
    };
    let gamma = draw(pollsters.len(), &sigma_gamma, rng)?;
    let delta = draw(elections.len(), &sigma_delta, rng)?;
    let epsilon = draw(elections.len(), &sigma_epsilon, rng)?;
    let sigma_poll = pollsters
        .iter()
        .map(|_| equicorrelated(r, scales.noise * rng.random_range(0.7..1.3), rho))
        .collect::<Result<_>>()?;
    Ok(PollsParams {
        pollsters: pollsters.to_vec(),
        elections: elections.to_vec(),
        gamma,
        delta,
        epsilon,
        sigma_poll,
        sigma_gamma,
        sigma_delta,
        sigma_epsilon,
    })
}

/// One poll to simulate.
#[derive(Debug, Clone, PartialEq)]
pub struct PollPlan {
    pub pollster: String,
    pub election: String,
    pub days_before: u32,
    /// Which canon parties the poll reports.
    pub observed: Vec<bool>,
    pub sample_size: Option<u32>,
}

/// Polls generated from `truth` around the known results. Reported shares
/// are clipped to stay inside the simplex; when the pivot is reported it
/// receives the remainder.
pub fn simulate_polls<R: Rng>(
    truth: &PollsParams,
    results: &BTreeMap<String, ReducedVector>,
    plan: &[PollPlan],
    rng: &mut R,
) -> Result<Vec<Poll>> {
    let mut out = Vec::with_capacity(plan.len());
    for (k, p) in plan.iter().enumerate() {
        let j = truth.pollster_index(&p.pollster).ok_or_else(|| Error::Lookup {
            kind: "pollster",
            id: p.pollster.clone(),
        })?;
        let t = truth.election_index(&p.election).ok_or_else(|| Error::Lookup {
            kind: "election",
            id: p.election.clone(),
        })?;
        let v = results.get(&p.election).ok_or_else(|| Error::Lookup {
            kind: "election result",
            id: p.election.clone(),
        })?;
        let noise = mvn(&truth.sigma_poll[j], rng)?;
        let r = v.len();
        let d = p.days_before as f64;
        let mut reduced: Vec<f64> = (0..r)
            .map(|a| {
                let x = v[a] + truth.gamma[j][a] + truth.delta[t][a] + d * truth.epsilon[t][a] + noise[a];
                x.max(0.001)
            })
            .collect();
        let total: f64 = reduced.iter().enumerate().filter(|(a, _)| p.observed[*a]).map(|x| x.1).sum();
        if total > 0.99 {
            for x in reduced.iter_mut() {
                *x *= 0.99 / total;
            }
        }
        let mut shares: Vec<Option<f64>> = (0..r).map(|a| p.observed[a].then_some(reduced[a])).collect();
        let rest = 1.0 - reduced.iter().sum::<f64>();
        shares.push(p.observed[r].then_some(rest.max(0.01)));
        if p.observed.iter().all(|o| *o) {
            let total: f64 = shares.iter().flatten().sum();
            shares = shares.into_iter().map(|s| s.map(|x| x / total)).collect();
        }
        out.push(Poll {
            id: format!("{}-{:03}", p.election, k + 1),
            pollster: p.pollster.clone(),
            election: p.election.clone(),
            days_before: p.days_before,
            shares,
            sample_size: p.sample_size,
        });
    }
    Ok(out)
}

/// Expected national shares under `params` for a census.
pub fn expected_national(params: &FundamentalParams, layout: &FactorLayout, census: &Census) -> Result<ShareVector> {
    let total_e: f64 = census.electorate.values().sum();
    let mut acc = vec![0.0; params.parties()];
    for ((prov, levels), w) in &census.weights {
        let mut idx = vec![layout.provinces.binary_search(prov).map_err(|_| Error::MissingCensus { province: *prov })?];
        idx.extend(levels.iter().map(|l| *l as usize - 1));
        let mut f = params.alpha.clone();
        for (k, &j) in idx.iter().enumerate() {
            for (fl, b) in f.iter_mut().zip(&params.beta[k][j]) {
                *fl += b;
            }
        }
        let mu = softmax(&f)?;
        let e = census.electorate[prov] / total_e;
        for (a, m) in acc.iter_mut().zip(mu.as_slice()) {
            *a += e * w * m;
        }
    }
    ShareVector::normalized(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spanish_grid_has_162_cells() {
        let g = factor_grid(&FactorLayout::spain_factors());
        assert_eq!(g.len(), 162);
        assert_eq!(g[0], vec![1, 1, 1, 1, 1]);
        assert_eq!(g[161], vec![3, 2, 3, 3, 3]);
        assert_eq!(52 * g.len(), 8424);
    }

    #[test]
    fn survey_size_and_drops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layout = FactorLayout::new(vec![1, 2], FactorLayout::spain_factors()).unwrap();
        let params = prior_params(&layout, 5, &mut rng);
        let e = BTreeMap::from([(1, 1000.0), (2, 3000.0)]);
        let counts = synthetic_census(&layout, &e, &mut rng).unwrap();
        assert_eq!(counts.len(), 324);
        let s = synthetic_survey(&params, &layout, &counts, 2000, 0.1, &mut rng).unwrap();
        assert_eq!(s.len(), 2000);
        let c = survey_counts(&s, 5);
        assert!((150..250).contains(&c.dropped), "{}", c.dropped);
        let in_two = s.iter().filter(|r| r.province == 2).count() as f64 / 2000.0;
        assert!((in_two - 0.75).abs() < 0.05);
    }

    #[test]
    fn calibrated_province_effects_reproduce_shares() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let canon = PartyCanon::spain();
        let layout = FactorLayout::new(vec![28], vec![("gender".into(), 2)]).unwrap();
        let shares = BTreeMap::from([(28, ShareVector::new(vec![0.16, 0.33, 0.21, 0.18, 0.12]).unwrap())]);
        let p = calibrated_params(&layout, &canon, &shares, &mut rng).unwrap();
        let f: Vec<f64> = (0..5).map(|i| p.alpha[i] + p.beta[0][0][i]).collect();
        let mu = softmax(&f).unwrap();
        for i in 0..5 {
            assert!((mu[i] - shares[&28][i]).abs() < 1e-12);
        }
    }

    #[test]
    fn polls_stay_inside_the_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let js: Vec<String> = ["A", "B"].iter().map(|s| s.to_string()).collect();
        let ts = vec!["2015-12-20".to_string()];
        let truth = polls_truth(&js, &ts, 4, PollErrorScales::default(), &mut rng).unwrap();
        let results = BTreeMap::from([(ts[0].clone(), ReducedVector::new(vec![0.22, 0.29, 0.21, 0.14]).unwrap())]);
        let plan: Vec<PollPlan> = (0..50)
            .map(|i| PollPlan {
                pollster: js[i % 2].clone(),
                election: ts[0].clone(),
                days_before: i as u32,
                observed: vec![true, true, i % 3 != 0, true, i % 2 == 0],
                sample_size: None,
            })
            .collect();
        let polls = simulate_polls(&truth, &results, &plan, &mut rng).unwrap();
        let canon = PartyCanon::spain();
        for p in &polls {
            p.validate(&canon).unwrap();
        }
    }
}
