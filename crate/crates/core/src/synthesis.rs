//! Importance weighting of fundamental-model simulations by the polls
//! likelihood, weighted summaries, seat distributions and the Gaussian
//! prior-weight diagnostic.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::seats::{allocate_nation, ProvinceVotes};
use crate::simplex::{PartyCanon, ShareVector};

/// ESS below which summaries carry a degeneracy warning.
pub const DEFAULT_ESS_FLOOR: f64 = 50.0;

/// Simulated province results, their national aggregates and log weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationEnsemble {
    canon: PartyCanon,
    provinces: Vec<u32>,
    electorate: Vec<f64>,
    /// `draws x provinces x parties`, row-major.
    local: Vec<f64>,
    national: Vec<ShareVector>,
    log_weights: Option<Vec<f64>>,
    warnings: Vec<String>,
}

impl SimulationEnsemble {
    pub fn new(canon: PartyCanon, provinces: Vec<u32>, electorate: Vec<f64>, local: Vec<f64>) -> Result<Self> {
        let l = canon.len();
        let i = provinces.len();
        if i == 0 || electorate.len() != i {
            return Err(Error::InvalidInput("one electorate size per province is required".into()));
        }
        if local.is_empty() || local.len() % (i * l) != 0 {
            return Err(Error::InvalidInput(format!(
                "local results of length {} do not split into {i} provinces x {l} parties",
                local.len()
            )));
        }
        if electorate.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(Error::InvalidInput("electorate sizes must be positive".into()));
        }
        let total: f64 = electorate.iter().sum();
        let national = local
            .chunks(i * l)
            .map(|draw| {
                let mut v = vec![0.0; l];
                for (row, e) in draw.chunks(l).zip(&electorate) {
                    for (a, x) in v.iter_mut().zip(row) {
                        *a += e * x;
                    }
                }
                v.iter_mut().for_each(|a| *a /= total);
                ShareVector::new(v)
            })
            .collect::<Result<_>>()?;
        Ok(SimulationEnsemble {
            canon,
            provinces,
            electorate,
            local,
            national,
            log_weights: None,
            warnings: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.national.len()
    }

    pub fn is_empty(&self) -> bool {
        self.national.is_empty()
    }

    pub fn canon(&self) -> &PartyCanon {
        &self.canon
    }

    pub fn provinces(&self) -> &[u32] {
        &self.provinces
    }

    pub fn electorate(&self) -> &[f64] {
        &self.electorate
    }

    pub fn national(&self) -> &[ShareVector] {
        &self.national
    }

    /// Province-by-party shares of draw `s`, row-major.
    pub fn local(&self, s: usize) -> &[f64] {
        let w = self.provinces.len() * self.canon.len();
        &self.local[s * w..(s + 1) * w]
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn log_weights(&self) -> Option<&[f64]> {
        self.log_weights.as_deref()
    }

    /// Sets unnormalized log weights; non-finite values are rejected.
    pub fn set_log_weights(&mut self, log_weights: Vec<f64>, ess_floor: f64) -> Result<f64> {
        if log_weights.len() != self.len() {
            return Err(Error::InvalidInput(format!(
                "{} log weights for {} draws",
                log_weights.len(),
                self.len()
            )));
        }
        if let Some(w) = log_weights.iter().find(|w| !w.is_finite()) {
            return Err(Error::Numerical(format!("non-finite log weight {w}")));
        }
        self.log_weights = Some(log_weights);
        let ess = self.ess();
        log::info!("importance sampling ESS {ess:.1} of {} draws", self.len());
        self.warnings.retain(|w| !w.starts_with("degenerate weights"));
        if ess < ess_floor {
            let w = format!("degenerate weights: ESS {ess:.1} is below the floor {ess_floor}");
            log::warn!("{w}");
            self.warnings.push(w);
        }
        Ok(ess)
    }

    /// Normalized weights; equal when unset.
    pub fn normalized_weights(&self) -> Vec<f64> {
        match &self.log_weights {
            None => vec![1.0 / self.len() as f64; self.len()],
            Some(lw) => {
                let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = lw.iter().map(|x| (x - max).exp()).collect();
                let total: f64 = w.iter().sum();
                w.into_iter().map(|x| x / total).collect()
            }
        }
    }

    /// `(sum W)^2 / sum W^2`.
    pub fn ess(&self) -> f64 {
        let Some(lw) = &self.log_weights else {
            return self.len() as f64;
        };
        let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (mut s1, mut s2) = (0.0, 0.0);
        for x in lw {
            let w = (x - max).exp();
            s1 += w;
            s2 += w * w;
        }
        s1 * s1 / s2
    }

    /// Weighted national mean shares.
    pub fn national_mean(&self) -> Vec<f64> {
        let w = self.normalized_weights();
        let mut out = vec![0.0; self.canon.len()];
        for (v, wi) in self.national.iter().zip(&w) {
            for (o, x) in out.iter_mut().zip(v.as_slice()) {
                *o += wi * x;
            }
        }
        out
    }
}

/// Sets `log W_s` from a log-likelihood of the national aggregate.
pub fn importance_weights<F>(ensemble: &mut SimulationEnsemble, log_lik: F, ess_floor: f64) -> Result<f64>
where
    F: Fn(&ShareVector) -> Result<f64> + Sync,
{
    let national = ensemble.national();
    let lw: Vec<Result<f64>> = crate::par::map_indices(national.len(), |s| log_lik(&national[s]));
    let lw = lw.into_iter().collect::<Result<Vec<_>>>()?;
    ensemble.set_log_weights(lw, ess_floor)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightedSummary {
    pub mean: f64,
    /// Standard error of the self-normalized mean, using the ESS.
    pub mc_se: f64,
    pub quantiles: Vec<(f64, f64)>,
    pub ess: f64,
    pub warnings: Vec<String>,
}

impl WeightedSummary {
    pub fn quantile(&self, q: f64) -> Option<f64> {
        self.quantiles.iter().find(|(p, _)| (*p - q).abs() < 1e-12).map(|x| x.1)
    }
}

pub const DEFAULT_QUANTILES: [f64; 3] = [0.05, 0.5, 0.95];

/// Smallest value whose cumulative weight reaches `q`.
pub fn weighted_quantile(values: &[f64], weights: &[f64], q: f64) -> f64 {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for &i in &order {
        acc += weights[i];
        if acc >= q * total - 1e-12 * total && weights[i] > 0.0 {
            return values[i];
        }
    }
    values[*order.last().unwrap()]
}

fn summarize(values: &[f64], weights: &[f64], quantiles: &[f64], ess: f64, warnings: &[String]) -> WeightedSummary {
    let mean: f64 = values.iter().zip(weights).map(|(v, w)| v * w).sum();
    let var: f64 = values.iter().zip(weights).map(|(v, w)| w * (v - mean).powi(2)).sum();
    WeightedSummary {
        mean,
        mc_se: (var / ess).sqrt(),
        quantiles: quantiles.iter().map(|q| (*q, weighted_quantile(values, weights, *q))).collect(),
        ess,
        warnings: warnings.to_vec(),
    }
}

/// Summary of equally weighted draws.
pub fn unweighted_summary(values: &[f64], quantiles: &[f64]) -> WeightedSummary {
    let n = values.len() as f64;
    summarize(values, &vec![1.0 / n; values.len()], quantiles, n, &[])
}

/// Self-normalized estimate of `g` over the local results of each draw.
pub fn weighted_summary<G>(ensemble: &SimulationEnsemble, g: G, quantiles: &[f64]) -> WeightedSummary
where
    G: Fn(&[f64]) -> f64,
{
    let values: Vec<f64> = (0..ensemble.len()).map(|s| g(ensemble.local(s))).collect();
    summarize(&values, &ensemble.normalized_weights(), quantiles, ensemble.ess(), ensemble.warnings())
}

/// Summary of one party's national share.
pub fn national_summary(ensemble: &SimulationEnsemble, party: usize, quantiles: &[f64]) -> WeightedSummary {
    let values: Vec<f64> = ensemble.national().iter().map(|v| v[party]).collect();
    summarize(&values, &ensemble.normalized_weights(), quantiles, ensemble.ess(), ensemble.warnings())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartySeats {
    pub party: String,
    /// Probability of each seat count, indexed by seats.
    pub histogram: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub q05: f64,
    pub q95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeatDistribution {
    pub parties: Vec<PartySeats>,
    /// National seats per draw, canon order.
    pub draws: Vec<Vec<u32>>,
    pub warnings: Vec<String>,
}

/// Seats of every draw under D'Hondt with the given contingents, summarized
/// with the ensemble weights.
pub fn seat_distribution(ensemble: &SimulationEnsemble, contingents: &BTreeMap<u32, u32>, threshold: f64) -> Result<SeatDistribution> {
    let l = ensemble.canon.len();
    for p in ensemble.provinces() {
        if !contingents.contains_key(p) {
            return Err(Error::Lookup {
                kind: "contingent for province",
                id: p.to_string(),
            });
        }
    }
    let parties = ensemble.canon.labels().to_vec();
    let draws: Vec<Result<Vec<u32>>> = crate::par::map_indices(ensemble.len(), |s| {
        let local = ensemble.local(s);
        let provinces: Vec<ProvinceVotes> = ensemble
            .provinces()
            .iter()
            .enumerate()
            .map(|(i, &p)| ProvinceVotes {
                province: p,
                votes: local[i * l..(i + 1) * l].iter().map(|x| x * ensemble.electorate[i]).collect(),
                contingent: contingents[&p],
            })
            .collect();
        Ok(allocate_nation(&parties, &provinces, threshold)?.national)
    });
    let draws = draws.into_iter().collect::<Result<Vec<_>>>()?;
    let w = ensemble.normalized_weights();
    let out = (0..l)
        .map(|p| {
            let values: Vec<f64> = draws.iter().map(|d| d[p] as f64).collect();
            let max = draws.iter().map(|d| d[p]).max().unwrap_or(0) as usize;
            let mut histogram = vec![0.0; max + 1];
            for (d, wi) in draws.iter().zip(&w) {
                histogram[d[p] as usize] += wi;
            }
            PartySeats {
                party: parties[p].clone(),
                histogram,
                mean: values.iter().zip(&w).map(|(v, wi)| v * wi).sum(),
                median: weighted_quantile(&values, &w, 0.5),
                q05: weighted_quantile(&values, &w, 0.05),
                q95: weighted_quantile(&values, &w, 0.95),
            }
        })
        .collect();
    Ok(SeatDistribution {
        parties: out,
        draws,
        warnings: ensemble.warnings().to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PriorWeight {
    pub parties: Vec<String>,
    pub per_party: Vec<f64>,
    pub summary: f64,
    pub clipped: Vec<String>,
}

/// Weight of the prior in the synthesized beliefs, per non-pivot party:
/// the ratio of the moment-matched posterior variance to the prior variance
/// (the prior-to-posterior precision ratio of a Gaussian conjugate update),
/// clipped to `[0, 1]`. The summary is the mean over parties.
pub fn prior_weight_gaussian(prior: &[ShareVector], ensemble: &SimulationEnsemble, ess_floor: f64) -> Result<PriorWeight> {
    if prior.len() < 100 {
        return Err(Error::InvalidInput(format!("need at least 100 prior draws, got {}", prior.len())));
    }
    let ess = ensemble.ess();
    if ess < ess_floor {
        return Err(Error::InvalidInput(format!(
            "posterior ESS {ess:.1} is below {ess_floor}; the moment match is unreliable"
        )));
    }
    let canon = ensemble.canon();
    let r = canon.reduced_len();
    let w = ensemble.normalized_weights();
    let mut per_party = Vec::with_capacity(r);
    let mut clipped = Vec::new();
    for l in 0..r {
        let xs: Vec<f64> = prior.iter().map(|v| v[l]).collect();
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let prior_var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        if !(prior_var > 0.0) || xs.iter().all(|x| *x == xs[0]) {
            return Err(Error::UndefinedWeight {
                party: canon.labels()[l].clone(),
            });
        }
        let ys: Vec<f64> = ensemble.national().iter().map(|v| v[l]).collect();
        let pm: f64 = ys.iter().zip(&w).map(|(y, wi)| y * wi).sum();
        let post_var: f64 = ys.iter().zip(&w).map(|(y, wi)| wi * (y - pm).powi(2)).sum();
        let raw = post_var / prior_var;
        if !(0.0..=1.0).contains(&raw) {
            log::info!("prior weight for {} clipped from {raw:.3}", canon.labels()[l]);
            clipped.push(canon.labels()[l].clone());
        }
        per_party.push(raw.clamp(0.0, 1.0));
    }
    Ok(PriorWeight {
        parties: canon.labels()[..r].to_vec(),
        summary: per_party.iter().sum::<f64>() / r as f64,
        per_party,
        clipped,
    })
}
