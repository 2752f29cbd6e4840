//! National-level regression benchmarks (fundamentals, polls average and
//! both combined) and the comparison tables against the synthesis model.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{ols_fit_named, OlsFit};
use crate::polls::Poll;
use crate::simplex::PartyCanon;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Incumbent,
    Challenger,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Incumbent => "incumbent",
            Role::Challenger => "challenger",
        })
    }
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "incumbent" => Ok(Role::Incumbent),
            "challenger" => Ok(Role::Challenger),
            other => Err(Error::InvalidInput(format!("unknown role `{other}`"))),
        }
    }
}

/// One party's national outcome and covariates at one election. GDP growth
/// is the preceding year's growth in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NationalHistoryRow {
    pub election_date: String,
    pub party: String,
    pub role: Role,
    pub result: f64,
    pub lagged_result: f64,
    pub gdp_growth: f64,
    pub polls_average: f64,
    pub seats: u32,
    pub lagged_seats: u32,
}

impl NationalHistoryRow {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("result", self.result),
            ("lagged_result", self.lagged_result),
            ("polls_average", self.polls_average),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidInput(format!(
                    "{} {}: {name} {v} is not a share",
                    self.election_date, self.party
                )));
            }
        }
        if !self.gdp_growth.is_finite() {
            return Err(Error::InvalidInput("gdp_growth is not finite".into()));
        }
        if self.lagged_seats == 0 {
            return Err(Error::InvalidInput(format!(
                "{} {}: lagged_seats must be positive for the log-seat model",
                self.election_date, self.party
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchmarkModel {
    Fundamental,
    Polls,
    Hybrid,
}

impl BenchmarkModel {
    pub const ALL: [BenchmarkModel; 3] = [BenchmarkModel::Fundamental, BenchmarkModel::Polls, BenchmarkModel::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            BenchmarkModel::Fundamental => "fundamental",
            BenchmarkModel::Polls => "polls",
            BenchmarkModel::Hybrid => "hybrid",
        }
    }

    fn vote_columns(self) -> &'static [&'static str] {
        match self {
            BenchmarkModel::Fundamental => &["intercept", "lagged_votes", "gdp_growth"],
            BenchmarkModel::Polls => &["intercept", "polls_average"],
            BenchmarkModel::Hybrid => &["intercept", "lagged_votes", "gdp_growth", "polls_average"],
        }
    }

    fn seat_columns(self) -> &'static [&'static str] {
        match self {
            BenchmarkModel::Fundamental => &["intercept", "log_lagged_seats", "gdp_growth"],
            BenchmarkModel::Polls => &["intercept", "polls_average"],
            BenchmarkModel::Hybrid => &["intercept", "log_lagged_seats", "gdp_growth", "polls_average"],
        }
    }

    fn vote_row(self, r: &NationalHistoryRow) -> Vec<f64> {
        match self {
            BenchmarkModel::Fundamental => vec![1.0, r.lagged_result, r.gdp_growth],
            BenchmarkModel::Polls => vec![1.0, r.polls_average],
            BenchmarkModel::Hybrid => vec![1.0, r.lagged_result, r.gdp_growth, r.polls_average],
        }
    }

    fn seat_row(self, r: &NationalHistoryRow) -> Vec<f64> {
        let lag = (r.lagged_seats as f64).ln();
        match self {
            BenchmarkModel::Fundamental => vec![1.0, lag, r.gdp_growth],
            BenchmarkModel::Polls => vec![1.0, r.polls_average],
            BenchmarkModel::Hybrid => vec![1.0, lag, r.gdp_growth, r.polls_average],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coefficients {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl Coefficients {
    fn from_fit(names: &[&str], fit: &OlsFit) -> Self {
        Coefficients {
            names: names.iter().map(|s| s.to_string()).collect(),
            values: fit.coefficients.iter().copied().collect(),
        }
    }
}

/// Out-of-sample benchmark prediction for one party at one election.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkPrediction {
    pub model: BenchmarkModel,
    pub role: Role,
    pub election_date: String,
    pub party: String,
    pub training: Vec<String>,
    pub votes: f64,
    pub seats: f64,
    pub vote_coefficients: Coefficients,
    pub seat_coefficients: Coefficients,
}

/// Fits both regressions on earlier elections of the target's role and
/// predicts the target row.
pub fn benchmark_predict(model: BenchmarkModel, history: &[NationalHistoryRow], target: &NationalHistoryRow) -> Result<BenchmarkPrediction> {
    let mut train: Vec<&NationalHistoryRow> = history
        .iter()
        .filter(|r| r.role == target.role && r.election_date < target.election_date)
        .collect();
    // row order must not matter
    train.sort_by(|a, b| a.election_date.cmp(&b.election_date));
    if train.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "{} model for the {} at {} needs at least 3 earlier elections, got {}",
            model.name(),
            target.role,
            target.election_date,
            train.len()
        )));
    }
    for r in &train {
        r.validate()?;
    }
    let n = train.len();
    let vote_cols = model.vote_columns();
    let seat_cols = model.seat_columns();
    let x = DMatrix::from_fn(n, vote_cols.len(), |i, j| model.vote_row(train[i])[j]);
    let y = DVector::from_fn(n, |i, _| train[i].result);
    let names: Vec<String> = vote_cols.iter().map(|s| s.to_string()).collect();
    let vote_fit = ols_fit_named(&x, &y, &names)?;
    let xs = DMatrix::from_fn(n, seat_cols.len(), |i, j| model.seat_row(train[i])[j]);
    let ys = DVector::from_fn(n, |i, _| (train[i].seats as f64).ln());
    let names: Vec<String> = seat_cols.iter().map(|s| s.to_string()).collect();
    let seat_fit = ols_fit_named(&xs, &ys, &names)?;
    Ok(BenchmarkPrediction {
        model,
        role: target.role,
        election_date: target.election_date.clone(),
        party: target.party.clone(),
        training: train.iter().map(|r| r.election_date.clone()).collect(),
        votes: vote_fit.predict(&model.vote_row(target)),
        seats: seat_fit.predict(&model.seat_row(target)).exp(),
        vote_coefficients: Coefficients::from_fit(vote_cols, &vote_fit),
        seat_coefficients: Coefficients::from_fit(seat_cols, &seat_fit),
    })
}

/// Lagged result and GDP growth.
pub fn alt_fundamental(history: &[NationalHistoryRow], target: &NationalHistoryRow) -> Result<BenchmarkPrediction> {
    benchmark_predict(BenchmarkModel::Fundamental, history, target)
}

/// Polls average only.
pub fn alt_polls(history: &[NationalHistoryRow], target: &NationalHistoryRow) -> Result<BenchmarkPrediction> {
    benchmark_predict(BenchmarkModel::Polls, history, target)
}

/// Lagged result, GDP growth and polls average.
pub fn alt_hybrid(history: &[NationalHistoryRow], target: &NationalHistoryRow) -> Result<BenchmarkPrediction> {
    benchmark_predict(BenchmarkModel::Hybrid, history, target)
}

/// Mean share per canon party over the polls of one election published at
/// most `window_days` before it. Parties no poll reports are `None`.
pub fn polls_simple_average(polls: &[Poll], canon: &PartyCanon, window_days: u32) -> Result<Vec<Option<f64>>> {
    let inside: Vec<&Poll> = polls.iter().filter(|p| p.days_before <= window_days).collect();
    if inside.is_empty() {
        return Err(Error::InvalidInput(format!("no polls within {window_days} days")));
    }
    if let Some(p) = inside.iter().find(|p| p.election != inside[0].election) {
        return Err(Error::InvalidInput(format!(
            "polls of elections {} and {} cannot be averaged together",
            inside[0].election, p.election
        )));
    }
    Ok((0..canon.len())
        .map(|l| {
            let xs: Vec<f64> = inside.iter().filter_map(|p| p.shares.get(l).copied().flatten()).collect();
            (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub election_date: String,
    pub party: String,
    pub outcome: f64,
    pub alternative_estimate: f64,
    pub alternative_residual: f64,
    pub our_estimate: f64,
    pub our_residual: f64,
}

pub type Keyed = BTreeMap<(String, String), f64>;

/// Rows of `(election, party)` with residuals `outcome - estimate`.
pub fn comparison_table(ours: &Keyed, alternative: &Keyed, outcomes: &Keyed) -> Result<Vec<ComparisonRow>> {
    for (name, other) in [("our", ours), ("alternative", alternative)] {
        if other.keys().ne(outcomes.keys()) {
            let missing: Vec<String> = outcomes
                .keys()
                .filter(|k| !other.contains_key(*k))
                .chain(other.keys().filter(|k| !outcomes.contains_key(*k)))
                .map(|(e, p)| format!("{e}/{p}"))
                .collect();
            return Err(Error::Alignment(format!("{name} estimates do not match outcomes at {missing:?}")));
        }
    }
    Ok(outcomes
        .iter()
        .map(|(k, &outcome)| ComparisonRow {
            election_date: k.0.clone(),
            party: k.1.clone(),
            outcome,
            alternative_estimate: alternative[k],
            alternative_residual: outcome - alternative[k],
            our_estimate: ours[k],
            our_residual: outcome - ours[k],
        })
        .collect())
}
