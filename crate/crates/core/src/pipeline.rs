//! Stage orchestration: each stage reads its inputs and the artifacts of
//! earlier stages from the output directory and writes its own.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifacts::{read_draws, read_sidecar, sha256_file, write_draws, write_sidecar, DrawTable, Provenance};
use crate::benchmarks::{benchmark_predict, comparison_table, polls_simple_average, BenchmarkModel, ComparisonRow, Keyed, Role};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fundamental::{
    fit_fundamental, inflate_alpha, parameter_names, simulate_local_results, FitDiagnostics, FundamentalParams,
    FundamentalPosterior, StrataSet,
};
use crate::inference::SamplerConfig;
use crate::ingest::{
    allocate_results, build_strata, load_census, load_contingents, load_history, load_polls, load_results, load_survey,
    seats_by_canon, write_census, write_polls, write_survey, write_text, writer, Contingents, ElectionResults,
};
use crate::polls::{fit_polls, polls_parameter_names, within_window, Poll, PollsParams, PollsPosterior, PollsPrior, TrainingSummary};
use crate::simplex::{reduce, PartyCanon, ReducedVector, ShareVector};
use crate::synthesis::{
    importance_weights, national_summary, prior_weight_gaussian, seat_distribution, unweighted_summary, SimulationEnsemble,
    DEFAULT_QUANTILES,
};

pub const FUNDAMENTAL_DRAWS: &str = "fundamental_draws.csv";
pub const POLLS_DRAWS: &str = "polls_draws.csv";
pub const ENSEMBLE: &str = "ensemble.csv";
pub const WEIGHTS: &str = "weights.csv";
pub const NATIONAL_SUMMARY: &str = "national_summary.csv";
pub const PRIOR_WEIGHT: &str = "prior_weight.csv";
pub const SEAT_DRAWS: &str = "seat_draws.csv";
pub const SEAT_SUMMARY: &str = "seat_summary.csv";
pub const SEAT_HISTOGRAM: &str = "seat_histogram.csv";
pub const SEAT_HISTOGRAM_SVG: &str = "seat_histogram.svg";
pub const OFFICIAL_SEATS: &str = "official_seats.csv";
pub const OFFICIAL_SEATS_BY_LIST: &str = "official_seats_by_list.csv";
pub const BENCHMARK: &str = "benchmark.csv";
pub const BENCHMARK_COEFFICIENTS: &str = "benchmark_coefficients.csv";
pub const POLLS_AVERAGE: &str = "polls_average.csv";
pub const NATIONAL_VOTES: &str = "national_votes.csv";
pub const TABLES: [&str; 4] = [
    "table2_fundamental_votes.csv",
    "table3_polls_votes.csv",
    "table4_hybrid_votes.csv",
    "table5_hybrid_seats.csv",
];
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    FitFundamental,
    FitPolls,
    Synthesize,
    /// Seats of the synthesized ensemble, or with `official` only those of
    /// the target election's published results.
    Allocate { official: bool },
    Benchmark,
    Report,
    /// Writes synthetic survey, census and polls files to the configured
    /// input paths.
    Synth,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::FitFundamental => "fit-fundamental",
            Stage::FitPolls => "fit-polls",
            Stage::Synthesize => "synthesize",
            Stage::Allocate { .. } => "allocate",
            Stage::Benchmark => "benchmark",
            Stage::Report => "report",
            Stage::Synth => "synth",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fit-fundamental" => Stage::FitFundamental,
            "fit-polls" => Stage::FitPolls,
            "synthesize" => Stage::Synthesize,
            "allocate" => Stage::Allocate { official: false },
            "allocate-official" => Stage::Allocate { official: true },
            "benchmark" => Stage::Benchmark,
            "report" => Stage::Report,
            "synth" => Stage::Synth,
            other => return Err(Error::InvalidInput(format!("unknown command `{other}`"))),
        })
    }
}

/// Files written by a stage and any warnings it raised.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageOutput {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

/// Runs one stage. Artifacts are written before a diagnostic failure is
/// reported, so `force` only decides whether the failure is an error.
pub fn run_stage(config: &RunConfig, stage: Stage) -> Result<StageOutput> {
    if stage != Stage::Synth {
        config.validate()?;
    }
    let out = config.out();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    log::info!("running {} into {}", stage.name(), out.display());
    let result = match stage {
        Stage::FitFundamental => fit_fundamental_stage(config),
        Stage::FitPolls => fit_polls_stage(config),
        Stage::Synthesize => synthesize_stage(config),
        Stage::Allocate { official: true } => allocate_official_stage(config),
        Stage::Allocate { official: false } => allocate_stage(config),
        Stage::Benchmark => benchmark_stage(config),
        Stage::Report => report_stage(config),
        Stage::Synth => synth_stage(config),
    }?;
    for w in &result.warnings {
        log::warn!("{w}");
    }
    Ok(result)
}

fn diagnostic_gate(config: &RunConfig, out: StageOutput, failures: Vec<String>) -> Result<StageOutput> {
    if failures.is_empty() || config.force {
        if !failures.is_empty() {
            log::warn!("continuing despite: {}", failures.join("; "));
        }
        Ok(out)
    } else {
        for f in &out.files {
            log::info!("wrote {}", f.display());
        }
        Err(Error::Diagnostic(failures.join("; ")))
    }
}

fn path_in(config: &RunConfig, name: &str) -> PathBuf {
    config.out().join(name)
}

fn load_strata(config: &RunConfig, canon: &PartyCanon) -> Result<StrataSet> {
    let (survey, _) = load_survey(&config.resolve(&config.data.survey), canon, &config.aliases, &config.factors)?;
    let (census, _) = load_census(&config.resolve(&config.data.census), &config.factors)?;
    build_strata(canon, &config.factors, &survey, &census)
}

fn load_all_polls(config: &RunConfig, canon: &PartyCanon) -> Result<Vec<Poll>> {
    Ok(load_polls(&config.resolve(&config.data.polls), canon, &config.aliases)?.0)
}

fn load_results_file(config: &RunConfig) -> Result<ElectionResults> {
    Ok(load_results(&config.resolve(&config.data.results))?.0)
}

fn load_contingents_file(config: &RunConfig) -> Result<Contingents> {
    Ok(load_contingents(&config.resolve(&config.data.contingents))?.0)
}

#[derive(Serialize, Deserialize)]
struct FitDetails {
    sampler: SamplerConfig,
    diagnostics: FitDiagnostics,
    #[serde(default)]
    training: Option<TrainingSummary>,
    #[serde(default)]
    prior: Option<PollsPrior>,
}

fn fit_fundamental_stage(config: &RunConfig) -> Result<StageOutput> {
    let canon = config.canon()?;
    let set = load_strata(config, &canon)?;
    let sampler = config.fundamental_config();
    let post = fit_fundamental(&set, &sampler)?;
    let table = DrawTable {
        names: parameter_names(&set.layout, &canon),
        chain: post.chain.clone(),
        values: post.draws.iter().map(FundamentalParams::to_natural).collect(),
    };
    let path = path_in(config, FUNDAMENTAL_DRAWS);
    write_draws(&path, &table)?;
    let prov = Provenance::new("fit-fundamental", sampler.seed, config)?
        .with_input(&config.resolve(&config.data.survey))?
        .with_input(&config.resolve(&config.data.census))?
        .with_details(&FitDetails {
            sampler,
            diagnostics: post.diagnostics.clone(),
            training: None,
            prior: None,
        })?;
    write_sidecar(&path, &prov)?;
    let out = StageOutput {
        files: vec![path],
        warnings: post.diagnostics.warnings.clone(),
    };
    let failures = convergence_failures("fundamental", &post.diagnostics);
    diagnostic_gate(config, out, failures)
}

fn convergence_failures(model: &str, d: &FitDiagnostics) -> Vec<String> {
    if d.converged {
        Vec::new()
    } else {
        vec![format!(
            "{model} fit did not converge (max R-hat {:.3}, divergence rate {:.3})",
            d.max_rhat, d.divergence_rate
        )]
    }
}

/// Reduced national results of every election before the target.
fn training_results(config: &RunConfig, canon: &PartyCanon, results: &ElectionResults) -> Result<BTreeMap<String, ReducedVector>> {
    results
        .elections()
        .into_iter()
        .filter(|e| *e < config.target_election)
        .map(|e| {
            let v = results.national_shares(&e, canon, &config.aliases)?;
            Ok((e, reduce(&v, canon)?))
        })
        .collect()
}

fn fit_polls_stage(config: &RunConfig) -> Result<StageOutput> {
    let canon = config.canon()?;
    let results = load_results_file(config)?;
    let known = training_results(config, &canon, &results)?;
    let polls: Vec<Poll> = load_all_polls(config, &canon)?
        .into_iter()
        .filter(|p| known.contains_key(&p.election))
        .collect();
    let sampler = config.polls_config();
    let post = fit_polls(&canon, &polls, &known, config.window_days, &sampler, config.polls_prior.clone())?;
    let t = &post.training;
    let table = DrawTable {
        names: polls_parameter_names(&t.pollsters, &t.elections, &canon),
        chain: post.chain.clone(),
        values: post.draws.iter().map(PollsParams::to_flat).collect(),
    };
    let path = path_in(config, POLLS_DRAWS);
    write_draws(&path, &table)?;
    let prov = Provenance::new("fit-polls", sampler.seed, config)?
        .with_input(&config.resolve(&config.data.polls))?
        .with_input(&config.resolve(&config.data.results))?
        .with_details(&FitDetails {
            sampler,
            diagnostics: post.diagnostics.clone(),
            training: Some(post.training.clone()),
            prior: Some(post.prior.clone()),
        })?;
    write_sidecar(&path, &prov)?;
    let out = StageOutput {
        files: vec![path],
        warnings: post.diagnostics.warnings.clone(),
    };
    let failures = convergence_failures("polls", &post.diagnostics);
    diagnostic_gate(config, out, failures)
}

fn fit_details(path: &Path) -> Result<FitDetails> {
    let prov = read_sidecar(path)?;
    serde_json::from_value(prov.details).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: format!("sidecar details: {e}"),
    })
}

/// Reloads the fundamental posterior written by `fit-fundamental`.
pub fn read_fundamental_posterior(config: &RunConfig, set: &StrataSet) -> Result<FundamentalPosterior> {
    let path = path_in(config, FUNDAMENTAL_DRAWS);
    let table = read_draws(&path)?;
    let details = fit_details(&path)?;
    if table.names != parameter_names(&set.layout, &set.canon) {
        return Err(Error::Alignment(format!(
            "{} does not match the strata layout of the current inputs",
            path.display()
        )));
    }
    let l = set.canon.len();
    Ok(FundamentalPosterior {
        canon: set.canon.clone(),
        layout: set.layout.clone(),
        draws: table.values.iter().map(|x| FundamentalParams::from_natural(&set.layout, l, x)).collect(),
        chain: table.chain,
        config: details.sampler,
        diagnostics: details.diagnostics,
        inflation: 1.0,
    })
}

/// Reloads the polls posterior written by `fit-polls`.
pub fn read_polls_posterior(config: &RunConfig, canon: &PartyCanon) -> Result<PollsPosterior> {
    let path = path_in(config, POLLS_DRAWS);
    let table = read_draws(&path)?;
    let details = fit_details(&path)?;
    let bad = |m: &str| Error::Parse {
        path: path.clone(),
        message: m.to_string(),
    };
    let training = details.training.ok_or_else(|| bad("sidecar lacks the training summary"))?;
    if table.names != polls_parameter_names(&training.pollsters, &training.elections, canon) {
        return Err(Error::Alignment(format!("{} does not match the party canon", path.display())));
    }
    let draws = table
        .values
        .iter()
        .map(|x| PollsParams::from_flat(&training.pollsters, &training.elections, canon.reduced_len(), x))
        .collect::<Result<_>>()?;
    Ok(PollsPosterior {
        canon: canon.clone(),
        draws,
        chain: table.chain,
        training,
        config: details.sampler,
        prior: details.prior.unwrap_or_default(),
        diagnostics: details.diagnostics,
    })
}

/// Polls of the target election inside the window.
fn target_polls(config: &RunConfig, canon: &PartyCanon) -> Result<Vec<Poll>> {
    let polls: Vec<Poll> = load_all_polls(config, canon)?
        .into_iter()
        .filter(|p| p.election == config.target_election)
        .collect();
    let inside = within_window(&polls, config.window_days);
    if inside.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no polls for {} within {} days",
            config.target_election, config.window_days
        )));
    }
    Ok(inside)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub party: String,
    pub mean: f64,
    pub mc_se: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
    pub ess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WeightRow {
    simulation: usize,
    log_weight: f64,
    weight: f64,
}

#[derive(Serialize, Deserialize)]
struct EnsembleDetails {
    provinces: Vec<u32>,
    electorate: Vec<f64>,
    inflation: f64,
    ess: f64,
    likelihood_draws: usize,
    target_polls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorWeightRow {
    pub party: String,
    pub prior_weight: f64,
    pub clipped: bool,
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize().map(|x| x.map_err(|e| Error::csv(path, e))).collect()
}

fn summary_rows(model: &str, canon: &PartyCanon, values: &[ShareVector], weights: Option<&SimulationEnsemble>) -> Vec<SummaryRow> {
    (0..canon.len())
        .map(|l| {
            let s = match weights {
                Some(e) => national_summary(e, l, &DEFAULT_QUANTILES),
                None => unweighted_summary(&values.iter().map(|v| v[l]).collect::<Vec<_>>(), &DEFAULT_QUANTILES),
            };
            SummaryRow {
                model: model.to_string(),
                party: canon.labels()[l].clone(),
                mean: s.mean,
                mc_se: s.mc_se,
                q05: s.quantiles[0].1,
                q50: s.quantiles[1].1,
                q95: s.quantiles[2].1,
                ess: s.ess,
            }
        })
        .collect()
}

fn write_ensemble(path: &Path, e: &SimulationEnsemble) -> Result<()> {
    let mut w = writer(path)?;
    let l = e.canon().len();
    let mut header = vec!["simulation".to_string(), "province".to_string()];
    header.extend(e.canon().labels().iter().cloned());
    w.write_record(&header).map_err(|err| Error::csv(path, err))?;
    for s in 0..e.len() {
        let local = e.local(s);
        for (i, p) in e.provinces().iter().enumerate() {
            let mut row = vec![s.to_string(), p.to_string()];
            row.extend(local[i * l..(i + 1) * l].iter().map(|x| x.to_string()));
            w.write_record(&row).map_err(|err| Error::csv(path, err))?;
        }
    }
    w.flush().map_err(|err| Error::io(path, err))
}

/// Reloads the weighted ensemble written by `synthesize`.
pub fn read_ensemble(config: &RunConfig, canon: &PartyCanon) -> Result<SimulationEnsemble> {
    let path = path_in(config, ENSEMBLE);
    if !path.is_file() {
        return Err(Error::MissingArtifact(path));
    }
    let details: EnsembleDetails = serde_json::from_value(read_sidecar(&path)?.details).map_err(|e| Error::Parse {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let mut r = csv::Reader::from_path(&path).map_err(|e| Error::csv(&path, e))?;
    let mut local = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(&path, e))?;
        for x in rec.iter().skip(2) {
            local.push(x.parse::<f64>().map_err(|_| Error::Parse {
                path: path.clone(),
                message: format!("bad share `{x}`"),
            })?);
        }
    }
    let mut e = SimulationEnsemble::new(canon.clone(), details.provinces, details.electorate, local)?;
    let weights: Vec<WeightRow> = read_rows(&path_in(config, WEIGHTS))?;
    if weights.len() != e.len() {
        return Err(Error::Alignment(format!("{} weights for {} simulations", weights.len(), e.len())));
    }
    e.set_log_weights(weights.into_iter().map(|w| w.log_weight).collect(), config.ess_floor)?;
    Ok(e)
}

fn synthesize_stage(config: &RunConfig) -> Result<StageOutput> {
    let canon = config.canon()?;
    let set = load_strata(config, &canon)?;
    let fundamental = read_fundamental_posterior(config, &set)?;
    let polls_post = read_polls_posterior(config, &canon)?;
    let new_polls = target_polls(config, &canon)?;
    let mut failures = Vec::new();
    let converged = fundamental.diagnostics.converged;
    if !converged {
        failures.push("the fundamental posterior is flagged non-converged".to_string());
    }
    let inflated = inflate_alpha(&fundamental, config.inflation)?;
    let mut ensemble = simulate_local_results(&inflated, &set, config.simulations, config.simulation_seed(), true)?;
    let prior_draws: Vec<ShareVector> = ensemble.national().to_vec();
    let fundamental_rows = summary_rows("fundamental", &canon, &prior_draws, None);

    let lik = crate::polls::PollsLikelihood::new(&new_polls, &polls_post, config.likelihood_draws)?;
    let ess = importance_weights(&mut ensemble, |v| lik.log_density_at(v), config.ess_floor)?;
    if ess < config.ess_floor {
        failures.push(format!("importance ESS {ess:.1} is below the floor {}", config.ess_floor));
    }
    let (predictive, rejected) = lik.predictive_flat_prior(config.simulations, config.predictive_seed())?;
    let mut warnings: Vec<String> = ensemble.warnings().to_vec();
    if rejected > 0 {
        warnings.push(format!("{rejected} polls-only predictive draws fell outside the simplex"));
    }
    let mut rows = fundamental_rows;
    rows.extend(summary_rows("polls", &canon, &predictive, None));
    rows.extend(summary_rows("hybrid", &canon, &[], Some(&ensemble)));

    let out = config.out();
    let mut files = Vec::new();
    let ens_path = out.join(ENSEMBLE);
    write_ensemble(&ens_path, &ensemble)?;
    let prov = Provenance::new("synthesize", config.seed, config)?
        .with_input(&path_in(config, FUNDAMENTAL_DRAWS))?
        .with_input(&path_in(config, POLLS_DRAWS))?
        .with_input(&config.resolve(&config.data.polls))?
        .with_details(&EnsembleDetails {
            provinces: ensemble.provinces().to_vec(),
            electorate: ensemble.electorate().to_vec(),
            inflation: config.inflation,
            ess,
            likelihood_draws: lik.draws(),
            target_polls: new_polls.len(),
        })?;
    write_sidecar(&ens_path, &prov)?;
    files.push(ens_path);

    let lw = ensemble.log_weights().expect("weights were just set");
    let w = ensemble.normalized_weights();
    let weight_rows: Vec<WeightRow> = lw
        .iter()
        .zip(&w)
        .enumerate()
        .map(|(s, (l, w))| WeightRow {
            simulation: s,
            log_weight: *l,
            weight: *w,
        })
        .collect();
    files.push(out.join(WEIGHTS));
    write_rows(&out.join(WEIGHTS), &weight_rows)?;
    files.push(out.join(NATIONAL_SUMMARY));
    write_rows(&out.join(NATIONAL_SUMMARY), &rows)?;

    match prior_weight_gaussian(&prior_draws, &ensemble, config.ess_floor) {
        Ok(pw) => {
            let mut pw_rows: Vec<PriorWeightRow> = pw
                .parties
                .iter()
                .zip(&pw.per_party)
                .map(|(p, v)| PriorWeightRow {
                    party: p.clone(),
                    prior_weight: *v,
                    clipped: pw.clipped.contains(p),
                })
                .collect();
            pw_rows.push(PriorWeightRow {
                party: "summary".into(),
                prior_weight: pw.summary,
                clipped: false,
            });
            files.push(out.join(PRIOR_WEIGHT));
            write_rows(&out.join(PRIOR_WEIGHT), &pw_rows)?;
        }
        Err(e) => warnings.push(format!("prior weight not computed: {e}")),
    }
    diagnostic_gate(config, StageOutput { files, warnings }, failures)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeatSummaryRow {
    pub party: String,
    pub mean: f64,
    pub median: f64,
    pub q05: f64,
    pub q95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub party: String,
    pub seats: u32,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfficialSeatsRow {
    pub party: String,
    pub seats: u32,
}

fn target_contingents(config: &RunConfig) -> Result<BTreeMap<u32, u32>> {
    load_contingents_file(config)?
        .remove(&config.target_election)
        .ok_or_else(|| Error::Lookup {
            kind: "contingents for election",
            id: config.target_election.clone(),
        })
}

fn allocate_stage(config: &RunConfig) -> Result<StageOutput> {
    let canon = config.canon()?;
    let ensemble = read_ensemble(config, &canon)?;
    let contingents = target_contingents(config)?;
    let dist = seat_distribution(&ensemble, &contingents, config.threshold)?;
    let out = config.out();
    let w = ensemble.normalized_weights();
    let seat_path = out.join(SEAT_DRAWS);
    {
        let mut wr = writer(&seat_path)?;
        let mut header = vec!["simulation".to_string(), "weight".to_string()];
        header.extend(canon.labels().iter().cloned());
        wr.write_record(&header).map_err(|e| Error::csv(&seat_path, e))?;
        for (s, (d, wi)) in dist.draws.iter().zip(&w).enumerate() {
            let mut row = vec![s.to_string(), wi.to_string()];
            row.extend(d.iter().map(|x| x.to_string()));
            wr.write_record(&row).map_err(|e| Error::csv(&seat_path, e))?;
        }
        wr.flush().map_err(|e| Error::io(&seat_path, e))?;
    }
    let summary: Vec<SeatSummaryRow> = dist
        .parties
        .iter()
        .map(|p| SeatSummaryRow {
            party: p.party.clone(),
            mean: p.mean,
            median: p.median,
            q05: p.q05,
            q95: p.q95,
        })
        .collect();
    let hist: Vec<HistogramRow> = dist
        .parties
        .iter()
        .flat_map(|p| {
            p.histogram.iter().enumerate().map(|(s, pr)| HistogramRow {
                party: p.party.clone(),
                seats: s as u32,
                probability: *pr,
            })
        })
        .collect();
    write_rows(&out.join(SEAT_SUMMARY), &summary)?;
    write_rows(&out.join(SEAT_HISTOGRAM), &hist)?;
    Ok(StageOutput {
        files: vec![seat_path, out.join(SEAT_SUMMARY), out.join(SEAT_HISTOGRAM)],
        warnings: dist.warnings,
    })
}

fn allocate_official_stage(config: &RunConfig) -> Result<StageOutput> {
    let canon = config.canon()?;
    let results = load_results_file(config)?;
    let contingents = load_contingents_file(config)?;
    let alloc = allocate_results(&results, &contingents, &config.target_election, config.threshold)?;
    let by_list: Vec<OfficialSeatsRow> = alloc
        .parties
        .iter()
        .zip(&alloc.national)
        .map(|(p, s)| OfficialSeatsRow {
            party: p.clone(),
            seats: *s,
        })
        .collect();
    let canon_seats = seats_by_canon(&alloc, &canon, &config.aliases)?;
    let rows: Vec<OfficialSeatsRow> = canon
        .labels()
        .iter()
        .zip(&canon_seats)
        .map(|(p, s)| OfficialSeatsRow {
            party: p.clone(),
            seats: *s,
        })
        .collect();
    let out = config.out();
    write_rows(&out.join(OFFICIAL_SEATS), &rows)?;
    write_rows(&out.join(OFFICIAL_SEATS_BY_LIST), &by_list)?;
    Ok(StageOutput {
        files: vec![out.join(OFFICIAL_SEATS), out.join(OFFICIAL_SEATS_BY_LIST)],
        warnings: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub model: BenchmarkModel,
    pub role: Role,
    pub election_date: String,
    pub party: String,
    pub training: String,
    pub votes: f64,
    pub seats: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub model: BenchmarkModel,
    pub role: Role,
    pub election_date: String,
    pub response: String,
    pub term: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AverageRow {
    party: String,
    average: Option<f64>,
}

fn benchmark_stage(config: &RunConfig) -> Result<StageOutput> {
    let (history, _) = load_history(&config.resolve(&config.data.history))?;
    let targets: Vec<_> = history.iter().filter(|r| r.election_date >= config.target_election).collect();
    if targets.is_empty() {
        return Err(Error::InvalidInput(format!(
            "history has no rows on or after {}",
            config.target_election
        )));
    }
    let mut rows = Vec::new();
    let mut coefs = Vec::new();
    for model in BenchmarkModel::ALL {
        for t in &targets {
            let p = benchmark_predict(model, &history, t)?;
            for (response, c) in [("votes", &p.vote_coefficients), ("log_seats", &p.seat_coefficients)] {
                for (term, value) in c.names.iter().zip(&c.values) {
                    coefs.push(CoefficientRow {
                        model,
                        role: p.role,
                        election_date: p.election_date.clone(),
                        response: response.into(),
                        term: term.clone(),
                        value: *value,
                    });
                }
            }
            rows.push(BenchmarkRow {
                model,
                role: p.role,
                election_date: p.election_date,
                party: p.party,
                training: p.training.join(" "),
                votes: p.votes,
                seats: p.seats,
            });
        }
    }
    let out = config.out();
    write_rows(&out.join(BENCHMARK), &rows)?;
    write_rows(&out.join(BENCHMARK_COEFFICIENTS), &coefs)?;
    let mut files = vec![out.join(BENCHMARK), out.join(BENCHMARK_COEFFICIENTS)];
    let mut warnings = Vec::new();
    let canon = config.canon()?;
    let polls: Vec<Poll> = load_all_polls(config, &canon)?
        .into_iter()
        .filter(|p| p.election == config.target_election)
        .collect();
    match polls_simple_average(&polls, &canon, config.window_days) {
        Ok(avg) => {
            let rows: Vec<AverageRow> = canon
                .labels()
                .iter()
                .zip(avg)
                .map(|(p, a)| AverageRow {
                    party: p.clone(),
                    average: a,
                })
                .collect();
            write_rows(&out.join(POLLS_AVERAGE), &rows)?;
            files.push(out.join(POLLS_AVERAGE));
        }
        Err(e) => warnings.push(format!("polls average not computed: {e}")),
    }
    Ok(StageOutput { files, warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteBinRow {
    pub party: String,
    pub bin_low: f64,
    pub bin_high: f64,
    pub fundamental: f64,
    pub hybrid: f64,
}

/// Width of the national vote share bins in the report.
pub const VOTE_BIN: f64 = 0.005;

fn vote_bins(ensemble: &SimulationEnsemble) -> Vec<VoteBinRow> {
    let canon = ensemble.canon();
    let w = ensemble.normalized_weights();
    let n = ensemble.len() as f64;
    let mut rows = Vec::new();
    for l in 0..canon.len() {
        let xs: Vec<f64> = ensemble.national().iter().map(|v| v[l]).collect();
        let lo = (xs.iter().cloned().fold(f64::INFINITY, f64::min) / VOTE_BIN).floor() as i64;
        let hi = (xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / VOTE_BIN).floor() as i64;
        let mut fund = vec![0.0; (hi - lo + 1) as usize];
        let mut hyb = fund.clone();
        for (x, wi) in xs.iter().zip(&w) {
            let b = ((x / VOTE_BIN).floor() as i64 - lo) as usize;
            fund[b] += 1.0 / n;
            hyb[b] += wi;
        }
        for (i, (f, h)) in fund.into_iter().zip(hyb).enumerate() {
            let b = lo + i as i64;
            rows.push(VoteBinRow {
                party: canon.labels()[l].clone(),
                bin_low: b as f64 * VOTE_BIN,
                bin_high: (b + 1) as f64 * VOTE_BIN,
                fundamental: f,
                hybrid: h,
            });
        }
    }
    rows
}

/// Small-multiple bar charts of the seat probabilities.
pub fn seat_histogram_svg(rows: &[HistogramRow], parties: &[String]) -> String {
    let (pw, ph, pad) = (360.0, 140.0, 30.0);
    let height = parties.len() as f64 * (ph + pad) + pad;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="11">"#,
        pw + 2.0 * pad
    );
    for (i, party) in parties.iter().enumerate() {
        let top = pad + i as f64 * (ph + pad);
        let bars: Vec<&HistogramRow> = rows.iter().filter(|r| &r.party == party && r.probability > 0.0).collect();
        let _ = writeln!(s, r#"<text x="{pad}" y="{}">{party}</text>"#, top - 6.0);
        let _ = writeln!(
            s,
            r#"<line x1="{pad}" y1="{y}" x2="{}" y2="{y}" stroke="black"/>"#,
            pad + pw,
            y = top + ph
        );
        if bars.is_empty() {
            continue;
        }
        let lo = bars.iter().map(|r| r.seats).min().unwrap();
        let hi = bars.iter().map(|r| r.seats).max().unwrap();
        let pmax = bars.iter().map(|r| r.probability).fold(0.0, f64::max);
        let bw = pw / (hi - lo + 1) as f64;
        for r in &bars {
            let h = r.probability / pmax * (ph - 10.0);
            let x = pad + (r.seats - lo) as f64 * bw;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="steelblue"><title>{} seats: {:.4}</title></rect>"#,
                top + ph - h,
                (bw - 1.0).max(0.5),
                r.seats,
                r.probability
            );
        }
        let _ = writeln!(s, r#"<text x="{pad}" y="{}">{lo}</text>"#, top + ph + 12.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{hi}</text>"#, pad + pw, top + ph + 12.0);
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Serialize)]
struct Manifest {
    target_election: String,
    seed: u64,
    files: BTreeMap<String, String>,
    prior_weight_definition: &'static str,
}

fn report_stage(config: &RunConfig) -> Result<StageOutput> {
    let canon = config.canon()?;
    let out = config.out();
    let summary: Vec<SummaryRow> = read_rows(&out.join(NATIONAL_SUMMARY))?;
    let seats: Vec<SeatSummaryRow> = read_rows(&out.join(SEAT_SUMMARY))?;
    let hist: Vec<HistogramRow> = read_rows(&out.join(SEAT_HISTOGRAM))?;
    let bench: Vec<BenchmarkRow> = read_rows(&out.join(BENCHMARK))?;
    let ensemble = read_ensemble(config, &canon)?;
    let (history, _) = load_history(&config.resolve(&config.data.history))?;
    let mut warnings = Vec::new();
    let mut files = Vec::new();

    let targets: Vec<_> = history.iter().filter(|r| r.election_date == config.target_election).collect();
    if targets.is_empty() {
        warnings.push(format!("no outcomes for {} in the history table; comparison tables skipped", config.target_election));
    }
    let canon_label = |party: &str| -> Result<String> {
        config
            .aliases
            .resolve_strict(&canon, party)
            .map(|i| canon.labels()[i].clone())
            .ok_or_else(|| Error::Lookup {
                kind: "party",
                id: party.to_string(),
            })
    };
    let ours_votes = |model: &str| -> Result<Keyed> {
        targets
            .iter()
            .map(|r| {
                let label = canon_label(&r.party)?;
                let row = summary.iter().find(|s| s.model == model && s.party == label).ok_or_else(|| Error::Lookup {
                    kind: "summary row",
                    id: format!("{model}/{label}"),
                })?;
                Ok(((r.election_date.clone(), r.party.clone()), row.mean))
            })
            .collect()
    };
    let ours_seats: Keyed = targets
        .iter()
        .map(|r| {
            let label = canon_label(&r.party)?;
            let row = seats.iter().find(|s| s.party == label).ok_or_else(|| Error::Lookup {
                kind: "seat summary row",
                id: label.clone(),
            })?;
            Ok(((r.election_date.clone(), r.party.clone()), row.mean))
        })
        .collect::<Result<_>>()?;
    let alternative = |model: BenchmarkModel, seats: bool| -> Result<Keyed> {
        targets
            .iter()
            .map(|r| {
                let b = bench
                    .iter()
                    .find(|b| b.model == model && b.election_date == r.election_date && b.party == r.party)
                    .ok_or_else(|| Error::Lookup {
                        kind: "benchmark row",
                        id: format!("{}/{}/{}", model.name(), r.election_date, r.party),
                    })?;
                Ok(((r.election_date.clone(), r.party.clone()), if seats { b.seats } else { b.votes }))
            })
            .collect()
    };
    let vote_outcome: Keyed = targets.iter().map(|r| ((r.election_date.clone(), r.party.clone()), r.result)).collect();
    let seat_outcome: Keyed = targets
        .iter()
        .map(|r| ((r.election_date.clone(), r.party.clone()), r.seats as f64))
        .collect();
    if !targets.is_empty() {
        let tables: [(Keyed, Keyed, &Keyed); 4] = [
            (ours_votes("fundamental")?, alternative(BenchmarkModel::Fundamental, false)?, &vote_outcome),
            (ours_votes("polls")?, alternative(BenchmarkModel::Polls, false)?, &vote_outcome),
            (ours_votes("hybrid")?, alternative(BenchmarkModel::Hybrid, false)?, &vote_outcome),
            (ours_seats, alternative(BenchmarkModel::Hybrid, true)?, &seat_outcome),
        ];
        for (name, (ours, alt, outcome)) in TABLES.iter().zip(tables.iter()) {
            let rows: Vec<ComparisonRow> = comparison_table(ours, alt, outcome)?;
            write_rows(&out.join(name), &rows)?;
            files.push(out.join(name));
        }
    }
    write_rows(&out.join(NATIONAL_VOTES), &vote_bins(&ensemble))?;
    files.push(out.join(NATIONAL_VOTES));
    write_text(&out.join(SEAT_HISTOGRAM_SVG), &seat_histogram_svg(&hist, canon.labels()))?;
    files.push(out.join(SEAT_HISTOGRAM_SVG));
    if !out.join(PRIOR_WEIGHT).is_file() {
        warnings.push("prior weight diagnostic missing from synthesize".into());
    }

    let mut listed: BTreeMap<String, String> = BTreeMap::new();
    let mut names: Vec<&str> = vec![
        FUNDAMENTAL_DRAWS,
        POLLS_DRAWS,
        ENSEMBLE,
        WEIGHTS,
        NATIONAL_SUMMARY,
        PRIOR_WEIGHT,
        SEAT_DRAWS,
        SEAT_SUMMARY,
        SEAT_HISTOGRAM,
        BENCHMARK,
        BENCHMARK_COEFFICIENTS,
        POLLS_AVERAGE,
        NATIONAL_VOTES,
        SEAT_HISTOGRAM_SVG,
        OFFICIAL_SEATS,
        OFFICIAL_SEATS_BY_LIST,
    ];
    names.extend(TABLES);
    for n in names {
        let p = out.join(n);
        if p.is_file() {
            listed.insert(n.to_string(), sha256_file(&p)?);
        }
    }
    let manifest = Manifest {
        target_election: config.target_election.clone(),
        seed: config.seed,
        files: listed,
        prior_weight_definition: "posterior variance over prior variance of each national share, clipped to [0, 1]",
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::InvalidInput(e.to_string()))?;
    write_text(&out.join(MANIFEST), &(text + "\n"))?;
    files.push(out.join(MANIFEST));
    Ok(StageOutput { files, warnings })
}

/// Pollsters of the synthetic archive.
pub const SYNTH_POLLSTERS: [&str; 10] = [
    "CIS",
    "Metroscopia",
    "GAD3",
    "Sigma Dos",
    "NC Report",
    "DYM",
    "Invymark",
    "Celeste-Tel",
    "TNS Demoscopia",
    "Encuestamos",
];

/// Respondents of the synthetic survey.
pub const SYNTH_RESPONDENTS: usize = 17452;
pub const SYNTH_TRAINING_POLLS: usize = 157;
pub const SYNTH_TARGET_POLLS: usize = 51;

fn synth_stage(config: &RunConfig) -> Result<StageOutput> {
    use crate::synth::*;
    use rand::Rng;

    let canon = config.canon()?;
    let results = load_results_file(config)?;
    let contingents = load_contingents_file(config)?;
    let target = &config.target_election;
    let seats = contingents.get(target).ok_or_else(|| Error::Lookup {
        kind: "contingents for election",
        id: target.clone(),
    })?;
    let shares = results.province_shares(target, &canon, &config.aliases)?;
    let (_, votes) = results.province_votes(target);
    let electorate: BTreeMap<u32, f64> = votes.iter().map(|(p, v)| (*p, v.iter().sum())).collect();
    let provinces: Vec<u32> = seats.keys().copied().collect();
    if let Some(p) = provinces.iter().find(|p| !shares.contains_key(p)) {
        return Err(Error::MissingCensus { province: *p });
    }
    let layout = crate::fundamental::FactorLayout::new(provinces, config.factors.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(4));

    let truth = calibrated_params(&layout, &canon, &shares, &mut rng)?;
    let counts = synthetic_census(&layout, &electorate, &mut rng)?;
    let respondents = synthetic_survey(&truth, &layout, &counts, SYNTH_RESPONDENTS, 0.12, &mut rng)?;

    let mut known = training_results(config, &canon, &results)?;
    known.insert(target.clone(), reduce(&results.national_shares(target, &canon, &config.aliases)?, &canon)?);
    let elections: Vec<String> = known.keys().cloned().collect();
    let pollsters: Vec<String> = SYNTH_POLLSTERS.iter().map(|s| s.to_string()).collect();
    let r = canon.reduced_len();
    let poll_truth = polls_truth(&pollsters, &elections, r, PollErrorScales::default(), &mut rng)?;
    let training: Vec<&String> = elections.iter().filter(|e| *e != target).collect();
    let mut plan = Vec::new();
    let mut add = |election: &String, n: usize, inside: bool, rng: &mut ChaCha8Rng| {
        // parties with a zero result did not exist yet and go unreported
        let v = &known[election];
        let mut observed: Vec<bool> = (0..r).map(|a| v[a] > 0.0).collect();
        observed.push(true);
        for _ in 0..n {
            plan.push(PollPlan {
                pollster: pollsters[rng.random_range(0..pollsters.len())].clone(),
                election: election.clone(),
                days_before: if inside { rng.random_range(1..=config.window_days) } else { rng.random_range(config.window_days + 1..=90) },
                observed: observed.clone(),
                sample_size: Some(rng.random_range(800..=3000)),
            });
        }
    };
    for (i, e) in training.iter().enumerate() {
        let n = SYNTH_TRAINING_POLLS / training.len() + usize::from(i < SYNTH_TRAINING_POLLS % training.len());
        add(e, n, true, &mut rng);
        add(e, 8, false, &mut rng);
    }
    add(target, SYNTH_TARGET_POLLS, true, &mut rng);
    add(target, 12, false, &mut rng);
    let polls = simulate_polls(&poll_truth, &known, &plan, &mut rng)?;

    let survey_path = config.resolve(&config.data.survey);
    let census_path = config.resolve(&config.data.census);
    let polls_path = config.resolve(&config.data.polls);
    write_survey(&survey_path, &respondents, &config.factors)?;
    write_census(&census_path, &counts, &electorate, &config.factors)?;
    write_polls(&polls_path, &polls, &canon)?;
    Ok(StageOutput {
        files: vec![survey_path, census_path, polls_path],
        warnings: Vec::new(),
    })
}

/// Runs every stage in dependency order.
pub fn run_all(config: &RunConfig) -> Result<Vec<StageOutput>> {
    [
        Stage::FitFundamental,
        Stage::FitPolls,
        Stage::Synthesize,
        Stage::Allocate { official: false },
        Stage::Allocate { official: true },
        Stage::Benchmark,
        Stage::Report,
    ]
    .into_iter()
    .map(|s| run_stage(config, s))
    .collect()
}
