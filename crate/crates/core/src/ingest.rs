//! CSV loaders and writers with row-level validation.
//!
//! Every loader collects per-row errors. Invalid rows are skipped with a
//! warning unless they exceed [`MAX_INVALID_FRACTION`] of the file, in
//! which case loading aborts.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::benchmarks::{NationalHistoryRow, Role};
use crate::error::{Error, Result};
use crate::fundamental::{FactorLayout, Stratum, StrataSet};
use crate::polls::Poll;
use crate::seats::{allocate_nation, ProvinceVotes, SeatAllocation};
use crate::simplex::{PartyCanon, ShareVector};

pub const MAX_INVALID_FRACTION: f64 = 0.05;

/// Province code of results rows that hold national totals.
pub const NATIONAL: u32 = 0;

/// What a loader read, skipped and dropped.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub path: PathBuf,
    pub rows: usize,
    pub invalid: Vec<String>,
    pub dropped: usize,
    pub notes: Vec<String>,
}

impl IngestReport {
    fn new(path: &Path) -> Self {
        IngestReport {
            path: path.to_path_buf(),
            ..Default::default()
        }
    }

    fn finish(self) -> Result<Self> {
        let bad = self.invalid.len();
        if bad > 0 {
            if bad as f64 > MAX_INVALID_FRACTION * self.rows as f64 {
                return Err(Error::TooManyInvalidRows {
                    path: self.path.clone(),
                    invalid: bad,
                    total: self.rows,
                    first: self.invalid[0].clone(),
                });
            }
            for e in &self.invalid {
                log::warn!("skipped {e}");
            }
        }
        for n in &self.notes {
            log::info!("{}: {n}", self.path.display());
        }
        Ok(self)
    }
}

/// Maps labels used in data files to canon parties.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PartyAliases {
    pub aliases: BTreeMap<String, String>,
    /// Whether unknown labels map to the pivot party.
    pub unknown_to_pivot: bool,
}

impl PartyAliases {
    /// Coalition and regional list names of the Spanish 2015 ballot.
    pub fn spain() -> Self {
        let pairs = [
            ("PSC", "PSOE"),
            ("PSOE-PSC", "PSOE"),
            ("PSdeG-PSOE", "PSOE"),
            ("UPN-PP", "PP"),
            ("PP-PAR", "PP"),
            ("EN COMU PODEM", "PODEMOS"),
            ("ECP", "PODEMOS"),
            ("COMPROMIS-PODEMOS", "PODEMOS"),
            ("EN MAREA", "PODEMOS"),
            ("PODEMOS-COMPROMIS", "PODEMOS"),
            ("C's", "CS"),
            ("CIUDADANOS", "CS"),
        ];
        PartyAliases {
            aliases: pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
            unknown_to_pivot: true,
        }
    }

    /// Canon index of `label`, if it resolves.
    pub fn resolve(&self, canon: &PartyCanon, label: &str) -> Option<usize> {
        let label = label.trim();
        canon
            .index_of(label)
            .or_else(|| self.aliases.get(label).and_then(|c| canon.index_of(c)))
            .or_else(|| self.unknown_to_pivot.then(|| canon.pivot_index()))
    }

    /// Canon index of `label` without the pivot fallback.
    pub fn resolve_strict(&self, canon: &PartyCanon, label: &str) -> Option<usize> {
        let label = label.trim();
        canon
            .index_of(label)
            .or_else(|| self.aliases.get(label).and_then(|c| canon.index_of(c)))
    }
}

fn open(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(false).from_reader(file))
}

fn headers(reader: &mut csv::Reader<File>, path: &Path) -> Result<Vec<String>> {
    Ok(reader.headers().map_err(|e| Error::csv(path, e))?.iter().map(str::to_string).collect())
}

fn column(headers: &[String], name: &str, path: &Path) -> Result<usize> {
    headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        message: format!("missing column `{name}`"),
    })
}

fn optional_column(headers: &[String], name: &str) -> Option<usize> {
    headers.iter().position(|h| h == name)
}

/// Iterates records with their 1-based line numbers; malformed records
/// become row errors.
fn records(reader: &mut csv::Reader<File>, report: &mut IngestReport) -> Vec<(u64, csv::StringRecord)> {
    let mut out = Vec::new();
    for rec in reader.records() {
        report.rows += 1;
        match rec {
            Ok(r) => {
                let line = r.position().map_or(0, |p| p.line());
                out.push((line, r));
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                report.invalid.push(format!("line {line}: {e}"));
            }
        }
    }
    out
}

fn parse<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> std::result::Result<T, String> {
    let raw = rec.get(i).unwrap_or("");
    raw.parse().map_err(|_| format!("{name} `{raw}` is not valid"))
}

fn in_range(v: u32, lo: u32, hi: u32, name: &str) -> std::result::Result<u32, String> {
    if v < lo || v > hi {
        Err(format!("{name} {v} outside {lo}..={hi}"))
    } else {
        Ok(v)
    }
}

/// Highest province code of the Spanish INE numbering.
pub const MAX_PROVINCE: u32 = 52;

/// Stratum key: province then factor codes.
pub type CellKey = (u32, Vec<u32>);

fn read_cell(rec: &csv::StringRecord, cols: &[usize], layout_factors: &[(String, u32)]) -> std::result::Result<CellKey, String> {
    let province = in_range(parse(rec, cols[0], "province")?, 1, MAX_PROVINCE, "province")?;
    let mut levels = Vec::with_capacity(layout_factors.len());
    for ((name, n), &c) in layout_factors.iter().zip(&cols[1..]) {
        levels.push(in_range(parse(rec, c, name)?, 1, *n, name)?);
    }
    Ok((province, levels))
}

fn cell_columns(headers: &[String], factors: &[(String, u32)], path: &Path) -> Result<Vec<usize>> {
    let mut cols = vec![column(headers, "province", path)?];
    for (name, _) in factors {
        cols.push(column(headers, name, path)?);
    }
    Ok(cols)
}

/// Survey respondents grouped into strata with per-party counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SurveyCounts {
    pub counts: BTreeMap<CellKey, Vec<u32>>,
    pub respondents: usize,
    pub dropped: usize,
}

/// Reads respondents; intention is a 1-based canon code, a canon label or
/// alias, or empty (dropped as missing at random).
pub fn load_survey(path: &Path, canon: &PartyCanon, aliases: &PartyAliases, factors: &[(String, u32)]) -> Result<(SurveyCounts, IngestReport)> {
    let mut reader = open(path)?;
    let h = headers(&mut reader, path)?;
    column(&h, "respondent_id", path)?;
    let cols = cell_columns(&h, factors, path)?;
    let ic = column(&h, "intention", path)?;
    let mut report = IngestReport::new(path);
    let mut counts: BTreeMap<CellKey, Vec<u32>> = BTreeMap::new();
    let mut respondents = 0;
    let mut dropped = 0;
    for (line, rec) in records(&mut reader, &mut report) {
        let row = (|| -> std::result::Result<Option<(CellKey, usize)>, String> {
            let key = read_cell(&rec, &cols, factors)?;
            let raw = rec.get(ic).unwrap_or("");
            if raw.is_empty() {
                return Ok(Some((key, usize::MAX)));
            }
            let party = match raw.parse::<usize>() {
                Ok(code) if (1..=canon.len()).contains(&code) => code - 1,
                Ok(code) => return Err(format!("intention code {code} outside 1..={}", canon.len())),
                Err(_) => aliases
                    .resolve(canon, raw)
                    .ok_or_else(|| format!("unknown party `{raw}`"))?,
            };
            Ok(Some((key, party)))
        })();
        match row {
            Ok(Some((key, party))) => {
                respondents += 1;
                let c = counts.entry(key).or_insert_with(|| vec![0; canon.len()]);
                if party == usize::MAX {
                    dropped += 1;
                } else {
                    c[party] += 1;
                }
            }
            Ok(None) => {}
            Err(m) => report.invalid.push(format!("{}:{line}: {m}", path.display())),
        }
    }
    report.dropped = dropped;
    report.notes.push(format!(
        "{respondents} respondents, {dropped} without a reported intention dropped, {} strata",
        counts.len()
    ));
    let report = report.finish()?;
    Ok((
        SurveyCounts {
            counts,
            respondents,
            dropped,
        },
        report,
    ))
}

/// Census cell weights normalized per province, plus electorate sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct Census {
    pub weights: BTreeMap<CellKey, f64>,
    pub electorate: BTreeMap<u32, f64>,
    /// Cells present per province.
    pub coverage: BTreeMap<u32, usize>,
}

pub fn load_census(path: &Path, factors: &[(String, u32)]) -> Result<(Census, IngestReport)> {
    let mut reader = open(path)?;
    let h = headers(&mut reader, path)?;
    let cols = cell_columns(&h, factors, path)?;
    let cc = column(&h, "count", path)?;
    let ec = optional_column(&h, "electorate");
    let mut report = IngestReport::new(path);
    let mut raw: BTreeMap<CellKey, f64> = BTreeMap::new();
    let mut electorate: BTreeMap<u32, f64> = BTreeMap::new();
    for (line, rec) in records(&mut reader, &mut report) {
        let row = (|| -> std::result::Result<(CellKey, f64, Option<f64>), String> {
            let key = read_cell(&rec, &cols, factors)?;
            let count: f64 = parse(&rec, cc, "count")?;
            if !(count >= 0.0 && count.is_finite()) {
                return Err(format!("count {count} is negative"));
            }
            let e = match ec.map(|c| rec.get(c).unwrap_or("")) {
                None | Some("") => None,
                Some(_) => {
                    let e: f64 = parse(&rec, ec.unwrap(), "electorate")?;
                    if !(e > 0.0 && e.is_finite()) {
                        return Err(format!("electorate {e} is not positive"));
                    }
                    Some(e)
                }
            };
            Ok((key, count, e))
        })();
        match row {
            Ok((key, count, e)) => {
                if let Some(e) = e {
                    match electorate.get(&key.0) {
                        Some(prev) if *prev != e => report.invalid.push(format!(
                            "{}:{line}: electorate {e} conflicts with {prev} for province {}",
                            path.display(),
                            key.0
                        )),
                        _ => {
                            electorate.insert(key.0, e);
                        }
                    }
                }
                if raw.insert(key.clone(), count).is_some() {
                    report.invalid.push(format!("{}:{line}: duplicate cell {key:?}", path.display()));
                }
            }
            Err(m) => report.invalid.push(format!("{}:{line}: {m}", path.display())),
        }
    }
    let mut totals: BTreeMap<u32, f64> = BTreeMap::new();
    let mut coverage: BTreeMap<u32, usize> = BTreeMap::new();
    for ((p, _), c) in &raw {
        *totals.entry(*p).or_default() += c;
        *coverage.entry(*p).or_default() += 1;
    }
    if let Some((p, _)) = totals.iter().find(|(_, t)| !(**t > 0.0)) {
        return Err(Error::MissingCensus { province: *p });
    }
    for (p, t) in &totals {
        electorate.entry(*p).or_insert(*t);
    }
    let cells: usize = factors.iter().map(|f| f.1 as usize).product();
    let partial: Vec<String> = coverage
        .iter()
        .filter(|(_, n)| **n < cells)
        .map(|(p, n)| format!("{p}:{n}/{cells}"))
        .collect();
    report.notes.push(format!("{} provinces, {} cells", totals.len(), raw.len()));
    if !partial.is_empty() {
        report.notes.push(format!("missing cells imputed as zero weight in provinces {partial:?}"));
    }
    let weights = raw.into_iter().map(|(k, c)| (k.clone(), c / totals[&k.0])).collect();
    let report = report.finish()?;
    Ok((
        Census {
            weights,
            electorate,
            coverage,
        },
        report,
    ))
}

/// The strata universe: every census cell plus any surveyed cell missing
/// from the census (with zero weight).
pub fn build_strata(canon: &PartyCanon, factors: &[(String, u32)], survey: &SurveyCounts, census: &Census) -> Result<StrataSet> {
    let keys: BTreeSet<&CellKey> = census.weights.keys().chain(survey.counts.keys()).collect();
    let provinces: Vec<u32> = keys.iter().map(|k| k.0).collect::<BTreeSet<_>>().into_iter().collect();
    let layout = FactorLayout::new(provinces, factors.to_vec())?;
    let strata = keys
        .into_iter()
        .map(|k| Stratum {
            province: k.0,
            levels: k.1.clone(),
            counts: survey.counts.get(k).cloned().unwrap_or_else(|| vec![0; canon.len()]),
            weight: census.weights.get(k).copied().unwrap_or(0.0),
        })
        .collect();
    StrataSet::new(canon.clone(), layout, strata, census.electorate.clone())
}

fn parse_date(raw: &str) -> std::result::Result<NaiveDate, String> {
    NaiveDate::parse_from_str(raw, "%Y-%m-%d").map_err(|_| format!("date `{raw}` is not YYYY-MM-DD"))
}

const POLL_FIXED: [&str; 6] = ["poll_id", "pollster", "election_date", "days_before", "sample_size", "publish_date"];

/// Reads the polls archive. Share columns are matched to canon parties by
/// label or alias; blank cells are masked. When `publish_date` is present
/// the derived days before the election win over `days_before`.
pub fn load_polls(path: &Path, canon: &PartyCanon, aliases: &PartyAliases) -> Result<(Vec<Poll>, IngestReport)> {
    let mut reader = open(path)?;
    let h = headers(&mut reader, path)?;
    let id = column(&h, "poll_id", path)?;
    let pc = column(&h, "pollster", path)?;
    let ec = column(&h, "election_date", path)?;
    let dc = optional_column(&h, "days_before");
    let sc = optional_column(&h, "sample_size");
    let pd = optional_column(&h, "publish_date");
    if dc.is_none() && pd.is_none() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: "need a `days_before` or `publish_date` column".into(),
        });
    }
    let mut share_cols: Vec<(usize, usize)> = Vec::new();
    for (i, name) in h.iter().enumerate() {
        if POLL_FIXED.contains(&name.as_str()) {
            continue;
        }
        let party = aliases.resolve_strict(canon, name).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            message: format!("column `{name}` is not a canon party or alias"),
        })?;
        if share_cols.iter().any(|(_, p)| *p == party) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("two columns map to party {}", canon.labels()[party]),
            });
        }
        share_cols.push((i, party));
    }
    let mut report = IngestReport::new(path);
    let mut polls = Vec::new();
    let mut seen = BTreeSet::new();
    for (line, rec) in records(&mut reader, &mut report) {
        let row = (|| -> std::result::Result<Poll, String> {
            let poll_id = rec.get(id).unwrap_or("").to_string();
            if poll_id.is_empty() {
                return Err("empty poll_id".into());
            }
            let pollster = rec.get(pc).unwrap_or("").to_string();
            if pollster.is_empty() {
                return Err("empty pollster".into());
            }
            let election = rec.get(ec).unwrap_or("").to_string();
            let e_date = parse_date(&election)?;
            let given: Option<u32> = match dc.map(|c| rec.get(c).unwrap_or("")) {
                None | Some("") => None,
                Some(_) => Some(parse(&rec, dc.unwrap(), "days_before")?),
            };
            let derived = match pd.map(|c| rec.get(c).unwrap_or("")) {
                None | Some("") => None,
                Some(raw) => {
                    let days = (e_date - parse_date(raw)?).num_days();
                    if days < 0 {
                        return Err(format!("published {raw}, after the election"));
                    }
                    Some(days as u32)
                }
            };
            let days_before = match (given, derived) {
                (Some(g), Some(d)) if g != d => {
                    log::warn!("{}:{line}: days_before {g} conflicts with publish date ({d} days); using {d}", path.display());
                    d
                }
                (_, Some(d)) => d,
                (Some(g), None) => g,
                (None, None) => return Err("no days_before or publish_date".into()),
            };
            let sample_size = match sc.map(|c| rec.get(c).unwrap_or("")) {
                None | Some("") => None,
                Some(_) => Some(parse(&rec, sc.unwrap(), "sample_size")?),
            };
            let mut shares = vec![None; canon.len()];
            for &(c, party) in &share_cols {
                let raw = rec.get(c).unwrap_or("");
                if !raw.is_empty() {
                    shares[party] = Some(parse::<f64>(&rec, c, &canon.labels()[party])?);
                }
            }
            let poll = Poll {
                id: poll_id,
                pollster,
                election,
                days_before,
                shares,
                sample_size,
            };
            poll.validate(canon).map_err(|e| e.to_string())?;
            Ok(poll)
        })();
        match row {
            Ok(p) => {
                if !seen.insert(p.id.clone()) {
                    report.invalid.push(format!("{}:{line}: duplicate poll_id {}", path.display(), p.id));
                } else {
                    polls.push(p);
                }
            }
            Err(m) => report.invalid.push(format!("{}:{line}: {m}", path.display())),
        }
    }
    if report.rows == 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: "the polls file has no rows".into(),
        });
    }
    let mut per: BTreeMap<&str, usize> = BTreeMap::new();
    for p in &polls {
        *per.entry(&p.election).or_default() += 1;
    }
    report.notes.push(format!("{} polls by election: {per:?}", polls.len()));
    let report = report.finish()?;
    Ok((polls, report))
}

pub fn write_polls(path: &Path, polls: &[Poll], canon: &PartyCanon) -> Result<()> {
    let mut w = writer(path)?;
    let mut header: Vec<String> = ["poll_id", "pollster", "election_date", "days_before", "sample_size"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(canon.labels().iter().cloned());
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for p in polls {
        let mut row = vec![
            p.id.clone(),
            p.pollster.clone(),
            p.election.clone(),
            p.days_before.to_string(),
            p.sample_size.map(|s| s.to_string()).unwrap_or_default(),
        ];
        row.extend(p.shares.iter().map(|s| s.map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn writer(path: &Path) -> Result<csv::Writer<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub election_date: String,
    pub province: u32,
    pub party: String,
    pub votes: f64,
}

/// Vote counts by election, province and list as printed on the ballot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ElectionResults {
    pub rows: Vec<ResultRow>,
}

impl ElectionResults {
    pub fn elections(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.election_date.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    fn rows_of<'a>(&'a self, election: &'a str) -> impl Iterator<Item = &'a ResultRow> + 'a {
        self.rows.iter().filter(move |r| r.election_date == election)
    }

    /// Province-level rows when present, otherwise the national rows.
    fn national_rows<'a>(&'a self, election: &'a str) -> Vec<&'a ResultRow> {
        let local: Vec<&ResultRow> = self.rows_of(election).filter(|r| r.province != NATIONAL).collect();
        if local.is_empty() {
            self.rows_of(election).collect()
        } else {
            local
        }
    }

    /// National vote shares aggregated to the canon.
    pub fn national_shares(&self, election: &str, canon: &PartyCanon, aliases: &PartyAliases) -> Result<ShareVector> {
        let rows = self.national_rows(election);
        if rows.is_empty() {
            return Err(Error::Lookup {
                kind: "election results",
                id: election.to_string(),
            });
        }
        let mut v = vec![0.0; canon.len()];
        for r in rows {
            let i = aliases.resolve(canon, &r.party).ok_or_else(|| Error::Lookup {
                kind: "party",
                id: r.party.clone(),
            })?;
            v[i] += r.votes;
        }
        ShareVector::normalized(v)
    }

    /// Votes per province for every list on the ballot of `election`.
    pub fn province_votes(&self, election: &str) -> (Vec<String>, BTreeMap<u32, Vec<f64>>) {
        let lists: Vec<String> = self
            .rows_of(election)
            .filter(|r| r.province != NATIONAL)
            .map(|r| r.party.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut out: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for r in self.rows_of(election).filter(|r| r.province != NATIONAL) {
            let i = lists.binary_search(&r.party).unwrap();
            out.entry(r.province).or_insert_with(|| vec![0.0; lists.len()])[i] += r.votes;
        }
        (lists, out)
    }

    /// Per-province canon shares of `election`.
    pub fn province_shares(&self, election: &str, canon: &PartyCanon, aliases: &PartyAliases) -> Result<BTreeMap<u32, ShareVector>> {
        let (lists, by) = self.province_votes(election);
        let map: Vec<usize> = lists
            .iter()
            .map(|l| aliases.resolve(canon, l).ok_or_else(|| Error::Lookup { kind: "party", id: l.clone() }))
            .collect::<Result<_>>()?;
        by.into_iter()
            .map(|(p, votes)| {
                let mut v = vec![0.0; canon.len()];
                for (x, &i) in votes.iter().zip(&map) {
                    v[i] += x;
                }
                Ok((p, ShareVector::normalized(v)?))
            })
            .collect()
    }
}

pub fn load_results(path: &Path) -> Result<(ElectionResults, IngestReport)> {
    let mut reader = open(path)?;
    let h = headers(&mut reader, path)?;
    let ec = column(&h, "election_date", path)?;
    let pc = column(&h, "province", path)?;
    let lc = column(&h, "party", path)?;
    let vc = column(&h, "votes", path)?;
    let mut report = IngestReport::new(path);
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for (line, rec) in records(&mut reader, &mut report) {
        let row = (|| -> std::result::Result<ResultRow, String> {
            let election_date = rec.get(ec).unwrap_or("").to_string();
            parse_date(&election_date)?;
            let province = in_range(parse(&rec, pc, "province")?, NATIONAL, MAX_PROVINCE, "province")?;
            let party = rec.get(lc).unwrap_or("").to_string();
            if party.is_empty() {
                return Err("empty party".into());
            }
            let votes: f64 = parse(&rec, vc, "votes")?;
            if !(votes >= 0.0 && votes.is_finite()) {
                return Err(format!("votes {votes} is negative"));
            }
            Ok(ResultRow {
                election_date,
                province,
                party,
                votes,
            })
        })();
        match row {
            Ok(r) => {
                let key = (r.election_date.clone(), r.province, r.party.clone());
                if seen.insert(key) {
                    rows.push(r);
                } else {
                    report.invalid.push(format!("{}:{line}: duplicate row", path.display()));
                }
            }
            Err(m) => report.invalid.push(format!("{}:{line}: {m}", path.display())),
        }
    }
    let results = ElectionResults { rows };
    report.notes.push(format!("{} rows for elections {:?}", results.rows.len(), results.elections()));
    Ok((results, report.finish()?))
}

pub fn write_results(path: &Path, results: &ElectionResults) -> Result<()> {
    let mut w = writer(path)?;
    for r in &results.rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Seats per province, keyed by election date.
pub type Contingents = BTreeMap<String, BTreeMap<u32, u32>>;

pub fn load_contingents(path: &Path) -> Result<(Contingents, IngestReport)> {
    let mut reader = open(path)?;
    let h = headers(&mut reader, path)?;
    let ec = column(&h, "election_date", path)?;
    let pc = column(&h, "province", path)?;
    let sc = column(&h, "seats", path)?;
    let mut report = IngestReport::new(path);
    let mut out: Contingents = BTreeMap::new();
    for (line, rec) in records(&mut reader, &mut report) {
        let row = (|| -> std::result::Result<(String, u32, u32), String> {
            let e = rec.get(ec).unwrap_or("").to_string();
            parse_date(&e)?;
            let p = in_range(parse(&rec, pc, "province")?, 1, MAX_PROVINCE, "province")?;
            Ok((e, p, parse(&rec, sc, "seats")?))
        })();
        match row {
            Ok((e, p, s)) => {
                if out.entry(e).or_default().insert(p, s).is_some() {
                    report.invalid.push(format!("{}:{line}: duplicate province {p}", path.display()));
                }
            }
            Err(m) => report.invalid.push(format!("{}:{line}: {m}", path.display())),
        }
    }
    for (e, m) in &out {
        report.notes.push(format!("{e}: {} provinces, {} seats", m.len(), m.values().sum::<u32>()));
    }
    Ok((out, report.finish()?))
}

pub fn write_contingents(path: &Path, contingents: &Contingents) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["election_date", "province", "seats"]).map_err(|e| Error::csv(path, e))?;
    for (e, m) in contingents {
        for (p, s) in m {
            w.write_record([e.clone(), p.to_string(), s.to_string()]).map_err(|e| Error::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_history(path: &Path) -> Result<(Vec<NationalHistoryRow>, IngestReport)> {
    let mut reader = open(path)?;
    let h = headers(&mut reader, path)?;
    let names = [
        "election_date",
        "party",
        "role",
        "result",
        "lagged_result",
        "gdp_growth",
        "polls_average",
        "seats",
        "lagged_seats",
    ];
    let cols: Vec<usize> = names.iter().map(|n| column(&h, n, path)).collect::<Result<_>>()?;
    let mut report = IngestReport::new(path);
    let mut rows = Vec::new();
    for (line, rec) in records(&mut reader, &mut report) {
        let row = (|| -> std::result::Result<NationalHistoryRow, String> {
            let election_date = rec.get(cols[0]).unwrap_or("").to_string();
            parse_date(&election_date)?;
            let role: Role = rec.get(cols[2]).unwrap_or("").parse().map_err(|e: Error| e.to_string())?;
            let r = NationalHistoryRow {
                election_date,
                party: rec.get(cols[1]).unwrap_or("").to_string(),
                role,
                result: parse(&rec, cols[3], names[3])?,
                lagged_result: parse(&rec, cols[4], names[4])?,
                gdp_growth: parse(&rec, cols[5], names[5])?,
                polls_average: parse(&rec, cols[6], names[6])?,
                seats: parse(&rec, cols[7], names[7])?,
                lagged_seats: parse(&rec, cols[8], names[8])?,
            };
            r.validate().map_err(|e| e.to_string())?;
            Ok(r)
        })();
        match row {
            Ok(r) => rows.push(r),
            Err(m) => report.invalid.push(format!("{}:{line}: {m}", path.display())),
        }
    }
    Ok((rows, report.finish()?))
}

pub fn write_history(path: &Path, rows: &[NationalHistoryRow]) -> Result<()> {
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_census(path: &Path, census_counts: &BTreeMap<CellKey, f64>, electorate: &BTreeMap<u32, f64>, factors: &[(String, u32)]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["province".to_string()];
    header.extend(factors.iter().map(|f| f.0.clone()));
    header.extend(["count".to_string(), "electorate".to_string()]);
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for ((p, levels), c) in census_counts {
        let mut row = vec![p.to_string()];
        row.extend(levels.iter().map(|l| l.to_string()));
        row.push(c.to_string());
        row.push(electorate.get(p).map(|e| e.to_string()).unwrap_or_default());
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One surveyed person; `intention` is a 1-based canon code.
#[derive(Debug, Clone, PartialEq)]
pub struct Respondent {
    pub id: u32,
    pub province: u32,
    pub levels: Vec<u32>,
    pub intention: Option<u32>,
}

pub fn write_survey(path: &Path, respondents: &[Respondent], factors: &[(String, u32)]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["respondent_id".to_string(), "province".to_string()];
    header.extend(factors.iter().map(|f| f.0.clone()));
    header.push("intention".into());
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for r in respondents {
        let mut row = vec![r.id.to_string(), r.province.to_string()];
        row.extend(r.levels.iter().map(|l| l.to_string()));
        row.push(r.intention.map(|i| i.to_string()).unwrap_or_default());
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// D'Hondt allocation of one election's official results, per list.
pub fn allocate_results(results: &ElectionResults, contingents: &Contingents, election: &str, threshold: f64) -> Result<SeatAllocation> {
    let (lists, by) = results.province_votes(election);
    if by.is_empty() {
        return Err(Error::Lookup {
            kind: "province results for election",
            id: election.to_string(),
        });
    }
    let seats = contingents.get(election).ok_or_else(|| Error::Lookup {
        kind: "contingents for election",
        id: election.to_string(),
    })?;
    let provinces = by
        .into_iter()
        .map(|(p, votes)| {
            let contingent = *seats.get(&p).ok_or_else(|| Error::Lookup {
                kind: "contingent for province",
                id: p.to_string(),
            })?;
            Ok(ProvinceVotes {
                province: p,
                votes,
                contingent,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    allocate_nation(&lists, &provinces, threshold)
}

/// National seats of an allocation summed per canon party.
pub fn seats_by_canon(allocation: &SeatAllocation, canon: &PartyCanon, aliases: &PartyAliases) -> Result<Vec<u32>> {
    let mut out = vec![0u32; canon.len()];
    for (list, s) in allocation.parties.iter().zip(&allocation.national) {
        let i = aliases.resolve(canon, list).ok_or_else(|| Error::Lookup {
            kind: "party",
            id: list.clone(),
        })?;
        out[i] += s;
    }
    Ok(out)
}

/// Writes `text` to `path`, creating parent directories.
pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
