//! Run configuration read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fundamental::FactorLayout;
use crate::inference::SamplerConfig;
use crate::ingest::PartyAliases;
use crate::polls::PollsPrior;
use crate::simplex::PartyCanon;
use crate::synthesis::DEFAULT_ESS_FLOOR;

/// Input files. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPaths {
    pub survey: PathBuf,
    pub census: PathBuf,
    pub polls: PathBuf,
    pub results: PathBuf,
    pub contingents: PathBuf,
    pub history: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonConfig {
    pub parties: Vec<String>,
    /// Defaults to the last party.
    pub pivot: Option<String>,
}

impl Default for CanonConfig {
    fn default() -> Self {
        CanonConfig {
            parties: PartyCanon::spain().labels().to_vec(),
            pivot: None,
        }
    }
}

impl CanonConfig {
    pub fn canon(&self) -> Result<PartyCanon> {
        let c = match &self.pivot {
            Some(p) => PartyCanon::new(&self.parties, p),
            None => PartyCanon::with_last_as_pivot(&self.parties),
        };
        c.map_err(|e| Error::Config(e.to_string()))
    }
}

fn default_factors() -> Vec<(String, u32)> {
    FactorLayout::spain_factors()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataPaths,
    #[serde(default)]
    pub canon: CanonConfig,
    #[serde(default = "PartyAliases::spain")]
    pub aliases: PartyAliases,
    /// Non-province factors with their level counts, in file column order.
    #[serde(default = "default_factors")]
    pub factors: Vec<(String, u32)>,
    /// ISO date of the election being forecast.
    pub target_election: String,
    #[serde(default = "defaults::simulations")]
    pub simulations: usize,
    #[serde(default = "defaults::inflation")]
    pub inflation: f64,
    #[serde(default = "defaults::threshold")]
    pub threshold: f64,
    #[serde(default = "defaults::window_days")]
    pub window_days: u32,
    #[serde(default = "defaults::ess_floor")]
    pub ess_floor: f64,
    /// Thinned polls posterior draws averaged in the likelihood.
    #[serde(default = "defaults::likelihood_draws")]
    pub likelihood_draws: usize,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    #[serde(default = "defaults::out_dir")]
    pub out_dir: PathBuf,
    /// Continue past convergence and ESS failures.
    #[serde(default)]
    pub force: bool,
    #[serde(default)]
    pub fundamental_sampler: SamplerConfig,
    #[serde(default)]
    pub polls_sampler: SamplerConfig,
    #[serde(default)]
    pub polls_prior: PollsPrior,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

mod defaults {
    use std::path::PathBuf;

    pub fn simulations() -> usize {
        4000
    }
    pub fn inflation() -> f64 {
        1.5
    }
    pub fn threshold() -> f64 {
        0.03
    }
    pub fn window_days() -> u32 {
        30
    }
    pub fn ess_floor() -> f64 {
        super::DEFAULT_ESS_FLOOR
    }
    pub fn likelihood_draws() -> usize {
        100
    }
    pub fn seed() -> u64 {
        20151220
    }
    pub fn out_dir() -> PathBuf {
        PathBuf::from("out")
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.base_dir = base_dir.to_path_buf();
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::from_toml(&text, &base)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out(&self) -> PathBuf {
        self.resolve(&self.out_dir)
    }

    pub fn canon(&self) -> Result<PartyCanon> {
        self.canon.canon()
    }

    /// Overrides the base seed; each stage derives its own from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn fundamental_config(&self) -> SamplerConfig {
        SamplerConfig {
            seed: self.seed,
            ..self.fundamental_sampler.clone()
        }
    }

    pub fn polls_config(&self) -> SamplerConfig {
        SamplerConfig {
            seed: self.seed.wrapping_add(1),
            ..self.polls_sampler.clone()
        }
    }

    pub fn simulation_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    pub fn predictive_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }

    /// Checks values and that every input path exists.
    pub fn validate(&self) -> Result<()> {
        self.canon()?;
        self.fundamental_sampler.validate()?;
        self.polls_sampler.validate()?;
        let checks = [
            (self.simulations > 0, "simulations must be positive"),
            (self.inflation >= 1.0 && self.inflation.is_finite(), "inflation must be at least 1"),
            ((0.0..1.0).contains(&self.threshold), "threshold must lie in [0, 1)"),
            (self.ess_floor >= 0.0, "ess_floor must be non-negative"),
            (self.likelihood_draws > 0, "likelihood_draws must be positive"),
            (!self.factors.is_empty(), "at least one factor is required"),
        ];
        if let Some((_, m)) = checks.iter().find(|c| !c.0) {
            return Err(Error::Config(m.to_string()));
        }
        chrono::NaiveDate::parse_from_str(&self.target_election, "%Y-%m-%d")
            .map_err(|_| Error::Config(format!("target_election `{}` is not YYYY-MM-DD", self.target_election)))?;
        let d = &self.data;
        for p in [&d.survey, &d.census, &d.polls, &d.results, &d.contingents, &d.history] {
            let full = self.resolve(p);
            if !full.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", full.display())));
            }
        }
        Ok(())
    }
}
