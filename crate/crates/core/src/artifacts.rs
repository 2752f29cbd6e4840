//! Posterior draw files and their JSON provenance sidecars.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::{write_text, writer};

/// Long-format draws: one row per draw and parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawTable {
    pub names: Vec<String>,
    pub chain: Vec<usize>,
    /// One vector per draw, in `names` order.
    pub values: Vec<Vec<f64>>,
}

pub fn write_draws(path: &Path, table: &DrawTable) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["draw", "chain", "parameter_name", "value"]).map_err(|e| Error::csv(path, e))?;
    for (d, (row, c)) in table.values.iter().zip(&table.chain).enumerate() {
        let (d, c) = (d.to_string(), c.to_string());
        for (name, v) in table.names.iter().zip(row) {
            w.write_record([d.as_str(), c.as_str(), name, &v.to_string()]).map_err(|e| Error::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_draws(path: &Path) -> Result<DrawTable> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let bad = |m: String| Error::Parse {
        path: path.to_path_buf(),
        message: m,
    };
    let mut names: Vec<String> = Vec::new();
    let mut chain = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let d: usize = rec[0].parse().map_err(|_| bad(format!("bad draw index `{}`", &rec[0])))?;
        let c: usize = rec[1].parse().map_err(|_| bad(format!("bad chain `{}`", &rec[1])))?;
        let v: f64 = rec[3].parse().map_err(|_| bad(format!("bad value `{}`", &rec[3])))?;
        if d == values.len() {
            values.push(Vec::with_capacity(names.len()));
            chain.push(c);
        } else if d + 1 != values.len() {
            return Err(bad(format!("draw {d} out of order")));
        }
        let row = values.last_mut().unwrap();
        let i = row.len();
        if d == 0 {
            names.push(rec[2].to_string());
        } else if names.get(i).map(String::as_str) != Some(&rec[2]) {
            return Err(bad(format!("draw {d} parameter `{}` out of order", &rec[2])));
        }
        row.push(v);
    }
    if let Some(d) = values.iter().position(|r| r.len() != names.len()) {
        return Err(bad(format!("draw {d} is incomplete")));
    }
    Ok(DrawTable { names, chain, values })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Sidecar describing how an output was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub version: String,
    pub seed: u64,
    /// Input file name to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub config: serde_json::Value,
    #[serde(default)]
    pub details: serde_json::Value,
}

impl Provenance {
    pub fn new(stage: &str, seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(Provenance {
            stage: stage.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            inputs: BTreeMap::new(),
            config: serde_json::to_value(config).map_err(|e| Error::InvalidInput(e.to_string()))?,
            details: serde_json::Value::Null,
        })
    }

    pub fn with_input(mut self, path: &Path) -> Result<Self> {
        let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        self.inputs.insert(name, sha256_file(path)?);
        Ok(self)
    }

    pub fn with_details(mut self, details: &impl Serialize) -> Result<Self> {
        self.details = serde_json::to_value(details).map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(self)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_sidecar(path: &Path, p: &Provenance) -> Result<()> {
    let text = serde_json::to_string_pretty(p).map_err(|e| Error::InvalidInput(e.to_string()))?;
    write_text(&sidecar_path(path), &(text + "\n"))
}

pub fn read_sidecar(path: &Path) -> Result<Provenance> {
    let side = sidecar_path(path);
    if !side.is_file() {
        return Err(Error::MissingArtifact(side));
    }
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: side,
        message: e.to_string(),
    })
}
