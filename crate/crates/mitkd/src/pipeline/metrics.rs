//! Experiment metrics as one JSON object per line, plus the config hash that
//! ties every record of one experiment together.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: String,
    pub step: u64,
    pub metrics: BTreeMap<String, f64>,
    /// Wall-clock milliseconds; excluded from all determinism comparisons.
    pub timestamp_ms: u64,
    pub config_hash: String,
}

/// FNV-1a over a canonical JSON rendering. Any field change changes the hash.
pub fn hash_json_value<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub struct MetricsWriter {
    path: PathBuf,
    config_hash: String,
}

impl MetricsWriter {
    pub fn new(path: &Path, config_hash: &str) -> Self {
        MetricsWriter {
            path: path.to_path_buf(),
            config_hash: config_hash.to_string(),
        }
    }

    pub fn truncate(&self) -> Result<()> {
        if let Some(parent) = self.path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::File::create(&self.path).map_err(|e| Error::io(&self.path, e))?;
        Ok(())
    }

    pub fn emit(&self, stage: &str, step: u64, metrics: BTreeMap<String, f64>) -> Result<()> {
        let record = MetricsRecord {
            stage: stage.to_string(),
            step,
            metrics,
            timestamp_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
            config_hash: self.config_hash.clone(),
        };
        if let Some(parent) = self.path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        let line = serde_json::to_string(&record)?;
        writeln!(file, "{line}").map_err(|e| Error::io(&self.path, e))?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite { path: path.to_path_buf() });
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Convenience for single-value records.
pub fn one(name: &str, value: f64) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    m.insert(name.to_string(), value);
    m
}
