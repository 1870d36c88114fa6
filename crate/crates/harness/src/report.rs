//! Run reports: one `metrics.json` per run, a `config.toml` echo and flat CSV tables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::ExperimentConfig;
use crate::error::{io_err, HarnessError, Result};

/// Package version and the commit the binary was built from.
pub fn version_stamp() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), env!("RESDGP_GIT_REV"))
}

/// A flat table written as `<name>.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.into(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub kind: String,
    pub version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    /// Stable keys include `nlpd`, `mse`, `elbo_trace`, `regret_trace` and `uncertainty`.
    #[serde(flatten)]
    pub metrics: Map<String, Value>,
    #[serde(skip)]
    pub tables: Vec<Table>,
}

impl Report {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            kind: config.kind.name().into(),
            version: version_stamp(),
            seed: config.seed,
            config: config.clone(),
            metrics: Map::new(),
            tables: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("metrics are plain data");
        self.metrics.insert(key.into(), v);
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).and_then(Value::as_f64)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }
}

/// Writes `metrics.json`, `config.toml` and every table into `dir`; returns the written paths.
pub fn emit_report(report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();

    let metrics = dir.join("metrics.json");
    let json = serde_json::to_string_pretty(report).map_err(|e| HarnessError::Serialize(e.to_string()))?;
    std::fs::write(&metrics, json).map_err(io_err(&metrics))?;
    written.push(metrics);

    let config = dir.join("config.toml");
    std::fs::write(&config, report.config.to_toml()?).map_err(io_err(&config))?;
    written.push(config);

    for t in &report.tables {
        let path = dir.join(format!("{}.csv", t.name));
        let mut w = csv::Writer::from_path(&path).map_err(|e| HarnessError::Serialize(format!("{}: {e}", path.display())))?;
        w.write_record(&t.header).map_err(|e| HarnessError::Serialize(e.to_string()))?;
        for r in &t.rows {
            w.write_record(r).map_err(|e| HarnessError::Serialize(e.to_string()))?;
        }
        w.flush().map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}

pub fn read_report(dir: &Path) -> Result<Report> {
    let path = dir.join("metrics.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Serialize(e.to_string()))
}
