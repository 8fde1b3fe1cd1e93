use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::Result;

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub code_version: String,
    pub config_hash: String,
    pub dataset_hash: String,
    /// Artifact name to SHA-256 of its file bytes.
    pub model_hashes: BTreeMap<String, String>,
    pub collector: String,
    pub tier: String,
}

/// Evaluation result for one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub delay: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub axis: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub axis_value: Option<f64>,
    pub sampling_steps: usize,
    pub candidates: usize,
    pub temperature: f64,
    pub mean_return: f64,
    pub returns: Vec<f64>,
    pub denoiser_calls_per_step: usize,
}

/// Scripted-controller returns on the same episode seeds as a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub delay: usize,
    pub seed: u64,
    pub compensating_mean: f64,
    pub naive_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub schema_version: u32,
    pub pipeline: String,
    pub provenance: Provenance,
    #[serde(default)]
    pub notes: BTreeMap<String, serde_json::Value>,
    pub cells: Vec<Cell>,
    #[serde(default)]
    pub references: Vec<Reference>,
}

/// Wall-clock decision latencies; kept apart from [`Metrics`] so that the
/// metrics files stay byte-reproducible.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Timing {
    /// `(seed, delay, episode, latencies)`.
    pub rows: Vec<(u64, usize, usize, Vec<f64>)>,
}

impl Metrics {
    pub fn new(pipeline: &str, provenance: Provenance) -> Self {
        Self {
            schema_version: METRICS_SCHEMA_VERSION,
            pipeline: pipeline.into(),
            provenance,
            notes: BTreeMap::new(),
            cells: Vec::new(),
            references: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Long form: one line per evaluated episode.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("schema_version,seed,delay,axis,axis_value,episode,return\n");
        for c in &self.cells {
            for (i, r) in c.returns.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    self.schema_version,
                    c.seed,
                    c.delay,
                    c.axis.as_deref().unwrap_or(""),
                    c.axis_value.map(|v| v.to_string()).unwrap_or_default(),
                    i,
                    r
                );
            }
        }
        s
    }

    /// Writes `metrics.json` and `metrics.csv` atomically under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        container::write_atomic(&dir.join("metrics.json"), self.to_json()?.as_bytes())?;
        container::write_atomic(&dir.join("metrics.csv"), self.to_csv().as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn cell(&self, delay: usize, seed: u64) -> Option<&Cell> {
        self.cells.iter().find(|c| c.delay == delay && c.seed == seed && c.axis.is_none())
    }

    /// Mean over seeds of the per-seed mean return at `delay`.
    pub fn mean_at_delay(&self, delay: usize) -> Option<f64> {
        let v: Vec<f64> = self.cells.iter().filter(|c| c.delay == delay && c.axis.is_none()).map(|c| c.mean_return).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

impl Timing {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,delay,episode,decisions,mean_s,p50_s,p95_s\n");
        for (seed, delay, ep, lat) in &self.rows {
            if let Ok(r) = crate::stats::latency_report(lat, 0, 0) {
                let _ = writeln!(s, "{seed},{delay},{ep},{},{},{},{}", r.samples, r.mean, r.p50, r.p95);
            }
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        container::write_atomic(&dir.join("timing.csv"), self.to_csv().as_bytes())
    }

    pub fn all(&self) -> Vec<f64> {
        self.rows.iter().flat_map(|r| r.3.iter().copied()).collect()
    }
}
