//! Run records: JSON for machines, CSV for plotting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::metrics::cumulative_root_mean;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub name: String,
    pub model: String,
    pub method: String,
    pub version: String,
    pub state_dim: usize,
    pub n_c: usize,
    pub ensemble_size: usize,
    pub spinup: usize,
    /// Labels of the CRMSE scalings, in column order.
    pub crmse_labels: Vec<String>,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub time: f64,
    /// `Σ_e ‖x_a − x_true‖²` for this cycle.
    pub sq_error: f64,
    /// `Σ_e ‖E g(x_a)‖²` for each scaling.
    pub sq_violation: Vec<f64>,
    pub rmse_cum: Option<f64>,
    pub crmse_cum: Vec<Option<f64>>,
    pub member_max_abs_g: Vec<f64>,
    pub flow_steps: usize,
    pub wall_ms: f64,
}

impl CycleRecord {
    pub fn max_abs_g(&self) -> f64 {
        self.member_max_abs_g.iter().fold(0.0, |m, &v| m.max(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub cycle: usize,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub metadata: Metadata,
    pub cycles: Vec<CycleRecord>,
    pub failure: Option<Failure>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

impl RunRecord {
    /// RMSE through cycle `k` from the stored per-cycle sums.
    pub fn rmse(&self, k: usize) -> Result<f64> {
        let sums: Vec<f64> = self.cycles.iter().map(|c| c.sq_error).collect();
        let m = &self.metadata;
        cumulative_root_mean(&sums, m.spinup, k, m.ensemble_size * m.state_dim)
    }

    /// CRMSE through cycle `k` for scaling number `which`.
    pub fn crmse(&self, which: usize, k: usize) -> Result<f64> {
        let m = &self.metadata;
        if which >= m.crmse_labels.len() {
            return Err(Error::DimensionMismatch {
                context: "CRMSE scaling index",
                expected: m.crmse_labels.len(),
                got: which + 1,
            });
        }
        let sums: Vec<f64> = self.cycles.iter().map(|c| c.sq_violation[which]).collect();
        cumulative_root_mean(&sums, m.spinup, k, m.ensemble_size * m.n_c)
    }

    pub fn crmse_index(&self, label: &str) -> Option<usize> {
        self.metadata.crmse_labels.iter().position(|l| l == label)
    }

    pub fn final_rmse(&self) -> Option<f64> {
        self.cycles.last().and_then(|c| c.rmse_cum)
    }

    pub fn final_crmse(&self, which: usize) -> Option<f64> {
        self.cycles.last().and_then(|c| c.crmse_cum.get(which).copied().flatten())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.into_inner().to_string(),
        })
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(io_err(path))
    }

    /// Columns `cycle, time, rmse_cum, crmse_cum, max_abs_g, flow_steps,
    /// wall_ms`. `crmse_cum` uses the first scaling; the others follow as
    /// `crmse_<label>`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "cycle".to_string(),
            "time".into(),
            "rmse_cum".into(),
            "crmse_cum".into(),
            "max_abs_g".into(),
            "flow_steps".into(),
            "wall_ms".into(),
        ];
        for l in self.metadata.crmse_labels.iter().skip(1) {
            header.push(format!("crmse_{l}"));
        }
        let ser = |e: csv::Error| Error::Serialization(e.to_string());
        w.write_record(&header).map_err(ser)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
        for c in &self.cycles {
            let mut row = vec![
                c.cycle.to_string(),
                format!("{}", c.time),
                opt(c.rmse_cum),
                opt(c.crmse_cum.first().copied().flatten()),
                format!("{:e}", c.max_abs_g()),
                c.flow_steps.to_string(),
                format!("{}", c.wall_ms),
            ];
            for v in c.crmse_cum.iter().skip(1) {
                row.push(opt(*v));
            }
            w.write_record(&row).map_err(ser)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(io_err(path))
    }

    /// Writes `<dir>/<name>.json` and `<dir>/<name>.csv`; returns both paths.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let json = dir.join(format!("{}.json", self.metadata.name));
        let csv = dir.join(format!("{}.csv", self.metadata.name));
        self.write_json(&json)?;
        self.write_csv(&csv)?;
        Ok((json, csv))
    }
}
