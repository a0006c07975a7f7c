//! Path-length MAPE evaluation, the lookup baseline and experiment runs.

mod experiment;
pub mod lookup;
#[cfg(test)]
mod tests;

pub use experiment::{
    evaluate_artifact, fit_model, prepare_repeat, run_experiment, run_sweep, trip_example, Corpus,
    ExperimentConfig, Method, RepeatData, Sweep, SweepKind,
};
pub use lookup::{BinKey, LookupSample, LookupTable, BIN_WIDTHS};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::DatagenError;
use crate::features::FeatureError;
use crate::model::ModelError;
use crate::network::NetworkError;
use crate::training::{path_mape, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Path-level MAPE in percent; `None` when no path passes the guard.
pub fn mape_percent(pred: &[f64], truth: &[f64]) -> Option<f64> {
    let m = path_mape(pred, truth);
    (m.used > 0).then_some(100.0 * m.value)
}

/// MAPE per path length from `(length, predictions, truths)` buckets.
pub fn evaluate(buckets: &[(usize, Vec<f64>, Vec<f64>)]) -> Vec<(usize, Option<f64>)> {
    buckets
        .iter()
        .map(|(len, p, t)| (*len, mape_percent(p, t)))
        .collect()
}

/// MAPE of one method on one repeat at one path length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatScore {
    pub method: String,
    pub repeat: usize,
    pub path_len: usize,
    pub mape: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub method: String,
    pub repeat: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub path_len: usize,
    pub mape_mean: Option<f64>,
    /// Sample standard deviation; 0 for a single repeat.
    pub mape_sd: Option<f64>,
    pub n_repeats: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scores: Vec<RepeatScore>,
    pub failures: Vec<Failure>,
}

pub fn mean_sd(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, sd))
}

impl EvalReport {
    pub fn partial(&self) -> bool {
        !self.failures.is_empty()
    }

    pub fn push(&mut self, method: &str, repeat: usize, mapes: &[(usize, Option<f64>)]) {
        for (len, m) in mapes {
            self.scores.push(RepeatScore {
                method: method.to_string(),
                repeat,
                path_len: *len,
                mape: *m,
            });
        }
    }

    /// Per-repeat MAPEs of a method at a length, in repeat order.
    pub fn values(&self, method: &str, path_len: usize) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = self
            .scores
            .iter()
            .filter(|s| s.method == method && s.path_len == path_len)
            .filter_map(|s| s.mape.map(|m| (s.repeat, m)))
            .collect();
        v.sort_by_key(|x| x.0);
        v
    }

    /// Aggregated rows, methods in first-seen order and lengths ascending.
    pub fn rows(&self) -> Vec<ReportRow> {
        let mut methods: Vec<&str> = Vec::new();
        let mut lengths: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for s in &self.scores {
            if !methods.contains(&s.method.as_str()) {
                methods.push(&s.method);
            }
            let l = lengths.entry(&s.method).or_default();
            if !l.contains(&s.path_len) {
                l.push(s.path_len);
            }
        }
        let mut out = Vec::new();
        for m in methods {
            let mut ls = lengths[m].clone();
            ls.sort_unstable();
            for len in ls {
                let vals: Vec<f64> = self.values(m, len).into_iter().map(|x| x.1).collect();
                let agg = mean_sd(&vals);
                out.push(ReportRow {
                    method: m.to_string(),
                    path_len: len,
                    mape_mean: agg.map(|a| a.0),
                    mape_sd: agg.map(|a| a.1),
                    n_repeats: vals.len(),
                });
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:?}"));
        let mut out = String::from("method,path_len,mape_mean,mape_sd,n_repeats\n");
        for r in self.rows() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.method,
                r.path_len,
                fmt(r.mape_mean),
                fmt(r.mape_sd),
                r.n_repeats
            );
        }
        out
    }

    /// Writes `report.csv` and `report.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), EvalError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), self.to_csv())?;
        let json = serde_json::json!({
            "partial": self.partial(),
            "scores": self.scores,
            "failures": self.failures,
        });
        let text = serde_json::to_string_pretty(&json).map_err(std::io::Error::from)?;
        fs::write(dir.join("report.json"), text + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, EvalError> {
        let text = fs::read_to_string(dir.join("report.json"))?;
        #[derive(Deserialize)]
        struct Stored {
            scores: Vec<RepeatScore>,
            failures: Vec<Failure>,
        }
        let s: Stored = serde_json::from_str(&text).map_err(|e| EvalError::Data(format!("report.json: {e}")))?;
        Ok(Self {
            scores: s.scores,
            failures: s.failures,
        })
    }
}
