//! Per-run metrics written next to every CLI output.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ParamReport;
use crate::tasks::EvalResult;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub run_id: String,
    pub config_hash: String,
    /// Mean training loss per epoch (or per tenth of the run for
    /// step-budgeted training).
    pub epoch_losses: Vec<f32>,
    pub accuracy: Option<f64>,
    pub per_type_accuracy: BTreeMap<String, f64>,
    pub param_report: Option<ParamReport>,
    pub wall_clock_seconds: f64,
}

impl MetricsReport {
    pub fn new(run_id: impl Into<String>, config_hash: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            config_hash: config_hash.into(),
            epoch_losses: Vec::new(),
            accuracy: None,
            per_type_accuracy: BTreeMap::new(),
            param_report: None,
            wall_clock_seconds: 0.0,
        }
    }

    pub fn with_eval(mut self, eval: &EvalResult) -> Result<Self> {
        if !(0.0..=1.0).contains(&eval.accuracy) {
            return Err(Error::Format(format!("accuracy {} outside [0, 1]", eval.accuracy)));
        }
        self.accuracy = Some(eval.accuracy);
        self.per_type_accuracy = eval.per_type.iter().map(|(k, &(a, _))| (k.clone(), a)).collect();
        Ok(self)
    }

    /// Equality of everything except wall-clock time.
    pub fn same_results(&self, other: &Self) -> bool {
        self.run_id == other.run_id
            && self.config_hash == other.config_hash
            && bits(&self.epoch_losses) == bits(&other.epoch_losses)
            && self.accuracy.map(f64::to_bits) == other.accuracy.map(f64::to_bits)
            && self.per_type_accuracy == other.per_type_accuracy
            && self.param_report == other.param_report
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Averages `losses` over `n` consecutive, nearly equal chunks.
pub fn chunk_means(losses: &[f32], n: usize) -> Vec<f32> {
    if losses.is_empty() || n == 0 {
        return Vec::new();
    }
    let n = n.min(losses.len());
    (0..n)
        .map(|i| {
            let lo = i * losses.len() / n;
            let hi = (i + 1) * losses.len() / n;
            let s: f64 = losses[lo..hi].iter().map(|&x| x as f64).sum();
            (s / (hi - lo) as f64) as f32
        })
        .collect()
}
