use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One CSV row per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub mean_loss: f64,
    pub pre_clip_norm_mean: f64,
    pub pre_clip_norm_max: f64,
    pub clipped_fraction: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
    /// Examples whose transcript cannot be aligned to their frames.
    pub skipped_infeasible: u64,
    /// Norms of every aggregation unit before clipping: per-example
    /// gradients under per-example clipping, per-core mean gradients
    /// otherwise.
    pub unit_norms: Vec<f64>,
    /// Per-example gradient norms, recorded only when probing is enabled
    /// or the policy computes them anyway.
    pub example_norms: Vec<f64>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn median_unit_norm(&self) -> Option<f64> {
        median(&self.unit_norms)
    }

    pub fn median_example_norm(&self) -> Option<f64> {
        median(&self.example_norms)
    }

    /// Mean wall time per step, skipping the first `warmup` steps.
    pub fn mean_step_ms(&self, warmup: usize) -> Option<f64> {
        let tail = self.records.get(warmup..)?;
        if tail.is_empty() {
            return None;
        }
        Some(tail.iter().map(|r| r.wall_ms).sum::<f64>() / tail.len() as f64)
    }
}
