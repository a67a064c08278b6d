//! Exposure audit: CER of every canary and holdout utterance, each canary's
//! rank among the holdout, and per-frequency exposure statistics.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctc::{cer, greedy_decode};
use crate::error::{invalid, shape, Result};
use crate::model::{ModelConfig, Network, Params};
use crate::synth::{CanaryDataset, CanaryPlan, RenderConfig, Utterance};
use crate::training::median;

pub const TIE_POLICY: &str = "ties_rank_ahead_of_canary";
pub const RANKED_POPULATION: &str = "holdout_only";

pub const REPORT_FILE: &str = "audit.json";
pub const CANARY_CSV: &str = "exposures.csv";
pub const SUMMARY_CSV: &str = "exposure_summary.csv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub metric: f64,
    pub rank: usize,
    pub holdout_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureResult {
    pub canary_id: String,
    pub frequency: u32,
    pub cer: f64,
    pub rank: usize,
    pub exposure: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub frequency: u32,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single canary.
    pub std: f64,
    pub canaries: Vec<ExposureResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoldoutSummary {
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditMetadata {
    pub checkpoint_sha256: String,
    pub dataset_sha256: Option<String>,
    pub holdout_size: usize,
    pub exposure_upper_bound: f64,
    pub tie_policy: String,
    pub ranked_population: String,
    pub cer_clamped: bool,
    pub clip: Option<String>,
    pub model: ModelConfig,
    pub render: RenderConfig,
    pub plan: CanaryPlan,
    pub vocabulary_size: usize,
    pub vocabulary_seed: u64,
    /// Training settings as recorded by the caller.
    pub training: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub metadata: AuditMetadata,
    pub holdout: HoldoutSummary,
    pub groups: Vec<GroupReport>,
}

/// Provenance stamped into a report; everything else comes from the model
/// and dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditContext {
    pub checkpoint_sha256: String,
    pub dataset_sha256: Option<String>,
    pub clip: Option<String>,
    pub training: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    /// `(id, frequency, cer)` in ascending frequency order.
    pub canaries: Vec<(String, u32, f64)>,
    pub holdout: Vec<f64>,
}

/// CER of each utterance under greedy decoding.
pub fn score_utterances(params: &Params, utterances: &[&Utterance]) -> Result<Vec<f64>> {
    let d = params.config().feature_dim;
    if let Some(u) = utterances.iter().find(|u| u.feature_dim != d) {
        return Err(shape(format!(
            "model expects {d} features, utterance has {}",
            u.feature_dim
        )));
    }
    let net = Network::from_params(params);
    utterances
        .par_iter()
        .map(|u| {
            let (logits, _) = net.forward(u.view())?;
            Ok(cer(&greedy_decode(logits.view()), &u.transcript)?.value)
        })
        .collect()
}

pub fn mean_cer(params: &Params, utterances: &[Utterance]) -> Result<f64> {
    if utterances.is_empty() {
        return Err(invalid("no utterances to score"));
    }
    let refs: Vec<_> = utterances.iter().collect();
    let scores = score_utterances(params, &refs)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub fn score_all(params: &Params, dataset: &CanaryDataset) -> Result<Scores> {
    let canaries: Vec<_> = dataset.canaries().collect();
    let refs: Vec<&Utterance> = canaries.iter().map(|c| c.2).collect();
    let canary_cers = score_utterances(params, &refs)?;
    let holdout_refs: Vec<_> = dataset.holdout.iter().collect();
    let holdout = score_utterances(params, &holdout_refs)?;
    Ok(Scores {
        canaries: canaries
            .into_iter()
            .zip(canary_cers)
            .map(|((id, k, _), c)| (id, k, c))
            .collect(),
        holdout,
    })
}

/// Rank of `canary_cer` among `holdout_cers`, lower CER ranking first.
/// Holdout values equal to the canary's rank ahead of it, and the result is
/// clamped to the holdout size.
pub fn rank_metric(canary_cer: f64, holdout_cers: &[f64]) -> Result<RankResult> {
    if holdout_cers.is_empty() {
        return Err(invalid("holdout set is empty"));
    }
    if canary_cer.is_nan() || holdout_cers.iter().any(|c| c.is_nan()) {
        return Err(invalid("CER values must not be NaN"));
    }
    let n = holdout_cers.len();
    let ahead = holdout_cers.iter().filter(|&&r| r <= canary_cer).count();
    Ok(RankResult {
        metric: canary_cer,
        rank: (ahead + 1).min(n),
        holdout_size: n,
    })
}

pub fn exposure(rank: usize, holdout_size: usize) -> Result<f64> {
    if rank == 0 || rank > holdout_size {
        return Err(invalid(format!(
            "rank {rank} outside [1, {holdout_size}]"
        )));
    }
    Ok((holdout_size as f64).log2() - (rank as f64).log2())
}

pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Builds the report from precomputed scores.
pub fn build_report(scores: &Scores, metadata: AuditMetadata) -> Result<AuditReport> {
    let n = scores.holdout.len();
    let mut groups: Vec<GroupReport> = Vec::new();
    for (id, k, c) in &scores.canaries {
        let r = rank_metric(*c, &scores.holdout)?;
        let result = ExposureResult {
            canary_id: id.clone(),
            frequency: *k,
            cer: *c,
            rank: r.rank,
            exposure: exposure(r.rank, n)?,
        };
        match groups.last_mut() {
            Some(g) if g.frequency == *k => g.canaries.push(result),
            _ => groups.push(GroupReport {
                frequency: *k,
                mean: 0.0,
                std: 0.0,
                canaries: vec![result],
            }),
        }
    }
    for g in &mut groups {
        let e: Vec<f64> = g.canaries.iter().map(|c| c.exposure).collect();
        (g.mean, g.std) = mean_and_std(&e);
    }
    // Summed in sorted order so the summary does not depend on holdout order.
    let mut sorted = scores.holdout.clone();
    sorted.sort_by(f64::total_cmp);
    let holdout = HoldoutSummary {
        min: sorted[0],
        median: median(&sorted).expect("holdout is nonempty"),
        max: sorted[n - 1],
        mean: sorted.iter().sum::<f64>() / n as f64,
    };
    Ok(AuditReport {
        metadata,
        holdout,
        groups,
    })
}

pub fn run_audit(params: &Params, dataset: &CanaryDataset, ctx: &AuditContext) -> Result<AuditReport> {
    if dataset.holdout.is_empty() {
        return Err(invalid("dataset has no holdout utterances"));
    }
    if dataset.groups.is_empty() {
        return Err(invalid("dataset has no canary groups"));
    }
    let scores = score_all(params, dataset)?;
    let n = dataset.holdout.len();
    let metadata = AuditMetadata {
        checkpoint_sha256: ctx.checkpoint_sha256.clone(),
        dataset_sha256: ctx.dataset_sha256.clone(),
        holdout_size: n,
        exposure_upper_bound: (n as f64).log2(),
        tie_policy: TIE_POLICY.into(),
        ranked_population: RANKED_POPULATION.into(),
        cer_clamped: false,
        clip: ctx.clip.clone(),
        model: *params.config(),
        render: dataset.render,
        plan: dataset.plan.clone(),
        vocabulary_size: dataset.vocabulary_size,
        vocabulary_seed: dataset.vocabulary_seed,
        training: ctx.training.clone(),
    };
    build_report(&scores, metadata)
}

#[derive(Serialize)]
struct SummaryRow {
    frequency: u32,
    mean: f64,
    std: f64,
}

impl AuditReport {
    pub fn group(&self, frequency: u32) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.frequency == frequency)
    }

    /// Mean exposure over every canary in the report.
    pub fn overall_mean(&self) -> f64 {
        let all: Vec<f64> = self
            .groups
            .iter()
            .flat_map(|g| g.canaries.iter().map(|c| c.exposure))
            .collect();
        all.iter().sum::<f64>() / all.len() as f64
    }

    pub fn write_canary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for c in self.groups.iter().flat_map(|g| &g.canaries) {
            out.serialize(c)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for g in &self.groups {
            out.serialize(SummaryRow {
                frequency: g.frequency,
                mean: g.mean,
                std: g.std,
            })?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes the JSON report and both CSVs into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        fs::write(dir.join(REPORT_FILE), json)?;
        self.write_canary_csv(fs::File::create(dir.join(CANARY_CSV))?)?;
        self.write_summary_csv(fs::File::create(dir.join(SUMMARY_CSV))?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}
