//! SGD-with-momentum training inside a simulated data-parallel layout.
//!
//! Each step's batch is spread round-robin over `batch_size / per_core_batch`
//! simulated cores. A core runs its examples through the network as one
//! stacked batch. What happens next depends on the [`ClipMode`]:
//!
//! * `Baseline`: the core reduces its examples into one summed gradient (a
//!   single product per tensor over all stacked frames), divides by the core
//!   batch, and the core means are averaged across cores.
//! * `PerCore`: as baseline, but each core mean is clipped before the
//!   cross-core average.
//! * `PerExample`: every example's gradient is materialized on its own,
//!   clipped, and the clipped gradients are averaged.
//!
//! Cores are processed on the rayon pool; all reductions happen afterwards
//! in a fixed order, so results are identical for any thread count.

mod aggregate;
mod log;

use std::time::Instant;

use ndarray::{concatenate, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_loss, LabelSequence};
use crate::error::{invalid, Result};
use crate::model::{init_params, Gradient, ModelConfig, Network, Params};
use crate::seed;
use crate::synth::{CanaryDataset, Utterance};

pub use aggregate::{
    aggregate_baseline, aggregate_per_core, aggregate_per_example, clip_in_place, clip_to_bound,
    CoreLayout, ExampleGradient,
};
pub use log::{median, StepRecord, TrainingLog};

const STREAM_EPOCH: u64 = 0x6570_6f63;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClipMode {
    Baseline,
    PerExample {
        bound: f64,
    },
    PerCore {
        bound: f64,
        num_cores: usize,
        per_core_batch: usize,
    },
}

impl ClipMode {
    pub fn name(&self) -> &'static str {
        match self {
            ClipMode::Baseline => "baseline",
            ClipMode::PerExample { .. } => "per-example",
            ClipMode::PerCore { .. } => "per-core",
        }
    }

    pub fn bound(&self) -> Option<f64> {
        match *self {
            ClipMode::Baseline => None,
            ClipMode::PerExample { bound } | ClipMode::PerCore { bound, .. } => Some(bound),
        }
    }
}

/// How canaries enter the training stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanaryMixing {
    /// Each epoch holds the background set plus `k` copies of every
    /// frequency-`k` canary, shuffled together.
    #[default]
    EpochReplication,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip: ClipMode,
    pub shuffle_seed: u64,
    pub canary_mixing: CanaryMixing,
    /// Examples per simulated core, for every clip mode.
    pub per_core_batch: usize,
    /// Also compute per-example gradient norms when the policy itself does
    /// not need them. Costs extra time; used to calibrate clip bounds.
    pub probe_example_norms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 1500,
            learning_rate: 0.003,
            momentum: 0.9,
            clip: ClipMode::Baseline,
            shuffle_seed: 99,
            canary_mixing: CanaryMixing::EpochReplication,
            per_core_batch: 4,
            probe_example_norms: false,
        }
    }
}

impl TrainConfig {
    pub fn layout(&self) -> CoreLayout {
        CoreLayout {
            num_cores: self.batch_size / self.per_core_batch.max(1),
            per_core_batch: self.per_core_batch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 || self.per_core_batch == 0 {
            return Err(invalid("batch_size, steps and per_core_batch must be positive"));
        }
        if self.batch_size % self.per_core_batch != 0 {
            return Err(invalid(format!(
                "batch_size {} is not a multiple of per_core_batch {}",
                self.batch_size, self.per_core_batch
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        match self.clip {
            ClipMode::Baseline => {}
            ClipMode::PerExample { bound } => {
                if !(bound > 0.0) {
                    return Err(invalid("clip bound must be positive"));
                }
            }
            ClipMode::PerCore {
                bound,
                num_cores,
                per_core_batch,
            } => {
                if !(bound > 0.0) {
                    return Err(invalid("clip bound must be positive"));
                }
                if per_core_batch != self.per_core_batch
                    || num_cores * per_core_batch != self.batch_size
                {
                    return Err(invalid(format!(
                        "per-core layout {num_cores}x{per_core_batch} does not match batch {} with {} per core",
                        self.batch_size, self.per_core_batch
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Params,
    pub velocity: Gradient,
    pub step: u64,
    /// Seed of the shuffle currently being consumed.
    pub rng_state: u64,
    pub loss_history: Vec<(u64, f64)>,
}

struct Item<'a> {
    utterance: &'a Utterance,
    label: LabelSequence,
}

/// Unique training utterances plus the unshuffled epoch as indices into
/// them.
fn training_items(dataset: &CanaryDataset) -> Result<(Vec<Item<'_>>, Vec<usize>)> {
    let mut items = Vec::new();
    let mut epoch = Vec::new();
    for u in &dataset.background {
        epoch.push(items.len());
        items.push(Item {
            utterance: u,
            label: LabelSequence::from_text(&u.transcript)?,
        });
    }
    for (_, k, u) in dataset.canaries() {
        let idx = items.len();
        items.push(Item {
            utterance: u,
            label: LabelSequence::from_text(&u.transcript)?,
        });
        epoch.extend(std::iter::repeat_n(idx, k as usize));
    }
    Ok((items, epoch))
}

/// Endless stream of epochs, each an independent seeded shuffle.
struct Sampler {
    base: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
    epoch_seed: u64,
}

impl Sampler {
    fn new(base: Vec<usize>, seed: u64) -> Self {
        Self {
            base,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            seed,
            epoch_seed: 0,
        }
    }

    fn next(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.epoch_seed = seed::derive(self.seed, STREAM_EPOCH, self.epoch);
            self.order = self.base.clone();
            self.order.shuffle(&mut seed::rng(self.epoch_seed));
            self.cursor = 0;
            self.epoch += 1;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

struct CoreOutput {
    /// Core mean gradient, or per-example gradients as `(position, grad)`.
    unit: CoreUnit,
    losses: Vec<f64>,
    infeasible: u64,
    example_norms: Vec<f64>,
}

enum CoreUnit {
    Mean(Gradient),
    Examples(Vec<ExampleGradient>),
}

fn run_core(
    net: &Network,
    items: &[Item<'_>],
    batch: &[usize],
    layout: CoreLayout,
    core: usize,
    per_example: bool,
    probe: bool,
) -> Result<CoreOutput> {
    let positions: Vec<usize> = layout.members(core).collect();
    let inputs: Vec<_> = positions
        .iter()
        .map(|&p| items[batch[p]].utterance.view())
        .collect();
    let (logits, tape) = net.forward_batch(&inputs)?;
    let segments = tape.segments().to_vec();

    let mut losses = Vec::with_capacity(positions.len());
    let mut infeasible = 0;
    let mut dlogits = Vec::with_capacity(positions.len());
    for (&p, seg) in positions.iter().zip(&segments) {
        let out = ctc_loss(
            logits.slice(ndarray::s![seg.clone(), ..]),
            &items[batch[p]].label,
        )?;
        if out.feasible {
            losses.push(out.loss);
        } else {
            infeasible += 1;
        }
        dlogits.push(out.dlogits);
    }
    let views: Vec<_> = dlogits.iter().map(|d| d.view()).collect();
    let stacked = concatenate(Axis(0), &views).expect("matching column counts");
    let signals = net.backward_signals(&tape, stacked.view())?;

    let per_example_grads = |signals| -> Vec<ExampleGradient> {
        positions
            .iter()
            .zip(&segments)
            .map(|(&p, seg)| ExampleGradient::new(p, net.weight_gradient(&tape, signals, seg.clone())))
            .collect()
    };

    let (unit, example_norms) = if per_example {
        let grads = per_example_grads(&signals);
        let norms = grads.iter().map(|g| g.grad.l2_norm()).collect();
        (CoreUnit::Examples(grads), norms)
    } else {
        let mut sum = net.weight_gradient(&tape, &signals, 0..tape.frames());
        let b = positions.len() as f64;
        for v in sum.as_mut_slice() {
            *v /= b;
        }
        let norms = if probe {
            per_example_grads(&signals)
                .iter()
                .map(|g| g.grad.l2_norm())
                .collect()
        } else {
            Vec::new()
        };
        (CoreUnit::Mean(sum), norms)
    };
    Ok(CoreOutput {
        unit,
        losses,
        infeasible,
        example_norms,
    })
}

/// Trains from a fresh initialization of `model_cfg`.
pub fn train(
    dataset: &CanaryDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(TrainState, TrainingLog)> {
    train_with(dataset, model_cfg, cfg, |_| Ok(()))
}

/// [`train`], calling `observer` after every update.
pub fn train_with<F>(
    dataset: &CanaryDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<(TrainState, TrainingLog)>
where
    F: FnMut(&TrainState) -> Result<()>,
{
    cfg.validate()?;
    if model_cfg.feature_dim != dataset.feature_dim() {
        return Err(crate::error::shape(format!(
            "model expects {} features, dataset has {}",
            model_cfg.feature_dim,
            dataset.feature_dim()
        )));
    }
    let (items, epoch) = training_items(dataset)?;
    if epoch.is_empty() {
        return Err(invalid("dataset has no training examples"));
    }
    let seen = cfg.steps as u128 * cfg.batch_size as u128;
    if seen < epoch.len() as u128 {
        ::log::warn!(
            "{} steps of {} cover less than one epoch of {} examples; canary counts will be inexact",
            cfg.steps,
            cfg.batch_size,
            epoch.len()
        );
    }

    let params = init_params(model_cfg)?;
    let mut state = TrainState {
        velocity: Gradient::zeros(params.len()),
        params,
        step: 0,
        rng_state: 0,
        loss_history: Vec::with_capacity(cfg.steps as usize),
    };
    let mut log = TrainingLog::default();
    let mut sampler = Sampler::new(epoch, cfg.shuffle_seed);
    let layout = cfg.layout();
    let per_example = matches!(cfg.clip, ClipMode::PerExample { .. });

    for _ in 0..cfg.steps {
        let started = Instant::now();
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| sampler.next()).collect();
        let net = Network::from_params(&state.params);

        let cores = (0..layout.num_cores)
            .into_par_iter()
            .map(|core| {
                run_core(
                    &net,
                    &items,
                    &batch,
                    layout,
                    core,
                    per_example,
                    cfg.probe_example_norms,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let mut losses = Vec::new();
        let mut unit_norms = Vec::new();
        let mut clipped = 0usize;
        let update = match cfg.clip {
            ClipMode::Baseline | ClipMode::PerCore { .. } => {
                let bound = cfg.clip.bound().unwrap_or(f64::INFINITY);
                let mut means = Vec::with_capacity(cores.len());
                for c in &cores {
                    let CoreUnit::Mean(g) = &c.unit else { unreachable!() };
                    let mut g = g.clone();
                    let (norm, was_clipped) = clip_in_place(&mut g, bound)?;
                    unit_norms.push(norm);
                    clipped += usize::from(was_clipped);
                    means.push(g);
                }
                let refs: Vec<&Gradient> = means.iter().collect();
                aggregate::mean_of(&refs)
            }
            ClipMode::PerExample { bound } => {
                let mut all = Vec::with_capacity(cfg.batch_size);
                for c in &cores {
                    let CoreUnit::Examples(list) = &c.unit else { unreachable!() };
                    all.extend(list.iter().cloned());
                }
                for g in &all {
                    let norm = g.grad.l2_norm();
                    unit_norms.push(norm);
                    clipped += usize::from(norm > bound);
                }
                aggregate_per_example(&all, bound)?
            }
        };
        for c in &cores {
            losses.extend(&c.losses);
            log.skipped_infeasible += c.infeasible;
            log.example_norms.extend(&c.example_norms);
        }

        // v <- momentum * v + g;  p <- p - lr * v
        for (v, g) in state
            .velocity
            .as_mut_slice()
            .iter_mut()
            .zip(update.as_slice())
        {
            *v = cfg.momentum * *v + g;
        }
        state.params.apply_update(&state.velocity, cfg.learning_rate)?;
        state.step += 1;
        state.rng_state = sampler.epoch_seed;

        let mean_loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        state.loss_history.push((state.step, mean_loss));
        let norm_mean = unit_norms.iter().sum::<f64>() / unit_norms.len() as f64;
        let norm_max = unit_norms.iter().copied().fold(0.0, f64::max);
        log.records.push(StepRecord {
            step: state.step,
            mean_loss,
            pre_clip_norm_mean: norm_mean,
            pre_clip_norm_max: norm_max,
            clipped_fraction: clipped as f64 / unit_norms.len() as f64,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        log.unit_norms.extend(unit_norms);
        observer(&state)?;
    }
    Ok((state, log))
}
