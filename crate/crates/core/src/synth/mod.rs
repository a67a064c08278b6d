//! Synthetic utterances.
//!
//! A transcript is rendered into a `T x d` feature matrix by concatenating one
//! block of frames per character. Each character owns a fixed `f x d`
//! prototype trajectory; at speed `s` the character occupies
//! `max(1, round(f / s))` frames and frame `j` copies trajectory row
//! `floor(j * f / n)`. Speeding up an utterance therefore subsamples the
//! trajectory: the sped-up frames carry different within-character content
//! than anything a normal-speed utterance presents in the same context.

mod container;

use std::collections::{BTreeMap, HashSet};

use ndarray::ArrayView2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alphabet;
use crate::error::{invalid, Error, Result};
use crate::seed;

pub use container::{
    load_dataset, read_container, save_dataset, write_container, ContainerRecord, DatasetManifest,
    RecordEntry, RecordRole, CONTAINER_FILE, CONTAINER_MAGIC, CONTAINER_VERSION, MANIFEST_FILE,
};

const STREAM_VOCAB: u64 = 0x766f_6361;
const STREAM_PROTOTYPE: u64 = 0x7072_6f74;
const STREAM_CANARY: u64 = 1;
const STREAM_HOLDOUT: u64 = 2;
const STREAM_BACKGROUND: u64 = 3;
const STREAM_VALIDATION: u64 = 4;
const STREAM_RETRY: u64 = 5;
const STREAM_NOISE: u64 = 6;

const MIN_WORD_LEN: usize = 3;
const MAX_WORD_LEN: usize = 8;
const TRANSCRIPT_RETRIES: u64 = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    seed: u64,
}

impl Vocabulary {
    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Generates `size` distinct pseudo-words of 3 to 8 lowercase letters.
///
/// No word contains the same letter twice in a row. That keeps every
/// transcript alignable under CTC even when each character is compressed to
/// a single frame.
pub fn build_vocabulary(size: usize, seed: u64) -> Result<Vocabulary> {
    if size == 0 {
        return Err(invalid("vocabulary size must be at least 1"));
    }
    let mut rng = seed::rng(seed::derive(seed, STREAM_VOCAB, size as u64));
    let mut seen = HashSet::with_capacity(size);
    let mut words = Vec::with_capacity(size);
    let budget = size.saturating_mul(64).max(1024);
    let mut attempts = 0usize;
    while words.len() < size {
        attempts += 1;
        if attempts > budget {
            return Err(Error::GenerationFailure(format!(
                "could not draw {size} distinct words"
            )));
        }
        let len = rng.random_range(MIN_WORD_LEN..=MAX_WORD_LEN);
        let mut word = String::with_capacity(len);
        let mut prev = None;
        while word.len() < len {
            let letter = rng.random_range(0..26usize);
            if prev == Some(letter) {
                continue;
            }
            prev = Some(letter);
            word.push(alphabet::CHARS[letter] as char);
        }
        if seen.insert(word.clone()) {
            words.push(word);
        }
    }
    Ok(Vocabulary { words, seed })
}

/// Draws `n_words` words uniformly with replacement and joins them with
/// single spaces.
pub fn sample_transcript(vocab: &Vocabulary, n_words: usize, seed: u64) -> Result<String> {
    if vocab.is_empty() {
        return Err(invalid("vocabulary is empty"));
    }
    if n_words == 0 {
        return Err(invalid("transcripts need at least one word"));
    }
    let mut rng = seed::rng(seed);
    let mut out = String::new();
    for i in 0..n_words {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&vocab.words[rng.random_range(0..vocab.len())]);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub feature_dim: usize,
    pub frames_per_char: usize,
    pub noise_sigma: f64,
    pub render_seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            frames_per_char: 4,
            noise_sigma: 1.0,
            render_seed: 1234,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(invalid("feature_dim must be at least 1"));
        }
        if self.frames_per_char == 0 {
            return Err(invalid("frames_per_char must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid("noise_sigma must be finite and non-negative"));
        }
        Ok(())
    }

    /// Frames a single character occupies at `speed`.
    pub fn frames_for(&self, speed: f64) -> usize {
        ((self.frames_per_char as f64 / speed).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    /// Row-major `frames x feature_dim`.
    pub features: Vec<f32>,
    pub frames: usize,
    pub feature_dim: usize,
    pub transcript: String,
    pub speed: f64,
    pub source_seed: u64,
}

impl Utterance {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.features[t * self.feature_dim..(t + 1) * self.feature_dim]
    }

    /// Features as a `frames x feature_dim` matrix.
    pub fn view(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.frames, self.feature_dim), &self.features)
            .expect("features hold frames * feature_dim values")
    }
}

/// Per-character prototype trajectories for one [`RenderConfig`].
#[derive(Debug, Clone)]
pub struct Renderer {
    cfg: RenderConfig,
    // alphabet::SIZE x frames_per_char x feature_dim
    prototypes: Vec<f64>,
}

impl Renderer {
    pub fn new(cfg: RenderConfig) -> Result<Self> {
        cfg.validate()?;
        let block = cfg.frames_per_char * cfg.feature_dim;
        let mut prototypes = Vec::with_capacity(alphabet::SIZE * block);
        for c in 0..alphabet::SIZE {
            let mut rng = seed::rng(seed::derive(cfg.render_seed, STREAM_PROTOTYPE, c as u64));
            prototypes.extend((0..block).map(|_| rng.sample::<f64, _>(StandardNormal)));
        }
        Ok(Self { cfg, prototypes })
    }

    pub fn config(&self) -> &RenderConfig {
        &self.cfg
    }

    /// Row `row` of character `c`'s trajectory.
    pub fn prototype_row(&self, c: usize, row: usize) -> &[f64] {
        let d = self.cfg.feature_dim;
        let start = (c * self.cfg.frames_per_char + row) * d;
        &self.prototypes[start..start + d]
    }

    pub fn render(&self, transcript: &str, speed: f64, noise_seed: u64) -> Result<Utterance> {
        if transcript.is_empty() {
            return Err(invalid("transcript must be nonempty"));
        }
        if !(speed > 0.0 && speed.is_finite()) {
            return Err(invalid(format!("speed must be positive, got {speed}")));
        }
        let symbols = transcript
            .chars()
            .map(|c| {
                alphabet::index_of(c)
                    .ok_or_else(|| invalid(format!("character {c:?} is outside the alphabet")))
            })
            .collect::<Result<Vec<_>>>()?;

        let d = self.cfg.feature_dim;
        let f = self.cfg.frames_per_char;
        let per_char = self.cfg.frames_for(speed);
        let frames = per_char * symbols.len();
        let mut features = Vec::with_capacity(frames * d);
        let mut rng = seed::rng(noise_seed);
        let sigma = self.cfg.noise_sigma;
        for &c in &symbols {
            for j in 0..per_char {
                let row = self.prototype_row(c, j * f / per_char);
                for &v in row {
                    let noise = if sigma > 0.0 {
                        sigma * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    };
                    features.push((v + noise) as f32);
                }
            }
        }
        Ok(Utterance {
            features,
            frames,
            feature_dim: d,
            transcript: transcript.to_owned(),
            speed,
            source_seed: noise_seed,
        })
    }
}

pub fn render_utterance(
    transcript: &str,
    cfg: &RenderConfig,
    speed: f64,
    noise_seed: u64,
) -> Result<Utterance> {
    Renderer::new(*cfg)?.render(transcript, speed, noise_seed)
}

/// What to put in a [`CanaryDataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CanaryPlan {
    pub frequencies: Vec<u32>,
    pub canaries_per_freq: usize,
    pub holdout_size: usize,
    pub canary_speed: f64,
    pub canary_words: usize,
    pub background_size: usize,
    pub background_words: usize,
    /// Normal-speed utterances kept out of training, for measuring how well
    /// the model transcribes ordinary data.
    pub validation_size: usize,
    pub master_seed: u64,
}

impl Default for CanaryPlan {
    fn default() -> Self {
        Self {
            frequencies: vec![1, 2, 4, 8, 16],
            canaries_per_freq: 20,
            holdout_size: 2000,
            canary_speed: 4.0,
            canary_words: 7,
            background_size: 10_000,
            background_words: 3,
            validation_size: 200,
            master_seed: 2024,
        }
    }
}

impl CanaryPlan {
    pub fn validate(&self) -> Result<()> {
        if self.frequencies.is_empty() {
            return Err(invalid("at least one canary frequency is required"));
        }
        if self.frequencies.contains(&0) {
            return Err(invalid("canary frequencies must be positive"));
        }
        let distinct: HashSet<_> = self.frequencies.iter().collect();
        if distinct.len() != self.frequencies.len() {
            return Err(invalid("canary frequencies must be distinct"));
        }
        for (name, v) in [
            ("canaries_per_freq", self.canaries_per_freq),
            ("holdout_size", self.holdout_size),
            ("canary_words", self.canary_words),
            ("background_size", self.background_size),
            ("background_words", self.background_words),
        ] {
            if v == 0 {
                return Err(invalid(format!("{name} must be at least 1")));
            }
        }
        if !(self.canary_speed > 0.0 && self.canary_speed.is_finite()) {
            return Err(invalid("canary_speed must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanaryDataset {
    pub render: RenderConfig,
    pub plan: CanaryPlan,
    pub vocabulary_size: usize,
    pub vocabulary_seed: u64,
    /// Insertion frequency -> canaries inserted that many times per epoch.
    pub groups: BTreeMap<u32, Vec<Utterance>>,
    pub holdout: Vec<Utterance>,
    pub background: Vec<Utterance>,
    pub validation: Vec<Utterance>,
}

pub fn canary_id(frequency: u32, index: usize) -> String {
    format!("f{frequency:02}-c{index:03}")
}

impl CanaryDataset {
    pub fn canary_count(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    /// `(id, frequency, utterance)` in ascending frequency order.
    pub fn canaries(&self) -> impl Iterator<Item = (String, u32, &Utterance)> {
        self.groups.iter().flat_map(|(&k, list)| {
            list.iter()
                .enumerate()
                .map(move |(i, u)| (canary_id(k, i), k, u))
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.render.feature_dim
    }
}

struct Draw {
    transcript: String,
    noise_seed: u64,
}

fn draw_unique(
    vocab: &Vocabulary,
    n_words: usize,
    master: u64,
    stream: u64,
    count: usize,
    taken: &mut HashSet<String>,
    insert: bool,
    avoid: &HashSet<String>,
) -> Result<Vec<Draw>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let item = seed::derive(master, stream, i as u64);
        let mut found = None;
        for attempt in 0..TRANSCRIPT_RETRIES {
            let t = sample_transcript(vocab, n_words, seed::derive(item, STREAM_RETRY, attempt))?;
            if !taken.contains(&t) && !avoid.contains(&t) {
                found = Some(t);
                break;
            }
        }
        let transcript = found.ok_or_else(|| {
            Error::GenerationFailure(format!(
                "no fresh transcript after {TRANSCRIPT_RETRIES} draws; the vocabulary is too small for the requested set"
            ))
        })?;
        if insert {
            taken.insert(transcript.clone());
        }
        out.push(Draw {
            transcript,
            noise_seed: seed::derive(item, STREAM_NOISE, 0),
        });
    }
    Ok(out)
}

fn render_all(renderer: &Renderer, draws: &[Draw], speed: f64) -> Result<Vec<Utterance>> {
    draws
        .par_iter()
        .map(|d| renderer.render(&d.transcript, speed, d.noise_seed))
        .collect()
}

/// Builds canary groups, the same-distribution holdout, normal-speed
/// background training data and a normal-speed validation set.
///
/// Canary and holdout transcripts are pairwise distinct; background and
/// validation transcripts never coincide with any of them, and validation
/// never coincides with background.
pub fn make_canary_dataset(
    cfg: &RenderConfig,
    vocab: &Vocabulary,
    plan: &CanaryPlan,
) -> Result<CanaryDataset> {
    plan.validate()?;
    let renderer = Renderer::new(*cfg)?;
    let master = plan.master_seed;

    let mut frequencies = plan.frequencies.clone();
    frequencies.sort_unstable();

    let none = HashSet::new();
    let mut secret = HashSet::new();
    let canary_draws = draw_unique(
        vocab,
        plan.canary_words,
        master,
        STREAM_CANARY,
        frequencies.len() * plan.canaries_per_freq,
        &mut secret,
        true,
        &none,
    )?;
    let holdout_draws = draw_unique(
        vocab,
        plan.canary_words,
        master,
        STREAM_HOLDOUT,
        plan.holdout_size,
        &mut secret,
        true,
        &none,
    )?;
    let mut seen_background = HashSet::new();
    let background_draws = draw_unique(
        vocab,
        plan.background_words,
        master,
        STREAM_BACKGROUND,
        plan.background_size,
        &mut seen_background,
        false,
        &secret,
    )?;
    seen_background.extend(background_draws.iter().map(|d| d.transcript.clone()));
    let mut avoid = secret.clone();
    avoid.extend(seen_background);
    let validation_draws = draw_unique(
        vocab,
        plan.background_words,
        master,
        STREAM_VALIDATION,
        plan.validation_size,
        &mut HashSet::new(),
        false,
        &avoid,
    )?;

    let canaries = render_all(&renderer, &canary_draws, plan.canary_speed)?;
    let mut groups = BTreeMap::new();
    let mut it = canaries.into_iter();
    for &k in &frequencies {
        groups.insert(k, it.by_ref().take(plan.canaries_per_freq).collect());
    }

    Ok(CanaryDataset {
        render: *cfg,
        plan: plan.clone(),
        vocabulary_size: vocab.len(),
        vocabulary_seed: vocab.seed(),
        groups,
        holdout: render_all(&renderer, &holdout_draws, plan.canary_speed)?,
        background: render_all(&renderer, &background_draws, 1.0)?,
        validation: render_all(&renderer, &validation_draws, 1.0)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(f: usize) -> RenderConfig {
        RenderConfig {
            feature_dim: 3,
            frames_per_char: f,
            noise_sigma: 0.0,
            render_seed: 11,
        }
    }

    #[test]
    fn vocabulary_is_deterministic_and_distinct() {
        let a = build_vocabulary(1000, 7).unwrap();
        let b = build_vocabulary(1000, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1000);
        let big = build_vocabulary(10_000, 1).unwrap();
        let set: HashSet<_> = big.words().iter().collect();
        assert_eq!(set.len(), 10_000);
        for w in big.words() {
            assert!((3..=8).contains(&w.len()), "{w}");
            assert!(w.chars().all(alphabet::is_letter));
            assert!(w.as_bytes().windows(2).all(|p| p[0] != p[1]));
        }
    }

    #[test]
    fn empty_vocabulary_rejected() {
        assert!(matches!(build_vocabulary(0, 7), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn transcripts_have_requested_word_count() {
        let v = build_vocabulary(50, 3).unwrap();
        let t = sample_transcript(&v, 7, 42).unwrap();
        assert_eq!(t.matches(' ').count(), 6);
        assert_eq!(t, sample_transcript(&v, 7, 42).unwrap());
        let one = sample_transcript(&v, 1, 9).unwrap();
        assert!(!one.contains(' '));
        assert!(v.words().contains(&one));
    }

    #[test]
    fn render_lengths() {
        let cfg = quiet(4);
        assert_eq!(render_utterance("ab", &cfg, 1.0, 0).unwrap().frames, 8);
        assert_eq!(render_utterance("ab", &cfg, 4.0, 0).unwrap().frames, 2);
        assert_eq!(render_utterance("ab", &cfg, 1.5, 0).unwrap().frames, 6);
        assert!(matches!(
            render_utterance("ab", &cfg, 0.0, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            render_utterance("ab", &cfg, -1.0, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(render_utterance("", &cfg, 1.0, 0).is_err());
        assert!(render_utterance("aB", &cfg, 1.0, 0).is_err());
    }

    #[test]
    fn sped_up_frames_are_not_a_contiguous_block_of_normal_frames() {
        let cfg = quiet(4);
        let slow = render_utterance("ab", &cfg, 1.0, 5).unwrap();
        let fast = render_utterance("ab", &cfg, 4.0, 5).unwrap();
        let d = cfg.feature_dim;
        let block = fast.frames * d;
        for start in 0..=(slow.frames - fast.frames) {
            assert_ne!(&slow.features[start * d..start * d + block], &fast.features[..]);
        }
    }

    #[test]
    fn dataset_counts_and_disjointness() {
        let v = build_vocabulary(200, 1).unwrap();
        let plan = CanaryPlan {
            canaries_per_freq: 20,
            holdout_size: 300,
            background_size: 40,
            validation_size: 10,
            ..CanaryPlan::default()
        };
        let ds = make_canary_dataset(&quiet(4), &v, &plan).unwrap();
        assert_eq!(ds.canary_count(), 100);
        assert_eq!(ds.groups.len(), 5);
        assert_eq!(ds.holdout.len(), 300);
        let mut all = HashSet::new();
        for (_, _, u) in ds.canaries() {
            assert!(all.insert(u.transcript.clone()));
            assert_eq!(u.speed, 4.0);
        }
        for u in &ds.holdout {
            assert!(all.insert(u.transcript.clone()));
            assert_eq!(u.speed, 4.0);
        }
        for u in ds.background.iter().chain(&ds.validation) {
            assert!(!all.contains(&u.transcript));
            assert_eq!(u.speed, 1.0);
        }
    }

    #[test]
    fn exhausted_vocabulary_reports_generation_failure() {
        let v = build_vocabulary(2, 1).unwrap();
        let plan = CanaryPlan {
            canary_words: 1,
            canaries_per_freq: 5,
            holdout_size: 5,
            background_size: 1,
            ..CanaryPlan::default()
        };
        let err = make_canary_dataset(&quiet(2), &v, &plan).unwrap_err();
        assert!(matches!(err, Error::GenerationFailure(_)), "{err}");
    }
}
