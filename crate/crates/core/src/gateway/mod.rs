//! Boundary to sequence-to-sequence generators and downstream classifiers.
//!
//! Backends are object-safe traits so the runner can pick the in-process
//! [`mock::MockBackend`] or the [`external::ExternalBackend`] adapter at run
//! time. The free functions [`fine_tune`], [`generate`], [`score_target`] and
//! [`train_classifier`] validate arguments before delegating; callers should
//! go through them rather than the trait methods.

pub mod classifier;
pub mod external;
pub mod mock;
pub mod protocol;
pub mod sampling;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::templates::PromptPair;
use crate::text::seeded_rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingParams {
    pub top_k: usize,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            top_k: 40,
            top_p: 1.0,
            max_new_tokens: 64,
            seed: 0,
        }
    }
}

impl DecodingParams {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::InvalidParams("top_k must be at least 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidParams(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidParams("max_new_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneParams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl Default for FineTuneParams {
    /// Generator settings: lr 5e-5, 32 epochs, batch 16, 10% warmup.
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            epochs: 32,
            batch_size: 16,
            warmup_fraction: 0.1,
            seed: 0,
        }
    }
}

impl FineTuneParams {
    /// Downstream classifier settings: as the generator but 20 epochs.
    pub fn classifier() -> Self {
        Self {
            epochs: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParams("learning_rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParams("epochs and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidParams("warmup_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// A pretrained sequence-to-sequence model before fine-tuning.
pub trait Seq2SeqBackend: Send + Sync {
    fn model_id(&self) -> &str;

    fn fine_tune(
        &self,
        pairs: &[PromptPair],
        params: &FineTuneParams,
    ) -> Result<Box<dyn FineTunedModel>>;
}

/// A fine-tuned model. Read-only; may serve concurrent callers.
pub trait FineTunedModel: Send + Sync {
    /// Identifies the trained state. Equal inputs give equal fingerprints on
    /// deterministic backends.
    fn fingerprint(&self) -> &str;

    /// `count` sampled continuations of `prefix`, prefix excluded.
    fn sample(&self, prefix: &str, params: &DecodingParams, count: usize) -> Result<Vec<String>>;

    /// Teacher-forced `log p(target | source)`, summed over target tokens.
    fn log_prob(&self, source: &str, target: &str) -> Result<f64>;
}

pub trait TextClassifier: Send + Sync {
    fn name(&self) -> &str;

    fn train(&self, d: &Dataset, params: &FineTuneParams) -> Result<Box<dyn TrainedClassifier>>;
}

pub trait TrainedClassifier: Send + Sync {
    fn labels(&self) -> &[String];

    /// One label from the training inventory per input text.
    fn predict(&self, texts: &[String]) -> Result<Vec<String>>;
}

pub fn fine_tune(
    backend: &dyn Seq2SeqBackend,
    pairs: &[PromptPair],
    params: &FineTuneParams,
) -> Result<Box<dyn FineTunedModel>> {
    if pairs.is_empty() {
        return Err(Error::InvalidParams("cannot fine-tune on an empty pair sequence".into()));
    }
    params.validate()?;
    backend.fine_tune(pairs, params)
}

pub fn generate(
    model: &dyn FineTunedModel,
    prefix: &str,
    params: &DecodingParams,
    count: usize,
) -> Result<Vec<String>> {
    if count == 0 {
        return Err(Error::InvalidParams("count must be positive".into()));
    }
    if prefix.trim().is_empty() {
        return Err(Error::InvalidParams("prefix must be non-empty".into()));
    }
    params.validate()?;
    let out = model.sample(prefix, params, count)?;
    if out.len() != count {
        return Err(Error::Backend(format!(
            "backend returned {} completions, {} requested",
            out.len(),
            count
        )));
    }
    Ok(out)
}

pub fn score_target(model: &dyn FineTunedModel, source: &str, target: &str) -> Result<f64> {
    if target.split_whitespace().next().is_none() {
        return Err(Error::InvalidParams("target must contain at least one token".into()));
    }
    let score = model.log_prob(source, target)?;
    if score.is_nan() {
        return Err(Error::Backend(format!("NaN score for target {target:?}")));
    }
    Ok(score)
}

pub fn train_classifier(
    classifier: &dyn TextClassifier,
    d: &Dataset,
    params: &FineTuneParams,
) -> Result<Box<dyn TrainedClassifier>> {
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    params.validate()?;
    classifier.train(d, params)
}

/// Index order of the joint training stream for one epoch. Classification and
/// generation pairs are shuffled together, never phased.
pub fn epoch_order(n_pairs: usize, epoch: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_pairs).collect();
    order.shuffle(&mut seeded_rng(seed, &format!("epoch/{epoch}")));
    order
}

/// Per-backend call counters, shared between a backend and its handles.
#[derive(Debug, Default)]
pub struct CallCounters {
    fine_tune: AtomicU64,
    generate: AtomicU64,
    score: AtomicU64,
}

impl CallCounters {
    pub fn fine_tune_calls(&self) -> u64 {
        self.fine_tune.load(Ordering::Relaxed)
    }

    /// Number of `sample` invocations (not the number of texts).
    pub fn generate_calls(&self) -> u64 {
        self.generate.load(Ordering::Relaxed)
    }

    pub fn score_calls(&self) -> u64 {
        self.score.load(Ordering::Relaxed)
    }

    pub(crate) fn bump_fine_tune(&self) {
        self.fine_tune.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn bump_generate(&self) {
        self.generate.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn bump_score(&self) {
        self.score.fetch_add(1, Ordering::Relaxed);
    }
}
