//! Deterministic in-process backends for tests and desk-scale runs.
//!
//! [`MockBackend`] "fine-tunes" by memorizing the training pairs and decodes
//! with a source-conditioned bigram model: every training pair votes for its
//! target bigrams with a weight that grows with the token overlap between its
//! source and the query source. Each step is a proper distribution over the
//! target vocabulary plus end-of-sequence and an unknown bucket, so scores are
//! true log-probabilities and sampling goes through the same top-k/top-p
//! filter a real decoder would use.
//!
//! [`ScriptedBackend`] replays fixed continuations and fixed per-token
//! log-probabilities for contract tests.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::sampling::{candidate_set, sample_from};
use super::{epoch_order, CallCounters, DecodingParams, FineTuneParams, FineTunedModel, Seq2SeqBackend};
use crate::templates::PromptPair;
use crate::text::{seeded_rng, sha256_hex, tokenize};
use crate::{Error, Result};

const EOS: u32 = 0;
const UNK: u32 = 1;
const FIRST_WORD: u32 = 2;

#[derive(Debug, Clone)]
pub struct MockBackend {
    model_id: String,
    /// Scale applied to source overlap before exponentiation.
    pub sharpness: f64,
    /// Mass spread uniformly over all outcomes at every step.
    pub smoothing: f64,
    counters: Arc<CallCounters>,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self {
            model_id: "mock-seq2seq".into(),
            sharpness: 12.0,
            smoothing: 0.01,
            counters: Arc::default(),
        }
    }
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn counters(&self) -> Arc<CallCounters> {
        Arc::clone(&self.counters)
    }

    /// Fine-tunes and returns the concrete model, which exposes candidate sets.
    pub fn fit(&self, pairs: &[PromptPair], params: &FineTuneParams) -> Result<MockModel> {
        if pairs.is_empty() {
            return Err(Error::InvalidParams("cannot fine-tune on an empty pair sequence".into()));
        }
        self.counters.bump_fine_tune();

        let vocab: Vec<String> = pairs
            .iter()
            .flat_map(|p| tokenize(&p.target))
            .map(str::to_string)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: HashMap<String, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32 + FIRST_WORD))
            .collect();

        let trained = pairs
            .iter()
            .map(|p| {
                let source: BTreeSet<String> =
                    tokenize(&p.source).into_iter().map(str::to_string).collect();
                let ids: Vec<u32> = tokenize(&p.target).iter().map(|w| index[*w]).collect();
                TrainedPair::new(source, &ids)
            })
            .collect();

        // The fingerprint covers the joint training stream of every epoch.
        let mut material = serde_json::to_vec(&(self.model_id.as_str(), params, self.sharpness, self.smoothing))?;
        for epoch in 0..params.epochs {
            for i in epoch_order(pairs.len(), epoch, params.seed) {
                material.extend_from_slice(&serde_json::to_vec(&pairs[i])?);
            }
        }

        Ok(MockModel {
            fingerprint: sha256_hex(&material),
            vocab,
            index,
            pairs: trained,
            sharpness: self.sharpness,
            smoothing: self.smoothing,
            counters: Arc::clone(&self.counters),
        })
    }
}

impl Seq2SeqBackend for MockBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn fine_tune(
        &self,
        pairs: &[PromptPair],
        params: &FineTuneParams,
    ) -> Result<Box<dyn FineTunedModel>> {
        Ok(Box::new(self.fit(pairs, params)?))
    }
}

#[derive(Debug)]
struct TrainedPair {
    source: BTreeSet<String>,
    /// prev -> [(next, count)]; `EOS` as prev marks the start of the target.
    transitions: HashMap<u32, Vec<(u32, f64)>>,
    /// next -> count over all transitions.
    unigrams: HashMap<u32, f64>,
    n_transitions: f64,
}

impl TrainedPair {
    fn new(source: BTreeSet<String>, ids: &[u32]) -> Self {
        let mut transitions: HashMap<u32, Vec<(u32, f64)>> = HashMap::new();
        let mut unigrams: HashMap<u32, f64> = HashMap::new();
        let mut prev = EOS;
        for &next in ids.iter().chain(std::iter::once(&EOS)) {
            let row = transitions.entry(prev).or_default();
            match row.iter_mut().find(|(n, _)| *n == next) {
                Some(entry) => entry.1 += 1.0,
                None => row.push((next, 1.0)),
            }
            *unigrams.entry(next).or_insert(0.0) += 1.0;
            prev = next;
        }
        Self {
            source,
            transitions,
            unigrams,
            n_transitions: ids.len() as f64 + 1.0,
        }
    }
}

#[derive(Debug)]
pub struct MockModel {
    fingerprint: String,
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    pairs: Vec<TrainedPair>,
    sharpness: f64,
    smoothing: f64,
    counters: Arc<CallCounters>,
}

impl MockModel {
    /// Number of outcomes per step: vocabulary, end-of-sequence and unknown.
    fn n_outcomes(&self) -> usize {
        self.vocab.len() + FIRST_WORD as usize
    }

    fn pair_weights(&self, source: &str) -> Vec<f64> {
        let query: BTreeSet<&str> = tokenize(source).into_iter().collect();
        let overlaps: Vec<f64> = self
            .pairs
            .iter()
            .map(|p| {
                let shared = p.source.iter().filter(|t| query.contains(t.as_str())).count();
                let union = p.source.len() + query.len() - shared;
                if union == 0 {
                    0.0
                } else {
                    shared as f64 / union as f64
                }
            })
            .collect();
        let best = overlaps.iter().copied().fold(0.0, f64::max);
        overlaps
            .into_iter()
            .map(|o| (self.sharpness * (o - best)).exp())
            .collect()
    }

    /// Next-outcome distribution after `prev`, indexed by outcome id.
    fn next_distribution(&self, weights: &[f64], prev: u32) -> Vec<f64> {
        let mut mass = vec![0.0; self.n_outcomes()];
        let mut total = 0.0;
        for (pair, &w) in self.pairs.iter().zip(weights) {
            if let Some(row) = pair.transitions.get(&prev) {
                for &(next, count) in row {
                    mass[next as usize] += w * count;
                    total += w * count;
                }
            }
        }
        if total == 0.0 {
            for (pair, &w) in self.pairs.iter().zip(weights) {
                for (&next, &count) in &pair.unigrams {
                    mass[next as usize] += w * count;
                }
                total += w * pair.n_transitions;
            }
        }
        let uniform = self.smoothing / self.n_outcomes() as f64;
        mass.iter_mut()
            .for_each(|m| *m = (1.0 - self.smoothing) * *m / total + uniform);
        mass
    }

    fn token_id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    fn decodable(&self, mut dist: Vec<f64>) -> Vec<f64> {
        dist[UNK as usize] = 0.0;
        dist
    }

    /// Tokens the decoder may choose after `history` (given as words) under
    /// `params`. The end-of-sequence outcome is reported as `None`.
    pub fn candidate_tokens(
        &self,
        prefix: &str,
        history: &[&str],
        params: &DecodingParams,
    ) -> Vec<Option<String>> {
        let weights = self.pair_weights(prefix);
        let prev = history.last().map(|w| self.token_id(w)).unwrap_or(EOS);
        let dist = self.decodable(self.next_distribution(&weights, prev));
        candidate_set(&dist, params.top_k, params.top_p)
            .into_iter()
            .map(|(id, _)| self.word(id as u32).map(str::to_string))
            .collect()
    }

    fn word(&self, id: u32) -> Option<&str> {
        (id >= FIRST_WORD).then(|| self.vocab[(id - FIRST_WORD) as usize].as_str())
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocab
    }
}

impl FineTunedModel for MockModel {
    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn sample(&self, prefix: &str, params: &DecodingParams, count: usize) -> Result<Vec<String>> {
        self.counters.bump_generate();
        let weights = self.pair_weights(prefix);
        let mut rng = seeded_rng(params.seed, prefix);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut words: Vec<&str> = Vec::new();
            let mut prev = EOS;
            while words.len() < params.max_new_tokens {
                let dist = self.decodable(self.next_distribution(&weights, prev));
                let candidates = candidate_set(&dist, params.top_k, params.top_p);
                let Some(next) = sample_from(&candidates, &mut rng) else {
                    break;
                };
                let next = next as u32;
                if next == EOS {
                    break;
                }
                words.push(self.word(next).expect("unknown bucket is masked"));
                prev = next;
            }
            out.push(words.join(" "));
        }
        Ok(out)
    }

    fn log_prob(&self, source: &str, target: &str) -> Result<f64> {
        self.counters.bump_score();
        let weights = self.pair_weights(source);
        let mut prev = EOS;
        let mut total = 0.0;
        let ids = tokenize(target).into_iter().map(|w| self.token_id(w));
        for next in ids.chain(std::iter::once(EOS)) {
            total += self.next_distribution(&weights, prev)[next as usize].ln();
            prev = next;
        }
        Ok(total)
    }
}

/// Replays scripted continuations in order and scores targets from scripted
/// per-token log-probabilities.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    continuations: Vec<String>,
    target_logprobs: HashMap<String, Vec<f64>>,
    pair_logprobs: HashMap<(String, String), Vec<f64>>,
    default_token_logprob: f64,
    counters: Arc<CallCounters>,
}

impl ScriptedBackend {
    pub fn new(continuations: Vec<String>) -> Self {
        Self {
            continuations,
            default_token_logprob: -(2f64.ln()),
            ..Self::default()
        }
    }

    /// Per-token log-probs for `target` under any source.
    pub fn with_target_logprobs(mut self, target: &str, logprobs: Vec<f64>) -> Self {
        self.target_logprobs.insert(target.to_string(), logprobs);
        self
    }

    /// Per-token log-probs for `target` under exactly `source`.
    pub fn with_pair_logprobs(mut self, source: &str, target: &str, logprobs: Vec<f64>) -> Self {
        self.pair_logprobs
            .insert((source.to_string(), target.to_string()), logprobs);
        self
    }

    pub fn counters(&self) -> Arc<CallCounters> {
        Arc::clone(&self.counters)
    }
}

impl Seq2SeqBackend for ScriptedBackend {
    fn model_id(&self) -> &str {
        "scripted"
    }

    fn fine_tune(
        &self,
        pairs: &[PromptPair],
        params: &FineTuneParams,
    ) -> Result<Box<dyn FineTunedModel>> {
        self.counters.bump_fine_tune();
        let fingerprint = sha256_hex(&serde_json::to_vec(&(pairs, params))?);
        Ok(Box::new(ScriptedModel {
            fingerprint,
            script: self.clone(),
            cursor: AtomicUsize::new(0),
        }))
    }
}

#[derive(Debug)]
pub struct ScriptedModel {
    fingerprint: String,
    script: ScriptedBackend,
    cursor: AtomicUsize,
}

impl FineTunedModel for ScriptedModel {
    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn sample(&self, _prefix: &str, _params: &DecodingParams, count: usize) -> Result<Vec<String>> {
        self.script.counters.bump_generate();
        let script = &self.script.continuations;
        if script.is_empty() {
            return Err(Error::Backend("no scripted continuations".into()));
        }
        let start = self.cursor.fetch_add(count, Ordering::SeqCst);
        Ok((start..start + count)
            .map(|i| script[i % script.len()].clone())
            .collect())
    }

    fn log_prob(&self, source: &str, target: &str) -> Result<f64> {
        self.script.counters.bump_score();
        let key = (source.to_string(), target.to_string());
        let scripted = self
            .script
            .pair_logprobs
            .get(&key)
            .or_else(|| self.script.target_logprobs.get(target));
        Ok(match scripted {
            Some(lps) => lps.iter().sum(),
            None => self.script.default_token_logprob * tokenize(target).len() as f64,
        })
    }
}
