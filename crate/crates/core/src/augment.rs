//! Self-controlled augmentation: convert, fine-tune, generate candidates per
//! class from the `g1` prefix, score each candidate against every label through
//! the `c1` source, and keep the `beta * n_y` most confident candidates.
//!
//! With `alpha = alpha_multiplier * beta` candidates generated per original
//! example, the default multiplier of 5 keeps the top 20% of every pool.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{per_class_counts, Dataset, LabeledExample};
use crate::gateway::{
    fine_tune, generate, score_target, DecodingParams, FineTuneParams, FineTunedModel,
    Seq2SeqBackend,
};
use crate::templates::{
    c1_source, convert, g1_prefix, Conversion, ConvertOptions, PromptContext, TemplateFamily,
    TemplateId, DEFAULT_G2_PREFIX_TOKENS,
};
use crate::text::{derive_seed, seeded_rng, tokenize};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Selected synthetic examples per original example.
    pub beta: usize,
    /// Candidates generated per selected example; `alpha = alpha_multiplier * beta`.
    pub alpha_multiplier: usize,
    pub family: TemplateFamily,
    pub self_check: bool,
    pub decoding: DecodingParams,
    pub seed: u64,
    /// Drop exact duplicate generations (they are regenerated like empty ones).
    pub dedup: bool,
    /// Divide each label score by the label's token count.
    pub length_normalized: bool,
    pub g2_prefix_tokens: usize,
    /// Extra generations allowed per missing candidate.
    pub retry_factor: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            beta: 1,
            alpha_multiplier: 5,
            family: TemplateFamily::full(),
            self_check: true,
            decoding: DecodingParams::default(),
            seed: 0,
            dedup: false,
            length_normalized: false,
            g2_prefix_tokens: DEFAULT_G2_PREFIX_TOKENS,
            retry_factor: 3,
        }
    }
}

impl AugmentationConfig {
    pub fn sta(beta: usize) -> Self {
        Self {
            beta,
            ..Self::default()
        }
    }

    /// Candidates kept by seeded uniform sampling instead of self-checking.
    pub fn no_self_check(beta: usize) -> Self {
        Self {
            beta,
            self_check: false,
            ..Self::default()
        }
    }

    /// Only `c1` and `g1`, self-checking on.
    pub fn two_prompts(beta: usize) -> Self {
        Self {
            beta,
            family: TemplateFamily::two_prompt(),
            ..Self::default()
        }
    }

    pub fn alpha(&self) -> usize {
        self.alpha_multiplier * self.beta
    }

    /// Fraction of each candidate pool that is kept.
    pub fn selection_fraction(&self) -> f64 {
        self.beta as f64 / self.alpha() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta == 0 {
            return Err(Error::Config("beta must be at least 1".into()));
        }
        if self.alpha_multiplier < 2 {
            return Err(Error::Config("alpha_multiplier must be at least 2 so alpha > beta".into()));
        }
        self.family.validate()?;
        if !self.family.generation.contains(&TemplateId::G1) {
            return Err(Error::Config("candidates are decoded from g1, which the family lacks".into()));
        }
        if self.self_check && !self.family.classification.contains(&TemplateId::C1) {
            return Err(Error::Config("self-checking scores through c1, which the family lacks".into()));
        }
        if self.g2_prefix_tokens == 0 {
            return Err(Error::Config("g2_prefix_tokens must be positive".into()));
        }
        self.decoding.validate()
    }
}

/// Raw generations for one class, in generation order.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    pub label: String,
    pub texts: Vec<String>,
    /// `alpha * n_y`.
    pub requested: usize,
    /// Generations spent replacing empty or duplicate outputs.
    pub retries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: String,
    pub u: f64,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    /// Position in generation order.
    pub index: usize,
    pub text: String,
    pub label: String,
    /// Score of the candidate's own label.
    pub u: f64,
    /// Confidence of the candidate's own label.
    pub q: f64,
    /// Scores for every label, in inventory order.
    pub scores: Vec<LabelScore>,
}

/// One line of the candidate audit file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub label: String,
    pub index: usize,
    pub text: String,
    pub u: Option<f64>,
    pub q_vector: Option<BTreeMap<String, f64>>,
    pub selected: bool,
    /// Position in the selection ranking, for selected candidates.
    pub rank: Option<usize>,
}

#[derive(Debug)]
pub struct StaOutput {
    /// Selected examples, per class in inventory order, each class in rank order.
    pub generated: Dataset,
    pub audit: Vec<CandidateRecord>,
    /// Realized candidates per original example, per class.
    pub realized_alpha: BTreeMap<String, f64>,
    pub original_counts: BTreeMap<String, usize>,
    pub fingerprint: String,
}

impl StaOutput {
    /// The selection a smaller `beta` would have kept: the first
    /// `beta * n_y` selected examples of every class.
    pub fn prefix_for_beta(&self, beta: usize) -> Result<Dataset> {
        let mut taken: BTreeMap<&str, usize> = BTreeMap::new();
        let examples = self
            .generated
            .examples()
            .iter()
            .filter(|ex| {
                let quota = beta * self.original_counts.get(&ex.label).copied().unwrap_or(0);
                let n = taken.entry(ex.label.as_str()).or_insert(0);
                *n += 1;
                *n <= quota
            })
            .cloned()
            .collect();
        self.generated.with_examples(examples)
    }
}

/// Numerically stable softmax.
pub fn softmax(u: &[f64]) -> Vec<f64> {
    let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = u.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `u(l)` for every label `l`: the score of the verbalized label as target of
/// the `c1` source built from `text`; `q` is the softmax over those scores.
pub fn self_check_scores(
    model: &dyn FineTunedModel,
    text: &str,
    d: &Dataset,
    length_normalized: bool,
) -> Result<Vec<LabelScore>> {
    if d.labels().len() < 2 {
        return Err(Error::InvalidParams("self-checking needs at least two labels".into()));
    }
    let verbalized: Vec<String> = d.labels().iter().map(|l| d.verbalize(l).to_string()).collect();
    let source = c1_source(
        text,
        PromptContext {
            topic: d.topic(),
            labels: &verbalized,
        },
    );
    let mut us = Vec::with_capacity(verbalized.len());
    for target in &verbalized {
        let mut u = score_target(model, &source, target)?;
        if length_normalized {
            u /= tokenize(target).len() as f64;
        }
        us.push(u);
    }
    let qs = softmax(&us);
    Ok(d.labels()
        .iter()
        .zip(us.into_iter().zip(qs))
        .map(|(label, (u, q))| LabelScore {
            label: label.clone(),
            u,
            q,
        })
        .collect())
}

/// Decodes `alpha * n_y` candidates for `label` from its `g1` prefix. Empty
/// (and, with `dedup`, repeated) generations are replaced while the retry
/// budget of `retry_factor` times the first-round deficit lasts.
pub fn generate_candidates(
    model: &dyn FineTunedModel,
    d: &Dataset,
    label: &str,
    cfg: &AugmentationConfig,
) -> Result<CandidatePool> {
    let n_y = per_class_counts(d).get(label).copied().ok_or_else(|| Error::UnknownLabel(label.into()))?;
    if n_y == 0 {
        return Err(Error::InvalidParams(format!("class {label:?} has no examples")));
    }
    let want = cfg.alpha() * n_y;
    let prefix = g1_prefix(d.topic(), d.verbalize(label))?;
    let mut texts: Vec<String> = Vec::with_capacity(want);
    let mut seen: HashSet<String> = HashSet::new();
    let mut request = want;
    let mut budget = None;
    let mut retries = 0;
    for round in 0.. {
        let params = DecodingParams {
            seed: derive_seed(cfg.seed, &format!("generate/{label}/{round}")),
            ..cfg.decoding
        };
        for raw in generate(model, &prefix, &params, request)? {
            let text = raw.trim();
            if text.is_empty() || (cfg.dedup && !seen.insert(text.to_string())) {
                continue;
            }
            texts.push(text.to_string());
        }
        let deficit = want - texts.len();
        if deficit == 0 {
            break;
        }
        let remaining = budget.get_or_insert(cfg.retry_factor * deficit);
        if *remaining == 0 {
            log::warn!(
                "class {label:?}: retry budget exhausted, pool holds {} of {want} candidates",
                texts.len()
            );
            break;
        }
        request = deficit.min(*remaining);
        *remaining -= request;
        retries += request;
    }
    Ok(CandidatePool {
        label: label.to_string(),
        texts,
        requested: want,
        retries,
    })
}

pub fn score_pool(
    model: &dyn FineTunedModel,
    pool: &CandidatePool,
    d: &Dataset,
    cfg: &AugmentationConfig,
) -> Result<Vec<ScoredCandidate>> {
    let own = d
        .labels()
        .iter()
        .position(|l| *l == pool.label)
        .ok_or_else(|| Error::UnknownLabel(pool.label.clone()))?;
    pool.texts
        .iter()
        .enumerate()
        .map(|(index, text)| {
            let scores = self_check_scores(model, text, d, cfg.length_normalized)?;
            Ok(ScoredCandidate {
                index,
                text: text.clone(),
                label: pool.label.clone(),
                u: scores[own].u,
                q: scores[own].q,
                scores,
            })
        })
        .collect()
}

/// The `keep` candidates with highest `q`, ties broken by higher `u` and then
/// by earlier generation index. Returned in rank order.
pub fn select_top(pool: &[ScoredCandidate], keep: usize) -> Vec<ScoredCandidate> {
    if pool.len() < keep {
        log::warn!("pool of {} is smaller than the {keep} to keep; keeping all", pool.len());
    }
    let mut order: Vec<&ScoredCandidate> = pool.iter().collect();
    order.sort_by(|a, b| {
        b.q.total_cmp(&a.q)
            .then(b.u.total_cmp(&a.u))
            .then(a.index.cmp(&b.index))
    });
    order.into_iter().take(keep).cloned().collect()
}

/// Converts `d`, fine-tunes `backend` on the result and returns both.
pub fn prepare(
    d: &Dataset,
    cfg: &AugmentationConfig,
    ft: &FineTuneParams,
    backend: &dyn Seq2SeqBackend,
) -> Result<(Conversion, Box<dyn FineTunedModel>)> {
    cfg.validate()?;
    let conversion = convert(
        d,
        &cfg.family,
        cfg.seed,
        ConvertOptions {
            g2_prefix_tokens: cfg.g2_prefix_tokens,
        },
    )?;
    let model = fine_tune(backend, &conversion.pairs, ft)?;
    Ok((conversion, model))
}

/// Full run: convert, fine-tune, then [`augment_with_model`].
pub fn run_sta(
    d: &Dataset,
    cfg: &AugmentationConfig,
    ft: &FineTuneParams,
    backend: &dyn Seq2SeqBackend,
) -> Result<StaOutput> {
    let (_, model) = prepare(d, cfg, ft, backend)?;
    augment_with_model(d, cfg, model.as_ref())
}

/// Generation, self-checking and selection on an already fine-tuned model.
pub fn augment_with_model(
    d: &Dataset,
    cfg: &AugmentationConfig,
    model: &dyn FineTunedModel,
) -> Result<StaOutput> {
    cfg.validate()?;
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let counts = per_class_counts(d);
    let mut selected_examples = Vec::new();
    let mut audit = Vec::new();
    let mut realized_alpha = BTreeMap::new();

    for label in d.labels() {
        let n_y = counts[label];
        if n_y == 0 {
            log::warn!("class {label:?} has no examples; no candidates generated");
            realized_alpha.insert(label.clone(), 0.0);
            continue;
        }
        let keep = cfg.beta * n_y;
        let pool = generate_candidates(model, d, label, cfg)?;
        realized_alpha.insert(label.clone(), pool.texts.len() as f64 / n_y as f64);

        let mut class_audit: Vec<CandidateRecord> = pool
            .texts
            .iter()
            .enumerate()
            .map(|(index, text)| CandidateRecord {
                label: label.clone(),
                index,
                text: text.clone(),
                u: None,
                q_vector: None,
                selected: false,
                rank: None,
            })
            .collect();

        let ranked: Vec<usize> = if cfg.self_check {
            let scored = score_pool(model, &pool, d, cfg)?;
            for (rec, sc) in class_audit.iter_mut().zip(&scored) {
                rec.u = Some(sc.u);
                rec.q_vector = Some(sc.scores.iter().map(|s| (s.label.clone(), s.q)).collect());
            }
            select_top(&scored, keep).into_iter().map(|c| c.index).collect()
        } else {
            if pool.texts.len() < keep {
                log::warn!("class {label:?}: pool of {} is smaller than {keep}", pool.texts.len());
            }
            let mut order: Vec<usize> = (0..pool.texts.len()).collect();
            order.shuffle(&mut seeded_rng(cfg.seed, &format!("noself/{label}")));
            order.truncate(keep);
            order
        };

        for (rank, &idx) in ranked.iter().enumerate() {
            class_audit[idx].selected = true;
            class_audit[idx].rank = Some(rank);
            selected_examples.push(LabeledExample::new(pool.texts[idx].clone(), label.clone()));
        }
        audit.extend(class_audit);
    }

    Ok(StaOutput {
        generated: d.with_examples(selected_examples)?,
        audit,
        realized_alpha,
        original_counts: counts,
        fingerprint: model.fingerprint().to_string(),
    })
}
