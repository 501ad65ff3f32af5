//! Experiment configuration and the staged pipeline behind the CLI.
//!
//! A run directory is laid out per (shots, seed) unit:
//!
//! ```text
//! out/
//!   manifest.json
//!   k5/seed1/train.jsonl              k-shot sample
//!   k5/seed1/pairs-full.jsonl         converted pairs per template family
//!   k5/seed1/finetune-full.json       fine-tuned model descriptor
//!   k5/seed1/sta/dstar.jsonl          selection at the largest beta
//!   k5/seed1/sta/beta2.jsonl          selection for beta = 2 (a prefix)
//!   k5/seed1/sta/candidates.jsonl     scored candidate audit
//!   k5/seed1/sta/stats.json           realized alpha; written last
//!   report.jsonl  report.txt  scatter.jsonl
//! ```
//!
//! Without `shots` the full training split is used and units live under
//! `full/seed{s}/`; reports then carry `k = 0`. Every stage is skipped when its
//! output already exists, so an interrupted run resumes where it stopped.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::augment::{augment_with_model, AugmentationConfig, CandidateRecord};
use crate::corpus::{
    load_dataset_with_meta, per_class_counts, read_records, sample_k_shot, write_dataset, Dataset,
    DatasetMeta, KShotSpec, LabeledExample, PROVENANCE_GENERATED,
};
use crate::eda::{eda_augment, external_augment, EdaParams, Lexicon, Stopwords, Thesaurus};
use crate::eval::{
    diversity, evaluate_seed, fidelity, report_table, write_scatter, RunReport, ScatterPoint,
    SeedRecord,
};
use crate::gateway::classifier::{MemorizingClassifier, NaiveBayesClassifier};
use crate::gateway::external::ExternalBackend;
use crate::gateway::mock::MockBackend;
use crate::gateway::{
    fine_tune, train_classifier, DecodingParams, FineTuneParams, FineTunedModel, Seq2SeqBackend,
    TextClassifier,
};
use crate::templates::{convert, read_pairs, write_pairs, ConvertOptions, TemplateFamily, TemplateId};
use crate::text::sha256_hex;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Sta,
    StaNoself,
    StaTwoprompts,
    Eda,
    None,
    External,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sta => "sta",
            Method::StaNoself => "sta-noself",
            Method::StaTwoprompts => "sta-twoprompts",
            Method::Eda => "eda",
            Method::None => "none",
            Method::External => "external",
        }
    }

    fn family(self) -> Option<FamilyChoice> {
        match self {
            Method::Sta | Method::StaNoself => Some(FamilyChoice::Full),
            Method::StaTwoprompts => Some(FamilyChoice::TwoPrompt),
            _ => None,
        }
    }

    /// Whether the method has an augmentation factor to select.
    fn uses_beta(self) -> bool {
        matches!(self, Method::Sta | Method::StaNoself | Method::StaTwoprompts | Method::Eda)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyChoice {
    Full,
    TwoPrompt,
}

impl FamilyChoice {
    pub fn family(self) -> TemplateFamily {
        match self {
            FamilyChoice::Full => TemplateFamily::full(),
            FamilyChoice::TwoPrompt => TemplateFamily::two_prompt(),
        }
    }

    fn tag(self) -> &'static str {
        match self {
            FamilyChoice::Full => "full",
            FamilyChoice::TwoPrompt => "two-prompt",
        }
    }
}

impl FromStr for FamilyChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(FamilyChoice::Full),
            "two-prompt" => Ok(FamilyChoice::TwoPrompt),
            _ => Err(Error::Config(format!("unknown template family {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    Memorize,
    NaiveBayes,
    /// The classifier served by the configured backend (memorizing for `mock`).
    Backend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSettings {
    pub alpha_multiplier: usize,
    pub dedup: bool,
    pub length_normalized: bool,
    pub g2_prefix_tokens: usize,
    pub retry_factor: usize,
    pub decoding: DecodingParams,
}

impl Default for AugmentationSettings {
    fn default() -> Self {
        let d = AugmentationConfig::default();
        Self {
            alpha_multiplier: d.alpha_multiplier,
            dedup: d.dedup,
            length_normalized: d.length_normalized,
            g2_prefix_tokens: d.g2_prefix_tokens,
            retry_factor: d.retry_factor,
            decoding: d.decoding,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdaSettings {
    pub op_fraction: f64,
    pub deletion_prob: f64,
    pub thesaurus: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
}

impl Default for EdaSettings {
    fn default() -> Self {
        let p = EdaParams::default();
        Self {
            op_fraction: p.op_fraction,
            deletion_prob: p.deletion_prob,
            thesaurus: None,
            stopwords: None,
        }
    }
}

/// One declarative experiment. Relative paths resolve against the config
/// file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Sidecar with name, topic, ordered labels and verbalizations.
    pub meta: Option<PathBuf>,
    pub topic: Option<String>,
    pub methods: Vec<Method>,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Candidate augmentation factors; the best on dev is reported.
    pub betas: Vec<usize>,
    /// `mock` or `external:<command>`.
    pub backend: String,
    pub classifier: ClassifierKind,
    pub external_augmenter: Option<String>,
    /// Template family written by the `convert` command.
    pub convert_family: FamilyChoice,
    pub out: Option<PathBuf>,
    pub augmentation: AugmentationSettings,
    pub finetune: FineTuneParams,
    pub classifier_params: FineTuneParams,
    pub eda: EdaSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: None,
            dev: None,
            test: None,
            meta: None,
            topic: None,
            methods: vec![Method::Sta],
            shots: Vec::new(),
            seeds: vec![0],
            betas: vec![1],
            backend: "mock".into(),
            classifier: ClassifierKind::NaiveBayes,
            external_augmenter: None,
            convert_family: FamilyChoice::Full,
            out: None,
            augmentation: AugmentationSettings::default(),
            finetune: FineTuneParams::default(),
            classifier_params: FineTuneParams::classifier(),
            eda: EdaSettings::default(),
        }
    }
}

/// Overrides applied on top of the config file, from the environment and
/// then from command-line flags.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub backend: Option<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub family: Option<FamilyChoice>,
}

impl Overrides {
    /// `STA_TRAIN`, `STA_DEV`, `STA_TEST`, `STA_BACKEND`, `STA_OUT`.
    pub fn from_env() -> Self {
        let var = |name: &str| std::env::var_os(name).filter(|v| !v.is_empty());
        Self {
            train: var("STA_TRAIN").map(PathBuf::from),
            dev: var("STA_DEV").map(PathBuf::from),
            test: var("STA_TEST").map(PathBuf::from),
            backend: var("STA_BACKEND").map(|v| v.to_string_lossy().into_owned()),
            out: var("STA_OUT").map(PathBuf::from),
            seed: None,
            family: None,
        }
    }

    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = &self.train {
            cfg.train = Some(v.clone());
        }
        if let Some(v) = &self.dev {
            cfg.dev = Some(v.clone());
        }
        if let Some(v) = &self.test {
            cfg.test = Some(v.clone());
        }
        if let Some(v) = &self.backend {
            cfg.backend = v.clone();
        }
        if let Some(v) = &self.out {
            cfg.out = Some(v.clone());
        }
        if let Some(v) = self.seed {
            cfg.seeds = vec![v];
        }
        if let Some(v) = self.family {
            cfg.convert_family = v;
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(raw: &str) -> Result<Self> {
        toml::from_str(raw).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&raw)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for p in [
            &mut cfg.train,
            &mut cfg.dev,
            &mut cfg.test,
            &mut cfg.meta,
            &mut cfg.out,
            &mut cfg.eda.thesaurus,
            &mut cfg.eda.stopwords,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    fn require_file(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
        let p = path
            .clone()
            .ok_or_else(|| Error::Config(format!("no {what} file configured")))?;
        if !p.is_file() {
            return Err(Error::Config(format!("{what} file {} does not exist", p.display())));
        }
        Ok(p)
    }

    /// Checks everything a command needs before any work starts.
    pub fn validate(&self, needs_eval: bool) -> Result<()> {
        Self::require_file(&self.train, "train")?;
        if self.dev.is_some() {
            Self::require_file(&self.dev, "dev")?;
        }
        if self.meta.is_some() {
            Self::require_file(&self.meta, "meta")?;
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods configured".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds configured".into()));
        }
        if self.betas.is_empty() || self.betas.contains(&0) {
            return Err(Error::Config("betas must be non-empty and positive".into()));
        }
        if self.shots.contains(&0) {
            return Err(Error::Config("shots must be positive".into()));
        }
        if self.methods.contains(&Method::External) && self.external_augmenter.is_none() {
            return Err(Error::Config("method external needs external_augmenter".into()));
        }
        BackendSpec::parse(&self.backend)?;
        self.finetune.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.classifier_params.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.augmentation_config(Method::Sta, 0)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        EdaParams { op_fraction: self.eda.op_fraction, deletion_prob: self.eda.deletion_prob, seed: 0 }
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if needs_eval {
            Self::require_file(&self.test, "test")?;
            let selects_beta = self.betas.len() > 1 && self.methods.iter().any(|m| m.uses_beta());
            if selects_beta && self.dev.is_none() {
                return Err(Error::Config("dev set required for β selection".into()));
            }
        }
        Ok(())
    }

    fn max_beta(&self) -> usize {
        self.betas.iter().copied().max().unwrap_or(1)
    }

    pub fn augmentation_config(&self, method: Method, seed: u64) -> AugmentationConfig {
        let a = &self.augmentation;
        AugmentationConfig {
            beta: self.max_beta(),
            alpha_multiplier: a.alpha_multiplier,
            family: method.family().unwrap_or(FamilyChoice::Full).family(),
            self_check: method != Method::StaNoself,
            decoding: a.decoding,
            seed,
            dedup: a.dedup,
            length_normalized: a.length_normalized,
            g2_prefix_tokens: a.g2_prefix_tokens,
            retry_factor: a.retry_factor,
        }
    }

    /// Hash of everything that determines the results. The output directory
    /// is excluded.
    pub fn hash(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.out = None;
        let mut material = serde_json::to_vec(&canonical)?;
        for path in [&self.train, &self.dev, &self.test, &self.meta].into_iter().flatten() {
            material.extend(fs::read(path).map_err(|e| Error::io(path, e))?);
        }
        Ok(sha256_hex(&material))
    }

    fn out_dir(&self) -> Result<PathBuf> {
        self.out
            .clone()
            .ok_or_else(|| Error::Config("no output directory (--out or STA_OUT)".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Mock,
    External(String),
}

impl BackendSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        match spec.split_once(':') {
            _ if spec == "mock" => Ok(BackendSpec::Mock),
            Some(("external", cmd)) if !cmd.trim().is_empty() => Ok(BackendSpec::External(cmd.trim().to_string())),
            _ => Err(Error::Config(format!(
                "backend must be `mock` or `external:<command>`, got {spec:?}"
            ))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub shots: Vec<usize>,
    pub methods: Vec<Method>,
    pub betas: Vec<usize>,
    pub backend: String,
    pub config: ExperimentConfig,
}

/// Output of one finished stage; files are written under a temporary name and
/// renamed into place.
fn persist(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("partial");
    write(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    persist(path, |tmp| {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        fs::write(tmp, bytes).map_err(|e| Error::io(tmp, e))
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&raw)?)
}

/// One (shots, seed) cell of the experiment grid.
#[derive(Debug, Clone)]
pub struct Unit {
    pub k: Option<usize>,
    pub seed: u64,
    pub dir: PathBuf,
}

impl Unit {
    fn train_path(&self) -> PathBuf {
        self.dir.join("train.jsonl")
    }

    fn pairs_path(&self, family: FamilyChoice) -> PathBuf {
        self.dir.join(format!("pairs-{}.jsonl", family.tag()))
    }

    fn finetune_path(&self, family: FamilyChoice) -> PathBuf {
        self.dir.join(format!("finetune-{}.json", family.tag()))
    }

    fn method_dir(&self, method: Method) -> PathBuf {
        self.dir.join(method.as_str())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FineTuneRecord {
    backend: String,
    model_id: String,
    fingerprint: String,
    n_pairs: usize,
    params: FineTuneParams,
}

#[derive(Debug, Serialize, Deserialize)]
struct MethodStats {
    method: Method,
    n_generated: usize,
    realized_alpha: BTreeMap<String, f64>,
    betas: Vec<usize>,
}

/// Summary printed by `convert`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvertSummary {
    pub files: Vec<PathBuf>,
    pub counts: BTreeMap<TemplateId, usize>,
    pub skipped: BTreeMap<TemplateId, usize>,
}

impl ConvertSummary {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

/// Holds the resolved config, the loaded splits and the backend for one
/// command invocation.
pub struct Runner {
    cfg: ExperimentConfig,
    out: PathBuf,
    train: Dataset,
    backend: Arc<dyn Seq2SeqBackend>,
    external: Option<ExternalBackend>,
}

impl Runner {
    pub fn new(cfg: ExperimentConfig, needs_eval: bool) -> Result<Self> {
        cfg.validate(needs_eval)?;
        let out = cfg.out_dir()?;
        let meta = match &cfg.meta {
            Some(p) => DatasetMeta::load(p)?,
            None => DatasetMeta::default(),
        };
        let meta = DatasetMeta {
            topic: meta.topic.or_else(|| cfg.topic.clone()),
            ..meta
        };
        if meta.topic.is_none() {
            return Err(Error::Config("no topic: set `topic` or provide it in the meta file".into()));
        }
        let train = load_dataset_with_meta(cfg.train.as_ref().expect("validated"), &meta)?;
        let (backend, external): (Arc<dyn Seq2SeqBackend>, _) = match BackendSpec::parse(&cfg.backend)? {
            BackendSpec::Mock => (Arc::new(MockBackend::new()), None),
            BackendSpec::External(cmd) => {
                let ext = ExternalBackend::spawn(&cmd)?;
                (Arc::new(ext.clone()), Some(ext))
            }
        };
        Ok(Self {
            cfg,
            out,
            train,
            backend,
            external,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    /// Loads a split with the training inventory, topic and verbalizations.
    fn load_split(&self, path: &Path) -> Result<Dataset> {
        let meta = DatasetMeta {
            name: None,
            topic: Some(self.train.topic().to_string()),
            labels: Some(self.train.labels().to_vec()),
            verbalizations: self.train.verbalizations().clone(),
        };
        load_dataset_with_meta(path, &meta)
    }

    fn classifier(&self) -> Box<dyn TextClassifier> {
        match (self.cfg.classifier, &self.external) {
            (ClassifierKind::Memorize, _) | (ClassifierKind::Backend, None) => Box::new(MemorizingClassifier),
            (ClassifierKind::NaiveBayes, _) => Box::new(NaiveBayesClassifier),
            (ClassifierKind::Backend, Some(ext)) => Box::new(ext.clone()),
        }
    }

    pub fn units(&self) -> Vec<Unit> {
        let mut units = Vec::new();
        let shots: Vec<Option<usize>> = if self.cfg.shots.is_empty() {
            vec![None]
        } else {
            self.cfg.shots.iter().copied().map(Some).collect()
        };
        for k in shots {
            for &seed in &self.cfg.seeds {
                let group = k.map(|k| format!("k{k}")).unwrap_or_else(|| "full".into());
                units.push(Unit {
                    k,
                    seed,
                    dir: self.out.join(group).join(format!("seed{seed}")),
                });
            }
        }
        units
    }

    /// Writes the manifest, refusing to reuse a directory made by a different
    /// configuration.
    pub fn write_manifest(&self) -> Result<Manifest> {
        let manifest = Manifest {
            tool: "sta".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: self.cfg.hash()?,
            seeds: self.cfg.seeds.clone(),
            shots: self.cfg.shots.clone(),
            methods: self.cfg.methods.clone(),
            betas: self.cfg.betas.clone(),
            backend: self.cfg.backend.clone(),
            config: ExperimentConfig {
                out: None,
                ..self.cfg.clone()
            },
        };
        let path = self.out.join("manifest.json");
        if path.exists() {
            let existing: Manifest = read_json(&path)?;
            if existing.config_hash != manifest.config_hash {
                return Err(Error::Config(format!(
                    "{} holds a run with a different configuration",
                    self.out.display()
                )));
            }
            return Ok(existing);
        }
        write_json(&path, &manifest)?;
        Ok(manifest)
    }

    fn stage_sample(&self, unit: &Unit) -> Result<Dataset> {
        let path = unit.train_path();
        if !path.exists() {
            let sample = match unit.k {
                Some(k) => sample_k_shot(&self.train, KShotSpec { k, seed: unit.seed })?,
                None => self.train.clone(),
            };
            persist(&path, |tmp| write_dataset(tmp, &sample, None))?;
        }
        self.load_split(&path)
    }

    fn stage_convert(&self, unit: &Unit, train: &Dataset, family: FamilyChoice) -> Result<ConvertSummary> {
        let path = unit.pairs_path(family);
        let conversion = convert(
            train,
            &family.family(),
            unit.seed,
            ConvertOptions {
                g2_prefix_tokens: self.cfg.augmentation.g2_prefix_tokens,
            },
        )?;
        if !path.exists() {
            persist(&path, |tmp| write_pairs(tmp, &conversion.pairs))?;
        }
        Ok(ConvertSummary {
            counts: conversion.counts(),
            skipped: conversion.skipped,
            files: vec![path],
        })
    }

    fn stage_finetune(&self, unit: &Unit, family: FamilyChoice) -> Result<Box<dyn FineTunedModel>> {
        let pairs = read_pairs(&unit.pairs_path(family))?;
        let params = FineTuneParams {
            seed: unit.seed,
            ..self.cfg.finetune
        };
        let model = fine_tune(self.backend.as_ref(), &pairs, &params)?;
        let path = unit.finetune_path(family);
        if !path.exists() {
            write_json(
                &path,
                &FineTuneRecord {
                    backend: self.cfg.backend.clone(),
                    model_id: self.backend.model_id().to_string(),
                    fingerprint: model.fingerprint().to_string(),
                    n_pairs: pairs.len(),
                    params,
                },
            )?;
        }
        Ok(model)
    }

    fn lexicon(&self) -> Result<Lexicon> {
        Ok(Lexicon {
            thesaurus: match &self.cfg.eda.thesaurus {
                Some(p) => Thesaurus::load(p)?,
                None => Thesaurus::builtin(),
            },
            stopwords: match &self.cfg.eda.stopwords {
                Some(p) => Stopwords::load(p)?,
                None => Stopwords::builtin(),
            },
        })
    }

    fn write_generated(path: &Path, d: &Dataset) -> Result<()> {
        persist(path, |tmp| write_dataset(tmp, d, Some(PROVENANCE_GENERATED)))
    }

    /// Augments one unit with every configured method. Fine-tuning runs at
    /// most once per template family and only when some method still lacks
    /// its outputs.
    fn stage_augment(&self, unit: &Unit, train: &Dataset) -> Result<()> {
        let mut models: BTreeMap<FamilyChoice, Box<dyn FineTunedModel>> = BTreeMap::new();
        for &method in &self.cfg.methods {
            let dir = unit.method_dir(method);
            let stats_path = dir.join("stats.json");
            if stats_path.exists() {
                log::info!("{}: {method} already augmented", unit.dir.display());
                continue;
            }
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut stats = MethodStats {
                method,
                n_generated: 0,
                realized_alpha: BTreeMap::new(),
                betas: Vec::new(),
            };
            match method {
                Method::Sta | Method::StaNoself | Method::StaTwoprompts => {
                    let family = method.family().expect("STA variant");
                    let model = match models.entry(family) {
                        Entry::Occupied(e) => e.into_mut(),
                        Entry::Vacant(e) => {
                            self.stage_convert(unit, train, family)?;
                            e.insert(self.stage_finetune(unit, family)?)
                        }
                    };
                    let cfg = self.cfg.augmentation_config(method, unit.seed);
                    let out = augment_with_model(train, &cfg, model.as_ref())?;
                    Self::write_generated(&dir.join("dstar.jsonl"), &out.generated)?;
                    persist(&dir.join("candidates.jsonl"), |tmp| write_audit(tmp, &out.audit))?;
                    for &beta in &self.cfg.betas {
                        Self::write_generated(&dir.join(format!("beta{beta}.jsonl")), &out.prefix_for_beta(beta)?)?;
                    }
                    stats.n_generated = out.generated.len();
                    stats.realized_alpha = out.realized_alpha;
                    stats.betas = self.cfg.betas.clone();
                }
                Method::Eda => {
                    let params = EdaParams {
                        op_fraction: self.cfg.eda.op_fraction,
                        deletion_prob: self.cfg.eda.deletion_prob,
                        seed: unit.seed,
                    };
                    let out = eda_augment(train, self.cfg.max_beta(), &params, &self.lexicon()?)?;
                    Self::write_generated(&dir.join("dstar.jsonl"), &out)?;
                    for &beta in &self.cfg.betas {
                        let prefix = out.examples()[..beta * train.len()].to_vec();
                        Self::write_generated(&dir.join(format!("beta{beta}.jsonl")), &out.with_examples(prefix)?)?;
                    }
                    stats.n_generated = out.len();
                    stats.betas = self.cfg.betas.clone();
                }
                Method::None => {
                    Self::write_generated(&dir.join("dstar.jsonl"), &train.with_examples(vec![])?)?;
                }
                Method::External => {
                    let cmd = self.cfg.external_augmenter.as_deref().expect("validated");
                    let out = external_augment(train, cmd, &dir)?;
                    Self::write_generated(&dir.join("dstar.jsonl"), &out)?;
                    stats.n_generated = out.len();
                    stats.betas = vec![1];
                }
            }
            write_json(&stats_path, &stats)?;
        }
        Ok(())
    }

    fn load_generated(&self, path: &Path) -> Result<Dataset> {
        let examples = read_records(path)?
            .into_iter()
            .map(|r| LabeledExample::new(r.text, r.label))
            .collect();
        self.train.with_examples(examples)
    }

    /// Evaluates every unit and method and writes the report files.
    fn stage_evaluate(&self) -> Result<RunReport> {
        let test = self.load_split(self.cfg.test.as_ref().expect("validated"))?;
        let dev = self.cfg.dev.as_ref().map(|p| self.load_split(p)).transpose()?;
        let classifier = self.classifier();
        let oracle = train_classifier(classifier.as_ref(), &self.train, &self.cfg.classifier_params)?;

        let mut report = RunReport::default();
        let mut scatter = Vec::new();
        let mut alphas: BTreeMap<(String, usize), Vec<BTreeMap<String, f64>>> = BTreeMap::new();
        for unit in self.units() {
            let train = self.load_split(&unit.train_path()).map_err(|e| {
                Error::Config(format!("{}: run `augment` first ({e})", unit.dir.display()))
            })?;
            let k = unit.k.unwrap_or(0);
            for &method in &self.cfg.methods {
                let dir = unit.method_dir(method);
                let stats: MethodStats = read_json(&dir.join("stats.json")).map_err(|e| {
                    Error::Config(format!("{}: run `augment` first ({e})", dir.display()))
                })?;
                let mut sets = BTreeMap::new();
                if method.uses_beta() {
                    for &beta in &self.cfg.betas {
                        sets.insert(beta, self.load_generated(&dir.join(format!("beta{beta}.jsonl")))?);
                    }
                } else if method == Method::External {
                    sets.insert(1, self.load_generated(&dir.join("dstar.jsonl"))?);
                }
                let outcome = evaluate_seed(
                    &train,
                    &sets,
                    dev.as_ref(),
                    &test,
                    classifier.as_ref(),
                    &self.cfg.classifier_params,
                    unit.seed,
                )?;
                let generated = match outcome.beta {
                    Some(beta) => sets[&beta].clone(),
                    None => train.with_examples(vec![])?,
                };
                let div = diversity(&train, &generated).ratio;
                let fid = if generated.is_empty() {
                    None
                } else {
                    Some(fidelity(&generated, oracle.as_ref())?.accuracy)
                };
                report.seeds.push(SeedRecord {
                    method: method.to_string(),
                    k,
                    seed: unit.seed,
                    accuracy: outcome.test_accuracy,
                    dev_accuracy: outcome.dev_accuracy,
                    beta: outcome.beta,
                    diversity: div,
                    fidelity: fid,
                });
                scatter.push(ScatterPoint {
                    method: method.to_string(),
                    k,
                    seed: unit.seed,
                    diversity_ratio: div,
                    fidelity_accuracy: fid,
                });
                alphas
                    .entry((method.to_string(), k))
                    .or_default()
                    .push(stats.realized_alpha);
            }
        }

        let mean_alpha = alphas
            .into_iter()
            .map(|(key, runs)| {
                let mut sums: BTreeMap<String, f64> = BTreeMap::new();
                for run in &runs {
                    for (label, a) in run {
                        *sums.entry(label.clone()).or_insert(0.0) += a;
                    }
                }
                sums.values_mut().for_each(|v| *v /= runs.len() as f64);
                (key, sums)
            })
            .collect();
        report.aggregate(&mean_alpha);

        persist(&self.out.join("report.jsonl"), |tmp| report.write(tmp))?;
        persist(&self.out.join("scatter.jsonl"), |tmp| write_scatter(tmp, &scatter))?;
        let table = report_table(&report.aggregates);
        persist(&self.out.join("report.txt"), |tmp| {
            fs::write(tmp, &table).map_err(|e| Error::io(tmp, e))
        })?;
        Ok(report)
    }

    pub fn convert(&self) -> Result<ConvertSummary> {
        self.write_manifest()?;
        let mut summary = ConvertSummary::default();
        for unit in self.units() {
            let train = self.stage_sample(&unit)?;
            let s = self.stage_convert(&unit, &train, self.cfg.convert_family)?;
            for (t, n) in s.counts {
                *summary.counts.entry(t).or_insert(0) += n;
            }
            for (t, n) in s.skipped {
                *summary.skipped.entry(t).or_insert(0) += n;
            }
            summary.files.extend(s.files);
        }
        Ok(summary)
    }

    /// Fine-tunes one model per unit and template family used by the
    /// configured methods, returning the fingerprints.
    pub fn finetune(&self) -> Result<Vec<String>> {
        self.write_manifest()?;
        let mut families: Vec<FamilyChoice> = self.cfg.methods.iter().filter_map(|m| m.family()).collect();
        families.sort();
        families.dedup();
        let mut fingerprints = Vec::new();
        for unit in self.units() {
            let train = self.stage_sample(&unit)?;
            for &family in &families {
                self.stage_convert(&unit, &train, family)?;
                fingerprints.push(self.stage_finetune(&unit, family)?.fingerprint().to_string());
            }
        }
        Ok(fingerprints)
    }

    pub fn augment(&self) -> Result<Vec<PathBuf>> {
        self.write_manifest()?;
        let mut outputs = Vec::new();
        for unit in self.units() {
            let train = self.stage_sample(&unit)?;
            self.stage_augment(&unit, &train)?;
            outputs.extend(self.cfg.methods.iter().map(|m| unit.method_dir(*m).join("dstar.jsonl")));
        }
        Ok(outputs)
    }

    pub fn evaluate(&self) -> Result<RunReport> {
        self.write_manifest()?;
        self.stage_evaluate()
    }

    /// Sample, convert, fine-tune, augment and evaluate every unit.
    pub fn pipeline(&self) -> Result<RunReport> {
        self.write_manifest()?;
        for unit in self.units() {
            log::info!("unit {}", unit.dir.display());
            let train = self.stage_sample(&unit)?;
            self.stage_augment(&unit, &train)?;
        }
        self.stage_evaluate()
    }
}

pub fn write_audit(path: &Path, audit: &[CandidateRecord]) -> Result<()> {
    let mut out = Vec::new();
    for rec in audit {
        serde_json::to_writer(&mut out, rec)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-class counts of a dataset file, used for CLI summaries.
pub fn describe(d: &Dataset) -> String {
    per_class_counts(d)
        .iter()
        .map(|(l, n)| format!("{l}={n}"))
        .collect::<Vec<_>>()
        .join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn methods_parse() {
        assert_eq!("sta-noself".parse::<Method>().unwrap(), Method::StaNoself);
        assert!("magic".parse::<Method>().is_err());
        let err = ExperimentConfig::from_toml("methods = [\"magic\"]").unwrap_err();
        assert!(err.is_usage());
    }

    #[test]
    fn backend_specs() {
        assert_eq!(BackendSpec::parse("mock").unwrap(), BackendSpec::Mock);
        assert_eq!(
            BackendSpec::parse("external:python3 serve.py").unwrap(),
            BackendSpec::External("python3 serve.py".into())
        );
        assert!(BackendSpec::parse("external:").is_err());
        assert!(BackendSpec::parse("gpu").is_err());
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = ExperimentConfig::from_toml("backend = \"mock\"\nseeds = [1, 2]").unwrap();
        Overrides {
            seed: Some(9),
            backend: Some("external:x".into()),
            ..Default::default()
        }
        .apply(&mut cfg);
        assert_eq!(cfg.seeds, vec![9]);
        assert_eq!(cfg.backend, "external:x");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig { out: Some("x".into()), ..Default::default() };
        let b = ExperimentConfig { out: Some("y".into()), ..Default::default() };
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let c = ExperimentConfig { seeds: vec![4], ..Default::default() };
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }
}
