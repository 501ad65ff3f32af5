//! Labeled text datasets: the record format on disk, label inventories and
//! deterministic k-shot subsampling.
//!
//! A dataset file holds one JSON object per line with string fields `text` and
//! `label`. Generated datasets add `"provenance": "generated"`. An optional
//! sidecar JSON file carries `name`, `topic`, the ordered `labels` and a
//! `verbalizations` map.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::text::seeded_rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: String,
    pub label: String,
}

impl LabeledExample {
    pub fn new(text: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            label: label.into(),
        }
    }
}

/// On-disk record. `provenance` is only written for generated data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub text: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

pub const PROVENANCE_GENERATED: &str = "generated";

/// Sidecar metadata describing a dataset file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub topic: Option<String>,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
    #[serde(default)]
    pub verbalizations: BTreeMap<String, String>,
}

impl DatasetMeta {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    topic: String,
    labels: Vec<String>,
    verbalizations: BTreeMap<String, String>,
    examples: Vec<LabeledExample>,
}

impl Dataset {
    /// Builds a dataset after checking the label inventory and every example.
    /// An empty example list is allowed here; only file ingestion rejects it.
    pub fn new(
        name: impl Into<String>,
        topic: impl Into<String>,
        labels: Vec<String>,
        examples: Vec<LabeledExample>,
    ) -> Result<Self> {
        let topic = topic.into();
        if topic.trim().is_empty() {
            return Err(Error::InvalidDataset("topic must be non-empty".into()));
        }
        if labels.len() < 2 {
            return Err(Error::InvalidDataset(format!(
                "label inventory needs at least two labels, found {}",
                labels.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for label in &labels {
            if label.is_empty() {
                return Err(Error::InvalidDataset("empty label identifier".into()));
            }
            if !seen.insert(label.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate label {label:?}")));
            }
        }
        for ex in &examples {
            if ex.text.trim().is_empty() {
                return Err(Error::InvalidDataset("example with empty text".into()));
            }
            if !seen.contains(ex.label.as_str()) {
                return Err(Error::UnknownLabel(ex.label.clone()));
            }
        }
        Ok(Self {
            name: name.into(),
            topic,
            labels,
            verbalizations: BTreeMap::new(),
            examples,
        })
    }

    pub fn with_verbalizations(mut self, verbalizations: BTreeMap<String, String>) -> Result<Self> {
        for (label, verbal) in &verbalizations {
            if !self.labels.contains(label) {
                return Err(Error::UnknownLabel(label.clone()));
            }
            if verbal.trim().is_empty() {
                return Err(Error::InvalidDataset(format!(
                    "empty verbalization for label {label:?}"
                )));
            }
        }
        self.verbalizations = verbalizations;
        Ok(self)
    }

    /// Same inventory, topic and verbalizations with a different example list.
    pub fn with_examples(&self, examples: Vec<LabeledExample>) -> Result<Self> {
        Dataset::new(
            self.name.clone(),
            self.topic.clone(),
            self.labels.clone(),
            examples,
        )?
        .with_verbalizations(self.verbalizations.clone())
    }

    /// Appends `other`'s examples; both must share a label inventory.
    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        self.check_same_labels(other)?;
        let mut examples = self.examples.clone();
        examples.extend(other.examples.iter().cloned());
        self.with_examples(examples)
    }

    pub fn check_same_labels(&self, other: &Dataset) -> Result<()> {
        let a: BTreeSet<_> = self.labels.iter().collect();
        let b: BTreeSet<_> = other.labels.iter().collect();
        if a != b {
            return Err(Error::InvalidDataset(format!(
                "label inventories differ: {:?} vs {:?}",
                self.labels, other.labels
            )));
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn topic(&self) -> &str {
        &self.topic
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn verbalizations(&self) -> &BTreeMap<String, String> {
        &self.verbalizations
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// The string standing for `label` inside prompts. Defaults to the label.
    pub fn verbalize<'a>(&'a self, label: &'a str) -> &'a str {
        self.verbalizations
            .get(label)
            .map(String::as_str)
            .unwrap_or(label)
    }

    /// Texts belonging to `label`, in record order.
    pub fn texts_of<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.examples
            .iter()
            .filter(move |ex| ex.label == label)
            .map(|ex| ex.text.as_str())
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            name: Some(self.name.clone()),
            topic: Some(self.topic.clone()),
            labels: Some(self.labels.clone()),
            verbalizations: self.verbalizations.clone(),
        }
    }
}

/// Number of examples per label; every label of the inventory is present.
pub fn per_class_counts(d: &Dataset) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, usize> = d.labels.iter().map(|l| (l.clone(), 0)).collect();
    for ex in &d.examples {
        *counts.get_mut(&ex.label).expect("label checked at construction") += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KShotSpec {
    pub k: usize,
    pub seed: u64,
}

/// Draws exactly `k` examples per class without replacement. Each class is
/// shuffled with a seed derived from `(seed, label)`, so the draw for one class
/// does not depend on which other classes exist. Record order is preserved.
pub fn sample_k_shot(d: &Dataset, spec: KShotSpec) -> Result<Dataset> {
    if spec.k == 0 {
        return Err(Error::InvalidParams("k must be at least 1".into()));
    }
    let mut chosen = Vec::with_capacity(spec.k * d.labels.len());
    for label in &d.labels {
        let mut idx: Vec<usize> = d
            .examples
            .iter()
            .enumerate()
            .filter(|(_, ex)| &ex.label == label)
            .map(|(i, _)| i)
            .collect();
        if idx.len() < spec.k {
            return Err(Error::InsufficientExamples {
                label: label.clone(),
                available: idx.len(),
                requested: spec.k,
            });
        }
        let mut rng = seeded_rng(spec.seed, &format!("kshot/{label}"));
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..spec.k]);
    }
    chosen.sort_unstable();
    let examples = chosen.into_iter().map(|i| d.examples[i].clone()).collect();
    d.with_examples(examples)
}

/// Reads raw records. Blank lines are skipped; an empty file yields an empty
/// vector.
pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let record: Record =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if record.text.trim().is_empty() {
            return Err(parse_err("empty text".into()));
        }
        if record.label.is_empty() {
            return Err(parse_err("empty label".into()));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Loads a dataset whose label inventory is the sorted set of labels found.
pub fn load_dataset(path: &Path, topic: &str) -> Result<Dataset> {
    load_dataset_with_meta(
        path,
        &DatasetMeta {
            topic: Some(topic.to_string()),
            ..DatasetMeta::default()
        },
    )
}

/// Loads a dataset using `meta` for the name, topic, ordered inventory and
/// verbalizations. With an explicit inventory every record's label must be a
/// member of it.
pub fn load_dataset_with_meta(path: &Path, meta: &DatasetMeta) -> Result<Dataset> {
    let records = read_records(path)?;
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels = match &meta.labels {
        Some(labels) => {
            for (i, r) in records.iter().enumerate() {
                if !labels.contains(&r.label) {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message: format!("label {:?} is not in the declared inventory", r.label),
                    });
                }
            }
            labels.clone()
        }
        None => records
            .iter()
            .map(|r| r.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let name = meta.name.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let topic = meta
        .topic
        .clone()
        .ok_or_else(|| Error::InvalidDataset("no topic given".into()))?;
    let examples = records
        .into_iter()
        .map(|r| LabeledExample::new(r.text, r.label))
        .collect();
    Dataset::new(name, topic, labels, examples)?.with_verbalizations(meta.verbalizations.clone())
}

/// Writes the examples in record format. `provenance` tags every record.
pub fn write_dataset(path: &Path, d: &Dataset, provenance: Option<&str>) -> Result<()> {
    let records: Vec<Record> = d
        .examples
        .iter()
        .map(|ex| Record {
            text: ex.text.clone(),
            label: ex.label.clone(),
            provenance: provenance.map(str::to_string),
        })
        .collect();
    write_records(path, &records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn balanced(per_class: usize) -> Dataset {
        let mut ex = Vec::new();
        for i in 0..per_class {
            ex.push(LabeledExample::new(format!("good film {i}"), "pos"));
            ex.push(LabeledExample::new(format!("bad film {i}"), "neg"));
        }
        Dataset::new("toy", "sentiment", vec!["neg".into(), "pos".into()], ex).unwrap()
    }

    #[test]
    fn load_sorts_label_inventory() {
        let f = write_tmp("{\"text\":\"a\",\"label\":\"pos\"}\n{\"text\":\"b\",\"label\":\"neg\"}\n");
        let d = load_dataset(f.path(), "sentiment").unwrap();
        assert_eq!(d.labels(), ["neg", "pos"]);
        assert_eq!(d.len(), 2);
        assert_eq!(d.examples()[0].text, "a");
    }

    #[test]
    fn load_rejects_empty_file() {
        let f = write_tmp("");
        let err = load_dataset(f.path(), "sentiment").unwrap_err();
        assert_eq!(err.to_string(), "empty dataset");
    }

    #[test]
    fn load_reports_line_of_missing_label() {
        let f = write_tmp("{\"text\":\"a\",\"label\":\"pos\"}\n{\"text\":\"b\"}\n");
        match load_dataset(f.path(), "sentiment").unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("label"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_rejects_label_outside_declared_inventory() {
        let f = write_tmp("{\"text\":\"a\",\"label\":\"pos\"}\n{\"text\":\"b\",\"label\":\"meh\"}\n");
        let meta = DatasetMeta {
            topic: Some("sentiment".into()),
            labels: Some(vec!["pos".into(), "neg".into()]),
            ..Default::default()
        };
        let err = load_dataset_with_meta(f.path(), &meta).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn declared_inventory_order_is_kept() {
        let f = write_tmp("{\"text\":\"a\",\"label\":\"pos\"}\n");
        let meta = DatasetMeta {
            topic: Some("sentiment".into()),
            labels: Some(vec!["pos".into(), "neg".into()]),
            verbalizations: [("pos".to_string(), "great".to_string())].into(),
            ..Default::default()
        };
        let d = load_dataset_with_meta(f.path(), &meta).unwrap();
        assert_eq!(d.labels(), ["pos", "neg"]);
        assert_eq!(d.verbalize("pos"), "great");
        assert_eq!(d.verbalize("neg"), "neg");
    }

    #[test]
    fn single_label_inventory_is_invalid() {
        let err = Dataset::new("x", "t", vec!["a".into()], vec![]).unwrap_err();
        assert!(matches!(err, Error::InvalidDataset(_)));
    }

    #[test]
    fn k_shot_is_deterministic_and_exact() {
        let d = balanced(100);
        let spec = KShotSpec { k: 5, seed: 7 };
        let a = sample_k_shot(&d, spec).unwrap();
        let b = sample_k_shot(&d, spec).unwrap();
        assert_eq!(a, b);
        assert!(per_class_counts(&a).values().all(|&c| c == 5));
        assert_eq!(a.labels(), d.labels());
        assert_eq!(a.topic(), d.topic());
    }

    #[test]
    fn k_shot_names_deficient_class() {
        let mut ex: Vec<_> = (0..6).map(|i| LabeledExample::new(format!("p{i}"), "pos")).collect();
        ex.push(LabeledExample::new("n0", "neg"));
        let d = Dataset::new("t", "s", vec!["neg".into(), "pos".into()], ex).unwrap();
        match sample_k_shot(&d, KShotSpec { k: 2, seed: 0 }).unwrap_err() {
            Error::InsufficientExamples { label, available, requested } => {
                assert_eq!(label, "neg");
                assert_eq!((available, requested), (1, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn k_equal_to_class_size_returns_whole_class() {
        let d = balanced(4);
        let s = sample_k_shot(&d, KShotSpec { k: 4, seed: 3 }).unwrap();
        assert_eq!(s, d);
    }

    #[test]
    fn class_draws_ignore_other_classes() {
        let d = balanced(20);
        let mut extra = d.examples().to_vec();
        extra.extend((0..20).map(|i| LabeledExample::new(format!("meh {i}"), "neutral")));
        let wider = Dataset::new(
            "t",
            "sentiment",
            vec!["neg".into(), "neutral".into(), "pos".into()],
            extra,
        )
        .unwrap();
        let spec = KShotSpec { k: 3, seed: 11 };
        let a: Vec<_> = sample_k_shot(&d, spec).unwrap().texts_of("pos").map(String::from).collect();
        let b: Vec<_> = sample_k_shot(&wider, spec).unwrap().texts_of("pos").map(String::from).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn counts() {
        let ex = vec![
            LabeledExample::new("a", "pos"),
            LabeledExample::new("b", "pos"),
            LabeledExample::new("c", "pos"),
            LabeledExample::new("d", "neg"),
            LabeledExample::new("e", "neg"),
        ];
        let d = Dataset::new("t", "s", vec!["neg".into(), "pos".into()], ex).unwrap();
        let c = per_class_counts(&d);
        assert_eq!(c["pos"], 3);
        assert_eq!(c["neg"], 2);

        let empty = d.with_examples(vec![]).unwrap();
        assert!(per_class_counts(&empty).values().all(|&c| c == 0));
    }
}
