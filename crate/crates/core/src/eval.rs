//! Quality measurements and run reports: unique-trigram diversity, label
//! fidelity under an oracle classifier, and downstream accuracy over seeds
//! with the augmentation factor picked on the development split.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::gateway::{train_classifier, FineTuneParams, TextClassifier, TrainedClassifier};
use crate::text::tokenize;
use crate::{Error, Result};

/// Column order of the accuracy table.
pub const STANDARD_SHOTS: [usize; 5] = [5, 10, 20, 50, 100];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityScore {
    pub unique_trigrams: usize,
    pub total_trigrams: usize,
    /// Absent when the population has no trigram.
    pub ratio: Option<f64>,
}

/// Distinct over total word trigrams of a text population. Tokens are
/// whitespace-split and case-folded; trigrams never span two texts.
pub fn trigram_diversity<'a>(texts: impl IntoIterator<Item = &'a str>) -> DiversityScore {
    let mut unique: HashSet<[String; 3]> = HashSet::new();
    let mut total = 0;
    for text in texts {
        let tokens: Vec<String> = tokenize(text).into_iter().map(str::to_lowercase).collect();
        for w in tokens.windows(3) {
            total += 1;
            unique.insert([w[0].clone(), w[1].clone(), w[2].clone()]);
        }
    }
    DiversityScore {
        unique_trigrams: unique.len(),
        total_trigrams: total,
        ratio: (total > 0).then(|| unique.len() as f64 / total as f64),
    }
}

/// Diversity of the combined original and generated population.
pub fn diversity(original: &Dataset, generated: &Dataset) -> DiversityScore {
    trigram_diversity(
        original
            .examples()
            .iter()
            .chain(generated.examples())
            .map(|ex| ex.text.as_str()),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityScore {
    pub n_generated: usize,
    pub n_agree: usize,
    pub accuracy: f64,
}

/// Share of generated examples whose oracle prediction matches their label.
/// The oracle should be trained on the full original training split.
pub fn fidelity(generated: &Dataset, oracle: &dyn TrainedClassifier) -> Result<FidelityScore> {
    if generated.is_empty() {
        return Err(Error::InvalidParams("fidelity of an empty generated set".into()));
    }
    let n_agree = agreements(generated, oracle)?;
    Ok(FidelityScore {
        n_generated: generated.len(),
        n_agree,
        accuracy: n_agree as f64 / generated.len() as f64,
    })
}

fn agreements(d: &Dataset, classifier: &dyn TrainedClassifier) -> Result<usize> {
    let texts: Vec<String> = d.examples().iter().map(|ex| ex.text.clone()).collect();
    let predicted = classifier.predict(&texts)?;
    if predicted.len() != texts.len() {
        return Err(Error::Backend("classifier returned the wrong number of labels".into()));
    }
    Ok(predicted
        .iter()
        .zip(d.examples())
        .filter(|(p, ex)| **p == ex.label)
        .count())
}

pub fn accuracy(classifier: &dyn TrainedClassifier, d: &Dataset) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(agreements(d, classifier)? as f64 / d.len() as f64)
}

/// Mean and sample (n-1) standard deviation; the deviation of one value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Chosen augmentation factor; absent without augmentation.
    pub beta: Option<usize>,
    pub dev_accuracy: Option<f64>,
    pub test_accuracy: f64,
}

/// Trains on `train` plus each candidate augmentation set, picks the factor
/// with the best development accuracy (ties to the smaller factor) and
/// reports its test accuracy. An empty `augmented` map trains on `train` alone.
pub fn evaluate_seed(
    train: &Dataset,
    augmented: &BTreeMap<usize, Dataset>,
    dev: Option<&Dataset>,
    test: &Dataset,
    classifier: &dyn TextClassifier,
    params: &FineTuneParams,
    seed: u64,
) -> Result<SeedOutcome> {
    train.check_same_labels(test)?;
    if let Some(dev) = dev {
        train.check_same_labels(dev)?;
    }
    for aug in augmented.values() {
        train.check_same_labels(aug)?;
    }
    if augmented.len() > 1 && dev.is_none() {
        return Err(Error::Config("dev set required for β selection".into()));
    }
    let params = FineTuneParams { seed, ..*params };

    if augmented.is_empty() {
        let model = train_classifier(classifier, train, &params)?;
        return Ok(SeedOutcome {
            seed,
            beta: None,
            dev_accuracy: dev.map(|d| accuracy(model.as_ref(), d)).transpose()?,
            test_accuracy: accuracy(model.as_ref(), test)?,
        });
    }

    let mut best: Option<SeedOutcome> = None;
    for (&beta, aug) in augmented {
        let model = train_classifier(classifier, &train.concat(aug)?, &params)?;
        let dev_accuracy = dev.map(|d| accuracy(model.as_ref(), d)).transpose()?;
        let better = match (&best, dev_accuracy) {
            (None, _) => true,
            (Some(b), Some(acc)) => acc > b.dev_accuracy.unwrap_or(f64::NEG_INFINITY),
            (Some(_), None) => false,
        };
        if better {
            best = Some(SeedOutcome {
                seed,
                beta: Some(beta),
                dev_accuracy,
                test_accuracy: accuracy(model.as_ref(), test)?,
            });
        }
    }
    Ok(best.expect("at least one augmentation set"))
}

/// Downstream protocol for one method and shot count on a fixed training split.
#[allow(clippy::too_many_arguments)]
pub fn downstream_eval(
    method: &str,
    k: usize,
    train: &Dataset,
    augmented: &BTreeMap<usize, Dataset>,
    dev: Option<&Dataset>,
    test: &Dataset,
    classifier: &dyn TextClassifier,
    params: &FineTuneParams,
    seeds: &[u64],
) -> Result<RunReport> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut report = RunReport::default();
    for &seed in seeds {
        let outcome = evaluate_seed(train, augmented, dev, test, classifier, params, seed)?;
        report.seeds.push(SeedRecord {
            method: method.to_string(),
            k,
            seed,
            accuracy: outcome.test_accuracy,
            dev_accuracy: outcome.dev_accuracy,
            beta: outcome.beta,
            diversity: None,
            fidelity: None,
        });
    }
    report.aggregate(&BTreeMap::new());
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub method: String,
    pub k: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub dev_accuracy: Option<f64>,
    pub beta: Option<usize>,
    pub diversity: Option<f64>,
    pub fidelity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub k: usize,
    pub n_seeds: usize,
    pub mean: f64,
    pub std: f64,
    /// Chosen factor per seed, in seed order.
    pub betas: Vec<Option<usize>>,
    pub diversity: Option<f64>,
    pub fidelity: Option<f64>,
    /// Mean realized candidates per original example, per class.
    pub realized_alpha: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ReportLine {
    Seed(SeedRecord),
    Aggregate(AggregateRow),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub seeds: Vec<SeedRecord>,
    pub aggregates: Vec<AggregateRow>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

impl RunReport {
    /// Rebuilds the aggregate rows from the seed records, grouped by method in
    /// first-appearance order and by ascending `k`.
    pub fn aggregate(&mut self, realized_alpha: &BTreeMap<(String, usize), BTreeMap<String, f64>>) {
        let mut methods: Vec<&str> = Vec::new();
        for r in &self.seeds {
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
        }
        let mut rows = Vec::new();
        for method in methods {
            let ks: BTreeSet<usize> = self
                .seeds
                .iter()
                .filter(|r| r.method == method)
                .map(|r| r.k)
                .collect();
            for k in ks {
                let group: Vec<&SeedRecord> = self
                    .seeds
                    .iter()
                    .filter(|r| r.method == method && r.k == k)
                    .collect();
                let accs: Vec<f64> = group.iter().map(|r| r.accuracy).collect();
                let (mean, std) = mean_std(&accs);
                rows.push(AggregateRow {
                    method: method.to_string(),
                    k,
                    n_seeds: group.len(),
                    mean,
                    std,
                    betas: group.iter().map(|r| r.beta).collect(),
                    diversity: mean_of(group.iter().map(|r| r.diversity)),
                    fidelity: mean_of(group.iter().map(|r| r.fidelity)),
                    realized_alpha: realized_alpha
                        .get(&(method.to_string(), k))
                        .cloned()
                        .unwrap_or_default(),
                });
            }
        }
        self.aggregates = rows;
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let lines = self
            .seeds
            .iter()
            .cloned()
            .map(ReportLine::Seed)
            .chain(self.aggregates.iter().cloned().map(ReportLine::Aggregate));
        for line in lines {
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut report = RunReport::default();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ReportLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            match parsed {
                ReportLine::Seed(r) => report.seeds.push(r),
                ReportLine::Aggregate(r) => report.aggregates.push(r),
            }
        }
        Ok(report)
    }
}

/// Marker for a (method, k) cell without results.
pub const ABSENT_CELL: &str = "-";

/// Plain-text accuracy table: one row per method, one column per shot count,
/// cells `mean (std)` in percent.
pub fn report_table(rows: &[AggregateRow]) -> String {
    let mut ks: Vec<usize> = rows.iter().map(|r| r.k).collect::<BTreeSet<_>>().into_iter().collect();
    ks.sort_by_key(|k| (STANDARD_SHOTS.iter().position(|s| s == k).unwrap_or(usize::MAX), *k));
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }

    let header: Vec<String> = std::iter::once("method".to_string())
        .chain(ks.iter().map(|k| format!("k={k}")))
        .collect();
    let mut body: Vec<Vec<String>> = Vec::new();
    for method in &methods {
        let mut line = vec![method.to_string()];
        for k in &ks {
            let cell = rows
                .iter()
                .find(|r| r.method == *method && r.k == *k)
                .map(|r| format!("{:.1} ({:.1})", 100.0 * r.mean, 100.0 * r.std))
                .unwrap_or_else(|| ABSENT_CELL.to_string());
            line.push(cell);
        }
        body.push(line);
    }

    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            std::iter::once(&header)
                .chain(&body)
                .map(|row| row[c].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for row in std::iter::once(&header).chain(&body) {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", cells.join(" | ").trim_end());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub method: String,
    pub k: usize,
    pub seed: u64,
    pub diversity_ratio: Option<f64>,
    pub fidelity_accuracy: Option<f64>,
}

pub fn write_scatter(path: &Path, points: &[ScatterPoint]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for p in points {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LabeledExample;
    use crate::gateway::classifier::MemorizingClassifier;

    fn ratio(texts: &[&str]) -> Option<f64> {
        trigram_diversity(texts.iter().copied()).ratio
    }

    #[test]
    fn hand_enumerated_trigrams() {
        assert_eq!(ratio(&["a b c d", "a b c e"]), Some(0.75));
        assert_eq!(ratio(&["one two three"]), Some(1.0));
        assert_eq!(ratio(&["one two three", "one two three"]), Some(0.5));
        assert_eq!(ratio(&["too short", "x"]), None);
    }

    #[test]
    fn case_folding_and_no_cross_text_trigrams() {
        assert_eq!(ratio(&["A B C", "a b c"]), Some(0.5));
        let s = trigram_diversity(["a b", "c d"]);
        assert_eq!(s.total_trigrams, 0);
    }

    fn ds(ex: &[(&str, &str)]) -> Dataset {
        Dataset::new(
            "t",
            "sentiment",
            vec!["neg".into(), "pos".into()],
            ex.iter().map(|(t, l)| LabeledExample::new(*t, *l)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn fidelity_counts_agreement() {
        let train = ds(&[("a", "pos"), ("b", "neg"), ("c", "pos"), ("d", "neg")]);
        let oracle = train_classifier(&MemorizingClassifier, &train, &FineTuneParams::classifier()).unwrap();
        let gen = ds(&[("a", "pos"), ("b", "neg"), ("c", "pos"), ("d", "pos")]);
        let f = fidelity(&gen, oracle.as_ref()).unwrap();
        assert_eq!((f.n_generated, f.n_agree, f.accuracy), (4, 3, 0.75));
        assert_eq!(fidelity(&train, oracle.as_ref()).unwrap().accuracy, 1.0);
        assert!(fidelity(&ds(&[]), oracle.as_ref()).is_err());
    }

    #[test]
    fn sample_standard_deviation() {
        let (m, s) = mean_std(&[0.8, 0.6]);
        assert!((m - 0.7).abs() < 1e-12);
        // sqrt(((0.1)^2 + (0.1)^2) / 1)
        assert!((s - 0.02f64.sqrt()).abs() < 1e-12);
        assert!((s - 0.1414).abs() < 1e-4);
        assert_eq!(mean_std(&[0.3]), (0.3, 0.0));
    }

    #[test]
    fn memorized_test_set_is_perfect() {
        let d = ds(&[("a", "pos"), ("b", "neg"), ("c", "pos")]);
        let r = downstream_eval("none", 5, &d, &BTreeMap::new(), None, &d, &MemorizingClassifier,
            &FineTuneParams::classifier(), &[1, 2, 3]).unwrap();
        assert_eq!(r.aggregates.len(), 1);
        assert_eq!(r.aggregates[0].mean, 1.0);
        assert_eq!(r.aggregates[0].std, 0.0);
    }

    #[test]
    fn several_betas_need_dev() {
        let d = ds(&[("a", "pos"), ("b", "neg")]);
        let aug: BTreeMap<usize, Dataset> = [(1, d.clone()), (2, d.clone())].into();
        let err = evaluate_seed(&d, &aug, None, &d, &MemorizingClassifier, &FineTuneParams::classifier(), 0)
            .unwrap_err();
        assert_eq!(err.to_string(), "configuration error: dev set required for β selection");
    }

    #[test]
    fn beta_chosen_on_dev() {
        let train = ds(&[("a", "pos"), ("b", "neg")]);
        let dev = ds(&[("x", "pos"), ("y", "neg")]);
        let aug1 = ds(&[("q", "pos")]);
        let aug2 = ds(&[("x", "pos"), ("y", "neg")]);
        let aug: BTreeMap<usize, Dataset> = [(1, aug1), (2, aug2)].into();
        let out = evaluate_seed(&train, &aug, Some(&dev), &dev, &MemorizingClassifier,
            &FineTuneParams::classifier(), 0).unwrap();
        assert_eq!(out.beta, Some(2));
        assert_eq!(out.dev_accuracy, Some(1.0));
    }

    #[test]
    fn label_mismatch_rejected() {
        let a = ds(&[("a", "pos")]);
        let b = Dataset::new("t", "s", vec!["x".into(), "y".into()], vec![]).unwrap();
        assert!(evaluate_seed(&a, &BTreeMap::new(), None, &b, &MemorizingClassifier,
            &FineTuneParams::classifier(), 0).is_err());
    }

    fn row(method: &str, k: usize, mean: f64) -> AggregateRow {
        AggregateRow {
            method: method.into(),
            k,
            n_seeds: 1,
            mean,
            std: 0.0,
            betas: vec![None],
            diversity: None,
            fidelity: None,
            realized_alpha: BTreeMap::new(),
        }
    }

    #[test]
    fn table_shapes() {
        let one = report_table(&[row("sta", 5, 0.728)]);
        assert_eq!(one.lines().count(), 2);
        assert!(one.contains("72.8 (0.0)"));

        let t = report_table(&[row("sta", 10, 0.5), row("none", 5, 0.4), row("sta", 5, 0.6)]);
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].starts_with("method"));
        assert!(lines[0].find("k=5").unwrap() < lines[0].find("k=10").unwrap());
        assert!(lines[2].starts_with("none"));
        assert!(lines[2].contains(ABSENT_CELL));
        assert!(lines[2].contains("40.0 (0.0)"));
        assert!(lines[2].trim_end().ends_with(ABSENT_CELL));
    }

    #[test]
    fn report_file_round_trip() {
        let mut r = RunReport::default();
        for (seed, acc) in [(1, 0.8), (2, 0.6)] {
            r.seeds.push(SeedRecord {
                method: "sta".into(),
                k: 5,
                seed,
                accuracy: acc,
                dev_accuracy: Some(0.5),
                beta: Some(2),
                diversity: Some(0.9),
                fidelity: None,
            });
        }
        r.aggregate(&BTreeMap::new());
        let f = tempfile::NamedTempFile::new().unwrap();
        r.write(f.path()).unwrap();
        assert_eq!(RunReport::read(f.path()).unwrap(), r);
    }
}
