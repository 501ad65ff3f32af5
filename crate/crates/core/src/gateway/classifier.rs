//! Built-in downstream classifiers.

use std::collections::{BTreeMap, HashMap};

use super::{FineTuneParams, TextClassifier, TrainedClassifier};
use crate::corpus::Dataset;
use crate::text::tokenize;
use crate::Result;

/// Memorizes exact training texts; anything unseen gets the majority training
/// label. Ties go to the label declared first in the inventory.
#[derive(Debug, Clone, Copy, Default)]
pub struct MemorizingClassifier;

impl TextClassifier for MemorizingClassifier {
    fn name(&self) -> &str {
        "memorize"
    }

    fn train(&self, d: &Dataset, _params: &FineTuneParams) -> Result<Box<dyn TrainedClassifier>> {
        let rank: HashMap<&str, usize> = d
            .labels()
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        let pick = |counts: &BTreeMap<&str, usize>| -> String {
            counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(rank[b.0].cmp(&rank[a.0])))
                .map(|(l, _)| l.to_string())
                .expect("non-empty counts")
        };

        let mut per_text: HashMap<&str, BTreeMap<&str, usize>> = HashMap::new();
        let mut overall: BTreeMap<&str, usize> = BTreeMap::new();
        for ex in d.examples() {
            *per_text
                .entry(ex.text.as_str())
                .or_default()
                .entry(ex.label.as_str())
                .or_insert(0) += 1;
            *overall.entry(ex.label.as_str()).or_insert(0) += 1;
        }
        Ok(Box::new(MemorizedTexts {
            labels: d.labels().to_vec(),
            memory: per_text
                .iter()
                .map(|(text, counts)| (text.to_string(), pick(counts)))
                .collect(),
            majority: pick(&overall),
        }))
    }
}

#[derive(Debug)]
struct MemorizedTexts {
    labels: Vec<String>,
    memory: HashMap<String, String>,
    majority: String,
}

impl TrainedClassifier for MemorizedTexts {
    fn labels(&self) -> &[String] {
        &self.labels
    }

    fn predict(&self, texts: &[String]) -> Result<Vec<String>> {
        Ok(texts
            .iter()
            .map(|t| self.memory.get(t).unwrap_or(&self.majority).clone())
            .collect())
    }
}

/// Multinomial naive Bayes over lowercased whitespace tokens with add-one
/// smoothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct NaiveBayesClassifier;

impl TextClassifier for NaiveBayesClassifier {
    fn name(&self) -> &str {
        "naive-bayes"
    }

    fn train(&self, d: &Dataset, _params: &FineTuneParams) -> Result<Box<dyn TrainedClassifier>> {
        let n_labels = d.labels().len();
        let label_idx: HashMap<&str, usize> = d
            .labels()
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        let mut docs = vec![0usize; n_labels];
        let mut word_counts: HashMap<String, Vec<f64>> = HashMap::new();
        let mut totals = vec![0f64; n_labels];
        for ex in d.examples() {
            let y = label_idx[ex.label.as_str()];
            docs[y] += 1;
            for tok in tokenize(&ex.text) {
                word_counts
                    .entry(tok.to_lowercase())
                    .or_insert_with(|| vec![0.0; n_labels])[y] += 1.0;
                totals[y] += 1.0;
            }
        }
        let vocab = word_counts.len() as f64;
        let n_docs = d.len() as f64;
        let log_prior = docs
            .iter()
            .map(|&c| ((c as f64 + 1.0) / (n_docs + n_labels as f64)).ln())
            .collect();
        let log_likelihood = word_counts
            .into_iter()
            .map(|(w, counts)| {
                let lls = counts
                    .iter()
                    .zip(&totals)
                    .map(|(c, t)| ((c + 1.0) / (t + vocab)).ln())
                    .collect();
                (w, lls)
            })
            .collect();
        Ok(Box::new(NaiveBayesModel {
            labels: d.labels().to_vec(),
            log_prior,
            log_likelihood,
        }))
    }
}

#[derive(Debug)]
struct NaiveBayesModel {
    labels: Vec<String>,
    log_prior: Vec<f64>,
    log_likelihood: HashMap<String, Vec<f64>>,
}

impl NaiveBayesModel {
    fn predict_one(&self, text: &str) -> &str {
        let mut scores = self.log_prior.clone();
        for tok in tokenize(text) {
            // Words never seen in training carry no evidence.
            if let Some(lls) = self.log_likelihood.get(&tok.to_lowercase()) {
                scores.iter_mut().zip(lls).for_each(|(s, ll)| *s += ll);
            }
        }
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        &self.labels[best]
    }
}

impl TrainedClassifier for NaiveBayesModel {
    fn labels(&self) -> &[String] {
        &self.labels
    }

    fn predict(&self, texts: &[String]) -> Result<Vec<String>> {
        Ok(texts.iter().map(|t| self.predict_one(t).to_string()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LabeledExample;
    use crate::gateway::train_classifier;

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
    fn memorizes_and_falls_back_to_majority() {
        let d = ds(&[("a", "pos"), ("b", "neg"), ("c", "neg")]);
        let m = train_classifier(&MemorizingClassifier, &d, &FineTuneParams::classifier()).unwrap();
        let out = m.predict(&["a".into(), "zzz".into()]).unwrap();
        assert_eq!(out, vec!["pos", "neg"]);

        let single = ds(&[("a", "pos")]);
        let m = train_classifier(&MemorizingClassifier, &single, &FineTuneParams::classifier()).unwrap();
        assert_eq!(m.predict(&["a".into(), "zzz".into()]).unwrap(), vec!["pos", "pos"]);
    }

    #[test]
    fn majority_ties_follow_inventory_order() {
        let d = ds(&[("a", "pos"), ("b", "neg")]);
        let m = train_classifier(&MemorizingClassifier, &d, &FineTuneParams::classifier()).unwrap();
        assert_eq!(m.predict(&["q".into()]).unwrap(), vec!["neg"]);
    }

    #[test]
    fn empty_training_set_rejected() {
        let d = ds(&[]);
        assert!(train_classifier(&MemorizingClassifier, &d, &FineTuneParams::classifier()).is_err());
    }

    #[test]
    fn naive_bayes_separates_vocabularies() {
        let d = ds(&[
            ("great fun film", "pos"),
            ("lovely great acting", "pos"),
            ("dull boring film", "neg"),
            ("boring slow plot", "neg"),
        ]);
        let m = train_classifier(&NaiveBayesClassifier, &d, &FineTuneParams::classifier()).unwrap();
        let out = m.predict(&["Great fun".into(), "so boring".into()]).unwrap();
        assert_eq!(out, vec!["pos", "neg"]);
    }
}
