//! Rule-based baselines: the four EDA word operations, the EDA dataset
//! augmenter and an external augmenter plug-in.
//!
//! Texts are split on whitespace and re-joined with single spaces. The number
//! of words touched by replacement, insertion and swap is
//! `max(1, round(op_fraction * word_count))`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::process::Command;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_records, write_dataset, Dataset, LabeledExample};
use crate::text::{detokenize, seeded_rng, tokenize};
use crate::{Error, Result};

const BUILTIN_THESAURUS: &str = include_str!("../data/thesaurus.tsv");
const BUILTIN_STOPWORDS: &str = include_str!("../data/stopwords.txt");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdaParams {
    pub op_fraction: f64,
    pub deletion_prob: f64,
    pub seed: u64,
}

impl Default for EdaParams {
    fn default() -> Self {
        Self {
            op_fraction: 0.1,
            deletion_prob: 0.1,
            seed: 0,
        }
    }
}

impl EdaParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("op_fraction", self.op_fraction), ("deletion_prob", self.deletion_prob)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParams(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// Words touched by one replacement, insertion or swap pass.
    pub fn n_changes(&self, n_words: usize) -> usize {
        ((self.op_fraction * n_words as f64).round() as usize).max(1)
    }
}

/// Word to synonyms. No entry lists the word itself.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Thesaurus {
    entries: BTreeMap<String, Vec<String>>,
}

impl Thesaurus {
    /// The small frozen table shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_THESAURUS, Path::new("<builtin thesaurus>")).expect("builtin table parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&raw, path)
    }

    /// Parses `word<TAB>syn1,syn2,...` lines.
    pub fn parse(raw: &str, origin: &Path) -> Result<Self> {
        let mut t = Thesaurus::default();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, syns) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: "expected word<TAB>synonyms".into(),
            })?;
            t.insert(word.trim(), syns.split(',').map(str::trim));
        }
        Ok(t)
    }

    pub fn from_pairs<'a>(entries: impl IntoIterator<Item = (&'a str, Vec<&'a str>)>) -> Self {
        let mut t = Thesaurus::default();
        for (word, syns) in entries {
            t.insert(word, syns);
        }
        t
    }

    fn insert<'a>(&mut self, word: &str, syns: impl IntoIterator<Item = &'a str>) {
        let word = word.to_lowercase();
        let mut list: Vec<String> = syns
            .into_iter()
            .filter(|s| !s.is_empty() && s.to_lowercase() != word)
            .map(str::to_string)
            .collect();
        list.dedup();
        if !list.is_empty() {
            self.entries.entry(word).or_default().extend(list);
        }
    }

    pub fn synonyms(&self, word: &str) -> Option<&[String]> {
        self.entries.get(&word.to_lowercase()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Stopwords(HashSet<String>);

impl Stopwords {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_STOPWORDS)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?))
    }

    pub fn parse(raw: &str) -> Self {
        Self(
            raw.lines()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty())
                .collect(),
        )
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(&word.to_lowercase())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    pub thesaurus: Thesaurus,
    pub stopwords: Stopwords,
}

impl Lexicon {
    pub fn builtin() -> Self {
        Self {
            thesaurus: Thesaurus::builtin(),
            stopwords: Stopwords::builtin(),
        }
    }

    fn eligible(&self, word: &str) -> Option<&[String]> {
        if self.stopwords.contains(word) {
            return None;
        }
        self.thesaurus.synonyms(word)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdaOp {
    SynonymReplace,
    RandomInsert,
    RandomSwap,
    RandomDelete,
}

impl EdaOp {
    pub const ALL: [EdaOp; 4] = [
        EdaOp::SynonymReplace,
        EdaOp::RandomInsert,
        EdaOp::RandomSwap,
        EdaOp::RandomDelete,
    ];
}

fn words(text: &str) -> Vec<String> {
    tokenize(text).into_iter().map(str::to_string).collect()
}

pub fn synonym_replace_words<R: Rng + ?Sized>(
    words: &mut [String],
    n: usize,
    lex: &Lexicon,
    rng: &mut R,
) {
    let mut positions: Vec<usize> = (0..words.len())
        .filter(|&i| lex.eligible(&words[i]).is_some())
        .collect();
    positions.shuffle(rng);
    for &i in positions.iter().take(n) {
        let syns = lex.eligible(&words[i]).expect("filtered above");
        words[i] = syns[rng.gen_range(0..syns.len())].clone();
    }
}

pub fn random_insert_words<R: Rng + ?Sized>(
    words: &mut Vec<String>,
    n: usize,
    lex: &Lexicon,
    rng: &mut R,
) {
    for _ in 0..n {
        let candidates: Vec<&[String]> = words.iter().filter_map(|w| lex.eligible(w)).collect();
        if candidates.is_empty() {
            return;
        }
        let syns = candidates[rng.gen_range(0..candidates.len())];
        let syn = syns[rng.gen_range(0..syns.len())].clone();
        let at = rng.gen_range(0..=words.len());
        words.insert(at, syn);
    }
}

pub fn random_swap_words<R: Rng + ?Sized>(words: &mut [String], n: usize, rng: &mut R) {
    if words.len() < 2 {
        return;
    }
    for _ in 0..n {
        let a = rng.gen_range(0..words.len());
        let b = rng.gen_range(0..words.len());
        words.swap(a, b);
    }
}

pub fn random_delete_words<R: Rng + ?Sized>(words: &[String], p: f64, rng: &mut R) -> Vec<String> {
    if words.len() <= 1 {
        return words.to_vec();
    }
    let kept: Vec<String> = words
        .iter()
        .filter(|_| rng.gen::<f64>() >= p)
        .cloned()
        .collect();
    if kept.is_empty() {
        vec![words[rng.gen_range(0..words.len())].clone()]
    } else {
        kept
    }
}

fn op_rng(params: &EdaParams, op: &str) -> ChaCha8Rng {
    seeded_rng(params.seed, op)
}

pub fn synonym_replace(text: &str, params: &EdaParams, lex: &Lexicon) -> String {
    let mut w = words(text);
    let n = params.n_changes(w.len());
    synonym_replace_words(&mut w, n, lex, &mut op_rng(params, "synonym_replace"));
    detokenize(&w)
}

pub fn random_insert(text: &str, params: &EdaParams, lex: &Lexicon) -> String {
    let mut w = words(text);
    let n = params.n_changes(w.len());
    random_insert_words(&mut w, n, lex, &mut op_rng(params, "random_insert"));
    detokenize(&w)
}

pub fn random_swap(text: &str, params: &EdaParams) -> String {
    let mut w = words(text);
    let n = params.n_changes(w.len());
    random_swap_words(&mut w, n, &mut op_rng(params, "random_swap"));
    detokenize(&w)
}

pub fn random_delete(text: &str, params: &EdaParams) -> String {
    let w = words(text);
    detokenize(&random_delete_words(&w, params.deletion_prob, &mut op_rng(params, "random_delete")))
}

/// Applies `op` with a caller-supplied stream.
pub fn apply_op<R: Rng + ?Sized>(op: EdaOp, text: &str, params: &EdaParams, lex: &Lexicon, rng: &mut R) -> String {
    let mut w = words(text);
    let n = params.n_changes(w.len());
    match op {
        EdaOp::SynonymReplace => synonym_replace_words(&mut w, n, lex, rng),
        EdaOp::RandomInsert => random_insert_words(&mut w, n, lex, rng),
        EdaOp::RandomSwap => random_swap_words(&mut w, n, rng),
        EdaOp::RandomDelete => w = random_delete_words(&w, params.deletion_prob, rng),
    }
    detokenize(&w)
}

/// `per_example` variants of every example, each made by one uniformly chosen
/// operation. Output is variant-major: all first variants, then all second
/// variants, so the first `b * |d|` records are the output for `per_example = b`.
pub fn eda_augment(d: &Dataset, per_example: usize, params: &EdaParams, lex: &Lexicon) -> Result<Dataset> {
    if per_example == 0 {
        return Err(Error::InvalidParams("per_example must be positive".into()));
    }
    params.validate()?;
    let mut out = Vec::with_capacity(per_example * d.len());
    for v in 0..per_example {
        for (i, ex) in d.examples().iter().enumerate() {
            let mut rng = seeded_rng(params.seed, &format!("eda/{i}/{v}"));
            let op = EdaOp::ALL[rng.gen_range(0..EdaOp::ALL.len())];
            let text = apply_op(op, &ex.text, params, lex, &mut rng);
            out.push(LabeledExample::new(text, ex.label.clone()));
        }
    }
    d.with_examples(out)
}

/// Runs `command input output`: the command reads `d` in dataset format from
/// `input` and writes augmented records to `output`. Labels outside the
/// inventory are rejected.
pub fn external_augment(d: &Dataset, command: &str, work_dir: &Path) -> Result<Dataset> {
    let mut parts = command.split_whitespace();
    let program = parts
        .next()
        .ok_or_else(|| Error::Config("empty external augmenter command".into()))?;
    let input = work_dir.join("external-input.jsonl");
    let output = work_dir.join("external-output.jsonl");
    write_dataset(&input, d, None)?;
    let status = Command::new(program)
        .args(parts)
        .arg(&input)
        .arg(&output)
        .status()
        .map_err(|e| Error::Backend(format!("spawning {command:?}: {e}")))?;
    if !status.success() {
        return Err(Error::Backend(format!("external augmenter exited with {status}")));
    }
    let examples = read_records(&output)?
        .into_iter()
        .map(|r| LabeledExample::new(r.text, r.label))
        .collect();
    d.with_examples(examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn good_fine() -> Lexicon {
        Lexicon {
            thesaurus: Thesaurus::from_pairs([("good", vec!["fine"])]),
            stopwords: Stopwords::builtin(),
        }
    }

    #[test]
    fn replaces_the_single_eligible_word() {
        let p = EdaParams { op_fraction: 0.25, ..Default::default() };
        assert_eq!(synonym_replace("the movie was good", &p, &good_fine()), "the movie was fine");
    }

    #[test]
    fn no_thesaurus_hits_is_identity() {
        let p = EdaParams::default();
        assert_eq!(synonym_replace("xyzzy plugh", &p, &good_fine()), "xyzzy plugh");
        assert_eq!(random_insert("xyzzy plugh", &p, &good_fine()), "xyzzy plugh");
    }

    #[test]
    fn change_count_floor() {
        // Independent statement of the rule: at least one, else rounded share.
        let reference = |frac: f64, len: usize| -> usize {
            let share = (frac * len as f64 + 0.5).floor() as usize;
            if share < 1 { 1 } else { share }
        };
        for len in 0..40 {
            for frac in [0.0, 0.05, 0.1, 0.25, 0.5, 1.0] {
                let p = EdaParams { op_fraction: frac, ..Default::default() };
                assert_eq!(p.n_changes(len), reference(frac, len), "len {len} frac {frac}");
            }
        }
        let p = EdaParams { op_fraction: 0.0, ..Default::default() };
        assert_eq!(synonym_replace("the movie was good", &p, &good_fine()), "the movie was fine");
    }

    #[test]
    fn insert_adds_n_words() {
        let p = EdaParams { op_fraction: 0.25, seed: 4, ..Default::default() };
        let out = random_insert("the movie was good", &p, &good_fine());
        assert_eq!(tokenize(&out).len(), 5);
        assert!(out.contains("fine"));
        assert_eq!(out, random_insert("the movie was good", &p, &good_fine()));
    }

    #[test]
    fn swap_two_words() {
        for seed in 0..20 {
            let p = EdaParams { seed, ..Default::default() };
            let out = random_swap("alpha beta", &p);
            assert!(out == "alpha beta" || out == "beta alpha");
        }
        assert_eq!(random_swap("solo", &EdaParams::default()), "solo");
    }

    #[test]
    fn delete_extremes() {
        let keep = EdaParams { deletion_prob: 0.0, ..Default::default() };
        assert_eq!(random_delete("a b c d", &keep), "a b c d");
        let all = EdaParams { deletion_prob: 1.0, ..Default::default() };
        let out = random_delete("a b c d", &all);
        assert_eq!(tokenize(&out).len(), 1);
        assert!(["a", "b", "c", "d"].contains(&out.as_str()));
    }

    #[test]
    fn eda_copies_labels_and_counts() {
        let d = Dataset::new(
            "t",
            "sentiment",
            vec!["neg".into(), "pos".into()],
            (0..10)
                .map(|i| LabeledExample::new(format!("a good film {i}"), if i % 3 == 0 { "neg" } else { "pos" }))
                .collect(),
        )
        .unwrap();
        let lex = Lexicon::builtin();
        let p = EdaParams { seed: 5, ..Default::default() };
        let out = eda_augment(&d, 1, &p, &lex).unwrap();
        assert_eq!(out.len(), 10);
        for (a, b) in out.examples().iter().zip(d.examples()) {
            assert_eq!(a.label, b.label);
            assert!(!a.text.is_empty());
        }
        assert_eq!(out, eda_augment(&d, 1, &p, &lex).unwrap());
        let three = eda_augment(&d, 3, &p, &lex).unwrap();
        assert_eq!(&three.examples()[..10], out.examples());
    }

    #[test]
    fn thesaurus_drops_self_synonyms() {
        let t = Thesaurus::parse("good\tgood,fine\nsame\tsame\n", Path::new("x")).unwrap();
        assert_eq!(t.synonyms("good").unwrap(), ["fine"]);
        assert!(t.synonyms("same").is_none());
        assert!(Thesaurus::parse("no tab here", Path::new("x")).is_err());
        assert!(Thesaurus::builtin().len() > 20);
    }

    #[test]
    fn stopwords_are_never_replaced() {
        let lex = Lexicon {
            thesaurus: Thesaurus::from_pairs([("the", vec!["teh"]), ("good", vec!["fine"])]),
            stopwords: Stopwords::builtin(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut w = words("the the good");
        synonym_replace_words(&mut w, 3, &lex, &mut rng);
        assert_eq!(detokenize(&w), "the the fine");
    }
}
