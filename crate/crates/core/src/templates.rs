//! Prompt templates and the conversion of a labeled dataset into
//! source/target training pairs.
//!
//! Classification templates (`c1`, `c2`, `c3`) put the label or a yes/no
//! answer in the target. Generation templates (`g1`, `g2`) put text in the
//! target and never the label.
//!
//! Templates join a text to the following sentence with `". "`. When the text
//! already ends with `.`, `!` or `?` only the space is inserted, so a text is
//! never followed by a doubled terminator.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::text::{detokenize, seeded_rng, tokenize};
use crate::{Error, Result};

/// Number of leading tokens of `x_i` placed in the `g2` source by default.
pub const DEFAULT_G2_PREFIX_TOKENS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateId {
    C1,
    C2,
    C3,
    G1,
    G2,
}

impl TemplateId {
    pub const ALL: [TemplateId; 5] = [
        TemplateId::C1,
        TemplateId::C2,
        TemplateId::C3,
        TemplateId::G1,
        TemplateId::G2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::C1 => "c1",
            TemplateId::C2 => "c2",
            TemplateId::C3 => "c3",
            TemplateId::G1 => "g1",
            TemplateId::G2 => "g2",
        }
    }

    pub fn is_classification(self) -> bool {
        matches!(self, TemplateId::C1 | TemplateId::C2 | TemplateId::C3)
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown template {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub source: String,
    pub target: String,
    pub template_id: TemplateId,
    pub origin_label: String,
    pub origin_index: usize,
}

/// Classification and generation templates used for conversion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateFamily {
    pub classification: Vec<TemplateId>,
    pub generation: Vec<TemplateId>,
}

impl TemplateFamily {
    pub fn full() -> Self {
        Self {
            classification: vec![TemplateId::C1, TemplateId::C2, TemplateId::C3],
            generation: vec![TemplateId::G1, TemplateId::G2],
        }
    }

    /// One classification and one generation template.
    pub fn two_prompt() -> Self {
        Self {
            classification: vec![TemplateId::C1],
            generation: vec![TemplateId::G1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = Vec::new();
        for &t in &self.classification {
            if !t.is_classification() {
                return Err(Error::Config(format!("{t} is not a classification template")));
            }
            seen.push(t);
        }
        for &t in &self.generation {
            if t.is_classification() {
                return Err(Error::Config(format!("{t} is not a generation template")));
            }
            seen.push(t);
        }
        if seen.is_empty() {
            return Err(Error::Config("template family is empty".into()));
        }
        let mut dedup = seen.clone();
        dedup.sort();
        dedup.dedup();
        if dedup.len() != seen.len() {
            return Err(Error::Config("template family lists a template twice".into()));
        }
        Ok(())
    }

    pub fn templates(&self) -> impl Iterator<Item = TemplateId> + '_ {
        self.classification.iter().chain(&self.generation).copied()
    }

    pub fn len(&self) -> usize {
        self.classification.len() + self.generation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Label strings and topic shared by every template of one dataset.
#[derive(Debug, Clone, Copy)]
pub struct PromptContext<'a> {
    pub topic: &'a str,
    /// Verbalized labels in inventory order.
    pub labels: &'a [String],
}

fn ends_sentence(text: &str) -> bool {
    matches!(text.trim_end().chars().last(), Some('.' | '!' | '?'))
}

fn push_sentence(out: &mut String, text: &str) {
    out.push_str(text);
    if !ends_sentence(text) {
        out.push('.');
    }
}

fn require(cond: bool, template: TemplateId, message: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Template {
            template: template.as_str(),
            message: message.into(),
        })
    }
}

/// Source of `c1`: `Given {topic}: {labels}. Classify: {x}`. Also used to
/// build the self-check scoring source for generated candidates.
pub fn c1_source(x: &str, ctx: PromptContext<'_>) -> String {
    format!("Given {}: {}. Classify: {}", ctx.topic, ctx.labels.join(", "), x)
}

pub fn render_c1(x: &str, ctx: PromptContext<'_>, y: &str) -> Result<(String, String)> {
    require(
        ctx.labels.iter().any(|l| l == y),
        TemplateId::C1,
        format!("label {y:?} is not in the label list"),
    )?;
    require(!x.trim().is_empty(), TemplateId::C1, "empty text")?;
    Ok((c1_source(x, ctx), y.to_string()))
}

fn yes_no_question(x: &str, y: &str, topic: &str) -> String {
    let mut s = String::from("Text: ");
    push_sentence(&mut s, x);
    s.push_str(&format!(" Is this text about {y} {topic}?"));
    s
}

pub fn render_c2(x: &str, topic: &str, y: &str) -> Result<(String, String)> {
    require(!x.trim().is_empty(), TemplateId::C2, "empty text")?;
    Ok((yes_no_question(x, y, topic), "yes".to_string()))
}

/// `c3` asks about a label other than `y`, drawn uniformly with `rng`.
pub fn render_c3<R: Rng + ?Sized>(
    x: &str,
    ctx: PromptContext<'_>,
    y: &str,
    rng: &mut R,
) -> Result<(String, String)> {
    let others: Vec<&String> = ctx.labels.iter().filter(|l| *l != y).collect();
    require(
        ctx.labels.len() >= 2 && !others.is_empty(),
        TemplateId::C3,
        "no negative label available",
    )?;
    let negative = others[rng.gen_range(0..others.len())];
    render_c3_with(x, ctx.topic, negative)
}

/// `c3` with the negative label fixed by the caller.
pub fn render_c3_with(x: &str, topic: &str, negative: &str) -> Result<(String, String)> {
    require(!x.trim().is_empty(), TemplateId::C3, "empty text")?;
    Ok((yes_no_question(x, negative, topic), "no".to_string()))
}

/// Decoding prefix of `g1`: `Description: {y} {topic}. Text:`.
pub fn g1_prefix(topic: &str, y: &str) -> Result<String> {
    require(!topic.trim().is_empty(), TemplateId::G1, "topic must be non-empty")?;
    require(!y.trim().is_empty(), TemplateId::G1, "label must be non-empty")?;
    Ok(format!("Description: {y} {topic}. Text:"))
}

pub fn render_g1(x: &str, topic: &str, y: &str) -> Result<(String, String)> {
    require(!x.trim().is_empty(), TemplateId::G1, "empty text")?;
    Ok((g1_prefix(topic, y)?, x.to_string()))
}

/// `g2` shows a same-class text `x_j` and the first `prefix_tokens` tokens of
/// `x_i`; the target is the rest of `x_i`.
pub fn render_g2(
    x_i: &str,
    x_j: &str,
    topic: &str,
    y: &str,
    prefix_tokens: usize,
) -> Result<(String, String)> {
    require(prefix_tokens >= 1, TemplateId::G2, "prefix length must be positive")?;
    require(!x_j.trim().is_empty(), TemplateId::G2, "empty context text")?;
    let tokens = tokenize(x_i);
    require(
        tokens.len() > prefix_tokens,
        TemplateId::G2,
        format!(
            "prefix split impossible: {} tokens, prefix needs {} plus one",
            tokens.len(),
            prefix_tokens
        ),
    )?;
    let mut source = g1_prefix(topic, y)?;
    source.push(' ');
    push_sentence(&mut source, x_j);
    source.push_str(" Another text: ");
    source.push_str(&detokenize(&tokens[..prefix_tokens]));
    Ok((source, detokenize(&tokens[prefix_tokens..])))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvertOptions {
    pub g2_prefix_tokens: usize,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        Self {
            g2_prefix_tokens: DEFAULT_G2_PREFIX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Conversion {
    pub pairs: Vec<PromptPair>,
    /// Template applications skipped because a precondition failed.
    pub skipped: BTreeMap<TemplateId, usize>,
}

impl Conversion {
    pub fn counts(&self) -> BTreeMap<TemplateId, usize> {
        let mut counts = BTreeMap::new();
        for p in &self.pairs {
            *counts.entry(p.template_id).or_insert(0) += 1;
        }
        counts
    }
}

/// Applies every template of `family` to every example, in record order and
/// family order. One seeded stream drives the `c3` negative labels and the
/// `g2` context picks, so the output is reproducible for a fixed seed.
///
/// The `g2` context text is another example of the same class; a class with a
/// single example uses that example as its own context.
pub fn convert(
    d: &Dataset,
    family: &TemplateFamily,
    seed: u64,
    opts: ConvertOptions,
) -> Result<Conversion> {
    family.validate()?;
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let verbalized: Vec<String> = d.labels().iter().map(|l| d.verbalize(l).to_string()).collect();
    let ctx = PromptContext {
        topic: d.topic(),
        labels: &verbalized,
    };
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, ex) in d.examples().iter().enumerate() {
        by_class.entry(ex.label.as_str()).or_default().push(i);
    }

    let mut rng = seeded_rng(seed, "convert");
    let mut out = Conversion::default();
    for (i, ex) in d.examples().iter().enumerate() {
        let y = d.verbalize(&ex.label);
        for template in family.templates() {
            let rendered = match template {
                TemplateId::C1 => render_c1(&ex.text, ctx, y),
                TemplateId::C2 => render_c2(&ex.text, ctx.topic, y),
                TemplateId::C3 => render_c3(&ex.text, ctx, y, &mut rng),
                TemplateId::G1 => render_g1(&ex.text, ctx.topic, y),
                TemplateId::G2 => {
                    let peers: Vec<usize> = by_class[ex.label.as_str()]
                        .iter()
                        .copied()
                        .filter(|&j| j != i)
                        .collect();
                    let j = if peers.is_empty() {
                        i
                    } else {
                        peers[rng.gen_range(0..peers.len())]
                    };
                    render_g2(
                        &ex.text,
                        &d.examples()[j].text,
                        ctx.topic,
                        y,
                        opts.g2_prefix_tokens,
                    )
                }
            };
            match rendered {
                Ok((source, target)) => out.pairs.push(PromptPair {
                    source,
                    target,
                    template_id: template,
                    origin_label: ex.label.clone(),
                    origin_index: i,
                }),
                Err(err @ Error::Template { .. }) => {
                    log::debug!("example {i}: skipping {template}: {err}");
                    *out.skipped.entry(template).or_insert(0) += 1;
                }
                Err(other) => return Err(other),
            }
        }
    }
    for (template, n) in &out.skipped {
        log::warn!("skipped {n} {template} pair(s) with unsatisfiable preconditions");
    }
    Ok(out)
}

pub fn write_pairs(path: &Path, pairs: &[PromptPair]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for p in pairs {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: &Path) -> Result<Vec<PromptPair>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        pairs.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LabeledExample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const X: &str = "top-notch action powers this romantic drama.";

    fn sentiment_labels() -> Vec<String> {
        vec!["negative".into(), "positive".into()]
    }

    #[test]
    fn c1_lists_labels_in_order() {
        let labels = sentiment_labels();
        let ctx = PromptContext { topic: "sentiment", labels: &labels };
        let (s, t) = render_c1(X, ctx, "positive").unwrap();
        assert_eq!(
            s,
            "Given sentiment: negative, positive. Classify: top-notch action powers this romantic drama."
        );
        assert_eq!(t, "positive");

        let (_, t) = render_c1("a", ctx, "negative").unwrap();
        assert_eq!(t, "negative");
        assert!(render_c1(X, ctx, "joy").is_err());
    }

    #[test]
    fn c2_keeps_question_marks_verbatim() {
        let (s, t) = render_c2("is it good? maybe", "sentiment", "positive").unwrap();
        assert_eq!(s, "Text: is it good? maybe. Is this text about positive sentiment?");
        assert_eq!(t, "yes");
        let (s, _) = render_c2("really?", "sentiment", "positive").unwrap();
        assert_eq!(s, "Text: really? Is this text about positive sentiment?");
    }

    #[test]
    fn c3_binary_labels_force_the_other_label() {
        let labels = sentiment_labels();
        let ctx = PromptContext { topic: "sentiment", labels: &labels };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (s, t) = render_c3(X, ctx, "positive", &mut rng).unwrap();
            assert!(s.ends_with("about negative sentiment?"));
            assert_eq!(t, "no");
        }
    }

    #[test]
    fn c3_is_deterministic_under_seed() {
        let labels: Vec<String> = ["anger", "fear", "joy", "love", "sadness", "surprise"]
            .into_iter()
            .map(String::from)
            .collect();
        let ctx = PromptContext { topic: "emotion", labels: &labels };
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            render_c3("i feel fine", ctx, "joy", &mut rng).unwrap().0
        };
        assert_eq!(draw(), draw());
        assert!(!draw().contains("about joy"));
    }

    #[test]
    fn c3_needs_a_second_label() {
        let labels = vec!["positive".to_string()];
        let ctx = PromptContext { topic: "sentiment", labels: &labels };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(render_c3(X, ctx, "positive", &mut rng).is_err());
    }

    #[test]
    fn g1_prefix_requires_topic() {
        assert_eq!(
            g1_prefix("sentiment", "negative").unwrap(),
            "Description: negative sentiment. Text:"
        );
        assert!(g1_prefix("", "positive").is_err());
    }

    #[test]
    fn g2_boundary_splits() {
        let (_, t) = render_g2("one two three four", "ctx", "sentiment", "positive", 3).unwrap();
        assert_eq!(t, "four");
        let err = render_g2("one two", "ctx", "sentiment", "positive", 3).unwrap_err();
        assert!(err.to_string().contains("prefix split impossible"));
        assert!(render_g2("one two three", "ctx", "sentiment", "positive", 3).is_err());
    }

    fn dataset(texts: &[(&str, &str)]) -> Dataset {
        let ex = texts.iter().map(|(t, l)| LabeledExample::new(*t, *l)).collect();
        Dataset::new("t", "sentiment", sentiment_labels(), ex).unwrap()
    }

    #[test]
    fn convert_single_example_full_and_two_prompt() {
        let d = dataset(&[(X, "positive")]);
        let full = convert(&d, &TemplateFamily::full(), 0, ConvertOptions::default()).unwrap();
        let ids: Vec<_> = full.pairs.iter().map(|p| p.template_id).collect();
        assert_eq!(ids, TemplateId::ALL);
        let two = convert(&d, &TemplateFamily::two_prompt(), 0, ConvertOptions::default()).unwrap();
        assert_eq!(two.pairs.len(), 2);
    }

    #[test]
    fn convert_skips_short_texts_for_g2() {
        let texts: Vec<(String, &str)> = (0..10)
            .map(|i| (format!("w{i} x y"), if i % 2 == 0 { "positive" } else { "negative" }))
            .collect();
        let refs: Vec<(&str, &str)> = texts.iter().map(|(t, l)| (t.as_str(), *l)).collect();
        let d = dataset(&refs);
        let c = convert(&d, &TemplateFamily::full(), 1, ConvertOptions::default()).unwrap();
        assert_eq!(c.pairs.len(), 40);
        assert_eq!(c.skipped.get(&TemplateId::G2), Some(&10));
        assert!(c.pairs.iter().all(|p| p.template_id != TemplateId::G2));
    }

    #[test]
    fn convert_uses_verbalizations() {
        let d = dataset(&[("good fun film here", "positive"), ("dull slow film here", "negative")])
            .with_verbalizations([("positive".to_string(), "great".to_string())].into())
            .unwrap();
        let c = convert(&d, &TemplateFamily::full(), 3, ConvertOptions::default()).unwrap();
        let c1 = &c.pairs[0];
        assert_eq!(c1.target, "great");
        assert!(c1.source.starts_with("Given sentiment: negative, great."));
        assert_eq!(c1.origin_label, "positive");
    }

    #[test]
    fn family_validation() {
        assert!(TemplateFamily::full().validate().is_ok());
        let bad = TemplateFamily {
            classification: vec![TemplateId::G1],
            generation: vec![],
        };
        assert!(bad.validate().is_err());
        let dup = TemplateFamily {
            classification: vec![TemplateId::C1, TemplateId::C1],
            generation: vec![TemplateId::G1],
        };
        assert!(dup.validate().is_err());
    }

    #[test]
    fn pairs_file_round_trip() {
        let d = dataset(&[(X, "positive"), ("a slow dull film", "negative")]);
        let c = convert(&d, &TemplateFamily::full(), 5, ConvertOptions::default()).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_pairs(f.path(), &c.pairs).unwrap();
        let raw = std::fs::read_to_string(f.path()).unwrap();
        assert!(raw.lines().next().unwrap().contains("\"template_id\":\"c1\""));
        assert_eq!(read_pairs(f.path()).unwrap(), c.pairs);
    }
}
