//! Token pattern classes over decoded strings: delimiters, formatting, word
//! starts, word parts and induction repeats.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BigramStats, Corpus};

const TABLES: &str = include_str!("../data/patterns.json");

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("position 0 has no predecessor")]
    PositionZero,
    #[error("position {position} outside context of length {len}")]
    Position { position: usize, len: usize },
    #[error("token {0} has no decoded string")]
    UnknownToken(u32),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("sample size {requested} exceeds {available} predicted positions")]
    SampleSize { requested: usize, available: usize },
    #[error("bad pattern tables: {0}")]
    Tables(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = PatternError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PatternLabel {
    WordPart,
    InductionPattern,
    Formatting,
    WordStart,
    LeftDelimiter,
    RightDelimiter,
}

impl PatternLabel {
    pub const ALL: [PatternLabel; 6] = [
        PatternLabel::WordPart,
        PatternLabel::InductionPattern,
        PatternLabel::Formatting,
        PatternLabel::WordStart,
        PatternLabel::LeftDelimiter,
        PatternLabel::RightDelimiter,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PatternLabel::WordPart => "word_part",
            PatternLabel::InductionPattern => "induction_pattern",
            PatternLabel::Formatting => "formatting",
            PatternLabel::WordStart => "word_start",
            PatternLabel::LeftDelimiter => "left_delimiter",
            PatternLabel::RightDelimiter => "right_delimiter",
        }
    }
}

impl fmt::Display for PatternLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub type LabelSet = BTreeSet<PatternLabel>;

/// The membership lists and thresholds as shipped in `data/patterns.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternTables {
    pub left_delimiters: Vec<String>,
    pub right_delimiters: Vec<String>,
    pub formatting: Vec<String>,
    pub induction_stop_list: Vec<String>,
    pub bigram_threshold: f64,
    pub word_start_regex: String,
    pub word_part_regex: String,
}

impl PatternTables {
    pub fn bundled() -> Self {
        serde_json::from_str(TABLES).expect("bundled pattern tables parse")
    }
}

/// Compiled classifier. The threshold and stop list can be overridden for
/// sensitivity runs; the membership lists cannot.
#[derive(Debug, Clone)]
pub struct PatternConfig {
    tables: PatternTables,
    left: BTreeSet<String>,
    right: BTreeSet<String>,
    formatting: BTreeSet<String>,
    stop: BTreeSet<String>,
    word_start: Regex,
    word_part: Regex,
}

impl Default for PatternConfig {
    fn default() -> Self {
        Self::from_tables(PatternTables::bundled()).expect("bundled tables compile")
    }
}

impl PatternConfig {
    pub fn from_tables(tables: PatternTables) -> Result<Self> {
        let set = |v: &[String]| v.iter().cloned().collect::<BTreeSet<_>>();
        let re = |s: &str| Regex::new(s).map_err(|e| PatternError::Tables(e.to_string()));
        Ok(Self {
            left: set(&tables.left_delimiters),
            right: set(&tables.right_delimiters),
            formatting: set(&tables.formatting),
            stop: set(&tables.induction_stop_list),
            word_start: re(&tables.word_start_regex)?,
            word_part: re(&tables.word_part_regex)?,
            tables,
        })
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.tables.bigram_threshold = threshold;
        self
    }

    pub fn with_stop_list(mut self, stop: Vec<String>) -> Self {
        self.stop = stop.iter().cloned().collect();
        self.tables.induction_stop_list = stop;
        self
    }

    pub fn tables(&self) -> &PatternTables {
        &self.tables
    }

    pub fn threshold(&self) -> f64 {
        self.tables.bigram_threshold
    }

    /// Labels that depend only on the decoded string.
    pub fn string_labels(&self, s: &str) -> LabelSet {
        let mut out = LabelSet::new();
        if self.left.contains(s) {
            out.insert(PatternLabel::LeftDelimiter);
        }
        if self.right.contains(s) {
            out.insert(PatternLabel::RightDelimiter);
        }
        if self.formatting.contains(s) {
            out.insert(PatternLabel::Formatting);
        }
        if self.word_start.is_match(s) {
            out.insert(PatternLabel::WordStart);
        }
        out
    }

    fn is_delimiter_or_formatting(&self, s: &str) -> bool {
        self.left.contains(s) || self.right.contains(s) || self.formatting.contains(s)
    }
}

/// Token id to decoded string, total over the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenDecoder {
    strings: Vec<String>,
}

/// Short letter-only names that never collide with the stop list.
fn syllable_name(mut k: usize) -> String {
    const CONS: &[u8] = b"bcdfghjklmnpqrstvwxz";
    const VOW: &[u8] = b"aeiou";
    let mut s = String::new();
    for _ in 0..2 {
        let c = k % CONS.len();
        k /= CONS.len();
        let v = k % VOW.len();
        k /= VOW.len();
        s.push(CONS[c] as char);
        s.push(VOW[v] as char);
    }
    while k > 0 {
        s.push(CONS[k % CONS.len()] as char);
        k /= CONS.len();
    }
    s
}

impl TokenDecoder {
    pub fn new(strings: Vec<String>) -> Self {
        Self { strings }
    }

    /// Reads a JSON array of strings indexed by token id.
    pub fn from_json(json: &str) -> Result<Self> {
        Ok(Self::new(serde_json::from_str(json)?))
    }

    /// Vocabulary for toy corpora: the bos token decodes to the end-of-text
    /// marker; the lowest ids cover every delimiter and formatting string;
    /// the rest alternate between word starts (`" name"`) and word parts.
    pub fn synthetic(vocab_size: usize, bos: u32) -> Self {
        let t = PatternTables::bundled();
        let specials: Vec<String> = t
            .left_delimiters
            .iter()
            .chain(&t.right_delimiters)
            .chain(&t.formatting)
            .filter(|s| s.as_str() != "<|endoftext|>")
            .cloned()
            .collect();
        let mut next_special = specials.into_iter();
        let mut word = 0usize;
        let strings = (0..vocab_size)
            .map(|id| {
                if id == bos as usize {
                    return "<|endoftext|>".to_string();
                }
                if let Some(s) = next_special.next() {
                    return s;
                }
                let name = syllable_name(word / 2);
                let s = if word % 2 == 0 { format!(" {name}") } else { name };
                word += 1;
                s
            })
            .collect();
        Self { strings }
    }

    /// Ids whose decoded string is letters only (no leading space).
    pub fn word_part_ids(&self) -> Vec<u32> {
        let re = Regex::new("^[A-Za-z]+$").unwrap();
        self.ids_matching(&re)
    }

    pub fn word_start_ids(&self) -> Vec<u32> {
        let re = Regex::new("^ [A-Za-z]+$").unwrap();
        self.ids_matching(&re)
    }

    fn ids_matching(&self, re: &Regex) -> Vec<u32> {
        (0..self.strings.len() as u32).filter(|&i| re.is_match(&self.strings[i as usize])).collect()
    }

    pub fn decode(&self, token: u32) -> Result<&str> {
        self.strings
            .get(token as usize)
            .map(String::as_str)
            .ok_or(PatternError::UnknownToken(token))
    }

    pub fn len(&self) -> usize {
        self.strings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strings.is_empty()
    }

    pub fn id_of(&self, s: &str) -> Option<u32> {
        self.strings.iter().position(|x| x == s).map(|i| i as u32)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.strings).expect("strings serialize")
    }
}

/// Labels for the token at `position` given everything before it.
pub fn classify_token(
    context: &[u32],
    position: usize,
    stats: &BigramStats,
    decoder: &TokenDecoder,
    config: &PatternConfig,
) -> Result<LabelSet> {
    if position == 0 {
        return Err(PatternError::PositionZero);
    }
    if position >= context.len() {
        return Err(PatternError::Position {
            position,
            len: context.len(),
        });
    }
    let (u, v) = (context[position - 1], context[position]);
    let vs = decoder.decode(v)?;
    let us = decoder.decode(u)?;
    let mut labels = config.string_labels(vs);
    let q = stats.conditional(u, v);
    if q > config.threshold() && config.word_part.is_match(vs) && !config.is_delimiter_or_formatting(vs) {
        labels.insert(PatternLabel::WordPart);
    }
    if q <= config.threshold()
        && position >= 3
        && !config.stop.contains(us)
        && !config.stop.contains(vs)
        && (0..=position - 3).any(|i| context[i] == u && context[i + 1] == v)
    {
        labels.insert(PatternLabel::InductionPattern);
    }
    Ok(labels)
}

/// Fraction of sampled predicted positions carrying each label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternFrequencies {
    pub sample_size: usize,
    pub fractions: BTreeMap<PatternLabel, f64>,
}

impl PatternFrequencies {
    pub fn fraction(&self, label: PatternLabel) -> f64 {
        self.fractions.get(&label).copied().unwrap_or(0.0)
    }

    pub(crate) fn from_label_sets<'a>(sets: impl IntoIterator<Item = &'a LabelSet>) -> Self {
        let mut counts: BTreeMap<PatternLabel, usize> = PatternLabel::ALL.iter().map(|l| (*l, 0)).collect();
        let mut n = 0;
        for s in sets {
            n += 1;
            for l in s {
                *counts.get_mut(l).unwrap() += 1;
            }
        }
        Self {
            sample_size: n,
            fractions: counts
                .into_iter()
                .map(|(l, c)| (l, if n == 0 { 0.0 } else { c as f64 / n as f64 }))
                .collect(),
        }
    }
}

/// Every predicted position `(sequence, position)` of a corpus, in order.
pub fn predicted_positions(corpus: &Corpus) -> Vec<(usize, usize)> {
    corpus
        .sequences()
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| (1..seq.len()).map(move |p| (s, p)))
        .collect()
}

pub fn pattern_frequencies(
    corpus: &Corpus,
    stats: &BigramStats,
    decoder: &TokenDecoder,
    config: &PatternConfig,
    sample_size: usize,
    seed: u64,
) -> Result<PatternFrequencies> {
    let all = predicted_positions(corpus);
    if all.is_empty() {
        return Err(PatternError::EmptyCorpus);
    }
    if sample_size > all.len() {
        return Err(PatternError::SampleSize {
            requested: sample_size,
            available: all.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, all.len(), sample_size).into_vec();
    picked.sort_unstable();
    let sets = picked
        .into_iter()
        .map(|k| {
            let (s, p) = all[k];
            classify_token(&corpus.sequences()[s], p, stats, decoder, config)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatternFrequencies::from_label_sets(&sets))
}

#[derive(Serialize)]
struct ClassRecord<'a> {
    context: usize,
    position: usize,
    token: u32,
    text: &'a str,
    labels: Vec<&'static str>,
}

/// One JSON object per predicted position with its labels.
pub fn classifications_to_jsonl(
    contexts: &[Vec<u32>],
    stats: &BigramStats,
    decoder: &TokenDecoder,
    config: &PatternConfig,
) -> Result<String> {
    let mut out = String::new();
    for (c, ctx) in contexts.iter().enumerate() {
        for p in 1..ctx.len() {
            let labels = classify_token(ctx, p, stats, decoder, config)?;
            let rec = ClassRecord {
                context: c,
                position: p,
                token: ctx[p],
                text: decoder.decode(ctx[p])?,
                labels: labels.iter().map(PatternLabel::name).collect(),
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
    }
    Ok(out)
}
