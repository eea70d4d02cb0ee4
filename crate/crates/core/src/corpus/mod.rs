//! Pre-tokenized corpora, data mixing, batch sampling and bigram statistics.
//!
//! Corpus files are newline-delimited JSON: one record per line, either a
//! bare array of token ids or an object `{"tokens": [...]}`.

mod synthetic;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::model::SampleBatch;

pub use synthetic::{BigramSource, InductionPlant};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: no sequences")]
    Empty { path: String },
    #[error("{path}:{line}: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("sequence {index}: {msg}")]
    InvalidSequence { index: usize, msg: String },
    #[error("vocab mismatch: {0} vs {1}")]
    VocabMismatch(String, String),
    #[error("corpus {0} has no sequences")]
    NoSequences(String),
    #[error("requested {requested} contexts but corpus {id} holds {available}")]
    Insufficient {
        id: String,
        requested: usize,
        available: usize,
    },
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error("delta_h {0} outside [0, 1]")]
    DeltaH(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// A set of full contexts sharing one vocabulary. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub id: String,
    vocab_size: usize,
    bos: u32,
    sequences: Vec<Vec<u32>>,
}

impl Corpus {
    /// Validates that every sequence starts with `bos`, has at least two
    /// tokens and stays inside the vocabulary.
    pub fn new(
        id: impl Into<String>,
        vocab_size: usize,
        bos: u32,
        sequences: Vec<Vec<u32>>,
    ) -> Result<Self> {
        for (index, seq) in sequences.iter().enumerate() {
            validate_sequence(seq, vocab_size, bos)
                .map_err(|msg| CorpusError::InvalidSequence { index, msg })?;
        }
        Ok(Self {
            id: id.into(),
            vocab_size,
            bos,
            sequences,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn bos(&self) -> u32 {
        self.bos
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Number of predicted positions (every token after the first).
    pub fn predicted_positions(&self) -> usize {
        self.sequences.iter().map(|s| s.len() - 1).sum()
    }

    fn same_vocab(&self, other: &Corpus) -> Result<()> {
        if self.vocab_size != other.vocab_size || self.bos != other.bos {
            return Err(CorpusError::VocabMismatch(
                format!("{} (vocab {}, bos {})", self.id, self.vocab_size, self.bos),
                format!("{} (vocab {}, bos {})", other.id, other.vocab_size, other.bos),
            ));
        }
        Ok(())
    }
}

fn validate_sequence(seq: &[u32], vocab_size: usize, bos: u32) -> std::result::Result<(), String> {
    if seq.len() < 2 {
        return Err(format!("length {} < 2", seq.len()));
    }
    if seq[0] != bos {
        return Err(format!("starts with {} instead of bos {bos}", seq[0]));
    }
    if let Some(t) = seq.iter().find(|t| **t as usize >= vocab_size) {
        return Err(format!("token {t} outside vocab of size {vocab_size}"));
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Record {
    Bare(Vec<u32>),
    Object { tokens: Vec<u32> },
}

pub fn load_corpus(path: &Path, id: &str, vocab_size: usize, bos: u32) -> Result<Corpus> {
    let file = fs::File::open(path)?;
    let shown = path.display().to_string();
    let mut sequences = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            path: shown.clone(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let tokens = match record {
            Record::Bare(t) | Record::Object { tokens: t } => t,
        };
        validate_sequence(&tokens, vocab_size, bos).map_err(|msg| CorpusError::Malformed {
            path: shown.clone(),
            line: i + 1,
            msg,
        })?;
        sequences.push(tokens);
    }
    if sequences.is_empty() {
        return Err(CorpusError::Empty { path: shown });
    }
    Ok(Corpus {
        id: id.to_string(),
        vocab_size,
        bos,
        sequences,
    })
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut out = String::new();
    for seq in &corpus.sequences {
        out.push('[');
        for (i, t) in seq.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&t.to_string());
        }
        out.push_str("]\n");
    }
    fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

/// One element of the interleaved dataset and where it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Base(usize),
    Probe(usize),
}

/// Deterministic interleaving of base and probe samples (before shuffling).
///
/// Walks `j = 1..=min(N, M)`; at each step the target probe count is
/// `floor((j + 1) * delta_h)`. A probe sample `j` is taken while the running
/// probe count is below target, otherwise base sample `j`.
pub fn interleave(n_base: usize, n_probe: usize, delta_h: f64) -> Result<Vec<Origin>> {
    if !(0.0..=1.0).contains(&delta_h) {
        return Err(CorpusError::DeltaH(delta_h));
    }
    let len = n_base.min(n_probe);
    let mut out = Vec::with_capacity(len);
    let mut probe_count: u64 = 0;
    for j in 1..=len {
        let target = ((j + 1) as f64 * delta_h).floor() as u64;
        if probe_count < target {
            out.push(Origin::Probe(j - 1));
            probe_count += 1;
        } else {
            out.push(Origin::Base(j - 1));
        }
    }
    Ok(out)
}

/// Mixed dataset for `q_dh = (1 - dh) q + dh q'`: interleave, then shuffle
/// with `shuffle_seed`. Identical base and probe corpora give the same
/// output for every `delta_h`.
pub fn mix_datasets(base: &Corpus, probe: &Corpus, delta_h: f64, shuffle_seed: u64) -> Result<Corpus> {
    base.same_vocab(probe)?;
    let mut sequences: Vec<Vec<u32>> = interleave(base.len(), probe.len(), delta_h)?
        .into_iter()
        .map(|o| match o {
            Origin::Base(i) => base.sequences[i].clone(),
            Origin::Probe(i) => probe.sequences[i].clone(),
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    sequences.shuffle(&mut rng);
    Ok(Corpus {
        id: format!("{}+{}@{}", base.id, probe.id, delta_h),
        vocab_size: base.vocab_size,
        bos: base.bos,
        sequences,
    })
}

/// `n` contexts drawn uniformly with replacement using the caller's stream.
pub fn sample_batch_with<R: Rng + ?Sized>(corpus: &Corpus, n: usize, rng: &mut R) -> Result<SampleBatch> {
    if n == 0 {
        return Err(CorpusError::ZeroBatch);
    }
    if corpus.is_empty() {
        return Err(CorpusError::NoSequences(corpus.id.clone()));
    }
    let contexts = (0..n)
        .map(|_| corpus.sequences[rng.random_range(0..corpus.len())].clone())
        .collect();
    Ok(SampleBatch { contexts })
}

pub fn sample_batch(corpus: &Corpus, n: usize, seed: u64) -> Result<SampleBatch> {
    sample_batch_with(corpus, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Seeded shuffle of the corpus, keeping the first `count` contexts.
pub fn sample_probe_contexts(corpus: &Corpus, count: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    if count > corpus.len() {
        return Err(CorpusError::Insufficient {
            id: corpus.id.clone(),
            requested: count,
            available: corpus.len(),
        });
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order[..count]
        .iter()
        .map(|&i| corpus.sequences[i].clone())
        .collect())
}

/// Adjacent-pair counts and the conditional estimates `q(v|u) = #uv / #u.`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BigramStats {
    pairs: BTreeMap<(u32, u32), u64>,
    followers: BTreeMap<u32, u64>,
    total_tokens: u64,
}

impl BigramStats {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        Self::from_sequences(corpus.sequences.iter().map(Vec::as_slice))
    }

    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a [u32]>) -> Self {
        let mut stats = Self::default();
        for seq in seqs {
            stats.total_tokens += seq.len() as u64;
            for pair in seq.windows(2) {
                *stats.pairs.entry((pair[0], pair[1])).or_default() += 1;
                *stats.followers.entry(pair[0]).or_default() += 1;
            }
        }
        stats
    }

    /// Builds stats directly from pair counts.
    pub fn from_counts(counts: impl IntoIterator<Item = ((u32, u32), u64)>) -> Self {
        let mut stats = Self::default();
        for ((u, v), c) in counts {
            if c == 0 {
                continue;
            }
            *stats.pairs.entry((u, v)).or_default() += c;
            *stats.followers.entry(u).or_default() += c;
            stats.total_tokens += c;
        }
        stats
    }

    pub fn count(&self, u: u32, v: u32) -> u64 {
        self.pairs.get(&(u, v)).copied().unwrap_or(0)
    }

    /// `q(v|u)`; zero when `u` was never followed by anything.
    pub fn conditional(&self, u: u32, v: u32) -> f64 {
        match self.followers.get(&u) {
            Some(&total) if total > 0 => self.count(u, v) as f64 / total as f64,
            _ => 0.0,
        }
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    pub fn seen_prefixes(&self) -> impl Iterator<Item = u32> + '_ {
        self.followers.keys().copied()
    }

    pub fn pairs(&self) -> impl Iterator<Item = ((u32, u32), u64)> + '_ {
        self.pairs.iter().map(|(k, v)| (*k, *v))
    }

    /// CSV with header `u,v,count,probability`, rows sorted by `(u, v)`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("u,v,count,probability\n");
        for (&(u, v), &c) in &self.pairs {
            out.push_str(&format!("{u},{v},{c},{}\n", self.conditional(u, v)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(id: &str, seqs: Vec<Vec<u32>>) -> Corpus {
        Corpus::new(id, 10, 9, seqs).unwrap()
    }

    #[test]
    fn load_rejects_empty_and_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        fs::write(&p, "").unwrap();
        assert!(matches!(load_corpus(&p, "c", 10, 9), Err(CorpusError::Empty { .. })));
        fs::write(&p, "[9, 5, 7]\n").unwrap();
        assert_eq!(load_corpus(&p, "c", 10, 9).unwrap().len(), 1);
        fs::write(&p, "{\"tokens\": [9, 1]}\n\n[9, 2, 3]\n").unwrap();
        assert_eq!(load_corpus(&p, "c", 10, 9).unwrap().len(), 2);
        fs::write(&p, "[9, 5, 70]\n").unwrap();
        assert!(matches!(load_corpus(&p, "c", 10, 9), Err(CorpusError::Malformed { line: 1, .. })));
        fs::write(&p, "[9, 5]\nnot json\n").unwrap();
        assert!(matches!(load_corpus(&p, "c", 10, 9), Err(CorpusError::Malformed { line: 2, .. })));
        fs::write(&p, "[3, 5]\n").unwrap();
        assert!(load_corpus(&p, "c", 10, 9).is_err());
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let c = corpus("c", vec![vec![9, 1, 2], vec![9, 8, 8, 0]]);
        write_corpus(&p, &c).unwrap();
        assert_eq!(load_corpus(&p, "c", 10, 9).unwrap(), c);
    }

    #[test]
    fn interleave_endpoints() {
        let zero = interleave(7, 5, 0.0).unwrap();
        assert_eq!(zero, (0..5).map(Origin::Base).collect::<Vec<_>>());
        let one = interleave(7, 5, 1.0).unwrap();
        assert_eq!(one, (0..5).map(Origin::Probe).collect::<Vec<_>>());
        assert!(interleave(3, 3, 1.5).is_err());
    }

    #[test]
    fn interleave_tenth_inserts_at_ninth_step() {
        let out = interleave(10, 10, 0.1).unwrap();
        let probes: Vec<usize> = out
            .iter()
            .enumerate()
            .filter_map(|(i, o)| matches!(o, Origin::Probe(_)).then_some(i + 1))
            .collect();
        assert_eq!(probes, vec![9]);
        assert_eq!(out[8], Origin::Probe(8));
    }

    #[test]
    fn mixing_identical_corpora_is_a_noop() {
        let c = corpus("c", (0..40).map(|i| vec![9, i % 9, (i * 7) % 9]).collect());
        let d0 = mix_datasets(&c, &c, 0.0, 3).unwrap();
        for dh in [0.1, 0.25, 0.5, 1.0] {
            let d = mix_datasets(&c, &c.clone(), dh, 3).unwrap();
            assert_eq!(d.sequences(), d0.sequences());
        }
        let other = mix_datasets(&c, &c, 0.1, 4).unwrap();
        assert_ne!(other.sequences(), d0.sequences());
    }

    #[test]
    fn mixing_requires_shared_vocab() {
        let a = corpus("a", vec![vec![9, 1]]);
        let b = Corpus::new("b", 12, 9, vec![vec![9, 1]]).unwrap();
        assert!(matches!(mix_datasets(&a, &b, 0.1, 0), Err(CorpusError::VocabMismatch(..))));
    }

    #[test]
    fn batches_are_seeded() {
        let c = corpus("c", (0..20).map(|i| vec![9, i % 9]).collect());
        assert!(matches!(sample_batch(&c, 0, 1), Err(CorpusError::ZeroBatch)));
        assert_eq!(sample_batch(&c, 8, 1).unwrap(), sample_batch(&c, 8, 1).unwrap());
        let single = corpus("s", vec![vec![9, 4, 4]]);
        let b = sample_batch(&single, 3, 0).unwrap();
        assert_eq!(b.contexts, vec![vec![9, 4, 4]; 3]);
    }

    #[test]
    fn probe_contexts_are_a_seeded_selection() {
        let c = corpus("c", (0..1000u32).map(|i| vec![9, i % 9, i / 9 % 9, i / 81 % 9, i / 729 % 9]).collect());
        let all = sample_probe_contexts(&c, c.len(), 0).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        let mut orig = c.sequences().to_vec();
        orig.sort();
        assert_eq!(sorted, orig);
        let a = sample_probe_contexts(&c, 160, 0).unwrap();
        assert_eq!(a, sample_probe_contexts(&c, 160, 0).unwrap());
        let distinct: std::collections::BTreeSet<_> = a.iter().collect();
        assert_eq!(distinct.len(), 160);
        assert!(sample_probe_contexts(&c, 1001, 0).is_err());
    }

    #[test]
    fn bigram_conditionals() {
        let (a, b) = (1, 2);
        let stats = BigramStats::from_corpus(&corpus("c", vec![vec![9, a, b, a, b]]));
        assert_eq!(stats.conditional(a, b), 1.0);
        assert_eq!(stats.conditional(b, b), 0.0);
        assert_eq!(stats.conditional(7, 1), 0.0);
        assert_eq!(stats.conditional(b, a), 1.0);
        assert_eq!(stats.total_tokens(), 5);
        let csv = stats.to_csv();
        assert!(csv.starts_with("u,v,count,probability\n"));
        assert!(csv.contains("1,2,2,1\n"));
    }
}
