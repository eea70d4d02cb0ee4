//! Seeded synthetic corpora with known structure.

use std::ops::Range;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Corpus, CorpusError, Result};

/// Sparse first-order Markov source: each token sends `concentration` of its
/// mass to `fanout` favored successors and spreads the rest uniformly.
#[derive(Debug, Clone)]
pub struct BigramSource {
    pub vocab_size: usize,
    pub bos: u32,
    pub tokens: Range<u32>,
    pub fanout: usize,
    pub concentration: f64,
    pub seed: u64,
}

impl BigramSource {
    fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(CorpusError::InvalidSequence { index: 0, msg });
        if self.tokens.is_empty() || self.tokens.end as usize > self.vocab_size {
            return bad(format!("token range {:?} invalid for vocab {}", self.tokens, self.vocab_size));
        }
        if self.tokens.contains(&self.bos) {
            return bad("token range contains bos".into());
        }
        if self.fanout == 0 || self.fanout > self.tokens.len() {
            return bad(format!("fanout {} out of range", self.fanout));
        }
        if !(0.0..=1.0).contains(&self.concentration) {
            return bad(format!("concentration {} outside [0, 1]", self.concentration));
        }
        Ok(())
    }

    /// Favored successors of each token (and of bos), indexed by token id.
    pub fn table(&self) -> Vec<Vec<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let n = self.tokens.len();
        (0..self.vocab_size)
            .map(|_| {
                sample(&mut rng, n, self.fanout)
                    .into_iter()
                    .map(|i| self.tokens.start + i as u32)
                    .collect()
            })
            .collect()
    }

    pub fn generate(&self, id: &str, n_sequences: usize, length: usize, seed: u64) -> Result<Corpus> {
        self.check()?;
        let table = self.table();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sequences = (0..n_sequences)
            .map(|_| {
                let mut seq = vec![self.bos];
                while seq.len() < length {
                    let prev = *seq.last().unwrap() as usize;
                    let next = if rng.random::<f64>() < self.concentration {
                        let fav = &table[prev];
                        fav[rng.random_range(0..fav.len())]
                    } else {
                        rng.random_range(self.tokens.clone())
                    };
                    seq.push(next);
                }
                seq
            })
            .collect();
        Corpus::new(id, self.vocab_size, self.bos, sequences)
    }
}

/// Uniform token stream with planted copies of earlier bigrams.
///
/// At each step with room for a pair, a copy is emitted with probability
/// `rate / (1 - rate)`, so roughly `rate` of predicted positions are the
/// second token of a copied bigram.
#[derive(Debug, Clone)]
pub struct InductionPlant {
    pub vocab_size: usize,
    pub bos: u32,
    pub tokens: Range<u32>,
    pub rate: f64,
}

impl InductionPlant {
    /// Returns the corpus and every planted `(sequence, position)` of a
    /// copied second token.
    pub fn generate(
        &self,
        id: &str,
        n_sequences: usize,
        length: usize,
        seed: u64,
    ) -> Result<(Corpus, Vec<(usize, usize)>)> {
        if !(0.0..0.5).contains(&self.rate) {
            return Err(CorpusError::InvalidSequence {
                index: 0,
                msg: format!("plant rate {} outside [0, 0.5)", self.rate),
            });
        }
        let p_pair = self.rate / (1.0 - self.rate);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut planted = Vec::new();
        let mut sequences = Vec::with_capacity(n_sequences);
        for s in 0..n_sequences {
            let mut seq = vec![self.bos];
            while seq.len() < length {
                let k = seq.len();
                if k >= 3 && k + 2 <= length && rng.random::<f64>() < p_pair {
                    let i = rng.random_range(1..=k - 2);
                    let (x, y) = (seq[i], seq[i + 1]);
                    seq.push(x);
                    seq.push(y);
                    planted.push((s, k + 1));
                } else {
                    seq.push(rng.random_range(self.tokens.clone()));
                }
            }
            sequences.push(seq);
        }
        Ok((Corpus::new(id, self.vocab_size, self.bos, sequences)?, planted))
    }
}
