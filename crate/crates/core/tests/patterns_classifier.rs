use std::collections::BTreeSet;

use proptest::prelude::*;
use serde::Deserialize;
use suscept::corpus::{BigramStats, Corpus, InductionPlant};
use suscept::patterns::{
    classify_token, pattern_frequencies, PatternConfig, PatternLabel, PatternTables, TokenDecoder,
};

#[derive(Deserialize)]
struct Case {
    name: String,
    context: Vec<u32>,
    position: usize,
    counts: Vec<(u32, u32, u64)>,
    expected: Vec<PatternLabel>,
}

#[derive(Deserialize)]
struct Cases {
    vocab: Vec<String>,
    cases: Vec<Case>,
}

fn load_cases() -> Cases {
    serde_json::from_str(include_str!("fixtures/pattern_cases.json")).unwrap()
}

#[test]
fn hand_constructed_cases() {
    let cases = load_cases();
    assert!(cases.cases.len() >= 30);
    let decoder = TokenDecoder::new(cases.vocab.clone());
    let config = PatternConfig::default();
    for c in &cases.cases {
        let stats = BigramStats::from_counts(c.counts.iter().map(|&(u, v, n)| ((u, v), n)));
        let got = classify_token(&c.context, c.position, &stats, &decoder, &config).unwrap();
        let want: BTreeSet<_> = c.expected.iter().copied().collect();
        assert_eq!(got, want, "case {:?}", c.name);
    }
}

fn only(s: &str) -> BTreeSet<PatternLabel> {
    let decoder = TokenDecoder::new(vec!["<|endoftext|>".into(), "foo".into(), s.to_string()]);
    classify_token(&[0, 1, 2], 2, &BigramStats::default(), &decoder, &PatternConfig::default()).unwrap()
}

#[test]
fn membership_lists_classify_exactly() {
    let t = PatternTables::bundled();
    for s in &t.left_delimiters {
        assert_eq!(only(s), [PatternLabel::LeftDelimiter].into(), "{s:?}");
    }
    for s in &t.right_delimiters {
        assert_eq!(only(s), [PatternLabel::RightDelimiter].into(), "{s:?}");
    }
    for s in &t.formatting {
        assert_eq!(only(s), [PatternLabel::Formatting].into(), "{s:?}");
    }
}

fn negative_list() -> Vec<String> {
    serde_json::from_str(include_str!("fixtures/negative_tokens.json")).unwrap()
}

#[test]
fn negative_list_matches_nothing() {
    let t = PatternTables::bundled();
    let listed: BTreeSet<&String> = t.left_delimiters.iter().chain(&t.right_delimiters).chain(&t.formatting).collect();
    let neg = negative_list();
    assert!(neg.len() >= 200, "{}", neg.len());
    for s in &neg {
        assert!(!listed.contains(s), "{s:?} is listed");
        let labels = only(s);
        assert!(
            !labels.contains(&PatternLabel::LeftDelimiter)
                && !labels.contains(&PatternLabel::RightDelimiter)
                && !labels.contains(&PatternLabel::Formatting),
            "{s:?} -> {labels:?}"
        );
    }
}

#[test]
fn position_zero_is_rejected() {
    let d = TokenDecoder::synthetic(64, 63);
    assert!(classify_token(&[63, 70], 0, &BigramStats::default(), &d, &PatternConfig::default()).is_err());
}

#[test]
fn delimiter_only_corpus_is_all_left_delimiters() {
    let d = TokenDecoder::synthetic(128, 127);
    let paren = d.id_of("(").unwrap();
    let corpus = Corpus::new("p", 128, 127, vec![vec![127, paren, paren, paren]; 20]).unwrap();
    let stats = BigramStats::from_corpus(&corpus);
    let f = pattern_frequencies(&corpus, &stats, &d, &PatternConfig::default(), 60, 1).unwrap();
    assert_eq!(f.fraction(PatternLabel::LeftDelimiter), 1.0);
    assert!(pattern_frequencies(&corpus, &stats, &d, &PatternConfig::default(), 61, 1).is_err());
}

#[test]
fn planted_induction_rate_is_recovered() {
    let vocab = 512;
    let bos = 511;
    let d = TokenDecoder::synthetic(vocab, bos);
    let plant = InductionPlant {
        vocab_size: vocab,
        bos,
        tokens: 64..511,
        rate: 0.1,
    };
    let (corpus, planted) = plant.generate("ind", 400, 64, 8).unwrap();
    let (base, _) = InductionPlant { rate: 0.0, ..plant.clone() }.generate("base", 400, 64, 9).unwrap();
    let stats = BigramStats::from_corpus(&base);
    let f = pattern_frequencies(&corpus, &stats, &d, &PatternConfig::default(), 10_000, 2).unwrap();
    let frac = f.fraction(PatternLabel::InductionPattern);
    assert!((frac - 0.1).abs() <= 0.02, "{frac}");
    for l in PatternLabel::ALL {
        assert!((0.0..=1.0).contains(&f.fraction(l)));
    }
    for &(s, p) in planted.iter().take(200) {
        let labels = classify_token(&corpus.sequences()[s], p, &stats, &d, &PatternConfig::default()).unwrap();
        assert!(labels.contains(&PatternLabel::InductionPattern));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn disjointness_holds(ctx in prop::collection::vec(0u32..120, 2..40), seed in 0u64..50) {
        let d = TokenDecoder::synthetic(128, 127);
        let mut context = vec![127];
        context.extend(ctx);
        let c = Corpus::new("r", 128, 127, vec![context.clone()]).unwrap();
        let stats = if seed % 2 == 0 { BigramStats::from_corpus(&c) } else { BigramStats::default() };
        let config = PatternConfig::default();
        for p in 1..context.len() {
            let l = classify_token(&context, p, &stats, &d, &config).unwrap();
            let exclusive = [
                PatternLabel::LeftDelimiter,
                PatternLabel::RightDelimiter,
                PatternLabel::Formatting,
                PatternLabel::WordStart,
                PatternLabel::WordPart,
            ];
            prop_assert!(exclusive.iter().filter(|x| l.contains(x)).count() <= 1);
            prop_assert!(!(l.contains(&PatternLabel::WordPart) && l.contains(&PatternLabel::InductionPattern)));
            prop_assert_eq!(&l, &classify_token(&context[..=p], p, &stats, &d, &config).unwrap());
        }
    }
}

