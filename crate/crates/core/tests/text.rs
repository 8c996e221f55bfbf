use std::collections::HashMap;
use std::sync::OnceLock;

use proptest::prelude::*;

use seedsmith_core::rng::keyed_rng;
use seedsmith_core::seeding::{build_training_pairs, sample_seeds_within, SeedSource};
use seedsmith_core::subword::SEP;
use seedsmith_core::textproc::{is_eligible_seed, TokenizedSentence};
use seedsmith_core::{
    format_input, parse_input, synth, tokenize_words, train_bpe, SeedSet, StopwordPolicy,
    SubwordVocab,
};

fn vocab() -> &'static SubwordVocab {
    static V: OnceLock<SubwordVocab> = OnceLock::new();
    V.get_or_init(|| {
        let corpus = synth::generate_corpus(2000, 3);
        train_bpe(corpus.iter().map(String::as_str), 300).unwrap()
    })
}

fn squash(s: &str) -> String {
    s.chars().filter(|c| !c.is_whitespace()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn tokens_keep_every_character(s in any::<String>()) {
        let toks = tokenize_words(&s);
        prop_assert!(toks.iter().all(|t| !t.is_empty()));
        prop_assert_eq!(squash(&toks.join(" ")), squash(&s));
    }

    #[test]
    fn bpe_roundtrips_arbitrary_text(s in any::<String>()) {
        let v = vocab();
        prop_assert_eq!(v.decode(&v.encode(&s)).unwrap(), s);
    }

    #[test]
    fn bpe_roundtrips_word_soup(words in prop::collection::vec("[a-zA-Z,.' -]{1,12}", 0..20)) {
        let s = words.join(" ");
        let v = vocab();
        prop_assert_eq!(v.decode(&v.encode(&s)).unwrap(), s);
    }

    #[test]
    fn format_then_parse_is_identity(set in prop::collection::hash_set("[a-zA-Z][a-z'-]{0,9}", 1..8)) {
        let seeds = SeedSet::new(set.into_iter().collect(), SeedSource::Parsed).unwrap();
        let text = format_input(&seeds).unwrap();
        prop_assert_eq!(parse_input(&text).unwrap(), seeds.clone());
        let sep = vocab().encode(&text).iter().filter(|&&t| t == SEP).count();
        prop_assert_eq!(sep, seeds.k() - 1);
    }
}

#[test]
fn merges_shorten_corpus_encodings_on_average() {
    let corpus = synth::generate_corpus(500, 4);
    let mean_len = |merges| {
        let v = train_bpe(corpus.iter().map(String::as_str), merges).unwrap();
        corpus.iter().map(|s| v.encode(s).len()).sum::<usize>() as f64 / corpus.len() as f64
    };
    let lens: Vec<f64> = [0, 50, 200, 400].into_iter().map(mean_len).collect();
    assert!(lens.windows(2).all(|w| w[1] <= w[0]), "{lens:?}");
}

#[test]
fn all_24_orders_are_equally_likely() {
    let s = TokenizedSentence::new("alpha beta gamma delta", 0);
    let policy = StopwordPolicy::builtin();
    let draws = 24_000;
    let mut counts: HashMap<Vec<String>, usize> = HashMap::new();
    for i in 0..draws {
        let mut rng = keyed_rng(&[77, i]);
        let set = sample_seeds_within(&s, 4, &policy, &mut rng, 0).unwrap().unwrap();
        *counts.entry(set.seeds().to_vec()).or_default() += 1;
    }
    assert_eq!(counts.len(), 24);
    let p = 1.0 / 24.0;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (order, &c) in &counts {
        assert!((c as f64 - mean).abs() < 5.0 * sigma, "{order:?}: {c}");
    }
    let chi2: f64 = counts.values().map(|&c| (c as f64 - mean).powi(2) / mean).sum();
    // 23 degrees of freedom; the 99.9% quantile is about 49.7.
    assert!(chi2 < 49.7, "chi-square {chi2}");
}

#[test]
fn every_pair_over_a_full_run_is_well_formed() {
    let policy = StopwordPolicy::builtin();
    let corpus: Vec<TokenizedSentence> = synth::generate_corpus(1500, 6)
        .into_iter()
        .enumerate()
        .map(|(i, s)| TokenizedSentence::new(s, i))
        .collect();
    let build = build_training_pairs(&corpus, "train", 4, 3, 6, &policy).unwrap();
    assert_eq!(build.pairs.len(), build.seed_sets.len());
    for (pair, set) in build.pairs.iter().zip(&build.seed_sets) {
        let tokens = tokenize_words(&pair.target);
        for seed in set.seeds() {
            assert!(tokens.contains(seed), "{seed} not in {}", pair.target);
            assert!(is_eligible_seed(seed, &policy), "{seed}");
            assert!(!seed.chars().any(|c| c.is_ascii_digit()));
        }
        assert_eq!(parse_input(&pair.input_text).unwrap().seeds(), set.seeds());
    }
}
