use proptest::prelude::*;

use seedsmith_core::decode::GenerationRecord;
use seedsmith_core::eval::{
    count_missing_words, rounded_percentages, select_eval_pairs, tally_votes, token_length,
    CoverageReport, PairMode, Side, TruthEntry, Vote, VoteRecord, MAX_TOKEN_DIFF,
};
use seedsmith_core::tokenize_words;

/// Token scan over a plain whitespace-and-punctuation split, written without
/// the library tokenizer.
fn oracle_missing(seeds: &[String], text: &str) -> usize {
    let mut tokens: Vec<String> = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let inner_joiner = matches!(c, '-' | '\'' | '\u{2019}')
            && !cur.is_empty()
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
        if c.is_alphanumeric() || inner_joiner {
            cur.push(c);
        } else {
            if !cur.is_empty() {
                tokens.push(std::mem::take(&mut cur));
            }
            if !c.is_whitespace() {
                tokens.push(c.to_string());
            }
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    seeds.iter().filter(|s| !tokens.iter().any(|t| t == *s)).count()
}

fn text_strategy() -> impl Strategy<Value = String> {
    let piece = prop_oneof![
        Just("Member"), Just("member"), Just("States"), Just("states"), Just("one-third"),
        Just("third"), Just("don't"), Just("it"), Just("It"), Just(","), Just("."), Just("-"),
        Just("'"), Just("("), Just("Über"), Just("über"),
    ];
    prop::collection::vec((piece, any::<bool>()), 0..14).prop_map(|ps| {
        ps.into_iter()
            .map(|(p, space)| if space { format!(" {p}") } else { p.to_string() })
            .collect()
    })
}

fn seeds_strategy() -> impl Strategy<Value = Vec<String>> {
    let word = prop_oneof![
        Just("Member"), Just("member"), Just("States"), Just("states"), Just("one-third"),
        Just("third"), Just("one"), Just("don't"), Just("it"), Just("It"), Just("Über"),
    ];
    prop::collection::hash_set(word, 1..6)
        .prop_map(|s| s.into_iter().map(String::from).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn missing_count_matches_token_scan(seeds in seeds_strategy(), text in text_strategy()) {
        prop_assert_eq!(count_missing_words(&seeds, &text), oracle_missing(&seeds, &text));
    }

    #[test]
    fn percentages_are_consistent(missing in prop::collection::vec(0usize..=4, 1..300)) {
        let r = CoverageReport::from_missing(4, &missing).unwrap();
        prop_assert_eq!(r.counts.iter().sum::<usize>(), missing.len());
        let total: f64 = r.percentages.iter().sum();
        prop_assert!((total - 100.0).abs() < 1e-6);
        let exact = 100.0 * missing.iter().filter(|&&m| m == 0).count() as f64 / missing.len() as f64;
        prop_assert!((r.perfect() - exact).abs() <= 0.1 + 1e-9);
    }

    #[test]
    fn largest_remainder_rounding_sums_exactly(counts in prop::collection::vec(0usize..50, 1..8)) {
        prop_assume!(counts.iter().sum::<usize>() > 0);
        let p = rounded_percentages(&counts, 1);
        prop_assert!((p.iter().sum::<f64>() - 100.0).abs() < 1e-6);
    }
}

fn record(text: &str) -> GenerationRecord {
    GenerationRecord {
        input_text: "x".into(),
        output_text: text.into(),
        beam_score: -1.0,
        beam_size: 5,
        error: None,
    }
}

fn sentence(n: usize) -> String {
    let mut s = vec!["word"; n.saturating_sub(1)].join(" ");
    s.push('.');
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn selected_pairs_stay_within_the_length_bound(
        gen_lens in prop::collection::vec(1usize..30, 1..40),
        ref_lens in prop::collection::vec(1usize..30, 1..40),
        seed in any::<u64>(),
        cross in any::<bool>(),
    ) {
        let generated: Vec<GenerationRecord> = gen_lens.iter().map(|&n| record(&sentence(n))).collect();
        let refs: Vec<String> = if cross {
            ref_lens.iter().map(|&n| sentence(n)).collect()
        } else {
            gen_lens.iter().zip(ref_lens.iter().cycle()).map(|(_, &n)| sentence(n)).collect()
        };
        let mode = if cross { PairMode::Cross } else { PairMode::Paired };
        for want in [0, 1, 3] {
            if let Ok(pairs) = select_eval_pairs(&generated, &refs, want, seed, mode) {
                prop_assert_eq!(pairs.len(), want);
                for p in pairs {
                    prop_assert!(token_length(&p.sentence_a).abs_diff(token_length(&p.sentence_b)) <= MAX_TOKEN_DIFF);
                    prop_assert_eq!(p.identical, p.sentence_a == p.sentence_b);
                }
            }
        }
    }

    #[test]
    fn tally_ignores_judge_and_pair_order(
        ballots in prop::collection::vec(prop::collection::vec(0u8..3, 4), 1..30),
        human_a in prop::collection::vec(any::<bool>(), 30),
        perm_seed in any::<u64>(),
    ) {
        let truth: Vec<TruthEntry> = (0..ballots.len())
            .map(|i| TruthEntry {
                pair_id: format!("p{i:03}"),
                human_is: if human_a[i] { Side::A } else { Side::B },
                identical: i % 7 == 6,
            })
            .collect();
        let mut votes = Vec::new();
        for (i, ballot) in ballots.iter().enumerate() {
            for (j, &v) in ballot.iter().enumerate() {
                votes.push(VoteRecord {
                    judge_id: format!("j{j}"),
                    pair_id: format!("p{i:03}"),
                    vote: [Vote::A, Vote::B, Vote::CannotTell][v as usize],
                });
            }
        }
        let base = tally_votes(&votes, &truth).unwrap();
        prop_assert_eq!(base.human_wins + base.machine_wins + base.tied, base.scored_pairs);
        let mut shuffled = votes.clone();
        let mut rev_truth = truth.clone();
        rev_truth.reverse();
        let n = shuffled.len();
        for i in (1..n).rev() {
            let j = ((perm_seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64)) >> 33) as usize % (i + 1);
            shuffled.swap(i, j);
        }
        let again = tally_votes(&shuffled, &rev_truth).unwrap();
        prop_assert_eq!(
            (base.human_wins, base.machine_wins, base.tied),
            (again.human_wins, again.machine_wins, again.tied)
        );
    }
}

#[test]
fn scan_oracle_agrees_with_the_tokenizer_on_traps() {
    for text in ["Member States, member-states", "It's one-third; don't.", "(Über) über"] {
        let words: Vec<String> = tokenize_words(text);
        assert_eq!(oracle_missing(&words, text), 0, "{text}");
    }
    let seeds = vec!["member".to_string(), "States".to_string(), "third".to_string()];
    assert_eq!(count_missing_words(&seeds, "Member States agreed on one-third."), 2);
}
