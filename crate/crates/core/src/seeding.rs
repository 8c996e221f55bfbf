//! Seed-set construction and the ` __ ` input format.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::textproc::{is_eligible_seed, StopwordPolicy, TokenizedSentence};

/// The four-character separator placed between seeds.
pub const SEPARATOR: &str = " __ ";

/// Attempts made to find a seed set not already drawn from the same
/// sentence before a duplicate is accepted.
pub const DISTINCT_RETRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedSource {
    Sentence {
        line_index: usize,
        sample_index: usize,
    },
    Document {
        set_index: usize,
    },
    /// Parsed back from formatted text; provenance unknown.
    Parsed,
}

/// An ordered list of distinct seed words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedSet {
    seeds: Vec<String>,
    pub source: SeedSource,
}

impl SeedSet {
    pub fn new(seeds: Vec<String>, source: SeedSource) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::input("a seed set needs at least one seed"));
        }
        let mut seen = HashSet::new();
        for s in &seeds {
            if s.is_empty() {
                return Err(Error::input("empty seed"));
            }
            if !seen.insert(s.as_str()) {
                return Err(Error::input(format!("duplicate seed {s:?}")));
            }
        }
        Ok(SeedSet { seeds, source })
    }

    pub fn seeds(&self) -> &[String] {
        &self.seeds
    }

    pub fn k(&self) -> usize {
        self.seeds.len()
    }

    fn as_set(&self) -> BTreeSet<&str> {
        self.seeds.iter().map(String::as_str).collect()
    }

    pub fn same_words(&self, other: &SeedSet) -> bool {
        self.as_set() == other.as_set()
    }
}

impl fmt::Display for SeedSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.seeds.join(SEPARATOR))
    }
}

/// Joins seeds with [`SEPARATOR`]. Seeds containing `__` are rejected.
pub fn format_input(seeds: &SeedSet) -> Result<String> {
    if let Some(bad) = seeds.seeds.iter().find(|s| s.contains("__")) {
        return Err(Error::input(format!(
            "seed {bad:?} contains the separator substring \"__\""
        )));
    }
    Ok(seeds.to_string())
}

pub fn parse_input(text: &str) -> Result<SeedSet> {
    let seeds = text.split(SEPARATOR).map(str::to_owned).collect();
    SeedSet::new(seeds, SeedSource::Parsed)
}

fn eligible_types<'a>(tokens: &'a [String], policy: &StopwordPolicy) -> Vec<&'a str> {
    let mut seen = HashSet::new();
    tokens
        .iter()
        .map(String::as_str)
        .filter(|t| is_eligible_seed(t, policy) && seen.insert(*t))
        .collect()
}

/// Draws `k` distinct eligible word types from the sentence and shuffles
/// them. Returns `None` when the sentence has fewer than `k` eligible types.
pub fn sample_seeds_within<R: Rng + ?Sized>(
    sentence: &TokenizedSentence,
    k: usize,
    policy: &StopwordPolicy,
    rng: &mut R,
    sample_index: usize,
) -> Result<Option<SeedSet>> {
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    let types = eligible_types(&sentence.tokens, policy);
    if types.len() < k {
        log::debug!(
            "line {}: {} eligible words, need {k}; skipped",
            sentence.line_index,
            types.len()
        );
        return Ok(None);
    }
    let mut picked: Vec<String> = types
        .choose_multiple(rng, k)
        .map(|s| (*s).to_owned())
        .collect();
    picked.shuffle(rng);
    let source = SeedSource::Sentence {
        line_index: sentence.line_index,
        sample_index,
    };
    SeedSet::new(picked, source).map(Some)
}

/// An input/target example for the sequence-to-sequence model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingPair {
    pub input_text: String,
    pub target: String,
}

#[derive(Debug, Clone, Default)]
pub struct PairBuild {
    pub pairs: Vec<TrainingPair>,
    /// The seed set behind each pair, index-aligned with `pairs`.
    pub seed_sets: Vec<SeedSet>,
    pub skipped_sentences: usize,
    pub duplicate_sets: usize,
}

fn sentence_rng(
    rng_seed: u64,
    split_name: &str,
    line_index: usize,
    sample_index: usize,
    attempt: usize,
) -> rand_chacha::ChaCha8Rng {
    rng::keyed_rng(&[
        rng_seed,
        rng::label_hash(split_name),
        line_index as u64,
        sample_index as u64,
        attempt as u64,
    ])
}

/// Builds up to `samples_per_sentence` pairs from each sentence.
///
/// Repeated samples from one sentence try for a word set not drawn before,
/// retrying up to [`DISTINCT_RETRIES`] times, and otherwise keep the last
/// draw.
pub fn build_training_pairs(
    split: &[TokenizedSentence],
    split_name: &str,
    k: usize,
    samples_per_sentence: usize,
    rng_seed: u64,
    policy: &StopwordPolicy,
) -> Result<PairBuild> {
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    if samples_per_sentence == 0 {
        return Err(Error::config("samples per sentence must be at least 1"));
    }
    let mut build = PairBuild::default();
    for sentence in split {
        let mut drawn: Vec<SeedSet> = Vec::with_capacity(samples_per_sentence);
        for sample_index in 0..samples_per_sentence {
            let mut chosen = None;
            for attempt in 0..DISTINCT_RETRIES {
                let mut rng =
                    sentence_rng(rng_seed, split_name, sentence.line_index, sample_index, attempt);
                let Some(set) = sample_seeds_within(sentence, k, policy, &mut rng, sample_index)?
                else {
                    break;
                };
                let fresh = !drawn.iter().any(|d| d.same_words(&set));
                chosen = Some((set, fresh));
                if fresh {
                    break;
                }
            }
            match chosen {
                None => {
                    build.skipped_sentences += 1;
                    break;
                }
                Some((set, fresh)) => {
                    if !fresh {
                        build.duplicate_sets += 1;
                    }
                    drawn.push(set);
                }
            }
        }
        for set in drawn {
            build.pairs.push(TrainingPair {
                input_text: format_input(&set)?,
                target: sentence.raw.clone(),
            });
            build.seed_sets.push(set);
        }
    }
    Ok(build)
}

/// Draws seed sets over a whole document by occurrence-weighted sampling.
/// Seeds of one set may come from different sentences.
pub fn sample_seeds_document(
    tokens: &[String],
    k: usize,
    num_sets: usize,
    policy: &StopwordPolicy,
    rng_seed: u64,
) -> Result<Vec<SeedSet>> {
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    let occurrences: Vec<&str> = tokens
        .iter()
        .map(String::as_str)
        .filter(|t| is_eligible_seed(t, policy))
        .collect();
    let distinct: HashSet<&str> = occurrences.iter().copied().collect();
    if distinct.len() < k {
        return Err(Error::input(format!(
            "document has {} eligible distinct words, need at least {k}",
            distinct.len()
        )));
    }
    let doc_label = rng::label_hash("document");
    (0..num_sets)
        .map(|set_index| {
            let mut rng = rng::keyed_rng(&[rng_seed, doc_label, set_index as u64]);
            let mut seeds: Vec<String> = Vec::with_capacity(k);
            while seeds.len() < k {
                let word = occurrences[rng.random_range(0..occurrences.len())];
                if !seeds.iter().any(|s| s == word) {
                    seeds.push(word.to_owned());
                }
            }
            SeedSet::new(seeds, SeedSource::Document { set_index })
        })
        .collect()
}

/// Mean number of uppercase characters per seed set.
pub fn uppercase_stat(sets: &[SeedSet]) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::input("uppercase statistic needs at least one seed set"));
    }
    let total: usize = sets
        .iter()
        .flat_map(|s| s.seeds.iter())
        .map(|w| w.chars().filter(|c| c.is_uppercase()).count())
        .sum();
    Ok(total as f64 / sets.len() as f64)
}

/// Writes `input_text<TAB>target` lines.
pub fn write_pairs_tsv(path: &Path, pairs: &[TrainingPair]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for p in pairs {
        if p.target.contains(['\t', '\n']) || p.input_text.contains(['\t', '\n']) {
            return Err(Error::data(format!(
                "pair cannot be written as TSV, it contains a tab or newline: {:?}",
                p.target
            )));
        }
        writeln!(out, "{}\t{}", p.input_text, p.target)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_pairs_tsv(path: &Path) -> Result<Vec<TrainingPair>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::input(format!("cannot open {}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        let (input, target) = line.split_once('\t').ok_or_else(|| {
            Error::input(format!("{}:{}: expected two tab-separated columns", path.display(), i + 1))
        })?;
        pairs.push(TrainingPair {
            input_text: input.to_owned(),
            target: target.to_owned(),
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed_rng;

    fn policy() -> StopwordPolicy {
        StopwordPolicy::builtin()
    }

    fn set(words: &[&str]) -> SeedSet {
        SeedSet::new(words.iter().map(|s| s.to_string()).collect(), SeedSource::Parsed).unwrap()
    }

    const DEV1: &str = "That article, however, must be implemented still further.";

    #[test]
    fn within_sentence_matches_dev_example() {
        let s = TokenizedSentence::new(DEV1, 0);
        for seed in 0..20 {
            let got = sample_seeds_within(&s, 4, &policy(), &mut keyed_rng(&[seed]), 0)
                .unwrap()
                .unwrap();
            assert!(got.same_words(&set(&["implemented", "article", "still", "must"])));
        }
    }

    #[test]
    fn within_sentence_skips_and_rejects_zero_k() {
        let s = TokenizedSentence::new("The cat saw a dog and the cat.", 3);
        let r = sample_seeds_within(&s, 4, &policy(), &mut keyed_rng(&[1]), 0).unwrap();
        assert!(r.is_none());
        assert!(matches!(
            sample_seeds_within(&s, 0, &policy(), &mut keyed_rng(&[1]), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn within_sentence_is_deterministic() {
        let s = TokenizedSentence::new(
            "The clarification we seek serves the aim of securing legitimacy and transparency.",
            2,
        );
        let a = sample_seeds_within(&s, 4, &policy(), &mut keyed_rng(&[9, 9]), 0).unwrap();
        let b = sample_seeds_within(&s, 4, &policy(), &mut keyed_rng(&[9, 9]), 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn format_and_parse() {
        let s = set(&["implemented", "article", "still", "must"]);
        assert_eq!(
            format_input(&s).unwrap(),
            "implemented __ article __ still __ must"
        );
        assert_eq!(format_input(&set(&["deal"])).unwrap(), "deal");
        assert_eq!(parse_input("implemented __ article __ still __ must").unwrap(), s);
        assert!(matches!(format_input(&set(&["a__b"])), Err(Error::Input(_))));
        assert!(parse_input("").is_err());
        assert!(parse_input("a __ a").is_err());
    }

    #[test]
    fn three_samples_of_a_four_word_sentence_share_words() {
        let s = TokenizedSentence::new(DEV1, 0);
        let b = build_training_pairs(&[s], "train", 4, 3, 5, &policy()).unwrap();
        assert_eq!(b.pairs.len(), 3);
        assert_eq!(b.duplicate_sets, 2);
        assert!(b.seed_sets.iter().all(|x| x.same_words(&b.seed_sets[0])));
        assert!(b.pairs.iter().all(|p| p.target == DEV1));
    }

    #[test]
    fn three_samples_prefer_distinct_sets() {
        let s = TokenizedSentence::new(
            "That is exactly why the draft decision specifies that the political \
             association should be active in at least one-third of the Member States.",
            3,
        );
        let b = build_training_pairs(&[s], "train", 4, 3, 11, &policy()).unwrap();
        assert_eq!(b.pairs.len(), 3);
        assert_eq!(b.duplicate_sets, 0);
        assert!(!b.seed_sets[0].same_words(&b.seed_sets[1]));
        assert!(!b.seed_sets[1].same_words(&b.seed_sets[2]));
    }

    #[test]
    fn document_sampling_forced_vocabulary() {
        let tokens: Vec<String> = "alpha beta , the gamma delta . alpha alpha delta"
            .split(' ')
            .map(String::from)
            .collect();
        let sets = sample_seeds_document(&tokens, 4, 25, &policy(), 3).unwrap();
        assert_eq!(sets.len(), 25);
        for s in &sets {
            assert!(s.same_words(&set(&["alpha", "beta", "gamma", "delta"])));
        }
        assert_eq!(sets, sample_seeds_document(&tokens, 4, 25, &policy(), 3).unwrap());
        assert!(matches!(
            sample_seeds_document(&tokens, 5, 1, &policy(), 3),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn uppercase_counts() {
        assert_eq!(uppercase_stat(&[set(&["a", "b"])]).unwrap(), 0.0);
        assert_eq!(
            uppercase_stat(&[set(&["Member", "association", "States", "exactly"])]).unwrap(),
            2.0
        );
        assert!(uppercase_stat(&[]).is_err());
    }

    #[test]
    fn tsv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tsv");
        let pairs = vec![TrainingPair {
            input_text: "deal __ two".into(),
            target: "I will deal with those two subjects separately:".into(),
        }];
        write_pairs_tsv(&path, &pairs).unwrap();
        assert_eq!(read_pairs_tsv(&path).unwrap(), pairs);
        let bad = vec![TrainingPair {
            input_text: "x".into(),
            target: "a\tb".into(),
        }];
        assert!(write_pairs_tsv(&path, &bad).is_err());
    }
}
