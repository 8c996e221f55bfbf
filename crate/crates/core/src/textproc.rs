//! Corpus ingestion: surface tokenization, length filtering, the stopword
//! policy, and deterministic train/dev/test splitting.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng;

/// Identifier of the stopword list compiled into the crate.
pub const BUILTIN_STOPWORDS_VERSION: &str = "seedsmith-stopwords-v1";
const BUILTIN_STOPWORDS: &str = include_str!("../data/stopwords-v1.txt");

/// A raw sentence with its surface tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSentence {
    pub raw: String,
    pub tokens: Vec<String>,
    /// Position of the sentence in its source file.
    pub line_index: usize,
}

impl TokenizedSentence {
    pub fn new(raw: impl Into<String>, line_index: usize) -> Self {
        let raw = raw.into();
        let tokens = tokenize_words(&raw);
        TokenizedSentence {
            raw,
            tokens,
            line_index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

fn is_joiner(c: char) -> bool {
    matches!(c, '-' | '\'' | '\u{2019}')
}

/// Splits a sentence into word and punctuation tokens.
///
/// A word is a maximal run of letters and digits; a hyphen or apostrophe is
/// kept inside the word when it sits between two word characters
/// (`one-third`, `don't`). Every other non-whitespace character is a token of
/// its own.
pub fn tokenize_words(raw: &str) -> Vec<String> {
    let chars: Vec<char> = raw.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if is_word_char(c) {
            let start = i;
            i += 1;
            while i < chars.len() {
                if is_word_char(chars[i]) {
                    i += 1;
                } else if is_joiner(chars[i])
                    && i + 1 < chars.len()
                    && is_word_char(chars[i + 1])
                {
                    i += 2;
                } else {
                    break;
                }
            }
            tokens.push(chars[start..i].iter().collect());
        } else {
            tokens.push(c.to_string());
            i += 1;
        }
    }
    tokens
}

/// True if the token is a word (contains a letter or digit) rather than
/// punctuation.
pub fn is_word_token(token: &str) -> bool {
    token.chars().any(is_word_char)
}

/// The set of lowercase words that may never be used as seeds.
#[derive(Debug, Clone)]
pub struct StopwordPolicy {
    words: HashSet<String>,
    version_id: String,
}

impl StopwordPolicy {
    /// The list shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_STOPWORDS, BUILTIN_STOPWORDS_VERSION)
    }

    /// One word per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str, version_id: impl Into<String>) -> Self {
        let words = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        StopwordPolicy {
            words,
            version_id: version_id.into(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let version = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self::parse(&text, version))
    }

    /// Case-insensitive membership.
    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(&word.to_lowercase())
    }

    pub fn version_id(&self) -> &str {
        &self.version_id
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Whether a surface token may be used as a seed: letters only (internal
/// hyphens and apostrophes allowed), no digits, not a stopword.
pub fn is_eligible_seed(token: &str, policy: &StopwordPolicy) -> bool {
    let mut has_letter = false;
    for c in token.chars() {
        if c.is_alphabetic() {
            has_letter = true;
        } else if !is_joiner(c) {
            return false;
        }
    }
    has_letter && !policy.contains(token)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FilterStats {
    pub kept: usize,
    pub dropped: usize,
}

/// Keeps the sentences whose token count lies in `[min_tokens, max_tokens]`.
pub fn filter_sentences<I>(
    corpus: I,
    min_tokens: usize,
    max_tokens: usize,
) -> Result<(Vec<TokenizedSentence>, FilterStats)>
where
    I: IntoIterator<Item = TokenizedSentence>,
{
    if min_tokens > max_tokens {
        return Err(Error::config(format!(
            "min_tokens ({min_tokens}) exceeds max_tokens ({max_tokens})"
        )));
    }
    let mut stats = FilterStats::default();
    let kept = corpus
        .into_iter()
        .filter(|s| {
            let keep = (min_tokens..=max_tokens).contains(&s.len());
            if keep {
                stats.kept += 1;
            } else {
                stats.dropped += 1;
            }
            keep
        })
        .collect();
    Ok((kept, stats))
}

/// Train/dev/test proportions held as exact rationals over a common
/// denominator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    numerators: [u64; 3],
    denominator: u64,
    pub rng_seed: u64,
}

impl SplitSpec {
    pub fn new(numerators: [u64; 3], denominator: u64, rng_seed: u64) -> Result<Self> {
        if numerators.contains(&0) {
            return Err(Error::config("every split fraction must be > 0"));
        }
        if numerators.iter().sum::<u64>() != denominator {
            return Err(Error::config("split fractions must sum to exactly 1"));
        }
        Ok(SplitSpec {
            numerators,
            denominator,
            rng_seed,
        })
    }

    /// Parses decimal fractions such as `"0.7,0.1,0.2"` exactly.
    pub fn parse(text: &str, rng_seed: u64) -> Result<Self> {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::config(format!(
                "split needs three comma-separated fractions, got {text:?}"
            )));
        }
        let decimals: Vec<(u64, u32)> = parts
            .iter()
            .map(|p| parse_decimal(p))
            .collect::<Result<_>>()?;
        let scale = decimals.iter().map(|d| d.1).max().unwrap_or(0);
        let denominator = 10u64.pow(scale);
        let mut numerators = [0u64; 3];
        for (slot, (value, places)) in numerators.iter_mut().zip(&decimals) {
            *slot = value * 10u64.pow(scale - places);
        }
        Self::new(numerators, denominator, rng_seed)
    }

    pub fn fraction(&self, i: usize) -> f64 {
        self.numerators[i] as f64 / self.denominator as f64
    }

    /// Split sizes for `n` items by largest-remainder rounding. Ties on the
    /// remainder go to the earlier split.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let n = n as u128;
        let den = self.denominator as u128;
        let mut counts = [0usize; 3];
        let mut remainders = [(0u128, 0usize); 3];
        for i in 0..3 {
            let q = n * self.numerators[i] as u128;
            counts[i] = (q / den) as usize;
            remainders[i] = (q % den, i);
        }
        let assigned: usize = counts.iter().sum();
        let mut left = n as usize - assigned;
        remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in &remainders {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }
}

fn parse_decimal(s: &str) -> Result<(u64, u32)> {
    let bad = || Error::config(format!("invalid split fraction {s:?}"));
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if (int.is_empty() && frac.is_empty())
        || !int.chars().all(|c| c.is_ascii_digit())
        || !frac.chars().all(|c| c.is_ascii_digit())
        || frac.len() > 9
    {
        return Err(bad());
    }
    let places = frac.len() as u32;
    let digits = format!("{int}{frac}");
    let value = digits.parse::<u64>().map_err(|_| bad())?;
    Ok((value, places))
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "dev", "test"];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<TokenizedSentence>,
    pub dev: Vec<TokenizedSentence>,
    pub test: Vec<TokenizedSentence>,
}

impl Splits {
    pub fn parts(&self) -> [(&'static str, &[TokenizedSentence]); 3] {
        [
            ("train", &self.train),
            ("dev", &self.dev),
            ("test", &self.test),
        ]
    }

    /// Writes `train.txt`, `dev.txt` and `test.txt` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, sentences) in self.parts() {
            write_lines(
                &dir.join(format!("{name}.txt")),
                sentences.iter().map(|s| s.raw.as_str()),
            )?;
        }
        Ok(())
    }
}

/// Assigns every sentence to exactly one split.
///
/// Each sentence gets a sort key derived from `(rng_seed, line_index)`; the
/// sentences are ranked by that key and cut into consecutive blocks of the
/// largest-remainder sizes. Within each split the original order is kept.
pub fn make_splits(corpus: Vec<TokenizedSentence>, spec: &SplitSpec) -> Result<Splits> {
    if corpus.is_empty() {
        return Err(Error::input("cannot split an empty corpus"));
    }
    let [n_train, n_dev, _] = spec.counts(corpus.len());
    let mut keyed: Vec<(u64, usize, TokenizedSentence)> = corpus
        .into_iter()
        .map(|s| {
            let key = rng::mix(&[spec.rng_seed, rng::label_hash("split"), s.line_index as u64]);
            (key, s.line_index, s)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut splits = Splits::default();
    for (rank, (_, _, s)) in keyed.into_iter().enumerate() {
        if rank < n_train {
            splits.train.push(s);
        } else if rank < n_train + n_dev {
            splits.dev.push(s);
        } else {
            splits.test.push(s);
        }
    }
    for part in [&mut splits.train, &mut splits.dev, &mut splits.test] {
        part.sort_by_key(|s| s.line_index);
    }
    Ok(splits)
}

/// Reads one sentence per line. Lines are numbered from zero; a trailing CR
/// is stripped.
pub fn read_sentences(path: &Path) -> Result<Vec<TokenizedSentence>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::input(format!("cannot open {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.split(b'\n').enumerate() {
        let bytes = line?;
        let mut text = String::from_utf8(bytes).map_err(|_| {
            Error::input(format!("{}:{}: invalid UTF-8", path.display(), i + 1))
        })?;
        if text.ends_with('\r') {
            text.pop();
        }
        out.push(TokenizedSentence::new(text, i));
    }
    Ok(out)
}

/// Writes LF-terminated lines.
pub fn write_lines<'a, I>(path: &Path, lines: I) -> Result<()>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for line in lines {
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize_words(s)
    }

    #[test]
    fn tokenizes_dev_sentence() {
        let t = toks("That article, however, must be implemented still further.");
        assert_eq!(
            t,
            [
                "That",
                "article",
                ",",
                "however",
                ",",
                "must",
                "be",
                "implemented",
                "still",
                "further",
                "."
            ]
        );
    }

    #[test]
    fn empty_and_joiners() {
        assert!(toks("").is_empty());
        assert!(toks(" \t ").is_empty());
        assert_eq!(toks("one-third"), ["one-third"]);
        assert_eq!(toks("don't"), ["don't"]);
        assert_eq!(toks("States' -x"), ["States", "'", "-", "x"]);
        assert_eq!(toks("a--b"), ["a", "-", "-", "b"]);
        assert_eq!(toks("Müller's café"), ["Müller's", "café"]);
        assert_eq!(toks("2004:"), ["2004", ":"]);
    }

    #[test]
    fn sentence_four_keeps_hyphenated_word() {
        let s = "That is exactly why the draft decision specifies that the political \
                 association should be active in at least one-third of the Member States.";
        let t = toks(s);
        assert!(t.contains(&"one-third".to_string()));
        assert_eq!(t.last().unwrap(), ".");
    }

    #[test]
    fn filter_bounds_are_inclusive() {
        let mk = |n: usize, i: usize| {
            TokenizedSentence::new(vec!["w"; n].join(" "), i)
        };
        let corpus = vec![mk(7, 0), mk(8, 1), mk(25, 2), mk(26, 3)];
        let (kept, stats) = filter_sentences(corpus, 8, 25).unwrap();
        assert_eq!(kept.iter().map(|s| s.line_index).collect::<Vec<_>>(), [1, 2]);
        assert_eq!(stats, FilterStats { kept: 2, dropped: 2 });
        assert!(matches!(
            filter_sentences(Vec::new(), 9, 8),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn split_counts_largest_remainder() {
        let spec = SplitSpec::parse("0.7,0.1,0.2", 1).unwrap();
        assert_eq!(spec.counts(10), [7, 1, 2]);
        assert_eq!(spec.counts(3), [2, 0, 1]);
        assert_eq!(spec.counts(1), [1, 0, 0]);
        let c = spec.counts(1_171_662);
        assert_eq!(c.iter().sum::<usize>(), 1_171_662);
        for (i, &n) in c.iter().enumerate() {
            assert!((n as f64 - 1_171_662.0 * spec.fraction(i)).abs() < 1.0);
        }
    }

    #[test]
    fn split_spec_rejects_bad_fractions() {
        assert!(matches!(
            SplitSpec::parse("0.5,0.5,0.0", 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            SplitSpec::parse("0.5,0.3,0.3", 0),
            Err(Error::Config(_))
        ));
        assert!(SplitSpec::parse("0.7,0.1", 0).is_err());
        assert!(SplitSpec::parse("a,b,c", 0).is_err());
        assert!(SplitSpec::parse(".8,.1,.1", 0).is_ok());
    }

    #[test]
    fn make_splits_partitions_deterministically() {
        let corpus: Vec<_> = (0..10)
            .map(|i| TokenizedSentence::new(format!("sentence {i}"), i))
            .collect();
        let spec = SplitSpec::parse("0.7,0.1,0.2", 42).unwrap();
        let a = make_splits(corpus.clone(), &spec).unwrap();
        let b = make_splits(corpus, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.dev.len(), a.test.len()), (7, 1, 2));
        let mut all: Vec<usize> = a
            .parts()
            .iter()
            .flat_map(|(_, p)| p.iter().map(|s| s.line_index))
            .collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(make_splits(Vec::new(), &spec).is_err());
    }

    #[test]
    fn builtin_policy() {
        let p = StopwordPolicy::builtin();
        assert_eq!(p.version_id(), BUILTIN_STOPWORDS_VERSION);
        assert!(p.contains("very") && p.contains("now") && p.contains("The"));
        for pronoun in [
            "i", "me", "my", "we", "us", "you", "he", "him", "she", "her", "it", "they",
            "them", "their", "themselves", "myself",
        ] {
            assert!(!p.contains(pronoun), "{pronoun} should be eligible");
        }
    }

    #[test]
    fn seed_eligibility() {
        let p = StopwordPolicy::builtin();
        assert!(is_eligible_seed("implemented", &p));
        assert!(is_eligible_seed("I", &p));
        assert!(is_eligible_seed("one-third", &p));
        assert!(!is_eligible_seed("the", &p));
        assert!(!is_eligible_seed("The", &p));
        assert!(!is_eligible_seed("2004", &p));
        assert!(!is_eligible_seed("G8", &p));
        assert!(!is_eligible_seed(",", &p));
        assert!(!is_eligible_seed("-", &p));
    }

    #[test]
    fn dev_sentence_one_has_exactly_four_eligible_types() {
        let p = StopwordPolicy::builtin();
        let s = TokenizedSentence::new(
            "That article, however, must be implemented still further.",
            0,
        );
        let eligible: Vec<&str> = s
            .tokens
            .iter()
            .filter(|t| is_eligible_seed(t, &p))
            .map(String::as_str)
            .collect();
        assert_eq!(eligible, ["article", "must", "implemented", "still"]);
    }
}
