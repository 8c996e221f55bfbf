//! Seed coverage, length statistics, the blinded identification task and
//! the anomalous-seed probe.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{generate_one, DecodeConfig, GenerationRecord};
use crate::error::{Error, Result};
use crate::model::{ModelState, Scalar};
use crate::rng::{keyed_rng, label_hash};
use crate::seeding::{format_input, SeedSet, SeedSource};
use crate::subword::SubwordVocab;
use crate::textproc::{is_word_token, tokenize_words};

/// Seeds with no exact, case-sensitive match among the output's tokens.
pub fn count_missing(seeds: &SeedSet, output_text: &str) -> usize {
    count_missing_words(seeds.seeds(), output_text)
}

pub fn count_missing_words(seeds: &[String], output_text: &str) -> usize {
    let tokens: HashSet<String> = tokenize_words(output_text).into_iter().collect();
    seeds.iter().filter(|s| !tokens.contains(s.as_str())).count()
}

/// Rounds `counts / total` to `decimals` places so that the parts sum to
/// exactly 100 (largest remainder, ties to the lower index).
pub fn rounded_percentages(counts: &[usize], decimals: u32) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    let units = 100 * 10u64.pow(decimals);
    let exact: Vec<(u64, u64)> = counts
        .iter()
        .map(|&c| {
            let num = c as u64 * units;
            (num / total as u64, num % total as u64)
        })
        .collect();
    let mut whole: Vec<u64> = exact.iter().map(|e| e.0).collect();
    let short = units - whole.iter().sum::<u64>();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| exact[b].1.cmp(&exact[a].1).then(a.cmp(&b)));
    for &i in order.iter().take(short as usize) {
        whole[i] += 1;
    }
    let scale = 10f64.powi(decimals as i32);
    whole.into_iter().map(|w| w as f64 / scale).collect()
}

/// Histogram of missing-seed counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// Largest seed-set size among the records.
    pub k: usize,
    /// `counts[m]` = records missing exactly `m` seeds.
    pub counts: Vec<usize>,
    /// Percentages to one decimal, summing to exactly 100.
    pub percentages: Vec<f64>,
    pub total: usize,
    /// Share of records missing at most one seed, to one decimal.
    pub missing_at_most_one: f64,
}

impl CoverageReport {
    pub fn from_missing(k: usize, missing: &[usize]) -> Result<Self> {
        let mut counts = vec![0; k + 1];
        for &m in missing {
            if m > k {
                return Err(Error::input(format!("missing count {m} exceeds k = {k}")));
            }
            counts[m] += 1;
        }
        let total = missing.len();
        let percentages = rounded_percentages(&counts, 1);
        let le1 = counts.iter().take(2).sum::<usize>();
        let missing_at_most_one = if total == 0 {
            0.0
        } else {
            (le1 as f64 * 1000.0 / total as f64).round() / 10.0
        };
        Ok(CoverageReport {
            k,
            counts,
            percentages,
            total,
            missing_at_most_one,
        })
    }

    pub fn perfect(&self) -> f64 {
        self.percentages[0]
    }

    pub fn miss(&self, m: usize) -> f64 {
        self.percentages.get(m).copied().unwrap_or(0.0)
    }
}

impl fmt::Display for CoverageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10}{:>8}{:>9}", "", "count", "percent")?;
        for m in (0..=self.k).rev() {
            let label = if m == 0 {
                "Perfect".to_string()
            } else {
                format!("Miss {m}")
            };
            writeln!(f, "{label:<10}{:>8}{:>9.1}", self.counts[m], self.percentages[m])?;
        }
        writeln!(f, "{:<10}{:>8}", "total", self.total)?;
        write!(f, "{:<10}{:>17.1}", "miss<=1", self.missing_at_most_one)
    }
}

/// Coverage of `records` against the seed sets that produced them.
/// Each record's input must be the formatted form of its seed set.
/// Records flagged with an error count as missing every seed.
pub fn coverage_report(records: &[GenerationRecord], seeds: &[SeedSet]) -> Result<CoverageReport> {
    if records.len() != seeds.len() {
        return Err(Error::input(format!(
            "{} generation records but {} seed sets",
            records.len(),
            seeds.len()
        )));
    }
    let mut missing = Vec::with_capacity(records.len());
    for (i, (r, s)) in records.iter().zip(seeds).enumerate() {
        if r.input_text != format_input(s)? {
            return Err(Error::input(format!(
                "record {} has input {:?}, expected {:?}",
                i + 1,
                r.input_text,
                s.to_string()
            )));
        }
        missing.push(if r.error.is_some() {
            s.k()
        } else {
            count_missing(s, &r.output_text)
        });
    }
    let k = seeds.iter().map(SeedSet::k).max().unwrap_or(0);
    CoverageReport::from_missing(k, &missing)
}

/// Coverage with seed sets parsed back from each record's input.
pub fn coverage_from_inputs(records: &[GenerationRecord]) -> Result<CoverageReport> {
    let seeds = records
        .iter()
        .map(|r| crate::seeding::parse_input(&r.input_text))
        .collect::<Result<Vec<_>>>()?;
    coverage_report(records, &seeds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub count: usize,
    /// Mean number of word tokens; punctuation is not counted.
    pub avg_words: f64,
    /// Mean number of characters, spaces and punctuation included.
    pub avg_chars: f64,
}

pub fn length_stats<S: AsRef<str>>(sentences: &[S]) -> Result<LengthStats> {
    if sentences.is_empty() {
        return Err(Error::input("length statistics need at least one sentence"));
    }
    let (mut words, mut chars) = (0usize, 0usize);
    for s in sentences {
        let s = s.as_ref();
        words += tokenize_words(s).iter().filter(|t| is_word_token(t)).count();
        chars += s.chars().count();
    }
    let n = sentences.len() as f64;
    Ok(LengthStats {
        count: sentences.len(),
        avg_words: words as f64 / n,
        avg_chars: chars as f64 / n,
    })
}

/// Token count used by the pairing filter: every token, punctuation
/// included.
pub fn token_length(s: &str) -> usize {
    tokenize_words(s).len()
}

pub const MAX_TOKEN_DIFF: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPair {
    pub pair_id: String,
    pub sentence_a: String,
    pub sentence_b: String,
    pub human_is: Side,
    pub identical: bool,
}

/// What a judge sees.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlindPair {
    pub pair_id: String,
    pub a: String,
    pub b: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthEntry {
    pub pair_id: String,
    pub human_is: Side,
    pub identical: bool,
}

impl EvalPair {
    pub fn blinded(&self) -> BlindPair {
        BlindPair {
            pair_id: self.pair_id.clone(),
            a: self.sentence_a.clone(),
            b: self.sentence_b.clone(),
        }
    }

    pub fn truth(&self) -> TruthEntry {
        TruthEntry {
            pair_id: self.pair_id.clone(),
            human_is: self.human_is,
            identical: self.identical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMode {
    /// Each generation against the sentence its seeds came from.
    Paired,
    /// Each generation against a random real sentence.
    Cross,
}

impl std::str::FromStr for PairMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired" => Ok(PairMode::Paired),
            "cross" => Ok(PairMode::Cross),
            other => Err(Error::config(format!(
                "unknown pair mode {other:?} (expected paired or cross)"
            ))),
        }
    }
}

fn within_bound(a: &str, b: &str) -> bool {
    token_length(a).abs_diff(token_length(b)) <= MAX_TOKEN_DIFF
}

/// Builds `num_pairs` blinded pairs of a generated and a human sentence.
///
/// In paired mode `references[i]` is the source of `generated[i]`. In cross
/// mode each generation is matched with a random reference among those
/// within the length bound. Candidates outside the bound, and failed
/// generations, are dropped before sampling.
pub fn select_eval_pairs(
    generated: &[GenerationRecord],
    references: &[String],
    num_pairs: usize,
    rng_seed: u64,
    mode: PairMode,
) -> Result<Vec<EvalPair>> {
    let mut candidates: Vec<(String, String)> = Vec::new();
    match mode {
        PairMode::Paired => {
            if generated.len() != references.len() {
                return Err(Error::input(format!(
                    "{} generations but {} reference sentences",
                    generated.len(),
                    references.len()
                )));
            }
            for (g, r) in generated.iter().zip(references) {
                if g.error.is_none() && within_bound(&g.output_text, r) {
                    candidates.push((g.output_text.clone(), r.clone()));
                }
            }
        }
        PairMode::Cross => {
            let ref_lens: Vec<usize> = references.iter().map(|r| token_length(r)).collect();
            for (i, g) in generated.iter().enumerate() {
                if g.error.is_some() {
                    continue;
                }
                let n = token_length(&g.output_text);
                let pool: Vec<usize> = (0..references.len())
                    .filter(|&j| ref_lens[j].abs_diff(n) <= MAX_TOKEN_DIFF)
                    .collect();
                let mut rng = keyed_rng(&[rng_seed, label_hash("cross-partner"), i as u64]);
                if let Some(&j) = pool.choose(&mut rng) {
                    candidates.push((g.output_text.clone(), references[j].clone()));
                }
            }
        }
    }
    if candidates.len() < num_pairs {
        return Err(Error::input(format!(
            "only {} candidate pairs satisfy the length bound, {num_pairs} requested",
            candidates.len()
        )));
    }
    let mut rng = keyed_rng(&[rng_seed, label_hash("pair-select")]);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, candidates.len(), num_pairs).into_vec();
    picked.sort_unstable();
    picked.shuffle(&mut rng);
    let width = num_pairs.to_string().len().max(3);
    Ok(picked
        .into_iter()
        .enumerate()
        .map(|(n, i)| {
            let (machine, human) = candidates[i].clone();
            let human_is = if rng.random::<bool>() { Side::A } else { Side::B };
            let identical = machine == human;
            let (sentence_a, sentence_b) = match human_is {
                Side::A => (human, machine),
                Side::B => (machine, human),
            };
            EvalPair {
                pair_id: format!("p{:0width$}", n + 1),
                sentence_a,
                sentence_b,
                human_is,
                identical,
            }
        })
        .collect())
}

fn write_jsonl<W: Write, T: Serialize>(mut out: W, items: impl IntoIterator<Item = T>) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, &item).map_err(|e| Error::format(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::data(format!("{what} line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn write_pair_files(pairs: &[EvalPair], blinded: &Path, truth: &Path) -> Result<()> {
    write_jsonl(
        std::io::BufWriter::new(std::fs::File::create(blinded)?),
        pairs.iter().map(EvalPair::blinded),
    )?;
    write_jsonl(
        std::io::BufWriter::new(std::fs::File::create(truth)?),
        pairs.iter().map(EvalPair::truth),
    )
}

pub fn read_blinded(path: &Path) -> Result<Vec<BlindPair>> {
    read_jsonl(path, "pairs")
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthEntry>> {
    read_jsonl(path, "truth key")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Vote {
    A,
    B,
    #[serde(rename = "cannot_tell")]
    CannotTell,
}

impl Vote {
    /// Reads a judge's answer; accepts `a`, `b`, `c`, `?` and `cannot_tell`
    /// in any case.
    pub fn parse_answer(s: &str) -> Option<Vote> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Some(Vote::A),
            "b" => Some(Vote::B),
            "c" | "?" | "cannot_tell" | "cannot tell" => Some(Vote::CannotTell),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub judge_id: String,
    pub pair_id: String,
    pub vote: Vote,
}

pub fn read_votes(path: &Path) -> Result<Vec<VoteRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::data(format!("votes: {e}")))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::data(format!("votes: {e}"))))
        .collect()
}

pub fn write_votes(path: &Path, votes: &[VoteRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(format!("votes: {e}")))?;
    for v in votes {
        w.serialize(v).map_err(|e| Error::data(format!("votes: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Appends one vote, writing the header first if the file is new.
pub fn append_vote(path: &Path, vote: &VoteRecord) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(vote).map_err(|e| Error::data(format!("votes: {e}")))?;
    w.flush()?;
    Ok(())
}

/// Interactive judging loop. Pairs this judge already voted on are skipped.
/// Every accepted vote is passed to `record` before the next prompt, so an
/// interrupted session can be resumed. Unrecognized answers re-prompt; end
/// of input ends the session early.
pub fn judge_session<R, W, F>(
    pairs: &[BlindPair],
    judge_id: &str,
    already: &[VoteRecord],
    mut input: R,
    mut out: W,
    mut record: F,
) -> Result<Vec<VoteRecord>>
where
    R: BufRead,
    W: Write,
    F: FnMut(&VoteRecord) -> Result<()>,
{
    let done: HashSet<&str> = already
        .iter()
        .filter(|v| v.judge_id == judge_id)
        .map(|v| v.pair_id.as_str())
        .collect();
    let todo: Vec<&BlindPair> = pairs.iter().filter(|p| !done.contains(p.pair_id.as_str())).collect();
    let mut votes = Vec::new();
    for (n, pair) in todo.iter().enumerate() {
        writeln!(out, "\n[{}/{}] pair {}", n + 1, todo.len(), pair.pair_id)?;
        writeln!(out, "  A: {}", pair.a)?;
        writeln!(out, "  B: {}", pair.b)?;
        let vote = loop {
            write!(out, "Which one was written by a person? [a/b/c = cannot tell] ")?;
            out.flush()?;
            let mut line = String::new();
            if input.read_line(&mut line)? == 0 {
                writeln!(out)?;
                return Ok(votes);
            }
            match Vote::parse_answer(&line) {
                Some(v) => break v,
                None => writeln!(out, "Please answer a, b or c.")?,
            }
        };
        let v = VoteRecord {
            judge_id: judge_id.to_string(),
            pair_id: pair.pair_id.clone(),
            vote,
        };
        record(&v)?;
        votes.push(v);
    }
    Ok(votes)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TallyResult {
    pub human_wins: usize,
    pub machine_wins: usize,
    pub tied: usize,
    /// Non-identical pairs in the truth key.
    pub scored_pairs: usize,
    pub identical_pairs: usize,
    pub judges: usize,
    /// Pairs where every judge picked the human side.
    pub unanimous_human: usize,
    /// Pairs where every judge picked the machine side.
    pub unanimous_machine: usize,
}

impl fmt::Display for TallyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "judges          {}", self.judges)?;
        writeln!(f, "scored pairs    {}", self.scored_pairs)?;
        writeln!(f, "identical pairs {} (not scored)", self.identical_pairs)?;
        writeln!(f, "human wins      {}", self.human_wins)?;
        writeln!(f, "machine wins    {}", self.machine_wins)?;
        writeln!(f, "tied            {}", self.tied)?;
        writeln!(f, "unanimous human {}", self.unanimous_human)?;
        write!(f, "unanimous machine {}", self.unanimous_machine)
    }
}

/// Strict-majority tally. `cannot_tell` counts for neither side; pairs
/// flagged identical are not scored.
pub fn tally_votes(votes: &[VoteRecord], truth: &[TruthEntry]) -> Result<TallyResult> {
    let mut key: HashMap<&str, &TruthEntry> = HashMap::new();
    for t in truth {
        if key.insert(t.pair_id.as_str(), t).is_some() {
            return Err(Error::data(format!("pair {} appears twice in the truth key", t.pair_id)));
        }
    }
    let mut seen = HashSet::new();
    let mut judges = HashSet::new();
    // pair -> (human votes, machine votes)
    let mut score: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for v in votes {
        let Some(t) = key.get(v.pair_id.as_str()) else {
            return Err(Error::data(format!("vote for unknown pair {}", v.pair_id)));
        };
        if !seen.insert((v.judge_id.as_str(), v.pair_id.as_str())) {
            return Err(Error::data(format!(
                "judge {} voted twice on pair {}",
                v.judge_id, v.pair_id
            )));
        }
        judges.insert(v.judge_id.as_str());
        if t.identical {
            continue;
        }
        let e = score.entry(v.pair_id.as_str()).or_default();
        match (v.vote, t.human_is) {
            (Vote::CannotTell, _) => {}
            (Vote::A, Side::A) | (Vote::B, Side::B) => e.0 += 1,
            _ => e.1 += 1,
        }
    }
    let n_judges = judges.len();
    let mut r = TallyResult {
        human_wins: 0,
        machine_wins: 0,
        tied: 0,
        scored_pairs: 0,
        identical_pairs: 0,
        judges: n_judges,
        unanimous_human: 0,
        unanimous_machine: 0,
    };
    for t in truth {
        if t.identical {
            r.identical_pairs += 1;
            continue;
        }
        r.scored_pairs += 1;
        let (h, m) = score.get(t.pair_id.as_str()).copied().unwrap_or((0, 0));
        match h.cmp(&m) {
            std::cmp::Ordering::Greater => r.human_wins += 1,
            std::cmp::Ordering::Less => r.machine_wins += 1,
            std::cmp::Ordering::Equal => r.tied += 1,
        }
        if n_judges > 0 && h == n_judges {
            r.unanimous_human += 1;
        }
        if n_judges > 0 && m == n_judges {
            r.unanimous_machine += 1;
        }
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub records: Vec<GenerationRecord>,
    pub missing: Vec<usize>,
    pub coverage: CoverageReport,
}

/// Random orders of `words`, one per shuffle; the same seed gives the same
/// orders.
pub fn probe_orders(words: &[String], num_shuffles: usize, rng_seed: u64) -> Vec<Vec<String>> {
    (0..num_shuffles)
        .map(|i| {
            let mut order = words.to_vec();
            order.shuffle(&mut keyed_rng(&[rng_seed, label_hash("probe"), i as u64]));
            order
        })
        .collect()
}

/// Generates from shuffled orders of a fixed word list and counts the
/// missing seeds of each output.
pub fn cgi_probe<T: Scalar>(
    model: &ModelState<T>,
    vocab: &SubwordVocab,
    words: &[String],
    num_shuffles: usize,
    rng_seed: u64,
    cfg: &DecodeConfig,
) -> Result<ProbeReport> {
    if words.is_empty() {
        return Err(Error::input("the probe needs at least one word"));
    }
    let mut records = Vec::with_capacity(num_shuffles);
    let mut missing = Vec::with_capacity(num_shuffles);
    for order in probe_orders(words, num_shuffles, rng_seed) {
        let set = SeedSet::new(order, SeedSource::Parsed)?;
        let record = generate_one(model, vocab, &format_input(&set)?, cfg)?;
        missing.push(count_missing(&set, &record.output_text));
        records.push(record);
    }
    let coverage = CoverageReport::from_missing(words.len(), &missing)?;
    Ok(ProbeReport {
        records,
        missing,
        coverage,
    })
}
