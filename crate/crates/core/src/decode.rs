//! Beam search and greedy decoding over any incremental scorer.

use std::cmp::Ordering;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncodedSource, ModelState, Scalar};
use crate::subword::{SubwordVocab, TokenId, BOS, EOS, PAD, SEP, UNK};

/// An autoregressive scorer. `start` returns the distribution of the first
/// output token; `advance` feeds one token and returns the next distribution.
/// Distributions are natural-log probabilities over the whole vocabulary.
pub trait StepModel {
    type Context;
    type State: Clone;

    fn vocab_size(&self) -> usize;
    fn eos(&self) -> TokenId;

    /// Tokens that may never be generated.
    fn is_banned(&self, _token: TokenId) -> bool {
        false
    }

    fn start(&self, ctx: &Self::Context) -> Result<(Self::State, Vec<f64>)>;
    fn advance(&self, ctx: &Self::Context, state: &mut Self::State, token: TokenId)
        -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Maximum number of generated tokens, EOS included.
    pub max_len: usize,
    /// Length-normalization exponent: scores are `logp / len^alpha`.
    pub alpha: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 5,
            max_len: 64,
            alpha: 1.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::config("beam_size must be at least 1"));
        }
        if self.max_len == 0 {
            return Err(Error::config("max_len must be at least 1"));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::config("alpha must be a finite non-negative number"));
        }
        Ok(())
    }
}

/// A finished (or length-capped) output sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens without the closing EOS.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    /// Length-normalized score used for ranking.
    pub score: f64,
    /// False when the sequence was cut at `max_len` without EOS.
    pub finished: bool,
}

pub fn normalized_score(log_prob: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        log_prob
    } else {
        log_prob / (len.max(1) as f64).powf(alpha)
    }
}

fn hypothesis(tokens: Vec<TokenId>, log_prob: f64, finished: bool, alpha: f64) -> Hypothesis {
    let len = tokens.len() + usize::from(finished);
    Hypothesis {
        score: normalized_score(log_prob, len, alpha),
        tokens,
        log_prob,
        finished,
    }
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

struct Live<S> {
    tokens: Vec<TokenId>,
    log_prob: f64,
    state: S,
    next: Vec<f64>,
}

/// Standard beam search. Each step expands every live hypothesis, keeps the
/// `beam_size` best extensions by cumulative log-probability, and moves the
/// ones ending in EOS to the finished pool. Search ends when nothing is
/// live, `max_len` is reached, or the pool holds `beam_size` hypotheses. The
/// pool, plus any hypotheses cut at `max_len`, is ranked by normalized score.
/// Ties go to the lower token id, then the lexicographically smaller
/// sequence.
pub fn beam_search<M: StepModel>(
    model: &M,
    ctx: &M::Context,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let eos = model.eos();
    let v = model.vocab_size();
    let (state, next) = model.start(ctx)?;
    let mut live = vec![Live {
        tokens: Vec::new(),
        log_prob: 0.0,
        state,
        next,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for step in 0..cfg.max_len {
        let mut cands: Vec<(f64, usize, TokenId)> = Vec::with_capacity(live.len() * v);
        for (i, h) in live.iter().enumerate() {
            for (t, &lp) in h.next.iter().enumerate() {
                let t = t as TokenId;
                if lp == f64::NEG_INFINITY || model.is_banned(t) {
                    continue;
                }
                cands.push((h.log_prob + lp, i, t));
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        cands.truncate(cfg.beam_size);
        let last = step + 1 == cfg.max_len;
        let mut next_live = Vec::new();
        for (lp, parent, t) in cands {
            let p = &live[parent];
            if t == eos {
                done.push(hypothesis(p.tokens.clone(), lp, true, cfg.alpha));
                continue;
            }
            let mut tokens = p.tokens.clone();
            tokens.push(t);
            if last {
                done.push(hypothesis(tokens, lp, false, cfg.alpha));
                continue;
            }
            let mut state = p.state.clone();
            let next = model.advance(ctx, &mut state, t)?;
            next_live.push(Live {
                tokens,
                log_prob: lp,
                state,
                next,
            });
        }
        live = next_live;
        if live.is_empty() || done.len() >= cfg.beam_size {
            break;
        }
    }
    done.sort_by(rank);
    Ok(done)
}

/// Arg-max decoding; ties go to the lower token id.
pub fn greedy_search<M: StepModel>(
    model: &M,
    ctx: &M::Context,
    max_len: usize,
    alpha: f64,
) -> Result<Hypothesis> {
    let eos = model.eos();
    let (mut state, mut next) = model.start(ctx)?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for step in 0..max_len {
        let mut best: Option<(f64, TokenId)> = None;
        for (t, &lp) in next.iter().enumerate() {
            let t = t as TokenId;
            if lp == f64::NEG_INFINITY || model.is_banned(t) {
                continue;
            }
            if best.is_none_or(|(b, _)| lp > b) {
                best = Some((lp, t));
            }
        }
        let Some((lp, t)) = best else { break };
        log_prob += lp;
        if t == eos {
            return Ok(hypothesis(tokens, log_prob, true, alpha));
        }
        tokens.push(t);
        if step + 1 < max_len {
            next = model.advance(ctx, &mut state, t)?;
        }
    }
    Ok(hypothesis(tokens, log_prob, false, alpha))
}

/// Adapts a trained model to [`StepModel`]. Specials other than EOS are
/// never generated.
pub struct TransformerScorer<'a, T> {
    pub model: &'a ModelState<T>,
}

impl<T: Scalar> StepModel for TransformerScorer<'_, T> {
    type Context = EncodedSource<T>;
    type State = crate::model::DecoderCache<T>;

    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn eos(&self) -> TokenId {
        EOS
    }

    fn is_banned(&self, token: TokenId) -> bool {
        matches!(token, PAD | BOS | UNK | SEP)
    }

    fn start(&self, ctx: &Self::Context) -> Result<(Self::State, Vec<f64>)> {
        let mut cache = self.model.start_decoding();
        let lp = self.model.decode_step(ctx, &mut cache, BOS)?;
        Ok((cache, lp.into_iter().map(Scalar::f64).collect()))
    }

    fn advance(
        &self,
        ctx: &Self::Context,
        state: &mut Self::State,
        token: TokenId,
    ) -> Result<Vec<f64>> {
        let lp = self.model.decode_step(ctx, state, token)?;
        Ok(lp.into_iter().map(Scalar::f64).collect())
    }
}

/// One generated sentence. Serialized as `{"input", "output", "score"}`,
/// plus `"error"` when the input could not be decoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    #[serde(rename = "input")]
    pub input_text: String,
    #[serde(rename = "output")]
    pub output_text: String,
    #[serde(rename = "score")]
    pub beam_score: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub beam_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn is_zero(x: &usize) -> bool {
    *x == 0
}

impl GenerationRecord {
    pub fn failed(input_text: String, error: String) -> Self {
        GenerationRecord {
            input_text,
            output_text: String::new(),
            beam_score: f64::NEG_INFINITY,
            beam_size: 0,
            error: Some(error),
        }
    }
}

/// Decodes one formatted input with beam search.
pub fn generate_one<T: Scalar>(
    model: &ModelState<T>,
    vocab: &SubwordVocab,
    input_text: &str,
    cfg: &DecodeConfig,
) -> Result<GenerationRecord> {
    if cfg.max_len > model.config.max_positions {
        return Err(Error::config(format!(
            "max_len {} exceeds max_positions {}",
            cfg.max_len, model.config.max_positions
        )));
    }
    let mut src = vocab.encode(input_text);
    src.push(EOS);
    let ctx = model.encode_source(&src)?;
    let scorer = TransformerScorer { model };
    let best = beam_search(&scorer, &ctx, cfg)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::runtime("beam search produced no hypothesis"))?;
    Ok(GenerationRecord {
        input_text: input_text.to_string(),
        output_text: vocab.decode(&best.tokens)?,
        beam_score: best.score,
        beam_size: cfg.beam_size,
        error: None,
    })
}

/// Decodes every line of `input` in parallel, preserving order. A line
/// that is not UTF-8 or cannot be encoded yields a record with `error` set.
pub fn generate_batch<T: Scalar>(
    model: &ModelState<T>,
    vocab: &SubwordVocab,
    input: &[u8],
    cfg: &DecodeConfig,
) -> Result<Vec<GenerationRecord>> {
    cfg.validate()?;
    if cfg.max_len > model.config.max_positions {
        return Err(Error::config(format!(
            "max_len {} exceeds max_positions {}",
            cfg.max_len, model.config.max_positions
        )));
    }
    let mut lines: Vec<&[u8]> = input.split(|&b| b == b'\n').collect();
    if lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    Ok(lines
        .par_iter()
        .enumerate()
        .map(|(i, raw)| {
            let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
            match std::str::from_utf8(raw) {
                Err(e) => GenerationRecord::failed(
                    String::from_utf8_lossy(raw).into_owned(),
                    format!("line {}: not valid UTF-8 ({e})", i + 1),
                ),
                Ok(text) => generate_one(model, vocab, text, cfg).unwrap_or_else(|e| {
                    GenerationRecord::failed(text.to_string(), format!("line {}: {e}", i + 1))
                }),
            }
        })
        .collect())
}

pub fn write_records<W: Write>(mut out: W, records: &[GenerationRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::format(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records<R: BufRead>(input: R) -> Result<Vec<GenerationRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: GenerationRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("generation line {}: {e}", i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Next-token distribution depends only on the position.
    struct Table {
        rows: Vec<Vec<f64>>,
    }

    impl StepModel for Table {
        type Context = ();
        type State = usize;

        fn vocab_size(&self) -> usize {
            self.rows[0].len()
        }

        fn eos(&self) -> TokenId {
            0
        }

        fn start(&self, _: &()) -> Result<(usize, Vec<f64>)> {
            Ok((0, self.rows[0].clone()))
        }

        fn advance(&self, _: &(), state: &mut usize, _: TokenId) -> Result<Vec<f64>> {
            *state += 1;
            Ok(self.rows[(*state).min(self.rows.len() - 1)].clone())
        }
    }

    fn ln(p: &[f64]) -> Vec<f64> {
        p.iter().map(|x| x.ln()).collect()
    }

    #[test]
    fn length_penalty_changes_the_winner() {
        // EOS immediately: p = 0.4. Token 1 then EOS: 0.6 * 0.6 = 0.36.
        // alpha 0 keeps the short one (ln 0.4 > ln 0.36); alpha 1 prefers
        // the long one (ln 0.36 / 2 > ln 0.4).
        let m = Table {
            rows: vec![ln(&[0.4, 0.6]), ln(&[0.6, 0.4]), ln(&[0.6, 0.4])],
        };
        let cfg0 = DecodeConfig {
            beam_size: 4,
            max_len: 3,
            alpha: 0.0,
        };
        let cfg1 = DecodeConfig { alpha: 1.0, ..cfg0 };
        let h0 = &beam_search(&m, &(), &cfg0).unwrap()[0];
        let h1 = &beam_search(&m, &(), &cfg1).unwrap()[0];
        assert!(h0.tokens.is_empty());
        assert!((h0.score - 0.4f64.ln()).abs() < 1e-12);
        assert_eq!(h1.tokens, vec![1]);
        assert!((h1.score - 0.36f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn beam_one_matches_greedy() {
        let m = Table {
            rows: vec![ln(&[0.2, 0.5, 0.3]), ln(&[0.1, 0.3, 0.6]), ln(&[0.7, 0.2, 0.1])],
        };
        let cfg = DecodeConfig {
            beam_size: 1,
            max_len: 5,
            alpha: 1.0,
        };
        let b = beam_search(&m, &(), &cfg).unwrap().remove(0);
        let g = greedy_search(&m, &(), 5, 1.0).unwrap();
        assert_eq!(b, g);
        assert_eq!(g.tokens, vec![1, 2]);
    }

    #[test]
    fn cut_sequences_are_unfinished() {
        let m = Table {
            rows: vec![ln(&[0.01, 0.99])],
        };
        let cfg = DecodeConfig {
            beam_size: 1,
            max_len: 3,
            alpha: 1.0,
        };
        let h = beam_search(&m, &(), &cfg).unwrap().remove(0);
        assert!(!h.finished);
        assert_eq!(h.tokens, vec![1, 1, 1]);
    }
}
