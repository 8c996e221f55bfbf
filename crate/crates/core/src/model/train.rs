//! Token-count batching and the epoch loop.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::loss::LossStats;
use super::scalar::Scalar;
use super::transformer::{Example, ModelState};
use crate::error::{Error, Result};
use crate::rng::{keyed_rng, label_hash};
use crate::seeding::TrainingPair;
use crate::subword::SubwordVocab;

/// Encodes pairs, dropping those that would not fit the position tables.
/// Returns the examples and the number dropped.
pub fn encode_pairs(
    vocab: &SubwordVocab,
    pairs: &[TrainingPair],
    max_positions: usize,
) -> (Vec<Example>, usize) {
    let mut out = Vec::with_capacity(pairs.len());
    let mut dropped = 0;
    for pair in pairs {
        let ex = Example::new(&vocab.encode(&pair.input_text), &vocab.encode(&pair.target));
        if ex.src.len() > max_positions || ex.tgt_in.len() > max_positions {
            dropped += 1;
        } else {
            out.push(ex);
        }
    }
    (out, dropped)
}

/// Groups example indices into batches of at most `max_tokens` source plus
/// target tokens, after sorting by length. An example longer than the limit
/// gets a batch of its own.
pub fn make_batches(examples: &[Example], max_tokens: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| (examples[i].num_tokens(), i));
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut used = 0;
    for i in order {
        let n = examples[i].num_tokens();
        if !current.is_empty() && used + n > max_tokens {
            batches.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(i);
        used += n;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u64,
    pub step: u64,
    /// Mean smoothed training loss per target token over the epoch.
    pub loss: f64,
    /// Learning rate at the last step of the epoch.
    pub lr: f64,
}

/// Trains until `state.epoch == tc.epochs`, so an interrupted run resumes
/// where its last checkpoint left off. `on_epoch` runs after each epoch.
pub fn train<T, F>(
    state: &mut ModelState<T>,
    examples: &[Example],
    tc: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochReport>>
where
    T: Scalar,
    F: FnMut(&ModelState<T>, &EpochReport) -> Result<()>,
{
    tc.validate()?;
    if examples.is_empty() {
        return Err(Error::input("no training pairs"));
    }
    let batches = make_batches(examples, tc.max_tokens_per_batch);
    let mut reports = Vec::new();
    let mut buf = Vec::new();
    while state.epoch < tc.epochs as u64 {
        let epoch = state.epoch + 1;
        let mut order: Vec<usize> = (0..batches.len()).collect();
        order.shuffle(&mut keyed_rng(&[tc.rng_seed, label_hash("batch-order"), epoch]));
        let mut total = LossStats::default();
        for &b in &order {
            buf.clear();
            buf.extend(batches[b].iter().map(|&i| examples[i].clone()));
            let stats = state.train_step(&buf, tc)?;
            total.merge(stats);
        }
        state.epoch = epoch;
        let report = EpochReport {
            epoch,
            step: state.step,
            loss: total.mean(),
            lr: tc.learning_rate(state.step),
        };
        log::info!(
            "epoch {} step {} loss {:.4} lr {:.3e}",
            report.epoch,
            report.step,
            report.loss,
            report.lr
        );
        on_epoch(state, &report)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Mean loss over `examples` without dropout. `epsilon = 0` gives the
/// plain token negative log-likelihood.
pub fn evaluate_loss<T: Scalar>(
    state: &ModelState<T>,
    examples: &[Example],
    max_tokens: usize,
    epsilon: f64,
) -> Result<LossStats> {
    let mut total = LossStats::default();
    for batch in make_batches(examples, max_tokens) {
        let items: Vec<Example> = batch.iter().map(|&i| examples[i].clone()).collect();
        total.merge(state.batch_loss(&items, epsilon)?);
    }
    Ok(total)
}

pub fn write_metrics_csv(path: &Path, reports: &[EpochReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in reports {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Appends rows, writing the header only when the file is new or empty.
pub fn append_metrics_csv(path: &Path, reports: &[EpochReport]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in reports {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochReport>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    r.deserialize()
        .map(|row| row.map_err(csv_error))
        .collect()
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::format(format!("metrics csv: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(src: usize, tgt: usize) -> Example {
        Example::new(&vec![10; src], &vec![11; tgt])
    }

    #[test]
    fn batches_respect_token_budget_and_cover_everything() {
        let examples: Vec<Example> = (0..20).map(|i| ex(1 + i % 7, 2 + i % 5)).collect();
        let batches = make_batches(&examples, 30);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
        for b in &batches {
            let n: usize = b.iter().map(|&i| examples[i].num_tokens()).sum();
            assert!(n <= 30 || b.len() == 1);
        }
    }

    #[test]
    fn oversized_example_gets_its_own_batch() {
        let examples = vec![ex(2, 2), ex(40, 40)];
        let batches = make_batches(&examples, 10);
        assert_eq!(batches, vec![vec![0], vec![1]]);
    }
}
