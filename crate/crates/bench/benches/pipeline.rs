use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use seedsmith_bench::{fixture, model};
use seedsmith_core::decode::generate_one;
use seedsmith_core::model::{make_batches, TrainConfig};
use seedsmith_core::{count_missing, parse_input, tokenize_words, train_bpe, DecodeConfig};

fn text(c: &mut Criterion) {
    let f = fixture(2000, 400);
    c.bench_function("tokenize 2000 sentences", |b| {
        b.iter(|| f.sentences.iter().map(|s| tokenize_words(black_box(s)).len()).sum::<usize>())
    });
    c.bench_function("bpe encode 2000 sentences", |b| {
        b.iter(|| f.sentences.iter().map(|s| f.vocab.encode(black_box(s)).len()).sum::<usize>())
    });
    let mut g = c.benchmark_group("bpe train");
    g.sample_size(10);
    g.bench_function("400 merges on 2000 sentences", |b| {
        b.iter(|| train_bpe(f.sentences.iter().map(String::as_str), 400).unwrap())
    });
    g.finish();
    c.bench_function("count_missing over pairs", |b| {
        b.iter(|| {
            f.pairs
                .iter()
                .map(|p| count_missing(&parse_input(&p.input_text).unwrap(), &p.target))
                .sum::<usize>()
        })
    });
}

fn model_benches(c: &mut Criterion) {
    let f = fixture(400, 400);
    let state = model(f.vocab.len(), 48);
    let batches = make_batches(&f.examples, 500);
    let batch: Vec<_> = batches[0].iter().map(|&i| f.examples[i].clone()).collect();
    let tc = TrainConfig {
        max_tokens_per_batch: 500,
        epochs: 1,
        peak_lr: 1e-3,
        warmup_steps: 10,
        clip_norm: 1.0,
        rng_seed: 1,
    };
    let mut g = c.benchmark_group("model");
    g.sample_size(10);
    g.bench_function("train step, 500-token batch, d=48", |b| {
        b.iter_batched(
            || state.clone(),
            |mut s| s.train_step(&batch, &tc).unwrap(),
            BatchSize::LargeInput,
        )
    });
    let cfg = DecodeConfig {
        beam_size: 5,
        max_len: 32,
        alpha: 1.0,
    };
    let input = &f.pairs[0].input_text;
    g.bench_function("beam 5 generation, d=48", |b| {
        b.iter(|| generate_one(&state, &f.vocab, black_box(input), &cfg).unwrap())
    });
    g.finish();
}

criterion_group!(benches, text, model_benches);
criterion_main!(benches);
