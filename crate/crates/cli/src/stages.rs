//! Pipeline stages shared by the subcommands. Each stage reads and writes
//! files under the work directory and leaves a `.meta` sidecar next to
//! every artifact it produces.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use seedsmith_core::decode::{generate_batch, read_records, write_records, GenerationRecord};
use seedsmith_core::eval::{coverage_from_inputs, length_stats, CoverageReport, LengthStats};
use seedsmith_core::model::checkpoint::load_checkpoint;
use seedsmith_core::model::train::{append_metrics_csv, encode_pairs};
use seedsmith_core::model::{save_checkpoint, train, AnyModel, DType, ModelState, Scalar};
use seedsmith_core::seeding::{build_training_pairs, read_pairs_tsv, write_pairs_tsv};
use seedsmith_core::textproc::{
    filter_sentences, make_splits, read_sentences, write_lines, SplitSpec, StopwordPolicy,
    TokenizedSentence,
};
use seedsmith_core::{synth, train_bpe, Error, Result, SubwordVocab};

use crate::config::{file_name, RunConfig};

pub fn meta_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes the provenance sidecar: producing command, seed, canonical
/// config, input file names and stage statistics.
pub fn write_meta(
    artifact: &Path,
    command: &str,
    cfg: &RunConfig,
    inputs: &[&Path],
    stats: Value,
) -> Result<()> {
    let meta = json!({
        "artifact": file_name(artifact),
        "producer": format!("seedsmith {}", env!("CARGO_PKG_VERSION")),
        "command": command,
        "rng_seed": cfg.rng_seed,
        "config": cfg.canonical(),
        "inputs": inputs.iter().map(|p| file_name(p)).collect::<Vec<_>>(),
        "stats": stats,
    });
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::format(e.to_string()))?;
    fs::write(meta_path(artifact), text + "\n")?;
    Ok(())
}

pub fn policy(cfg: &RunConfig) -> Result<StopwordPolicy> {
    if cfg.stopwords == "builtin" {
        Ok(StopwordPolicy::builtin())
    } else {
        StopwordPolicy::from_file(Path::new(&cfg.stopwords))
    }
}

pub struct Workdir(pub PathBuf);

impl Workdir {
    pub fn create(path: &Path) -> Result<Self> {
        fs::create_dir_all(path)?;
        Ok(Workdir(path.to_path_buf()))
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.file(&format!("{name}.txt"))
    }

    pub fn train_pairs(&self) -> PathBuf {
        self.file("pairs.train.tsv")
    }

    pub fn test_pairs(&self, k: usize) -> PathBuf {
        self.file(&format!("test.k{k}.tsv"))
    }

    pub fn generations(&self, k: usize) -> PathBuf {
        self.file(&format!("gen.k{k}.jsonl"))
    }

    pub fn vocab(&self) -> PathBuf {
        self.file("vocab.bpe")
    }

    pub fn model(&self) -> PathBuf {
        self.file("model.ckpt")
    }

    pub fn metrics(&self) -> PathBuf {
        self.file("metrics.csv")
    }
}

/// Reads (or synthesizes) the corpus, filters by length and splits it.
pub fn prepare(cfg: &RunConfig, corpus: Option<&Path>, wd: &Workdir) -> Result<[usize; 3]> {
    let (sentences, source): (Vec<TokenizedSentence>, PathBuf) = if cfg.demo_corpus > 0 {
        let lines = synth::generate_corpus(cfg.demo_corpus, cfg.rng_seed);
        let path = wd.file("corpus.txt");
        write_lines(&path, lines.iter().map(String::as_str))?;
        write_meta(
            &path,
            "prepare",
            cfg,
            &[],
            json!({"synthetic_sentences": cfg.demo_corpus}),
        )?;
        let s = lines
            .into_iter()
            .enumerate()
            .map(|(i, l)| TokenizedSentence::new(l, i))
            .collect();
        (s, path)
    } else {
        let path = corpus
            .map(Path::to_path_buf)
            .or_else(|| cfg.corpus.clone())
            .ok_or_else(|| Error::config("no corpus given (set [paths] corpus or --corpus)"))?;
        (read_sentences(&path)?, path)
    };
    let (kept, stats) = filter_sentences(sentences, cfg.min_tokens, cfg.max_tokens)?;
    let spec = SplitSpec::parse(&cfg.split, cfg.rng_seed)?;
    let splits = make_splits(kept, &spec)?;
    splits.write_to_dir(&wd.0)?;
    let counts = [splits.train.len(), splits.dev.len(), splits.test.len()];
    for (name, _) in splits.parts() {
        write_meta(
            &wd.split(name),
            "prepare",
            cfg,
            &[&source],
            json!({"kept": stats.kept, "dropped": stats.dropped, "train": counts[0], "dev": counts[1], "test": counts[2]}),
        )?;
    }
    log::info!(
        "prepare: kept {} dropped {} -> train {} dev {} test {}",
        stats.kept,
        stats.dropped,
        counts[0],
        counts[1],
        counts[2]
    );
    Ok(counts)
}

fn read_split(path: &Path) -> Result<Vec<TokenizedSentence>> {
    read_sentences(path)
}

/// Seed/sentence pairs from one split file.
pub fn pairs(
    cfg: &RunConfig,
    split_file: &Path,
    split_name: &str,
    k: usize,
    samples: usize,
    limit: usize,
    out: &Path,
) -> Result<usize> {
    let mut sentences = read_split(split_file)?;
    if limit > 0 {
        sentences.truncate(limit);
    }
    let build = build_training_pairs(&sentences, split_name, k, samples, cfg.rng_seed, &policy(cfg)?)?;
    write_pairs_tsv(out, &build.pairs)?;
    write_meta(
        out,
        "pairs",
        cfg,
        &[split_file],
        json!({
            "split": split_name, "k": k, "samples": samples,
            "pairs": build.pairs.len(),
            "skipped_sentences": build.skipped_sentences,
            "duplicate_sets": build.duplicate_sets,
        }),
    )?;
    log::info!(
        "pairs: {} from {} ({} sentences skipped)",
        build.pairs.len(),
        file_name(split_file),
        build.skipped_sentences
    );
    Ok(build.pairs.len())
}

/// BPE over both columns of a pairs file.
pub fn bpe_train(cfg: &RunConfig, pairs_file: &Path, merges: usize, out: &Path) -> Result<usize> {
    let pairs = read_pairs_tsv(pairs_file)?;
    let corpus = pairs
        .iter()
        .flat_map(|p| [p.input_text.as_str(), p.target.as_str()]);
    let vocab = train_bpe(corpus, merges)?;
    vocab.save(out)?;
    write_meta(
        out,
        "bpe-train",
        cfg,
        &[pairs_file],
        json!({"requested_merges": merges, "merges": vocab.num_merges(), "size": vocab.len()}),
    )?;
    log::info!("bpe-train: {} merges, vocabulary {}", vocab.num_merges(), vocab.len());
    Ok(vocab.len())
}

fn train_typed<T: Scalar>(
    cfg: &RunConfig,
    pairs_file: &Path,
    vocab_file: &Path,
    model_out: &Path,
    metrics_out: &Path,
    resume: bool,
) -> Result<f64> {
    let vocab = SubwordVocab::load(vocab_file)?;
    let pairs = read_pairs_tsv(pairs_file)?;
    if pairs.is_empty() {
        return Err(Error::input(format!("{} holds no pairs", pairs_file.display())));
    }
    let mut mc = cfg.model.clone();
    mc.vocab_size = vocab.len();
    let mut state = if resume && model_out.exists() {
        let loaded = load_checkpoint(model_out)?;
        loaded.check_vocab(vocab.len())?;
        let state = into_typed::<T>(loaded)?;
        if state.config != mc {
            return Err(Error::config("checkpoint config differs from the run config"));
        }
        log::info!("train: resuming after epoch {}", state.epoch);
        state
    } else {
        if metrics_out.exists() {
            fs::remove_file(metrics_out)?;
        }
        ModelState::<T>::new(mc, cfg.rng_seed)?
    };
    let (examples, dropped) = encode_pairs(&vocab, &pairs, state.config.max_positions);
    if dropped > 0 {
        log::warn!("train: {dropped} pairs exceed max_positions and were skipped");
    }
    let mut tc = cfg.train.clone();
    tc.rng_seed = cfg.rng_seed;
    let mut last = f64::NAN;
    let reports = train(&mut state, &examples, &tc, |s, r| {
        save_checkpoint(s, model_out)?;
        append_metrics_csv(metrics_out, std::slice::from_ref(r))?;
        Ok(())
    })?;
    if let Some(r) = reports.last() {
        last = r.loss;
    }
    if !model_out.exists() {
        save_checkpoint(&state, model_out)?;
    }
    let stats = json!({
        "pairs": examples.len(), "skipped_pairs": dropped,
        "epochs": state.epoch, "steps": state.step,
        "parameters": state.num_parameters(), "final_loss": last,
    });
    let inputs: [&Path; 2] = [pairs_file, vocab_file];
    write_meta(model_out, "train", cfg, &inputs, stats.clone())?;
    if metrics_out.exists() {
        write_meta(metrics_out, "train", cfg, &inputs, stats)?;
    }
    Ok(last)
}

fn into_typed<T: Scalar>(m: AnyModel) -> Result<ModelState<T>> {
    let any: Box<dyn std::any::Any> = match m {
        AnyModel::F32(s) => Box::new(s),
        AnyModel::F64(s) => Box::new(s),
    };
    any.downcast::<ModelState<T>>()
        .map(|b| *b)
        .map_err(|_| Error::config("checkpoint precision differs from the configured precision"))
}

/// Trains (or resumes) a model; checkpoints and metrics are written after
/// every epoch. Returns the last epoch's training loss.
pub fn train_model(
    cfg: &RunConfig,
    pairs_file: &Path,
    vocab_file: &Path,
    model_out: &Path,
    metrics_out: &Path,
    resume: bool,
) -> Result<f64> {
    match cfg.precision {
        DType::F32 => train_typed::<f32>(cfg, pairs_file, vocab_file, model_out, metrics_out, resume),
        DType::F64 => train_typed::<f64>(cfg, pairs_file, vocab_file, model_out, metrics_out, resume),
    }
}

/// Inputs for generation: one formatted seed string per line. Tab-separated
/// lines contribute their first column, so pairs files work directly.
pub fn read_generation_inputs(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    let mut out = Vec::with_capacity(bytes.len());
    for line in bytes.split(|&b| b == b'\n') {
        if line.is_empty() {
            continue;
        }
        let first = line.split(|&b| b == b'\t').next().unwrap_or(line);
        out.extend_from_slice(first);
        out.push(b'\n');
    }
    Ok(out)
}

pub fn load_model(model: &Path, vocab: &Path) -> Result<(AnyModel, SubwordVocab)> {
    let vocab = SubwordVocab::load(vocab)?;
    let model = load_checkpoint(model)?;
    model.check_vocab(vocab.len())?;
    Ok((model, vocab))
}

pub fn generate(
    cfg: &RunConfig,
    model_file: &Path,
    vocab_file: &Path,
    inputs: &Path,
    out: &Path,
) -> Result<Vec<GenerationRecord>> {
    let (model, vocab) = load_model(model_file, vocab_file)?;
    let input = read_generation_inputs(inputs)?;
    let records = match &model {
        AnyModel::F32(m) => generate_batch(m, &vocab, &input, &cfg.decode)?,
        AnyModel::F64(m) => generate_batch(m, &vocab, &input, &cfg.decode)?,
    };
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    write_records(std::io::BufWriter::new(fs::File::create(out)?), &records)?;
    write_meta(
        out,
        "generate",
        cfg,
        &[model_file, vocab_file, inputs],
        json!({"records": records.len(), "failed": failed, "beam_size": cfg.decode.beam_size,
               "max_len": cfg.decode.max_len, "alpha": cfg.decode.alpha}),
    )?;
    log::info!("generate: {} records ({} failed)", records.len(), failed);
    Ok(records)
}

pub fn read_generations(path: &Path) -> Result<Vec<GenerationRecord>> {
    read_records(std::io::BufReader::new(fs::File::open(path)?))
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub coverage: CoverageReport,
    pub lengths: LengthStats,
    pub reference_lengths: Option<LengthStats>,
}

pub fn evaluate(records: &[GenerationRecord], references: Option<&[String]>) -> Result<Evaluation> {
    let coverage = coverage_from_inputs(records)?;
    let outputs: Vec<&str> = records.iter().map(|r| r.output_text.as_str()).collect();
    let lengths = length_stats(&outputs)?;
    let reference_lengths = match references {
        Some(r) if !r.is_empty() => Some(length_stats(r)?),
        _ => None,
    };
    Ok(Evaluation {
        coverage,
        lengths,
        reference_lengths,
    })
}

pub fn render_evaluation(name: &str, e: &Evaluation) -> String {
    let mut s = format!("== {name} ==\n{}\n", e.coverage);
    s.push_str(&format!(
        "avg words {:.2}  avg chars {:.2}  ({} outputs)\n",
        e.lengths.avg_words, e.lengths.avg_chars, e.lengths.count
    ));
    if let Some(r) = &e.reference_lengths {
        s.push_str(&format!(
            "references: avg words {:.2}  avg chars {:.2}\n",
            r.avg_words, r.avg_chars
        ));
    }
    s
}

pub fn evaluation_json(k: usize, e: &Evaluation) -> Value {
    json!({
        "k": k,
        "coverage": e.coverage,
        "lengths": e.lengths,
        "reference_lengths": e.reference_lengths,
    })
}

pub fn targets_of(pairs_file: &Path) -> Result<Vec<String>> {
    Ok(read_pairs_tsv(pairs_file)?.into_iter().map(|p| p.target).collect())
}

/// Results of one full pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub final_loss: f64,
    pub evaluations: Vec<(usize, Evaluation)>,
}

/// prepare, pairs, bpe-train, train, then test pairs, generation and
/// evaluation for every configured test seed count.
pub fn pipeline(cfg: &RunConfig, corpus: Option<&Path>) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let wd = Workdir::create(&cfg.workdir)?;
    prepare(cfg, corpus, &wd)?;
    pairs(cfg, &wd.split("train"), "train", cfg.k, cfg.samples, 0, &wd.train_pairs())?;
    bpe_train(cfg, &wd.train_pairs(), cfg.merges, &wd.vocab())?;
    let final_loss = train_model(cfg, &wd.train_pairs(), &wd.vocab(), &wd.model(), &wd.metrics(), false)?;
    let mut evaluations = Vec::new();
    let mut report = String::new();
    let mut report_json = Vec::new();
    for &k in &cfg.test_k {
        let test_pairs = wd.test_pairs(k);
        pairs(cfg, &wd.split("test"), "test", k, 1, cfg.eval_limit, &test_pairs)?;
        let records = generate(cfg, &wd.model(), &wd.vocab(), &test_pairs, &wd.generations(k))?;
        if records.is_empty() {
            log::warn!("no test sentences have {k} eligible seeds");
            continue;
        }
        let refs = targets_of(&test_pairs)?;
        let e = evaluate(&records, Some(&refs))?;
        report.push_str(&render_evaluation(&format!("{k} seeds"), &e));
        report.push('\n');
        report_json.push(evaluation_json(k, &e));
        evaluations.push((k, e));
    }
    let report_path = wd.file("report.txt");
    fs::write(&report_path, &report)?;
    let json_path = wd.file("report.json");
    let text = serde_json::to_string_pretty(&report_json).map_err(|e| Error::format(e.to_string()))?;
    fs::write(&json_path, text + "\n")?;
    let gens: Vec<PathBuf> = cfg.test_k.iter().map(|&k| wd.generations(k)).collect();
    let inputs: Vec<&Path> = gens.iter().map(PathBuf::as_path).collect();
    write_meta(&report_path, "pipeline", cfg, &inputs, json!({"final_loss": final_loss}))?;
    write_meta(&json_path, "pipeline", cfg, &inputs, json!({"final_loss": final_loss}))?;
    print!("{report}");
    Ok(PipelineOutcome {
        final_loss,
        evaluations,
    })
}
