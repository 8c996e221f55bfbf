//! The `seedsmith` command line.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 input error,
//! 3 runtime error.

pub mod config;
pub mod stages;

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use seedsmith_core::eval::{
    append_vote, cgi_probe, read_blinded, read_truth, read_votes, select_eval_pairs, tally_votes,
    write_pair_files, judge_session, PairMode,
};
use seedsmith_core::model::AnyModel;
use seedsmith_core::seeding::{sample_seeds_document, format_input};
use seedsmith_core::textproc::read_sentences;
use seedsmith_core::Error;

use config::RunConfig;
use stages::{write_meta, Workdir};

#[derive(Debug, Parser)]
#[command(name = "seedsmith", version, about = "Build sentences from seed words")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Run configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the work directory from the config.
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    /// Worker threads for generation (0 = all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter a corpus by length and split it into train/dev/test.
    Prepare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Synthesize N sentences from the built-in grammar instead.
        #[arg(long, value_name = "N")]
        demo_corpus: Option<usize>,
    },
    /// Sample seed sets from a split and write input/target pairs.
    Pairs {
        #[command(flatten)]
        common: Common,
        /// Split name, used for the keyed sampling stream.
        #[arg(long, default_value = "train")]
        split: String,
        /// Split file; defaults to <workdir>/<split>.txt.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample seed sets across a whole document.
    DocSeeds {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        num_sets: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn a BPE vocabulary from a pairs file.
    BpeTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        merges: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the model; checkpoints after every epoch.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        model_out: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Beam-search generation, one input per line.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Coverage and length report for a generations file.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        generations: PathBuf,
        /// Pairs file whose targets are the human reference sentences.
        #[arg(long)]
        references: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Select blinded human-vs-machine pairs for judging.
    PairsSelect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        generations: PathBuf,
        /// Paired mode: pairs file aligned with the generations. Cross
        /// mode: plain sentence file.
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        num_pairs: Option<usize>,
        #[arg(long)]
        out_pairs: PathBuf,
        #[arg(long)]
        out_truth: PathBuf,
    },
    /// Interactive judging session on the terminal.
    Judge {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        judge_id: String,
        #[arg(long)]
        votes: PathBuf,
    },
    /// Count votes against the truth key.
    Tally {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true, num_args = 1..)]
        votes: Vec<PathBuf>,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate from shuffles of a fixed word list.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Space-separated words; defaults to the config's probe words.
        #[arg(long)]
        words: Option<String>,
        #[arg(long)]
        shuffles: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// prepare -> pairs -> bpe-train -> train -> generate -> evaluate.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_name = "N")]
        demo_corpus: Option<usize>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Prepare { common, .. }
            | Command::Pairs { common, .. }
            | Command::DocSeeds { common, .. }
            | Command::BpeTrain { common, .. }
            | Command::Train { common, .. }
            | Command::Generate { common, .. }
            | Command::Evaluate { common, .. }
            | Command::PairsSelect { common, .. }
            | Command::Judge { common, .. }
            | Command::Tally { common, .. }
            | Command::Probe { common, .. }
            | Command::Pipeline { common, .. } => common,
        }
    }
}

pub fn exit_code(e: &anyhow::Error) -> i32 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 1,
        Some(Error::Input(_) | Error::Data(_) | Error::Format(_) | Error::Shape(_) | Error::Io(_)) => 2,
        Some(Error::Runtime(_)) | None => 3,
    }
}

fn load_config(common: &Common) -> seedsmith_core::Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(w) = &common.workdir {
        cfg.workdir = w.clone();
    }
    if let Some(j) = common.jobs {
        cfg.jobs = j;
    }
    Ok(cfg)
}

fn init_threads(jobs: usize) {
    if jobs > 0 {
        // A second initialization in the same process is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
}

/// Parses `argv` and runs the subcommand, returning the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("seedsmith: {e:#}");
            exit_code(&e)
        }
    }
}

fn or<T: Clone>(flag: &Option<T>, default: T) -> T {
    flag.clone().unwrap_or(default)
}

pub fn execute(command: Command) -> anyhow::Result<()> {
    let mut cfg = load_config(command.common())?;
    init_threads(cfg.jobs);
    match command {
        Command::Prepare {
            corpus,
            demo_corpus,
            ..
        } => {
            if let Some(n) = demo_corpus {
                cfg.demo_corpus = n;
            }
            cfg.validate()?;
            let wd = Workdir::create(&cfg.workdir)?;
            let [tr, dv, te] = stages::prepare(&cfg, corpus.as_deref(), &wd)?;
            println!("train {tr}  dev {dv}  test {te}");
        }
        Command::Pairs {
            split,
            input,
            k,
            samples,
            out,
            ..
        } => {
            cfg.validate()?;
            let wd = Workdir::create(&cfg.workdir)?;
            let input = or(&input, wd.split(&split));
            let out = or(&out, wd.file(&format!("pairs.{split}.tsv")));
            let n = stages::pairs(
                &cfg,
                &input,
                &split,
                or(&k, cfg.k),
                or(&samples, cfg.samples),
                0,
                &out,
            )?;
            println!("{n} pairs -> {}", out.display());
        }
        Command::DocSeeds {
            input,
            k,
            num_sets,
            out,
            ..
        } => {
            let text = fs::read_to_string(&input)
                .map_err(|e| Error::input(format!("{}: {e}", input.display())))?;
            let tokens = seedsmith_core::tokenize_words(&text);
            let k = or(&k, cfg.k);
            let n = or(&num_sets, cfg.doc_sets);
            let sets = sample_seeds_document(&tokens, k, n, &stages::policy(&cfg)?, cfg.rng_seed)?;
            let lines = sets.iter().map(format_input).collect::<seedsmith_core::Result<Vec<_>>>()?;
            seedsmith_core::textproc::write_lines(&out, lines.iter().map(String::as_str))?;
            write_meta(&out, "doc-seeds", &cfg, &[&input], json!({"k": k, "sets": lines.len()}))?;
            println!("{} seed sets -> {}", lines.len(), out.display());
        }
        Command::BpeTrain { pairs, merges, out, .. } => {
            let wd = Workdir::create(&cfg.workdir)?;
            let pairs = or(&pairs, wd.train_pairs());
            let out = or(&out, wd.vocab());
            let n = stages::bpe_train(&cfg, &pairs, or(&merges, cfg.merges), &out)?;
            println!("vocabulary of {n} -> {}", out.display());
        }
        Command::Train {
            pairs,
            vocab,
            model_out,
            metrics,
            resume,
            ..
        } => {
            cfg.validate()?;
            let wd = Workdir::create(&cfg.workdir)?;
            let loss = stages::train_model(
                &cfg,
                &or(&pairs, wd.train_pairs()),
                &or(&vocab, wd.vocab()),
                &or(&model_out, wd.model()),
                &or(&metrics, wd.metrics()),
                resume,
            )?;
            println!("final training loss {loss:.4}");
        }
        Command::Generate {
            model,
            vocab,
            inputs,
            beam,
            alpha,
            max_len,
            out,
            ..
        } => {
            let wd = Workdir(cfg.workdir.clone());
            cfg.decode.beam_size = or(&beam, cfg.decode.beam_size);
            cfg.decode.alpha = or(&alpha, cfg.decode.alpha);
            cfg.decode.max_len = or(&max_len, cfg.decode.max_len);
            cfg.decode.validate()?;
            let records = stages::generate(
                &cfg,
                &or(&model, wd.model()),
                &or(&vocab, wd.vocab()),
                &inputs,
                &out,
            )?;
            println!("{} records -> {}", records.len(), out.display());
        }
        Command::Evaluate {
            generations,
            references,
            out,
            ..
        } => {
            let records = stages::read_generations(&generations)?;
            let refs = references.as_deref().map(stages::targets_of).transpose()?;
            let e = stages::evaluate(&records, refs.as_deref())?;
            let text = stages::render_evaluation(&config::file_name(&generations), &e);
            print!("{text}");
            if let Some(out) = out {
                fs::write(&out, &text)?;
                let mut inputs: Vec<&Path> = vec![&generations];
                if let Some(r) = &references {
                    inputs.push(r);
                }
                write_meta(&out, "evaluate", &cfg, &inputs, stages::evaluation_json(e.coverage.k, &e))?;
            }
        }
        Command::PairsSelect {
            generations,
            references,
            mode,
            num_pairs,
            out_pairs,
            out_truth,
            ..
        } => {
            let mode: PairMode = match mode {
                Some(m) => m.parse()?,
                None => cfg.pair_mode,
            };
            let records = stages::read_generations(&generations)?;
            let refs = match mode {
                PairMode::Paired => stages::targets_of(&references)?,
                PairMode::Cross => read_sentences(&references)?.into_iter().map(|s| s.raw).collect(),
            };
            let n = or(&num_pairs, cfg.num_pairs);
            let pairs = select_eval_pairs(&records, &refs, n, cfg.rng_seed, mode)?;
            write_pair_files(&pairs, &out_pairs, &out_truth)?;
            let identical = pairs.iter().filter(|p| p.identical).count();
            let stats = json!({"pairs": pairs.len(), "identical": identical});
            let inputs: [&Path; 2] = [&generations, &references];
            write_meta(&out_pairs, "pairs-select", &cfg, &inputs, stats.clone())?;
            write_meta(&out_truth, "pairs-select", &cfg, &inputs, stats)?;
            println!("{} pairs ({identical} identical)", pairs.len());
        }
        Command::Judge {
            pairs,
            judge_id,
            votes,
            ..
        } => {
            let blinded = read_blinded(&pairs)?;
            let already = if votes.exists() { read_votes(&votes)? } else { Vec::new() };
            let stdin = io::stdin();
            let cast = judge_session(
                &blinded,
                &judge_id,
                &already,
                stdin.lock(),
                io::stdout(),
                |v| append_vote(&votes, v),
            )?;
            println!("{} votes recorded for {judge_id}", cast.len());
        }
        Command::Tally {
            votes,
            truth,
            out,
            ..
        } => {
            let mut all = Vec::new();
            for v in &votes {
                all.extend(read_votes(v)?);
            }
            let key = read_truth(&truth)?;
            let r = tally_votes(&all, &key)?;
            println!("{r}");
            if let Some(out) = out {
                fs::write(&out, format!("{r}\n"))?;
                let mut inputs: Vec<&Path> = votes.iter().map(PathBuf::as_path).collect();
                inputs.push(&truth);
                write_meta(&out, "tally", &cfg, &inputs, serde_json::to_value(&r)?)?;
            }
        }
        Command::Probe {
            model,
            vocab,
            words,
            shuffles,
            out,
            ..
        } => {
            let wd = Workdir(cfg.workdir.clone());
            let model = or(&model, wd.model());
            let vocab_path = or(&vocab, wd.vocab());
            let words: Vec<String> = match words {
                Some(w) => w.split_whitespace().map(String::from).collect(),
                None => cfg.probe_words.clone(),
            };
            let n = or(&shuffles, cfg.probe_shuffles);
            let (m, vocab) = stages::load_model(&model, &vocab_path)?;
            let report = match &m {
                AnyModel::F32(s) => cgi_probe(s, &vocab, &words, n, cfg.rng_seed, &cfg.decode)?,
                AnyModel::F64(s) => cgi_probe(s, &vocab, &words, n, cfg.rng_seed, &cfg.decode)?,
            };
            let mut f = io::BufWriter::new(fs::File::create(&out)?);
            for (r, m) in report.records.iter().zip(&report.missing) {
                serde_json::to_writer(&mut f, &json!({"input": r.input_text, "output": r.output_text, "score": r.beam_score, "missing": m}))?;
                f.write_all(b"\n")?;
                println!("[{m} missing] {} => {}", r.input_text, r.output_text);
            }
            f.flush()?;
            write_meta(&out, "probe", &cfg, &[&model, &vocab_path], serde_json::to_value(&report.coverage)?)?;
            println!("{}", report.coverage);
        }
        Command::Pipeline {
            corpus,
            demo_corpus,
            ..
        } => {
            if let Some(n) = demo_corpus {
                cfg.demo_corpus = n;
            }
            stages::pipeline(&cfg, corpus.as_deref())?;
        }
    }
    Ok(())
}
