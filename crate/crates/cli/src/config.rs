//! The run configuration file.
//!
//! Flat `key = value` lines grouped under `[section]` headers; `#` starts a
//! comment. Keys before the first header belong to the top level. Unknown
//! sections and keys are errors. Relative paths resolve against the
//! directory holding the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use seedsmith_core::decode::DecodeConfig;
use seedsmith_core::eval::PairMode;
use seedsmith_core::model::DType;
use seedsmith_core::subword::DEFAULT_MERGES;
use seedsmith_core::{Error, ModelConfig, Result, TrainConfig};

pub const SEED_ENV: &str = "SEEDSMITH_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub rng_seed: u64,
    pub corpus: Option<PathBuf>,
    pub workdir: PathBuf,
    /// Sentences to synthesize instead of reading a corpus; 0 = off.
    pub demo_corpus: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub split: String,
    /// `builtin` or a path to a word list.
    pub stopwords: String,
    pub k: usize,
    pub samples: usize,
    pub doc_sets: usize,
    pub merges: usize,
    pub model: ModelConfig,
    pub precision: DType,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub test_k: Vec<usize>,
    /// Cap on test sentences per evaluation; 0 = all.
    pub eval_limit: usize,
    pub num_pairs: usize,
    pub pair_mode: PairMode,
    pub probe_words: Vec<String>,
    pub probe_shuffles: usize,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = ModelConfig::desk(0);
        model.vocab_size = 0;
        RunConfig {
            rng_seed: 1,
            corpus: None,
            workdir: PathBuf::from("work"),
            demo_corpus: 0,
            min_tokens: 8,
            max_tokens: 25,
            split: "0.7,0.1,0.2".into(),
            stopwords: "builtin".into(),
            k: 4,
            samples: 3,
            doc_sets: 2000,
            merges: DEFAULT_MERGES,
            model,
            precision: DType::F32,
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            test_k: vec![2, 4, 6],
            eval_limit: 0,
            num_pairs: 100,
            pair_mode: PairMode::Paired,
            probe_words: ["tasteless", "sweet", "ideas", "sleep", "emotionally"]
                .map(String::from)
                .to_vec(),
            probe_shuffles: 5,
            jobs: 0,
        }
    }
}

fn parse_num<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::config(format!("[{section}] {key}: cannot parse {value:?}"))
    })
}

fn parse_list(section: &str, key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| parse_num(section, key, v.trim()))
        .collect()
}

impl RunConfig {
    /// Parses `text`; `base` anchors relative paths.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::config(format!("line {}: bad section header", n + 1)))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert((section.clone(), key.to_string())) {
                return Err(Error::config(format!(
                    "line {}: [{section}] {key} given twice",
                    n + 1
                )));
            }
            cfg.set(&section, key, value, base)
                .map_err(|e| Error::config(format!("line {}: {}", n + 1, strip_kind(&e))))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Loads `path` (or the defaults) and applies the seed override from
    /// the environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.rng_seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV}={v:?} is not an integer")))?;
        }
        cfg.train.rng_seed = cfg.rng_seed;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, v: &str, base: &Path) -> Result<()> {
        let path = |v: &str| base.join(v);
        match (section, key) {
            ("", "rng_seed") => self.rng_seed = parse_num(section, key, v)?,
            ("paths", "corpus") => self.corpus = Some(path(v)),
            ("paths", "workdir") => self.workdir = path(v),
            ("prepare", "demo_corpus") => self.demo_corpus = parse_num(section, key, v)?,
            ("prepare", "min_tokens") => self.min_tokens = parse_num(section, key, v)?,
            ("prepare", "max_tokens") => self.max_tokens = parse_num(section, key, v)?,
            ("prepare", "split") => self.split = v.to_string(),
            ("prepare", "stopwords") => {
                self.stopwords = if v == "builtin" {
                    v.to_string()
                } else {
                    path(v).to_string_lossy().into_owned()
                }
            }
            ("pairs", "k") => self.k = parse_num(section, key, v)?,
            ("pairs", "samples") => self.samples = parse_num(section, key, v)?,
            ("pairs", "doc_sets") => self.doc_sets = parse_num(section, key, v)?,
            ("bpe", "merges") => self.merges = parse_num(section, key, v)?,
            ("model", "d_model") => self.model.d_model = parse_num(section, key, v)?,
            ("model", "ff_dim") => self.model.ff_dim = parse_num(section, key, v)?,
            ("model", "num_heads") => self.model.num_heads = parse_num(section, key, v)?,
            ("model", "enc_layers") => self.model.enc_layers = parse_num(section, key, v)?,
            ("model", "dec_layers") => self.model.dec_layers = parse_num(section, key, v)?,
            ("model", "dropout") => self.model.dropout = parse_num(section, key, v)?,
            ("model", "max_positions") => self.model.max_positions = parse_num(section, key, v)?,
            ("model", "label_smoothing") => {
                self.model.label_smoothing = parse_num(section, key, v)?
            }
            ("model", "precision") => {
                self.precision = match v {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(Error::config("precision must be f32 or f64")),
                }
            }
            ("train", "max_tokens_per_batch") => {
                self.train.max_tokens_per_batch = parse_num(section, key, v)?
            }
            ("train", "epochs") => self.train.epochs = parse_num(section, key, v)?,
            ("train", "peak_lr") => self.train.peak_lr = parse_num(section, key, v)?,
            ("train", "warmup_steps") => self.train.warmup_steps = parse_num(section, key, v)?,
            ("train", "clip_norm") => self.train.clip_norm = parse_num(section, key, v)?,
            ("decode", "beam_size") => self.decode.beam_size = parse_num(section, key, v)?,
            ("decode", "max_len") => self.decode.max_len = parse_num(section, key, v)?,
            ("decode", "alpha") => self.decode.alpha = parse_num(section, key, v)?,
            ("eval", "test_k") => self.test_k = parse_list(section, key, v)?,
            ("eval", "limit") => self.eval_limit = parse_num(section, key, v)?,
            ("eval", "num_pairs") => self.num_pairs = parse_num(section, key, v)?,
            ("eval", "pair_mode") => self.pair_mode = v.parse()?,
            ("probe", "words") => {
                self.probe_words = v.split_whitespace().map(String::from).collect()
            }
            ("probe", "shuffles") => self.probe_shuffles = parse_num(section, key, v)?,
            ("", "jobs") => self.jobs = parse_num(section, key, v)?,
            ("", _) => return Err(Error::config(format!("unknown top-level key {key:?}"))),
            (
                "paths" | "prepare" | "pairs" | "bpe" | "model" | "train" | "decode" | "eval"
                | "probe",
                _,
            ) => return Err(Error::config(format!("unknown key {key:?} in [{section}]"))),
            _ => return Err(Error::config(format!("unknown section [{section}]"))),
        }
        Ok(())
    }

    /// Checks every value that does not depend on the vocabulary.
    pub fn validate(&self) -> Result<()> {
        if self.min_tokens > self.max_tokens {
            return Err(Error::config("min_tokens exceeds max_tokens"));
        }
        if self.k == 0 || self.samples == 0 {
            return Err(Error::config("k and samples must be at least 1"));
        }
        if self.test_k.is_empty() || self.test_k.contains(&0) {
            return Err(Error::config("test_k needs at least one positive value"));
        }
        let mut m = self.model.clone();
        m.vocab_size = 261;
        m.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        if self.decode.max_len > self.model.max_positions {
            return Err(Error::config("decode max_len exceeds model max_positions"));
        }
        Ok(())
    }

    /// Canonical `section.key = value` lines, recorded next to artifacts.
    pub fn canonical(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("rng_seed", self.rng_seed.to_string());
        put("prepare.demo_corpus", self.demo_corpus.to_string());
        put("prepare.min_tokens", self.min_tokens.to_string());
        put("prepare.max_tokens", self.max_tokens.to_string());
        put("prepare.split", self.split.clone());
        put(
            "prepare.stopwords",
            if self.stopwords == "builtin" {
                "builtin".into()
            } else {
                file_name(Path::new(&self.stopwords))
            },
        );
        put("pairs.k", self.k.to_string());
        put("pairs.samples", self.samples.to_string());
        put("pairs.doc_sets", self.doc_sets.to_string());
        put("bpe.merges", self.merges.to_string());
        let md = &self.model;
        put("model.d_model", md.d_model.to_string());
        put("model.ff_dim", md.ff_dim.to_string());
        put("model.num_heads", md.num_heads.to_string());
        put("model.enc_layers", md.enc_layers.to_string());
        put("model.dec_layers", md.dec_layers.to_string());
        put("model.dropout", md.dropout.to_string());
        put("model.max_positions", md.max_positions.to_string());
        put("model.label_smoothing", md.label_smoothing.to_string());
        put("model.precision", format!("{:?}", self.precision).to_lowercase());
        let t = &self.train;
        put("train.max_tokens_per_batch", t.max_tokens_per_batch.to_string());
        put("train.epochs", t.epochs.to_string());
        put("train.peak_lr", t.peak_lr.to_string());
        put("train.warmup_steps", t.warmup_steps.to_string());
        put("train.clip_norm", t.clip_norm.to_string());
        put("decode.beam_size", self.decode.beam_size.to_string());
        put("decode.max_len", self.decode.max_len.to_string());
        put("decode.alpha", self.decode.alpha.to_string());
        put(
            "eval.test_k",
            self.test_k.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","),
        );
        put("eval.limit", self.eval_limit.to_string());
        put("eval.num_pairs", self.num_pairs.to_string());
        put(
            "eval.pair_mode",
            match self.pair_mode {
                PairMode::Paired => "paired".into(),
                PairMode::Cross => "cross".into(),
            },
        );
        put("probe.words", self.probe_words.join(" "));
        put("probe.shuffles", self.probe_shuffles.to_string());
        m
    }
}

pub fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.to_string_lossy().into_owned())
}

fn strip_kind(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_relative_paths() {
        let text = "rng_seed = 7\n[paths]\ncorpus = data/a.txt # comment\n[model]\nd_model = 64\n";
        let cfg = RunConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(cfg.rng_seed, 7);
        assert_eq!(cfg.corpus.as_deref(), Some(Path::new("/base/data/a.txt")));
        assert_eq!(cfg.model.d_model, 64);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        for bad in ["[model]\nwidth = 3\n", "[nope]\nx = 1\n", "color = red\n", "[model]\nd_model = x\n"] {
            assert!(matches!(RunConfig::parse(bad, Path::new(".")), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn repeated_keys_are_rejected() {
        let text = "[pairs]\nk = 4\nk = 5\n";
        assert!(RunConfig::parse(text, Path::new(".")).is_err());
    }
}
