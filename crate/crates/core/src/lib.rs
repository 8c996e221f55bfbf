//! Sentence construction from arbitrary word sets.
//!
//! The crate covers the whole experimental loop: corpus preparation
//! ([`textproc`]), seed sampling and the input format ([`seeding`]), a
//! byte-level BPE vocabulary ([`subword`]), an encoder-decoder transformer
//! trained from scratch ([`model`]), beam-search generation ([`decode`]), and
//! the coverage, length and paired-identification evaluations ([`eval`]).

pub mod decode;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod seeding;
pub mod subword;
pub mod synth;
pub mod textproc;

pub use decode::{beam_search, greedy_search, DecodeConfig, GenerationRecord, StepModel};
pub use error::{Error, Result};
pub use eval::{count_missing, coverage_report, CoverageReport};
pub use model::{ModelConfig, ModelState, TrainConfig};
pub use seeding::{format_input, parse_input, SeedSet, TrainingPair, SEPARATOR};
pub use subword::{train_bpe, SubwordVocab, TokenId};
pub use textproc::{tokenize_words, StopwordPolicy, TokenizedSentence};
