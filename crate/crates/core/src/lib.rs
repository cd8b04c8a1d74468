//! Dictionary-driven pretraining for neural machine translation.
//!
//! Sentences are turned into masked, replaced and information-prediction
//! samples using a bilingual dictionary ([`samplegen`]), a small
//! encoder-decoder transformer is pretrained on them and then fine-tuned on
//! sentence pairs ([`model`], [`trainer`]), and translations are scored with
//! BLEU and word-level precision metrics ([`eval`]).

pub mod corpus;
pub mod dictionary;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod samplegen;
pub mod synth;
pub mod tokenizer;
pub mod trainer;
pub mod types;

pub use corpus::{MonoCorpus, ParallelCorpus, Sentence};
pub use dictionary::{BilingualDictionary, DictEntry, InfoKind};
pub use eval::{EvalReport, EvalStats};
pub use model::{Checkpoint, Example, ModelConfig, ModelParams};
pub use samplegen::{Objective, PretrainConfig, PretrainSample, ShardHeader};
pub use tokenizer::{Encoding, Vocabulary};
pub use trainer::{NmtData, TrainConfig, TrainLog};
pub use types::TypeMap;
