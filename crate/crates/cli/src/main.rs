//! `bdlm`: dictionary-based pretraining and NMT experiments from the shell.
//!
//! Exit codes: 0 on success, 1 on runtime errors, 2 on usage errors.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(name = "bdlm", version, about = "Dictionary-based pretraining for NMT")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn a joint subword vocabulary.
    BuildVocab(BuildVocabArgs),
    /// Merge dictionary files and keep entries whose translations occur in the corpus.
    CleanDict(CleanDictArgs),
    /// Report per-language dictionary coverage as JSON.
    Coverage(CoverageArgs),
    /// Generate a pretraining shard.
    GenPretrain(GenPretrainArgs),
    /// Pretrain a model on shards.
    Pretrain(PretrainArgs),
    /// Fine-tune on sentence pairs, from a checkpoint or from scratch.
    Finetune(FinetuneArgs),
    /// Translate sentences with greedy decoding.
    Translate(TranslateArgs),
    /// Score hypotheses against references.
    Evaluate(EvaluateArgs),
    /// Write cross-attention weights of one decode as CSV.
    ExportAttention(ExportAttentionArgs),
    /// Generate the synthetic language pair and dictionary.
    SynthToy(SynthToyArgs),
}

/// Corpus inputs shared by several subcommands.
#[derive(Args, Debug, Serialize, Clone)]
pub struct CorpusArgs {
    /// Parallel TSV files (`source<TAB>target`); both sides are used.
    #[arg(long, value_delimiter = ',', action = ArgAction::Set)]
    pub corpus: Vec<PathBuf>,
    /// Monolingual files as `LANG=PATH`.
    #[arg(long, value_delimiter = ',', action = ArgAction::Set)]
    pub mono: Vec<String>,
    #[arg(long, default_value = "src")]
    pub src_lang: String,
    #[arg(long, default_value = "tgt")]
    pub tgt_lang: String,
}

#[derive(Args, Debug, Serialize)]
pub struct BuildVocabArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub corpus: CorpusArgs,
    /// Dictionary files whose POS/NE tags become reserved tokens.
    #[arg(long, value_delimiter = ',', action = ArgAction::Set)]
    pub dict: Vec<PathBuf>,
    #[arg(long, default_value_t = 8000)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct CleanDictArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, value_delimiter = ',', action = ArgAction::Set, required = true)]
    pub dict: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct CoverageArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, value_delimiter = ',', action = ArgAction::Set, required = true)]
    pub dict: Vec<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct GenPretrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, value_delimiter = ',', action = ArgAction::Set, required = true)]
    pub dict: Vec<PathBuf>,
    #[arg(long)]
    pub vocab: PathBuf,
    /// translation | pos | synonym | definition | ne
    #[arg(long, default_value = "translation")]
    pub kind: String,
    #[arg(long, default_value_t = 0.15)]
    pub mask_ratio: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sample_rate: f64,
    /// MLM,RLM,IPLM weights.
    #[arg(long, default_value = "1,1,1")]
    pub mix: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip dictionary cleaning against the corpus.
    #[arg(long, default_value_t = false, action = ArgAction::Set)]
    pub no_clean: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 128)]
    pub d_model: usize,
    #[arg(long, default_value_t = 8)]
    pub n_heads: usize,
    #[arg(long, default_value_t = 6)]
    pub enc_layers: usize,
    #[arg(long, default_value_t = 6)]
    pub dec_layers: usize,
    /// Defaults to 4·d_model.
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0.1)]
    pub label_smoothing: f64,
}

#[derive(Args, Debug, Serialize, Clone)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    /// Steps between evaluations; 0 means once per epoch.
    #[arg(long, default_value_t = 0)]
    pub eval_interval: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub deterministic: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct PretrainArgs {
    #[arg(long, value_delimiter = ',', action = ArgAction::Set, required = true)]
    pub shards: Vec<PathBuf>,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Fraction of samples (taken from the end) held out for validation.
    #[arg(long, default_value_t = 0.05)]
    pub val_fraction: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Training log (JSONL). Defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct FinetuneArgs {
    /// Training pairs (TSV).
    #[arg(long)]
    pub train_pairs: PathBuf,
    /// Validation pairs (TSV) for early stopping.
    #[arg(long)]
    pub dev_pairs: Option<PathBuf>,
    #[arg(long, default_value = "src")]
    pub src_lang: String,
    #[arg(long, default_value = "tgt")]
    pub tgt_lang: String,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Pretrained checkpoint; random initialization when absent.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Also log dev BLEU at each evaluation.
    #[arg(long, default_value_t = false, action = ArgAction::Set)]
    pub dev_bleu: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct TranslateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// One sentence per line; for TSV lines the first column is used.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "src")]
    pub src_lang: String,
    #[arg(long, default_value = "tgt")]
    pub tgt_lang: String,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EvaluateArgs {
    /// Hypotheses, one per line.
    #[arg(long)]
    pub hyp: PathBuf,
    /// References, one per line; for TSV lines the second column is used.
    #[arg(long)]
    pub reference: PathBuf,
    /// Training targets (text or TSV) for rare-word precision and buckets.
    #[arg(long)]
    pub train_ref: Option<PathBuf>,
    /// Dictionary files for dictionary-word precision.
    #[arg(long, value_delimiter = ',', action = ArgAction::Set)]
    pub dict: Vec<PathBuf>,
    /// Language of the references, for dictionary lookups.
    #[arg(long, default_value = "tgt")]
    pub tgt_lang: String,
    #[arg(long, default_value = "src")]
    pub src_lang: String,
    /// With `--vocab` and `--pairs`, adds perplexity and token accuracy.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub n_buckets: usize,
    /// Bucket table as CSV.
    #[arg(long)]
    pub buckets_csv: Option<PathBuf>,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct ExportAttentionArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub sentence: String,
    #[arg(long, default_value = "src")]
    pub src_lang: String,
    #[arg(long, default_value = "tgt")]
    pub tgt_lang: String,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 0)]
    pub head: usize,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthToyArgs {
    /// Training pairs.
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 200)]
    pub dev: usize,
    #[arg(long, default_value_t = 200)]
    pub test: usize,
    #[arg(long, default_value_t = 200)]
    pub head_words: usize,
    #[arg(long, default_value_t = 150)]
    pub rare_words: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn known_flag(sub: &str, flag: &str) -> bool {
    Cli::command()
        .find_subcommand(sub)
        .is_some_and(|c| c.get_arguments().any(|a| a.get_long() == Some(flag)))
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let argv = match manifest::expand_config(argv, known_flag) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::BuildVocab(a) => commands::build_vocab(&a),
        Command::CleanDict(a) => commands::clean_dict(&a),
        Command::Coverage(a) => commands::coverage(&a),
        Command::GenPretrain(a) => commands::gen_pretrain(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Finetune(a) => commands::finetune(&a),
        Command::Translate(a) => commands::translate(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::ExportAttention(a) => commands::export_attention_cmd(&a),
        Command::SynthToy(a) => commands::synth_toy(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
