//! Subcommand implementations.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;

use bdlm_core::corpus::{MonoCorpus, ParallelCorpus};
use bdlm_core::dictionary::{BilingualDictionary, InfoKind};
use bdlm_core::eval::{
    attention_csv, buckets_csv, corpus_bleu, evaluate as evaluate_report, evaluate_examples, export_attention,
    word_frequencies, EvalInputs,
};
use bdlm_core::model::{Checkpoint, ModelConfig, ModelParams};
use bdlm_core::pipeline::{build_joint_vocab, nmt_data, translate as translate_batch};
use bdlm_core::samplegen::{build_dataset, parse_mix, read_shard, write_shard, PretrainConfig, ShardHeader};
use bdlm_core::synth::{generate, SynthConfig};
use bdlm_core::tokenizer::Vocabulary;
use bdlm_core::trainer::{
    finetune as finetune_run, pretrain as pretrain_run, split_validation, DevMetric, TrainConfig, TrainLog,
};
use bdlm_core::types::TypeMap;

use crate::manifest::{manifest_path, Manifest};
use crate::{
    BuildVocabArgs, CleanDictArgs, CorpusArgs, CoverageArgs, EvaluateArgs, ExportAttentionArgs, FinetuneArgs,
    GenPretrainArgs, ModelArgs, PretrainArgs, SynthToyArgs, TrainArgs, TranslateArgs,
};

fn write_manifest<T: Serialize>(command: &str, args: &T, out: &Path) -> Result<()> {
    Manifest::from_args(command, args)?.write(&manifest_path(out))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(contents)?;
    w.flush()?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Vocabulary::from_bytes(&bytes).with_context(|| format!("loading vocabulary {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_dict(paths: &[PathBuf]) -> Result<BilingualDictionary> {
    Ok(BilingualDictionary::load_and_merge(paths)?)
}

/// All sentences named by `--corpus` (both sides) and `--mono`.
fn load_mono(args: &CorpusArgs) -> Result<MonoCorpus> {
    let mut mono = MonoCorpus::new();
    for p in &args.corpus {
        let pc = ParallelCorpus::load_tsv(&args.src_lang, &args.tgt_lang, p)?;
        mono.sentences.extend(pc.monolingual().sentences);
    }
    for entry in &args.mono {
        let Some((lang, path)) = entry.split_once('=') else {
            bail!("--mono expects LANG=PATH, got `{entry}`");
        };
        mono.load(lang, Path::new(path))?;
    }
    ensure!(!mono.is_empty(), "no input sentences (use --corpus or --mono)");
    Ok(mono)
}

/// Lines of a text file; for TSV lines, column `col`.
fn read_column(path: &Path, col: usize) -> Result<Vec<String>> {
    Ok(read_text(path)?
        .lines()
        .map(|l| match l.split('\t').nth(col) {
            Some(f) if l.contains('\t') => f.trim().to_string(),
            _ => l.trim().to_string(),
        })
        .collect())
}

fn model_config(m: &ModelArgs, vocab_size: usize, n_types: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(vocab_size, n_types);
    cfg.d_model = m.d_model;
    cfg.n_heads = m.n_heads;
    cfg.enc_layers = m.enc_layers;
    cfg.dec_layers = m.dec_layers;
    cfg.ffn_dim = m.ffn_dim.unwrap_or(4 * m.d_model);
    cfg.dropout = m.dropout;
    cfg.max_len = m.max_len;
    cfg.label_smoothing = m.label_smoothing;
    cfg
}

fn train_config(t: &TrainArgs) -> TrainConfig {
    TrainConfig {
        learning_rate: t.lr,
        batch_size: t.batch_size,
        beta1: t.beta1,
        beta2: t.beta2,
        adam_eps: t.adam_eps,
        max_epochs: t.epochs,
        max_steps: t.max_steps,
        patience: t.patience,
        eval_interval: t.eval_interval,
        seed: t.seed,
        deterministic: t.deterministic,
    }
}

fn log_path(out: &Path, log: &Option<PathBuf>) -> PathBuf {
    log.clone().unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log.jsonl");
        PathBuf::from(s)
    })
}

fn write_log(log: &TrainLog, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    log.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn build_vocab(a: &BuildVocabArgs) -> Result<()> {
    let mono = load_mono(&a.corpus)?;
    let dict = if a.dict.is_empty() {
        None
    } else {
        Some(load_dict(&a.dict)?)
    };
    let vocab = build_joint_vocab(&mono.texts(), dict.as_ref(), a.size)?;
    write_file(&a.out, &vocab.to_bytes())?;
    eprintln!("vocabulary: {} entries -> {}", vocab.size(), a.out.display());
    write_manifest("build-vocab", a, &a.out)
}

pub fn clean_dict(a: &CleanDictArgs) -> Result<()> {
    let mono = load_mono(&a.corpus)?;
    let dict = load_dict(&a.dict)?;
    let cleaned = dict.clean(&mono.texts())?;
    write_file(&a.out, cleaned.to_jsonl().as_bytes())?;
    eprintln!("dictionary: kept {} of {} entries", cleaned.len(), dict.len());
    write_manifest("clean-dict", a, &a.out)
}

pub fn coverage(a: &CoverageArgs) -> Result<()> {
    let mono = load_mono(&a.corpus)?;
    let dict = load_dict(&a.dict)?;
    let report = serde_json::to_string_pretty(&dict.coverage_report(&mono)?)?;
    println!("{report}");
    if let Some(out) = &a.out {
        write_file(out, format!("{report}\n").as_bytes())?;
        write_manifest("coverage", a, out)?;
    }
    Ok(())
}

pub fn gen_pretrain(a: &GenPretrainArgs) -> Result<()> {
    let mono = load_mono(&a.corpus)?;
    let vocab = load_vocab(&a.vocab)?;
    let mut dict = load_dict(&a.dict)?;
    if !a.no_clean {
        dict = dict.clean(&mono.texts())?;
    }
    let kind: InfoKind = a.kind.parse().map_err(anyhow::Error::msg)?;
    let config = PretrainConfig {
        mask_ratio: a.mask_ratio,
        sample_rate: a.sample_rate,
        mix_ratio: parse_mix(&a.mix).map_err(anyhow::Error::msg)?,
        info_kind: kind,
        seed: a.seed,
    };
    let types = TypeMap::new([a.corpus.src_lang.as_str(), a.corpus.tgt_lang.as_str()]);
    let ds = build_dataset(&mono, &dict, &config, &vocab, &types)?;
    let header = ShardHeader {
        kind,
        languages: types.languages().to_vec(),
        seed: a.seed,
        count: ds.samples.len(),
    };
    let mut w = create(&a.out)?;
    write_shard(&mut w, &header, &ds.samples)?;
    w.flush()?;
    let s = &ds.stats;
    eprintln!(
        "shard: {} samples (mlm {}, rlm {}, iplm {}) from {} sentences; skipped {} without matches",
        ds.samples.len(),
        s.per_objective[0],
        s.per_objective[1],
        s.per_objective[2],
        s.sentences,
        s.skipped_no_match
    );
    write_manifest("gen-pretrain", a, &a.out)
}

pub fn pretrain(a: &PretrainArgs) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    let mut header: Option<ShardHeader> = None;
    let mut samples = Vec::new();
    for p in &a.shards {
        let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
        let (h, s) = read_shard(BufReader::new(f)).with_context(|| format!("reading {}", p.display()))?;
        if let Some(first) = &header {
            ensure!(
                first.languages == h.languages,
                "shard {} has languages {:?}, expected {:?}",
                p.display(),
                h.languages,
                first.languages
            );
        } else {
            header = Some(h);
        }
        samples.extend(s);
    }
    let header = header.context("no shards given")?;
    let types = header.types();
    let cfg = model_config(&a.model, vocab.size(), types.n_types());
    let tcfg = train_config(&a.train);
    let (train, valid) = split_validation(&samples, a.val_fraction);
    let outcome = pretrain_run(&train, &valid, &cfg, &tcfg, tcfg.seed)?;
    let ck = Checkpoint {
        config: cfg,
        languages: types.languages().to_vec(),
        seed: tcfg.seed,
        params: outcome.params,
    };
    ck.save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    write_log(&outcome.log, &log_path(&a.out, &a.log))?;
    eprintln!(
        "pretrain: {} steps, best validation accuracy {:.4}",
        outcome.steps,
        outcome.best_accuracy.unwrap_or(f64::NAN)
    );
    write_manifest("pretrain", a, &a.out)
}

pub fn finetune(a: &FinetuneArgs) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    let init = a.init.as_deref().map(load_checkpoint).transpose()?;
    let (types, cfg) = match &init {
        // The architecture comes from the checkpoint; regularization from flags.
        Some(ck) => {
            let mut cfg = ck.config.clone();
            cfg.dropout = a.model.dropout;
            cfg.label_smoothing = a.model.label_smoothing;
            (TypeMap::new(ck.languages.iter().cloned()), cfg)
        }
        None => {
            let types = TypeMap::new([a.src_lang.as_str(), a.tgt_lang.as_str()]);
            let cfg = model_config(&a.model, vocab.size(), types.n_types());
            (types, cfg)
        }
    };
    ensure!(
        cfg.vocab_size == vocab.size(),
        "vocabulary has {} entries but the model expects {}",
        vocab.size(),
        cfg.vocab_size
    );
    let train = ParallelCorpus::load_tsv(&a.src_lang, &a.tgt_lang, &a.train_pairs)?;
    let dev = a
        .dev_pairs
        .as_deref()
        .map(|p| ParallelCorpus::load_tsv(&a.src_lang, &a.tgt_lang, p))
        .transpose()?;
    let data = nmt_data(&vocab, &types, &train, dev.as_ref()).map_err(anyhow::Error::msg)?;
    let tcfg = train_config(&a.train);

    let dev_src: Vec<&str> = dev
        .iter()
        .flat_map(|d| d.pairs.iter().map(|(s, _)| s.as_str()))
        .collect();
    let dev_ref: Vec<&str> = dev
        .iter()
        .flat_map(|d| d.pairs.iter().map(|(_, t)| t.as_str()))
        .collect();
    let mut bleu = |p: &ModelParams<f32>| -> f64 {
        translate_batch(p, &cfg, &vocab, &dev_src, data.src_type, data.tgt_type, cfg.max_len, 64)
            .ok()
            .and_then(|hyp| corpus_bleu(&hyp, &dev_ref.iter().map(|s| s.to_string()).collect::<Vec<_>>()).ok())
            .map_or(f64::NAN, |b| b.score)
    };
    let metric: Option<DevMetric<'_>> = if a.dev_bleu && !dev_src.is_empty() {
        Some(&mut bleu)
    } else {
        None
    };
    let outcome = finetune_run(init.as_ref(), &data, &cfg, &tcfg, metric)?;
    let ck = Checkpoint {
        config: cfg.clone(),
        languages: types.languages().to_vec(),
        seed: tcfg.seed,
        params: outcome.params,
    };
    ck.save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    write_log(&outcome.log, &log_path(&a.out, &a.log))?;
    eprintln!(
        "finetune: {} steps, best validation accuracy {:.4}",
        outcome.steps,
        outcome.best_accuracy.unwrap_or(f64::NAN)
    );
    write_manifest("finetune", a, &a.out)
}

fn lang_types(ck: &Checkpoint, src: &str, tgt: &str) -> Result<(u32, u32)> {
    let types = TypeMap::new(ck.languages.iter().cloned());
    let ty = |l: &str| {
        types
            .language(l)
            .with_context(|| format!("language `{l}` not in the checkpoint ({})", types.join()))
    };
    Ok((ty(src)?, ty(tgt)?))
}

pub fn translate(a: &TranslateArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let vocab = load_vocab(&a.vocab)?;
    let (src_type, tgt_type) = lang_types(&ck, &a.src_lang, &a.tgt_lang)?;
    let sources = read_column(&a.input, 0)?;
    let hyps = translate_batch(
        &ck.params,
        &ck.config,
        &vocab,
        &sources,
        src_type,
        tgt_type,
        a.max_len,
        a.batch_size,
    )?;
    let mut text = hyps.join("\n");
    if !hyps.is_empty() {
        text.push('\n');
    }
    write_file(&a.out, text.as_bytes())?;
    write_manifest("translate", a, &a.out)
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let hyps = read_column(&a.hyp, 0)?;
    let refs = read_column(&a.reference, 1)?;
    let train_freq = match &a.train_ref {
        Some(p) => {
            let lines = read_column(p, 1)?;
            Some(word_frequencies(&lines))
        }
        None => None,
    };
    let dict_words: Option<HashSet<String>> = if a.dict.is_empty() {
        None
    } else {
        let dict = load_dict(&a.dict)?;
        Some(
            dict.entries()
                .iter()
                .filter(|e| e.language == a.tgt_lang)
                .flat_map(|e| e.headword.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
                .collect(),
        )
    };
    let stats = match (&a.ckpt, &a.vocab, &a.pairs) {
        (Some(c), Some(v), Some(p)) => {
            let ck = load_checkpoint(c)?;
            let vocab = load_vocab(v)?;
            let types = TypeMap::new(ck.languages.iter().cloned());
            let pairs = ParallelCorpus::load_tsv(&a.src_lang, &a.tgt_lang, p)?;
            let data = nmt_data(&vocab, &types, &pairs, None).map_err(anyhow::Error::msg)?;
            let examples = data.examples(&data.train, ck.config.max_len);
            Some(evaluate_examples(&ck.params, &ck.config, &examples, false)?)
        }
        (None, None, None) => None,
        _ => bail!("--ckpt, --vocab and --pairs must be given together"),
    };
    let inputs = EvalInputs {
        train_freq: train_freq.as_ref(),
        dict_words: dict_words.as_ref(),
        stats,
        n_buckets: a.n_buckets,
    };
    let report = evaluate_report(&hyps, &refs, &inputs)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(out) => {
            write_file(out, format!("{json}\n").as_bytes())?;
            write_manifest("evaluate", a, out)?;
        }
        None => println!("{json}"),
    }
    if let Some(csv) = &a.buckets_csv {
        ensure!(a.train_ref.is_some(), "--buckets-csv needs --train-ref");
        write_file(csv, buckets_csv(&report.buckets).as_bytes())?;
        write_manifest("evaluate", a, csv)?;
    }
    Ok(())
}

pub fn export_attention_cmd(a: &ExportAttentionArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let vocab = load_vocab(&a.vocab)?;
    let (src_type, tgt_type) = lang_types(&ck, &a.src_lang, &a.tgt_lang)?;
    let src = vocab.encode_ids(&a.sentence);
    let map = export_attention(
        &ck.params, &ck.config, &src, src_type, tgt_type, a.layer, a.head, a.max_len,
    )?;
    let csv = attention_csv(&map, |id| vocab.token(id).unwrap_or("<unk>").to_string());
    write_file(&a.out, csv.as_bytes())?;
    write_manifest("export-attention", a, &a.out)
}

pub fn synth_toy(a: &SynthToyArgs) -> Result<()> {
    let cfg = SynthConfig {
        train_pairs: a.n,
        dev_pairs: a.dev,
        test_pairs: a.test,
        head_words: a.head_words,
        rare_words: a.rare_words,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let toy = generate(&cfg);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_file(&a.out.join("train.tsv"), toy.train.to_tsv().as_bytes())?;
    write_file(&a.out.join("dev.tsv"), toy.dev.to_tsv().as_bytes())?;
    write_file(&a.out.join("test.tsv"), toy.test.to_tsv().as_bytes())?;
    write_file(&a.out.join("dict.jsonl"), toy.dictionary.to_jsonl().as_bytes())?;
    let mut rare = toy.rare_source.join("\n");
    rare.push('\n');
    write_file(&a.out.join("rare.txt"), rare.as_bytes())?;
    write_manifest("synth-toy", a, &a.out)
}
