//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line per
//! criterion to stderr (bypassing the test harness capture) before asserting.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bdlm_core::corpus::{MonoCorpus, ParallelCorpus, Sentence};
use bdlm_core::dictionary::{BilingualDictionary, InfoKind};
use bdlm_core::eval::{corpus_bleu, evaluate, prec_info, word_frequencies, EvalInputs};
use bdlm_core::model::{
    backward, forward, greedy_decode, label_smoothed_loss, Batch, Checkpoint, Example, ModelConfig, ModelParams,
    RunMode,
};
use bdlm_core::pipeline::{build_joint_vocab, nmt_data, translate};
use bdlm_core::samplegen::{
    build_dataset, read_shard, samples_for_sentence, write_shard, DatasetStats, Objective, PreparedSentence,
    PretrainConfig, PretrainSample, ShardHeader,
};
use bdlm_core::synth::{generate, SynthConfig, SynthToy, SRC_LANG, TGT_LANG};
use bdlm_core::tokenizer::{Vocabulary, MASK, MLM_START, RLM_START};
use bdlm_core::trainer::{
    evaluate_examples, finetune, pretrain, split_validation, LogRecord, NmtData, TrainConfig, TrainLog,
};
use bdlm_core::types::TypeMap;

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "[acceptance] criterion {criterion} ({name}): {verdict}: {detail}"
    );
}

fn archive_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&dir).unwrap();
    dir
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

fn grad_cfg() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn_dim: 16,
        dropout: 0.0,
        max_len: 64,
        vocab_size: 24,
        n_types: 6,
        label_smoothing: 0.1,
    }
}

fn grad_examples() -> Vec<Example> {
    vec![
        Example {
            enc_tokens: vec![MLM_START, 14, MASK, 17, 7],
            enc_types: vec![0, 0, 0, 0, 0],
            dec_tokens: vec![MLM_START, 20, 21],
            dec_types: vec![0, 0, 0],
            dec_hard_pos: vec![0, 1, 2],
            dec_soft_pos: vec![2, 2, 2],
            targets: vec![20, 21, 22],
        },
        Example {
            enc_tokens: vec![RLM_START, 12, 13, 19, 23, 9],
            enc_types: vec![1, 1, 0, 0, 1, 1],
            dec_tokens: vec![RLM_START, 15],
            dec_types: vec![1, 1],
            dec_hard_pos: vec![0, 1],
            dec_soft_pos: vec![2, 2],
            targets: vec![15, 16],
        },
        Example::translation(&[12, 18, 13], 0, &[15, 16, 22, 14], 1),
    ]
}

fn loss_at(params: &ModelParams<f64>, cfg: &ModelConfig, batch: &Batch, use_soft: bool) -> f64 {
    let c = forward(params, cfg, batch, RunMode::eval(use_soft)).unwrap();
    label_smoothed_loss(c.logits(), cfg.vocab_size, &batch.targets, cfg.label_smoothing)
        .unwrap()
        .loss
}

/// Worst per-tensor error over every coordinate: max |numeric - analytic|
/// divided by the tensor's largest analytic magnitude (floored at 1e-3).
fn worst_gradient_error(use_soft: bool, seed: u64) -> (f64, String) {
    let cfg = grad_cfg();
    let params = ModelParams::<f64>::init(&cfg, seed);
    let exs = grad_examples();
    let batch = Batch::new(&exs.iter().collect::<Vec<_>>());
    let cache = forward(&params, &cfg, &batch, RunMode::eval(use_soft)).unwrap();
    let lo = label_smoothed_loss(cache.logits(), cfg.vocab_size, &batch.targets, cfg.label_smoothing).unwrap();
    let grads = backward(&params, &cfg, &batch, &cache, &lo.dlogits, use_soft);
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let h = 1e-4;
    let mut worst = (0.0f64, String::new());
    let mut p = params.clone();
    for (ti, name) in names.iter().enumerate() {
        let analytic = grads.tensors()[ti].data.clone();
        let scale = analytic.iter().fold(1e-3f64, |m, g| m.max(g.abs()));
        for (i, &a) in analytic.iter().enumerate() {
            let orig = p.tensors()[ti].data[i];
            p.tensors_mut()[ti].data[i] = orig + h;
            let up = loss_at(&p, &cfg, &batch, use_soft);
            p.tensors_mut()[ti].data[i] = orig - h;
            let down = loss_at(&p, &cfg, &batch, use_soft);
            p.tensors_mut()[ti].data[i] = orig;
            let err = ((up - down) / (2.0 * h) - a).abs() / scale;
            if err > worst.0 {
                worst = (err, name.clone());
            }
        }
    }
    worst
}

#[test]
fn criterion_1_gradient_correctness() {
    let t = Instant::now();
    let mut worst = (0.0, String::new());
    for (soft, seed) in [(true, 101), (false, 202)] {
        let w = worst_gradient_error(soft, seed);
        if w.0 >= worst.0 {
            worst = w;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = worst.0 < 1e-5 && secs < 120.0;
    report(
        1,
        "gradient check",
        pass,
        &format!("max relative error {:.2e} in `{}`, {secs:.1}s", worst.0, worst.1),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 2. Sample-generation soundness

/// Random two-language corpus and a dictionary of word and phrase entries
/// drawn from it.
fn fuzz_world(rng: &mut ChaCha8Rng) -> (MonoCorpus, BilingualDictionary) {
    let word = |rng: &mut ChaCha8Rng, alphabet: &[u8]| -> String {
        let n = rng.gen_range(1..=6);
        (0..n).map(|_| *alphabet.choose(rng).unwrap() as char).collect()
    };
    let lex = |rng: &mut ChaCha8Rng, alphabet: &[u8], n: usize| -> Vec<String> {
        let mut v: Vec<String> = (0..n).map(|_| word(rng, alphabet)).collect();
        v.sort();
        v.dedup();
        v
    };
    let la = lex(rng, b"abcdefgh", 60);
    let lb = lex(rng, b"pqrstuvw", 60);
    let mut corpus = MonoCorpus::new();
    for (lang, lexicon) in [(SRC_LANG, &la), (TGT_LANG, &lb)] {
        for _ in 0..40 {
            let n = rng.gen_range(1..=14);
            let s: Vec<&str> = (0..n).map(|_| lexicon.choose(rng).unwrap().as_str()).collect();
            corpus.sentences.push(Sentence::new(lang, s.join(" ")));
        }
    }
    let mut dict = BilingualDictionary::new();
    for (lang, own, other) in [(SRC_LANG, &la, &lb), (TGT_LANG, &lb, &la)] {
        let sents: Vec<Vec<String>> = corpus
            .sentences
            .iter()
            .filter(|s| s.language == lang)
            .map(|s| s.words().into_iter().map(str::to_string).collect())
            .collect();
        for _ in 0..30 {
            // Headwords are single words or phrases lifted from the corpus.
            let head = if rng.gen_bool(0.3) {
                let s = sents.choose(rng).unwrap();
                let len = rng.gen_range(1..=3.min(s.len()));
                let start = rng.gen_range(0..=s.len() - len);
                s[start..start + len].join(" ")
            } else {
                own.choose(rng).unwrap().clone()
            };
            let n_pay = rng.gen_range(1..=3);
            let payloads: Vec<String> = (0..n_pay)
                .map(|_| {
                    let k = rng.gen_range(1..=3);
                    (0..k)
                        .map(|_| other.choose(rng).unwrap().as_str())
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            dict.insert(lang, &head, InfoKind::Translation, payloads);
        }
    }
    (corpus, dict)
}

/// Puts every target group back at its soft position. Encoder tokens of the
/// sentence's own language are kept, other tokens (replacements) dropped.
fn reconstruct(s: &PretrainSample, lang_type: u32) -> Vec<u32> {
    let mut groups: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (&p, &t) in s.dec_soft_pos.iter().zip(&s.target_tokens) {
        groups.entry(p).or_default().push(t);
    }
    let mut out = Vec::new();
    for i in 1..s.enc_tokens.len() - 1 {
        if let Some(g) = groups.get(&(i as u32)) {
            out.extend(g);
        } else if s.enc_types[i] == lang_type && s.enc_tokens[i] != MASK {
            out.push(s.enc_tokens[i]);
        }
    }
    out
}

fn sample_invariants(s: &PretrainSample, sent: &PreparedSentence) -> Result<(), String> {
    s.validate()?;
    if s.objective == Objective::Iplm {
        return Err("IPLM sample with an MLM/RLM-only mix".into());
    }
    // Soft positions never decrease: targets follow encoder order.
    if s.dec_soft_pos.windows(2).any(|w| w[0] > w[1]) {
        return Err("soft positions out of order".into());
    }
    for &p in &s.dec_soft_pos {
        let tok = s.enc_tokens[p as usize];
        let ty = s.enc_types[p as usize];
        let ok = match s.objective {
            Objective::Mlm => tok == MASK,
            Objective::Rlm => ty != sent.lang_type,
            Objective::Iplm => unreachable!(),
        };
        if !ok {
            return Err(format!("soft position {p} does not point at a span start"));
        }
    }
    Ok(())
}

#[test]
fn criterion_2_sample_generation_soundness() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let types = TypeMap::new([SRC_LANG, TGT_LANG]);
    let (mut total, mut failures, mut worlds) = (0usize, Vec::new(), 0);
    let mut per_obj = [0usize; 3];
    while total < 10_000 {
        worlds += 1;
        let (corpus, dict) = fuzz_world(&mut rng);
        let vocab_size = rng.gen_range(60..400);
        let vocab = build_joint_vocab(&corpus.texts(), None, vocab_size).unwrap();
        let config = PretrainConfig {
            mask_ratio: rng.gen_range(0.05..0.9),
            sample_rate: rng.gen_range(1.0..4.0),
            mix_ratio: [1.0, 1.0, 0.0],
            info_kind: InfoKind::Translation,
            seed: rng.gen(),
        };
        let mut stats = DatasetStats::default();
        let mut samples = Vec::new();
        for (i, s) in corpus.sentences.iter().enumerate() {
            let sent = PreparedSentence::new(&s.language, &s.text, &vocab, &types).unwrap();
            for sample in samples_for_sentence(&sent, i as u64, &dict, &config, &vocab, &types, &mut stats) {
                total += 1;
                per_obj[sample.objective as usize] += 1;
                if let Err(e) = sample_invariants(&sample, &sent) {
                    failures.push(format!("invariant: {e}"));
                }
                if reconstruct(&sample, sent.lang_type) != sent.encoding.ids {
                    failures.push(format!("reconstruction failed for `{}`", s.text));
                }
                samples.push(sample);
            }
        }
        // The shard format stores a subset of fields; the rest must be rebuilt identically.
        let header = ShardHeader {
            kind: InfoKind::Translation,
            languages: types.languages().to_vec(),
            seed: config.seed,
            count: 0,
        };
        let mut bytes = Vec::new();
        write_shard(&mut bytes, &header, &samples).unwrap();
        let (_, back) = read_shard(&bytes[..]).unwrap();
        if back != samples {
            failures.push("shard round trip changed samples".into());
        }
    }
    let pass = failures.is_empty() && per_obj[0] > 1000 && per_obj[1] > 1000;
    report(
        2,
        "sample generation",
        pass,
        &format!(
            "{total} samples (mlm {}, rlm {}) from {worlds} fuzzed corpora, {} failures",
            per_obj[0],
            per_obj[1],
            failures.len()
        ),
    );
    assert!(pass, "{:?}", &failures[..failures.len().min(5)]);
}

// ---------------------------------------------------------------------------
// 3. Metric oracles

/// Straightforward BLEU: n-grams counted by linear scans over vectors.
fn naive_bleu(hyps: &[String], refs: &[String]) -> f64 {
    let (mut m, mut t) = ([0f64; 4], [0f64; 4]);
    let (mut c, mut r) = (0f64, 0f64);
    for (h, rf) in hyps.iter().zip(refs) {
        let h: Vec<String> = h.split_whitespace().map(|w| w.to_lowercase()).collect();
        let rf: Vec<String> = rf.split_whitespace().map(|w| w.to_lowercase()).collect();
        c += h.len() as f64;
        r += rf.len() as f64;
        for n in 1..=4 {
            if h.len() < n {
                continue;
            }
            let hg: Vec<&[String]> = h.windows(n).collect();
            let rg: Vec<&[String]> = if rf.len() >= n {
                rf.windows(n).collect()
            } else {
                Vec::new()
            };
            let mut seen: Vec<&[String]> = Vec::new();
            for g in &hg {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g);
                let ch = hg.iter().filter(|x| *x == g).count();
                let cr = rg.iter().filter(|x| *x == g).count();
                m[n - 1] += ch.min(cr) as f64;
            }
            t[n - 1] += hg.len() as f64;
        }
    }
    if (0..4).any(|i| t[i] == 0.0 || m[i] == 0.0) {
        return 0.0;
    }
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    let geo = (0..4).map(|i| (m[i] / t[i]).ln()).sum::<f64>() / 4.0;
    100.0 * bp * geo.exp()
}

/// Consumes hypothesis occurrences one reference occurrence at a time.
fn brute_prec_info(hyps: &[String], refs: &[String], eligible: &HashSet<String>) -> Option<f64> {
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<String> = h.split_whitespace().map(|w| w.to_lowercase()).collect();
        let mut used = vec![false; h.len()];
        for w in r.split_whitespace().map(|w| w.to_lowercase()) {
            if !eligible.contains(&w) {
                continue;
            }
            let e = per.entry(w.clone()).or_insert((0, 0));
            e.1 += 1;
            if let Some(j) = (0..h.len()).find(|&j| !used[j] && h[j] == w) {
                used[j] = true;
                e.0 += 1;
            }
        }
    }
    if per.is_empty() {
        return None;
    }
    let sum: f64 = per.values().map(|&(m, c)| m as f64 / c as f64).sum();
    Some(sum / per.len() as f64)
}

fn fuzz_sentence(rng: &mut ChaCha8Rng, words: &[&str], max_len: usize) -> String {
    let n = rng.gen_range(0..=max_len);
    (0..n)
        .map(|_| *words.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

/// A reference and a hypothesis that shares part of it.
fn fuzz_pair(rng: &mut ChaCha8Rng, words: &[&str]) -> (String, String) {
    let r = fuzz_sentence(rng, words, 14);
    let mut h: Vec<&str> = r.split_whitespace().collect();
    for w in h.iter_mut() {
        if rng.gen_bool(0.25) {
            *w = words.choose(rng).unwrap();
        }
    }
    if rng.gen_bool(0.3) && !h.is_empty() {
        let cut = rng.gen_range(0..h.len());
        h.truncate(cut.max(1));
    }
    if rng.gen_bool(0.3) {
        h.push(words.choose(rng).unwrap());
    }
    let h = h.join(" ");
    (r, h)
}

#[test]
fn criterion_3_metric_oracles() {
    let words = [
        "the", "The", "cat", "sat", "on", "mat", "a", "dog", "ran", "far", "away", "CAT",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst_bleu = 0.0f64;
    let mut nonzero = 0;
    for _ in 0..50 {
        let n = rng.gen_range(1..30);
        let (refs, hyps): (Vec<String>, Vec<String>) = (0..n).map(|_| fuzz_pair(&mut rng, &words)).unzip();
        let ours = corpus_bleu(&hyps, &refs).unwrap().score;
        let oracle = naive_bleu(&hyps, &refs);
        if oracle > 0.0 {
            nonzero += 1;
        }
        worst_bleu = worst_bleu.max((ours - oracle).abs());
    }
    let mut prec_mismatch = 0;
    for _ in 0..100 {
        let n = rng.gen_range(1..20);
        let (refs, hyps): (Vec<String>, Vec<String>) = (0..n).map(|_| fuzz_pair(&mut rng, &words)).unzip();
        let eligible: HashSet<String> = words
            .iter()
            .filter(|_| rng.gen_bool(0.5))
            .map(|w| w.to_lowercase())
            .collect();
        if prec_info(&hyps, &refs, &eligible).unwrap() != brute_prec_info(&hyps, &refs, &eligible) {
            prec_mismatch += 1;
        }
    }
    let ident: Vec<String> = vec!["the cat sat on the mat".into(), "a dog ran far away from here".into()];
    let b = corpus_bleu(&ident, &ident).unwrap();
    let all: HashSet<String> = ident
        .iter()
        .flat_map(|s| s.split_whitespace().map(str::to_string))
        .collect();
    let identity_ok =
        b.score == 100.0 && b.precisions == [1.0; 4] && prec_info(&ident, &ident, &all).unwrap() == Some(1.0);
    let pass = worst_bleu < 1e-6 && nonzero >= 10 && prec_mismatch == 0 && identity_ok;
    report(
        3,
        "metric oracles",
        pass,
        &format!(
            "bleu max |diff| {worst_bleu:.1e} over 50 corpora ({nonzero} non-zero), prec_info mismatches {prec_mismatch}/100, identity {}",
            if identity_ok { "ok" } else { "wrong" }
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 4. Memorization

#[test]
fn criterion_4_memorization() {
    let t = Instant::now();
    let toy = generate(&SynthConfig {
        train_pairs: 32,
        dev_pairs: 0,
        test_pairs: 0,
        head_words: 40,
        rare_words: 0,
        seed: 4,
        ..SynthConfig::default()
    });
    let mono = toy.train.monolingual();
    let vocab = build_joint_vocab(&mono.texts(), None, 200).unwrap();
    let types = TypeMap::new([SRC_LANG, TGT_LANG]);
    let data = nmt_data(&vocab, &types, &toy.train, None).unwrap();
    assert_eq!(data.train.len(), 32);
    let mut cfg = ModelConfig::new(vocab.size(), types.n_types());
    cfg.d_model = 64;
    cfg.n_heads = 4;
    cfg.enc_layers = 2;
    cfg.dec_layers = 2;
    cfg.ffn_dim = 256;
    cfg.dropout = 0.0;
    let tcfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 32,
        max_epochs: 1000,
        max_steps: Some(1000),
        patience: 1000,
        seed: 4,
        ..TrainConfig::default()
    };
    let out = finetune(None, &data, &cfg, &tcfg, None).unwrap();
    let examples = data.examples(&data.train, cfg.max_len);
    let stats = evaluate_examples(&out.params, &cfg, &examples, false).unwrap();
    let exact = data
        .train
        .iter()
        .filter(|(s, tgt)| {
            let d = greedy_decode(&out.params, &cfg, s, data.src_type, data.tgt_type, cfg.max_len).unwrap();
            d.tokens == **tgt
        })
        .count();
    let secs = t.elapsed().as_secs_f64();
    let pass = out.steps <= 1000 && stats.token_accuracy >= 0.99 && exact == 32 && secs < 300.0;
    report(
        4,
        "memorization",
        pass,
        &format!(
            "token accuracy {:.4}, {exact}/32 exact decodes, {} steps, {secs:.1}s",
            stats.token_accuracy, out.steps
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 5-7. Directional experiments on the synthetic pair

/// Dev BLEU every fine-tune epoch must first reach this value.
const BLEU_TARGET: f64 = 50.0;
const FT_EPOCHS: usize = 20;
const PT_EPOCHS: usize = 5;

struct Setup {
    toy: SynthToy,
    vocab: Vocabulary,
    types: TypeMap,
    dict: BilingualDictionary,
    cfg: ModelConfig,
    data: NmtData,
    seed: u64,
}

impl Setup {
    fn new(seed: u64) -> Self {
        let toy = generate(&SynthConfig {
            seed,
            ..SynthConfig::default()
        });
        let texts_owned = toy.train.monolingual();
        let texts = texts_owned.texts();
        let vocab = build_joint_vocab(&texts, Some(&toy.dictionary), 800).unwrap();
        let types = TypeMap::new([SRC_LANG, TGT_LANG]);
        let dict = toy.dictionary.clean(&texts).unwrap();
        let mut cfg = ModelConfig::new(vocab.size(), types.n_types());
        cfg.d_model = 64;
        cfg.n_heads = 4;
        cfg.enc_layers = 2;
        cfg.dec_layers = 2;
        cfg.ffn_dim = 256;
        cfg.dropout = 0.1;
        let data = nmt_data(&vocab, &types, &toy.train, Some(&toy.dev)).unwrap();
        Setup {
            toy,
            vocab,
            types,
            dict,
            cfg,
            data,
            seed,
        }
    }

    fn tcfg(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: epochs,
            patience: 100,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    fn pretrained(&self, sample_rate: f64) -> (Checkpoint, TrainLog) {
        let pcfg = PretrainConfig {
            sample_rate,
            info_kind: InfoKind::Translation,
            seed: self.seed,
            ..PretrainConfig::default()
        };
        let ds = build_dataset(
            &self.toy.train.monolingual(),
            &self.dict,
            &pcfg,
            &self.vocab,
            &self.types,
        )
        .unwrap();
        let (train, valid) = split_validation(&ds.samples, 0.05);
        let out = pretrain(&train, &valid, &self.cfg, &self.tcfg(PT_EPOCHS), self.seed).unwrap();
        let ck = Checkpoint {
            config: self.cfg.clone(),
            languages: self.types.languages().to_vec(),
            seed: self.seed,
            params: out.params,
        };
        (ck, out.log)
    }

    fn sources(c: &ParallelCorpus) -> Vec<&str> {
        c.pairs.iter().map(|(s, _)| s.as_str()).collect()
    }

    fn targets(c: &ParallelCorpus) -> Vec<String> {
        c.pairs.iter().map(|(_, t)| t.clone()).collect()
    }

    fn finetuned(&self, init: Option<&Checkpoint>) -> Run {
        let dev_src = Self::sources(&self.toy.dev);
        let dev_ref = Self::targets(&self.toy.dev);
        let mut metric = |p: &ModelParams<f32>| {
            let hyp = translate(
                p,
                &self.cfg,
                &self.vocab,
                &dev_src,
                self.data.src_type,
                self.data.tgt_type,
                64,
                64,
            )
            .unwrap();
            corpus_bleu(&hyp, &dev_ref).unwrap().score
        };
        let out = finetune(init, &self.data, &self.cfg, &self.tcfg(FT_EPOCHS), Some(&mut metric)).unwrap();
        let mut curve = Vec::new();
        let mut selected_bleu = f64::NAN;
        for r in out.log.evals() {
            if let LogRecord::Eval {
                dev_bleu: Some(b),
                improved,
                ..
            } = r
            {
                curve.push(*b);
                if *improved {
                    selected_bleu = *b;
                }
            }
        }
        let test_src = Self::sources(&self.toy.test);
        let hyp = translate(
            &out.params,
            &self.cfg,
            &self.vocab,
            &test_src,
            self.data.src_type,
            self.data.tgt_type,
            64,
            64,
        )
        .unwrap();
        let train_tgt = Self::targets(&self.toy.train);
        let freq = word_frequencies(&train_tgt);
        let rep = evaluate(
            &hyp,
            &Self::targets(&self.toy.test),
            &EvalInputs {
                train_freq: Some(&freq),
                n_buckets: 6,
                ..Default::default()
            },
        )
        .unwrap();
        Run {
            curve,
            selected_bleu,
            prec_rare: rep.prec_rare.unwrap_or(0.0),
            log: out.log,
        }
    }
}

struct Run {
    curve: Vec<f64>,
    /// Dev BLEU of the checkpoint chosen by early stopping.
    selected_bleu: f64,
    prec_rare: f64,
    log: TrainLog,
}

impl Run {
    /// 1-based fine-tune epoch at which dev BLEU first reaches the target.
    fn epochs_to_target(&self) -> Option<usize> {
        self.curve.iter().position(|&b| b >= BLEU_TARGET).map(|i| i + 1)
    }
}

fn archive(name: &str, log: &TrainLog) {
    let mut f = fs::File::create(archive_dir().join(name)).unwrap();
    log.write_jsonl(&mut f).unwrap();
}

#[test]
fn criteria_5_6_7_directional_experiments() {
    let mut speed = Vec::new();
    let mut rate = Vec::new();
    let mut rare = Vec::new();
    let mut speed_secs = 0.0;
    let mut summary = String::new();
    for seed in 1..=3u64 {
        let setup = Setup::new(seed);
        let t = Instant::now();
        let vanilla = setup.finetuned(None);
        let (ck10, pt10) = setup.pretrained(10.0);
        let bdlm10 = setup.finetuned(Some(&ck10));
        speed_secs += t.elapsed().as_secs_f64();
        let (ck1, pt1) = setup.pretrained(1.0);
        let bdlm1 = setup.finetuned(Some(&ck1));

        for (name, log) in [
            ("vanilla", &vanilla.log),
            ("pretrain_rate10", &pt10),
            ("bdlm_rate10", &bdlm10.log),
            ("pretrain_rate1", &pt1),
            ("bdlm_rate1", &bdlm1.log),
        ] {
            archive(&format!("seed{seed}_{name}.jsonl"), log);
        }
        let fmt = |c: &[f64]| c.iter().map(|b| format!("{b:.1}")).collect::<Vec<_>>().join(",");
        summary.push_str(&format!(
            "seed {seed}\n  vanilla dev bleu [{}] prec_rare {:.4}\n  bdlm10  dev bleu [{}] prec_rare {:.4}\n  bdlm1   dev bleu [{}] prec_rare {:.4}\n",
            fmt(&vanilla.curve), vanilla.prec_rare, fmt(&bdlm10.curve), bdlm10.prec_rare, fmt(&bdlm1.curve), bdlm1.prec_rare
        ));

        // Random init that never reaches the target counts as needing more than the budget.
        let base = vanilla.epochs_to_target().map_or(f64::INFINITY, |e| e as f64);
        let ratio = bdlm10.epochs_to_target().map_or(f64::INFINITY, |e| e as f64 / base);
        speed.push((
            ratio <= 0.7,
            format!("{:?}/{:?}", bdlm10.epochs_to_target(), vanilla.epochs_to_target()),
        ));
        rate.push((
            bdlm10.selected_bleu >= bdlm1.selected_bleu,
            format!("{:.1} vs {:.1}", bdlm10.selected_bleu, bdlm1.selected_bleu),
        ));
        rare.push((
            bdlm10.prec_rare > vanilla.prec_rare,
            format!("{:.3} vs {:.3}", bdlm10.prec_rare, vanilla.prec_rare),
        ));
    }
    fs::write(archive_dir().join("directional_summary.txt"), &summary).unwrap();
    let wins = |v: &[(bool, String)]| v.iter().filter(|(w, _)| *w).count();
    let details = |v: &[(bool, String)]| v.iter().map(|(_, d)| d.clone()).collect::<Vec<_>>().join("; ");

    let c5 = wins(&speed) >= 2 && speed_secs < 1800.0;
    report(
        5,
        "pretraining speeds up fine-tuning",
        c5,
        &format!(
            "epochs to dev bleu {BLEU_TARGET} (bdlm/vanilla) {}; {}/3 seeds at ratio <= 0.7; {speed_secs:.0}s",
            details(&speed),
            wins(&speed)
        ),
    );
    let c6 = wins(&rate) >= 2;
    report(
        6,
        "sample rate 10 vs 1",
        c6,
        &format!(
            "dev bleu {}; {}/3 seeds; logs in {}",
            details(&rate),
            wins(&rate),
            archive_dir().display()
        ),
    );
    let c7 = wins(&rare) >= 2;
    report(
        7,
        "rare-word precision",
        c7,
        &format!("prec_rare bdlm vs vanilla {}; {}/3 seeds", details(&rare), wins(&rare)),
    );
    assert!(c5 && c6 && c7, "{summary}");
}

// ---------------------------------------------------------------------------
// 8. Reproducibility

fn small_setup() -> (SynthToy, Vocabulary, TypeMap, BilingualDictionary, ModelConfig) {
    let toy = generate(&SynthConfig {
        train_pairs: 200,
        dev_pairs: 20,
        test_pairs: 20,
        head_words: 60,
        rare_words: 20,
        seed: 8,
        ..SynthConfig::default()
    });
    let mono = toy.train.monolingual();
    let texts = mono.texts();
    let vocab = build_joint_vocab(&texts, Some(&toy.dictionary), 300).unwrap();
    let types = TypeMap::new([SRC_LANG, TGT_LANG]);
    let dict = toy.dictionary.clean(&texts).unwrap();
    let mut cfg = ModelConfig::new(vocab.size(), types.n_types());
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.ffn_dim = 32;
    (toy, vocab, types, dict, cfg)
}

/// Shard bytes, checkpoint bytes and report JSON of one small pipeline run.
fn pipeline_artifacts(seed: u64) -> (Vec<u8>, Vec<u8>, String) {
    let (toy, vocab, types, dict, cfg) = small_setup();
    let pcfg = PretrainConfig {
        sample_rate: 2.0,
        seed,
        ..PretrainConfig::default()
    };
    let ds = build_dataset(&toy.train.monolingual(), &dict, &pcfg, &vocab, &types).unwrap();
    let mut shard = Vec::new();
    let header = ShardHeader {
        kind: InfoKind::Translation,
        languages: types.languages().to_vec(),
        seed,
        count: 0,
    };
    write_shard(&mut shard, &header, &ds.samples).unwrap();
    let (_, samples) = read_shard(&shard[..]).unwrap();
    let (train, valid) = split_validation(&samples, 0.05);
    let tcfg = TrainConfig {
        learning_rate: 1e-3,
        max_steps: Some(20),
        seed,
        ..TrainConfig::default()
    };
    let pt = pretrain(&train, &valid, &cfg, &tcfg, seed).unwrap();
    let ck = Checkpoint {
        config: cfg.clone(),
        languages: types.languages().to_vec(),
        seed,
        params: pt.params,
    };
    let data = nmt_data(&vocab, &types, &toy.train, Some(&toy.dev)).unwrap();
    let ft = finetune(
        Some(&ck),
        &data,
        &cfg,
        &TrainConfig {
            max_steps: Some(15),
            ..tcfg
        },
        None,
    )
    .unwrap();
    let ck = Checkpoint {
        params: ft.params,
        ..ck
    };
    let mut ck_bytes = Vec::new();
    ck.write_to(&mut ck_bytes).unwrap();
    let src: Vec<&str> = toy.test.pairs.iter().map(|(s, _)| s.as_str()).collect();
    let refs: Vec<String> = toy.test.pairs.iter().map(|(_, t)| t.clone()).collect();
    let hyp = translate(&ck.params, &cfg, &vocab, &src, data.src_type, data.tgt_type, 20, 8).unwrap();
    let freq = word_frequencies(&refs);
    let stats = evaluate_examples(&ck.params, &cfg, &data.examples(&data.valid, cfg.max_len), false).unwrap();
    let rep = evaluate(
        &hyp,
        &refs,
        &EvalInputs {
            train_freq: Some(&freq),
            stats: Some(stats),
            n_buckets: 4,
            ..Default::default()
        },
    )
    .unwrap();
    (shard, ck_bytes, serde_json::to_string(&rep).unwrap())
}

#[test]
fn criterion_8_reproducibility() {
    let a = pipeline_artifacts(17);
    let b = pipeline_artifacts(17);
    let c = pipeline_artifacts(18);
    let same = a == b;
    let differs = a.0 != c.0 && a.1 != c.1;

    let ck = Checkpoint::read_from(&a.1[..]).unwrap();
    let mut again = Vec::new();
    ck.write_to(&mut again).unwrap();
    let ck_round_trip = again == a.1;

    let (_, vocab, ..) = small_setup();
    let bytes = vocab.to_bytes();
    let vocab_round_trip =
        Vocabulary::from_bytes(&bytes).unwrap().to_bytes() == bytes && Vocabulary::from_bytes(&bytes).unwrap() == vocab;

    let pass = same && differs && ck_round_trip && vocab_round_trip;
    report(8, "reproducibility", pass, &format!(
        "same seed identical: {same}; other seed differs: {differs}; checkpoint round trip: {ck_round_trip}; vocabulary round trip: {vocab_round_trip}; shard {} B, checkpoint {} B",
        a.0.len(), a.1.len()
    ));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 9. Objective-mixing statistics

#[test]
fn criterion_9_objective_mixing() {
    let toy = generate(&SynthConfig {
        train_pairs: 3000,
        dev_pairs: 0,
        test_pairs: 0,
        seed: 9,
        ..SynthConfig::default()
    });
    let mono = toy.train.monolingual();
    let texts = mono.texts();
    let vocab = build_joint_vocab(&texts, Some(&toy.dictionary), 800).unwrap();
    let types = TypeMap::new([SRC_LANG, TGT_LANG]);
    let dict = toy.dictionary.clean(&texts).unwrap();

    let mut details = Vec::new();
    let mut pass = true;
    for mix in [[1.0, 1.0, 1.0], [2.0, 1.0, 1.0], [0.2, 0.5, 0.3]] {
        let pcfg = PretrainConfig {
            sample_rate: 2.0,
            mix_ratio: mix,
            seed: 99,
            ..PretrainConfig::default()
        };
        let ds = build_dataset(&mono, &dict, &pcfg, &vocab, &types).unwrap();
        let n = ds.samples.len();
        let total: f64 = mix.iter().sum();
        let mut worst = 0.0f64;
        for (k, obj) in Objective::ALL.iter().enumerate() {
            let got = ds.samples.iter().filter(|s| s.objective == *obj).count() as f64 / n as f64;
            worst = worst.max((got - mix[k] / total).abs());
        }
        pass &= n >= 10_000 && worst <= 0.02;
        details.push(format!("mix {mix:?}: {n} samples, max deviation {worst:.4}"));
    }

    let pcfg = PretrainConfig {
        sample_rate: 0.5,
        mix_ratio: [1.0, 0.0, 0.0],
        seed: 5,
        ..PretrainConfig::default()
    };
    let ds = build_dataset(&mono, &dict, &pcfg, &vocab, &types).unwrap();
    let eligible = (ds.stats.sentences - ds.stats.filtered_long - ds.stats.skipped_no_match) as f64;
    let expected = 0.5 * eligible;
    let sigma = (eligible * 0.25).sqrt();
    let got = ds.samples.len() as f64;
    let within = (got - expected).abs() <= 3.0 * sigma;
    pass &= within;
    details.push(format!(
        "rate 0.5: {got} samples, expected {expected} +/- {:.1}",
        3.0 * sigma
    ));

    report(9, "objective mixing", pass, &details.join("; "));
    assert!(pass);
}
