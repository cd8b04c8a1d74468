use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::Sentence;
use crate::tokenizer::{build_vocab_with_reserved, MASK, SEP};

struct Fixture {
    vocab: Vocabulary,
    dict: BilingualDictionary,
    types: TypeMap,
}

fn fixture() -> Fixture {
    let corpus = [
        "我 今天 活泼 开朗",
        "I am lively-and-cheerful today",
        "lively and cheerful outgoing",
        "他 很 活泼 开朗",
    ];
    let reserved: Vec<String> = ["B-ADJ", "E-ADJ", "O-ADJ", "O-ADV"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let vocab = build_vocab_with_reserved(&corpus, &reserved, 200).unwrap();
    let mut dict = BilingualDictionary::new();
    dict.insert(
        "zh",
        "活泼 开朗",
        InfoKind::Translation,
        ["lively and cheerful".to_string(), "outgoing".to_string()],
    );
    dict.insert("zh", "活泼 开朗", InfoKind::Pos, ["ADJ".to_string()]);
    dict.insert("zh", "今天", InfoKind::Translation, ["today".to_string()]);
    dict.insert(
        "en",
        "lively-and-cheerful",
        InfoKind::Translation,
        ["活泼 开朗".to_string()],
    );
    dict.insert("en", "today", InfoKind::Translation, ["今天".to_string()]);
    Fixture {
        vocab,
        dict,
        types: TypeMap::new(["zh", "en"]),
    }
}

fn prepared(f: &Fixture, lang: &str, text: &str) -> PreparedSentence {
    PreparedSentence::new(lang, text, &f.vocab, &f.types).unwrap()
}

/// Rebuilds the original subword sequence by putting targets back at their
/// soft positions. Written against the sample layout only.
fn reconstruct(s: &PretrainSample, lang_type: u32) -> Vec<u32> {
    let mut groups: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (&p, &t) in s.dec_soft_pos.iter().zip(&s.target_tokens) {
        groups.entry(p).or_default().push(t);
    }
    let inner = &s.enc_tokens[1..s.enc_tokens.len() - 1];
    let inner_types = &s.enc_types[1..s.enc_types.len() - 1];
    let mut out = Vec::new();
    let mut i = 0;
    while i < inner.len() {
        let enc_pos = (i + 1) as u32;
        if let Some(g) = groups.get(&enc_pos) {
            out.extend(g);
            i += 1;
            while i < inner.len() && inner_types[i] != lang_type && !groups.contains_key(&((i + 1) as u32)) {
                i += 1;
            }
        } else {
            out.push(inner[i]);
            i += 1;
        }
    }
    out
}

#[test]
fn mlm_masks_whole_phrase() {
    let f = fixture();
    let mut dict = f.dict.clone();
    dict.insert("en", "lively-and-cheerful", InfoKind::Pos, ["ADJ".to_string()]);
    let sent = prepared(&f, "en", "I am lively-and-cheerful today");
    let all = sent.matches(&dict);
    let span: Vec<_> = all.iter().filter(|m| m.start == 2).copied().collect();
    let s = make_mlm(&sent, &span).unwrap();
    s.validate().unwrap();
    let masks: Vec<usize> = (0..s.enc_tokens.len()).filter(|&i| s.enc_tokens[i] == MASK).collect();
    assert_eq!(masks.len(), 1);
    assert_eq!(f.vocab.decode(&s.target_tokens).unwrap(), "lively-and-cheerful");
    assert!(s.dec_soft_pos.iter().all(|&p| p as usize == masks[0]));
    assert!(s.enc_types.iter().all(|&t| t == 1));
}

#[test]
fn mlm_single_word_sentence() {
    let f = fixture();
    let sent = prepared(&f, "en", "today");
    let spans = sent.matches(&f.dict);
    let s = make_mlm(&sent, &spans).unwrap();
    assert_eq!(s.enc_tokens, vec![tokenizer::MLM_START, MASK, tokenizer::MLM_END]);
    assert_eq!(f.vocab.decode(&s.target_tokens).unwrap(), "today");
    assert!(s.dec_soft_pos.iter().all(|&p| p == 1));
    assert_eq!(s.dec_in_tokens[0], tokenizer::MLM_START);
}

#[test]
fn mlm_two_spans_keep_encoder_order() {
    let f = fixture();
    let sent = prepared(&f, "zh", "我 今天 活泼 开朗");
    let spans = sent.matches(&f.dict);
    assert_eq!(spans.len(), 2);
    let s = make_mlm(&sent, &spans).unwrap();
    assert_eq!(f.vocab.decode(&s.target_tokens).unwrap(), "今天 活泼 开朗");
    assert_eq!(reconstruct(&s, 0), sent.encoding.ids);
}

#[test]
fn overlapping_spans_rejected() {
    let f = fixture();
    let sent = prepared(&f, "zh", "我 今天 活泼 开朗");
    let spans = sent.matches(&f.dict);
    let twice = vec![spans[1], spans[1]];
    assert_eq!(make_mlm(&sent, &twice), Err(SampleError::OverlappingSpans));
    assert_eq!(make_mlm(&sent, &[]), Err(SampleError::NoSpans));
}

#[test]
fn rlm_replaces_with_translation() {
    let f = fixture();
    let sent = prepared(&f, "zh", "他 很 活泼 开朗");
    let spans = sent.matches(&f.dict);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..40 {
        let s = make_rlm(&sent, &spans, InfoKind::Translation, &f.vocab, &f.types, &mut rng).unwrap();
        s.validate().unwrap();
        assert_eq!(f.vocab.decode(&s.target_tokens).unwrap(), "活泼 开朗");
        let replaced: Vec<u32> = s
            .enc_tokens
            .iter()
            .zip(&s.enc_types)
            .filter(|(_, &t)| t == 1)
            .map(|(&tok, _)| tok)
            .collect();
        let text = f.vocab.decode(&replaced).unwrap();
        let first = s.enc_types.iter().position(|&t| t == 1).unwrap();
        assert!(s.dec_soft_pos.iter().all(|&p| p as usize == first));
        assert_eq!(reconstruct(&s, 0), sent.encoding.ids);
        seen.insert(text);
    }
    let expected: std::collections::BTreeSet<String> =
        ["lively and cheerful".to_string(), "outgoing".to_string()].into();
    assert_eq!(seen, expected);
}

#[test]
fn rlm_single_payload_always_chosen() {
    let f = fixture();
    let sent = prepared(&f, "zh", "我 今天");
    let spans = sent.matches(&f.dict);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let s = make_rlm(&sent, &spans, InfoKind::Translation, &f.vocab, &f.types, &mut rng).unwrap();
        let t = f.vocab.id("today").unwrap();
        assert!(s.enc_tokens.contains(&t));
    }
}

#[test]
fn rlm_pos_uses_chunk_tags() {
    let f = fixture();
    let sent = prepared(&f, "zh", "他 很 活泼 开朗");
    let spans = sent.matches(&f.dict);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = make_rlm(&sent, &spans, InfoKind::Pos, &f.vocab, &f.types, &mut rng).unwrap();
    let pos_type = f.types.info(InfoKind::Pos, 0).unwrap();
    let tags: Vec<u32> = s
        .enc_tokens
        .iter()
        .zip(&s.enc_types)
        .filter(|(_, &t)| t == pos_type)
        .map(|(&tok, _)| tok)
        .collect();
    assert_eq!(f.vocab.decode(&tags).unwrap(), "B-ADJ E-ADJ");
}

#[test]
fn rlm_missing_payload() {
    let f = fixture();
    let sent = prepared(&f, "en", "today");
    let spans = sent.matches(&f.dict);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(
        make_rlm(&sent, &spans, InfoKind::Synonym, &f.vocab, &f.types, &mut rng),
        Err(SampleError::MissingPayload(InfoKind::Synonym))
    );
}

#[test]
fn iplm_joins_payloads_with_sep() {
    let f = fixture();
    let sent = prepared(&f, "zh", "他 很 活泼 开朗");
    let spans = sent.matches(&f.dict);
    let s = make_iplm(&sent, &spans, InfoKind::Translation, &f.vocab, &f.types).unwrap();
    s.validate().unwrap();
    let sep_at = s.target_tokens.iter().position(|&t| t == SEP).unwrap();
    assert_eq!(
        f.vocab.decode(&s.target_tokens[..sep_at]).unwrap(),
        "lively and cheerful"
    );
    assert_eq!(f.vocab.decode(&s.target_tokens[sep_at + 1..]).unwrap(), "outgoing");
    let mask = s.enc_tokens.iter().position(|&t| t == MASK).unwrap();
    assert!(s.dec_soft_pos.iter().all(|&p| p as usize == mask));
    assert!(s.dec_in_types.iter().all(|&t| t == 1));
}

#[test]
fn iplm_blocks_follow_spans() {
    let f = fixture();
    let sent = prepared(&f, "zh", "今天 我 活泼 开朗");
    let mut dict = f.dict.clone();
    dict.insert("zh", "我", InfoKind::Pos, ["PRON".to_string()]);
    let spans = sent.matches(&dict);
    let only_today = [spans[0]];
    let s = make_iplm(&sent, &only_today, InfoKind::Translation, &f.vocab, &f.types).unwrap();
    assert!(!s.target_tokens.contains(&SEP));
    assert_eq!(f.vocab.decode(&s.target_tokens).unwrap(), "today");

    let two = [spans[0], spans[2]];
    let s = make_iplm(&sent, &two, InfoKind::Translation, &f.vocab, &f.types).unwrap();
    // Block oracle: soft positions split the target into one block per span.
    let masks: Vec<u32> = (0..s.enc_tokens.len() as u32)
        .filter(|&i| s.enc_tokens[i as usize] == MASK)
        .collect();
    let mut blocks: Vec<(u32, Vec<u32>)> = Vec::new();
    for (&p, &t) in s.dec_soft_pos.iter().zip(&s.target_tokens) {
        match blocks.last_mut() {
            Some((q, b)) if *q == p => b.push(t),
            _ => blocks.push((p, vec![t])),
        }
    }
    assert_eq!(blocks.iter().map(|b| b.0).collect::<Vec<_>>(), masks);
    assert_eq!(f.vocab.decode(&blocks[0].1).unwrap(), "today");
    assert_eq!(
        f.vocab.decode(&blocks[1].1).unwrap(),
        "lively and cheerful [sep] outgoing"
    );
}

#[test]
fn select_spans_edge_cases() {
    let f = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    assert_eq!(select_spans(&[], 0.5, &mut rng), Err(SampleError::NoMappableWords));
    let sent = prepared(&f, "zh", "我 今天 活泼 开朗");
    let cands = sent.matches(&f.dict);
    let all = select_spans(&cands, 1.0, &mut rng).unwrap();
    assert_eq!(all, cands);
    for _ in 0..50 {
        let some = select_spans(&cands, 0.01, &mut rng).unwrap();
        assert!(!some.is_empty());
        assert!(some.windows(2).all(|w| w[0].start < w[1].start));
    }
}

fn toy_corpus(n: usize) -> MonoCorpus {
    let mut c = MonoCorpus::new();
    for i in 0..n {
        let text = if i % 2 == 0 {
            "我 今天 活泼 开朗"
        } else {
            "I am lively-and-cheerful today"
        };
        let lang = if i % 2 == 0 { "zh" } else { "en" };
        c.sentences.push(Sentence::new(lang, text));
    }
    c.sentences.push(Sentence::new("en", "nothing here"));
    c
}

#[test]
fn integer_sample_rate_is_exact() {
    let f = fixture();
    let corpus = toy_corpus(20);
    let cfg = PretrainConfig {
        sample_rate: 3.0,
        ..Default::default()
    };
    let ds = build_dataset(&corpus, &f.dict, &cfg, &f.vocab, &f.types).unwrap();
    assert_eq!(ds.samples.len(), 60);
    assert_eq!(ds.stats.skipped_no_match, 1);
    for s in &ds.samples {
        s.validate().unwrap();
    }
}

#[test]
fn mlm_only_mix() {
    let f = fixture();
    let cfg = PretrainConfig {
        mix_ratio: [1.0, 0.0, 0.0],
        sample_rate: 2.0,
        ..Default::default()
    };
    let ds = build_dataset(&toy_corpus(30), &f.dict, &cfg, &f.vocab, &f.types).unwrap();
    assert!(ds.samples.iter().all(|s| s.objective == Objective::Mlm));
}

#[test]
fn dataset_is_deterministic_and_order_independent() {
    let f = fixture();
    let corpus = toy_corpus(40);
    let cfg = PretrainConfig {
        sample_rate: 2.5,
        seed: 11,
        ..Default::default()
    };
    let a = build_dataset(&corpus, &f.dict, &cfg, &f.vocab, &f.types).unwrap();
    let b = build_dataset(&corpus, &f.dict, &cfg, &f.vocab, &f.types).unwrap();
    assert_eq!(a, b);

    // Per-sentence draws do not depend on what was generated before.
    let sent = prepared(&f, "zh", "我 今天 活泼 开朗");
    let mut s1 = DatasetStats::default();
    let mut s2 = DatasetStats::default();
    let first = samples_for_sentence(&sent, 6, &f.dict, &cfg, &f.vocab, &f.types, &mut s1);
    let _ = samples_for_sentence(&sent, 2, &f.dict, &cfg, &f.vocab, &f.types, &mut s2);
    let again = samples_for_sentence(&sent, 6, &f.dict, &cfg, &f.vocab, &f.types, &mut s2);
    assert_eq!(first, again);
}

#[test]
fn empty_dataset() {
    let f = fixture();
    let mut c = MonoCorpus::new();
    c.sentences.push(Sentence::new("en", "nothing here"));
    assert_eq!(
        build_dataset(&c, &f.dict, &PretrainConfig::default(), &f.vocab, &f.types),
        Err(SampleError::EmptyDataset)
    );
}

#[test]
fn config_validation() {
    let bad = [
        PretrainConfig {
            mask_ratio: 0.0,
            ..Default::default()
        },
        PretrainConfig {
            sample_rate: 0.0,
            ..Default::default()
        },
        PretrainConfig {
            mix_ratio: [0.0; 3],
            ..Default::default()
        },
        PretrainConfig {
            mix_ratio: [-1.0, 1.0, 1.0],
            ..Default::default()
        },
    ];
    for c in bad {
        assert!(c.validate().is_err());
    }
    assert_eq!(parse_mix("1,0,2").unwrap(), [1.0, 0.0, 2.0]);
    assert!(parse_mix("1,2").is_err());
}
