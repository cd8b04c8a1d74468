//! Glue between corpora, the tokenizer and the model: vocabulary building
//! with tag tokens, tokenized NMT data and batched translation.

use crate::corpus::ParallelCorpus;
use crate::dictionary::{expand_tag, BilingualDictionary, InfoKind};
use crate::model::{greedy_decode_batch, ModelConfig, ModelError, ModelParams, Scalar};
use crate::tokenizer::{build_vocab_with_reserved, TokenizerError, Vocabulary, MAX_SENTENCE_SUBWORDS};
use crate::trainer::NmtData;
use crate::types::TypeMap;

/// Every B/M/E/O token that POS or NE payloads of `dict` can expand to,
/// sorted and deduplicated.
pub fn tag_tokens(dict: &BilingualDictionary) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for e in dict.entries() {
        for kind in [InfoKind::Pos, InfoKind::NamedEntity] {
            for tag in e.payloads(kind) {
                // Three words produce all four prefixes.
                out.extend(expand_tag(tag, 3));
                out.extend(expand_tag(tag, 1));
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

/// Joint vocabulary over `texts`, with the dictionary's tag tokens reserved.
pub fn build_joint_vocab<S: AsRef<str>>(
    texts: &[S],
    dict: Option<&BilingualDictionary>,
    size: usize,
) -> Result<Vocabulary, TokenizerError> {
    let reserved = dict.map(tag_tokens).unwrap_or_default();
    build_vocab_with_reserved(texts, &reserved, size)
}

/// Tokenizes a parallel corpus into id pairs, dropping pairs longer than
/// the sentence limit on either side.
pub fn tokenize_pairs(vocab: &Vocabulary, corpus: &ParallelCorpus) -> Vec<(Vec<u32>, Vec<u32>)> {
    corpus
        .pairs
        .iter()
        .map(|(s, t)| (vocab.encode_ids(s), vocab.encode_ids(t)))
        .filter(|(s, t)| s.len() <= MAX_SENTENCE_SUBWORDS && t.len() <= MAX_SENTENCE_SUBWORDS)
        .collect()
}

pub fn nmt_data(
    vocab: &Vocabulary,
    types: &TypeMap,
    train: &ParallelCorpus,
    valid: Option<&ParallelCorpus>,
) -> Result<NmtData, String> {
    let ty = |l: &str| {
        types
            .language(l)
            .ok_or_else(|| format!("language `{l}` not in the type table ({})", types.join()))
    };
    Ok(NmtData {
        src_type: ty(&train.src_lang)?,
        tgt_type: ty(&train.tgt_lang)?,
        train: tokenize_pairs(vocab, train),
        valid: valid.map(|v| tokenize_pairs(vocab, v)).unwrap_or_default(),
    })
}

/// Greedy translation of `sources`, decoded back to text.
#[allow(clippy::too_many_arguments)]
pub fn translate<T: Scalar, S: AsRef<str>>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    sources: &[S],
    src_type: u32,
    tgt_type: u32,
    max_len: usize,
    batch_size: usize,
) -> Result<Vec<String>, ModelError> {
    let ids: Vec<Vec<u32>> = sources
        .iter()
        .map(|s| {
            let mut v = vocab.encode_ids(s.as_ref());
            v.truncate(cfg.max_len.saturating_sub(2));
            v
        })
        .collect();
    // Sorting by length keeps padding small; results go back in input order.
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| ids[i].len());
    let mut out = vec![String::new(); ids.len()];
    for chunk in order.chunks(batch_size.max(1)) {
        let srcs: Vec<Vec<u32>> = chunk.iter().map(|&i| ids[i].clone()).collect();
        let decoded = greedy_decode_batch(params, cfg, &srcs, src_type, tgt_type, max_len)?;
        for (&i, d) in chunk.iter().zip(decoded) {
            out[i] = vocab.decode(&d.tokens).expect("decoded ids come from the vocabulary");
        }
    }
    Ok(out)
}
