//! Translation metrics: corpus BLEU, dictionary/rare-word precision,
//! frequency-bucket precision, and cross-attention export.
//!
//! Every metric works on whitespace-separated words and case-folds them.
//! Word precision uses clipped per-sentence occurrence matching: a reference
//! occurrence of `w` counts as translated when the paired hypothesis still
//! has an unconsumed occurrence of `w`.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{forward, greedy_decode, Batch, Example, ModelConfig, ModelError, ModelParams, RunMode, Scalar};
pub use crate::trainer::{evaluate_examples, EvalStats};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("no sentences to score")]
    EmptyInput,
    #[error("need at least 2 buckets, got {0}")]
    TooFewBuckets(usize),
    #[error("{what} index {index} out of range (have {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Lower-cased words of a sentence.
pub fn words(sentence: &str) -> Vec<String> {
    sentence.split_whitespace().map(|w| w.to_lowercase()).collect()
}

fn check_lengths<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<(), EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bleu {
    /// In [0, 100].
    pub score: f64,
    /// Clipped n-gram precisions for n = 1..=4.
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(ws: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if ws.len() >= n {
        for g in ws.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU with a single reference per sentence, no smoothing.
pub fn corpus_bleu<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<Bleu, EvalError> {
    check_lengths(hyps, refs)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let h = words(h.as_ref());
        let r = words(r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(&r, n);
            for (g, c) in ngram_counts(&h, n) {
                matched[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        precisions[n] = if total[n] == 0 {
            0.0
        } else {
            matched[n] as f64 / total[n] as f64
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(Bleu {
        score,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// Per-word (matched, reference count) under clipped occurrence matching,
/// restricted to words accepted by `eligible`.
fn word_matches<S: AsRef<str>>(
    hyps: &[S],
    refs: &[S],
    eligible: impl Fn(&str) -> bool,
) -> BTreeMap<String, (usize, usize)> {
    let mut per_word: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (h, r) in hyps.iter().zip(refs) {
        let mut avail: HashMap<String, usize> = HashMap::new();
        for w in words(h.as_ref()) {
            *avail.entry(w).or_insert(0) += 1;
        }
        for w in words(r.as_ref()) {
            if !eligible(&w) {
                continue;
            }
            let hit = match avail.get_mut(&w) {
                Some(c) if *c > 0 => {
                    *c -= 1;
                    1
                }
                _ => 0,
            };
            let e = per_word.entry(w).or_insert((0, 0));
            e.0 += hit;
            e.1 += 1;
        }
    }
    per_word
}

fn mean_ratio(m: &BTreeMap<String, (usize, usize)>) -> Option<f64> {
    if m.is_empty() {
        return None;
    }
    Some(m.values().map(|&(a, n)| a as f64 / n as f64).sum::<f64>() / m.len() as f64)
}

/// Mean over eligible reference word types of matched/occurrences.
/// `None` when no reference word is eligible.
pub fn prec_info<S: AsRef<str>>(hyps: &[S], refs: &[S], eligible: &HashSet<String>) -> Result<Option<f64>, EvalError> {
    check_lengths(hyps, refs)?;
    let folded: HashSet<String> = eligible.iter().map(|w| w.to_lowercase()).collect();
    Ok(mean_ratio(&word_matches(hyps, refs, |w| folded.contains(w))))
}

/// Case-folded word frequencies of a corpus side.
pub fn word_frequencies<S: AsRef<str>>(sentences: &[S]) -> HashMap<String, usize> {
    let mut m = HashMap::new();
    for s in sentences {
        for w in words(s.as_ref()) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Words seen fewer than `threshold` times (and at least once).
pub fn rare_words(freq: &HashMap<String, usize>, threshold: usize) -> HashSet<String> {
    freq.iter()
        .filter(|(_, &c)| c < threshold)
        .map(|(w, _)| w.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    /// Inclusive training-frequency range.
    pub lo: usize,
    pub hi: usize,
    pub precision: Option<f64>,
    pub word_count: usize,
}

/// Bucket boundaries splitting `[1, max_freq]` into at most `n` ranges of
/// whole powers of two.
pub fn bucket_ranges(max_freq: usize, n: usize) -> Vec<(usize, usize)> {
    let max_freq = max_freq.max(1);
    let levels = (usize::BITS - max_freq.leading_zeros()) as usize; // floor(log2)+1
    let n = n.min(levels).max(1);
    (0..n)
        .map(|k| {
            let a = k * levels / n;
            let b = (k + 1) * levels / n;
            let lo = 1usize << a;
            let hi = if k + 1 == n { max_freq } else { (1usize << b) - 1 };
            (lo, hi)
        })
        .collect()
}

/// Clipped word precision grouped by log2 training frequency. Reference
/// words absent from `train_freq` are not bucketed.
pub fn freq_bucket_precision<S: AsRef<str>>(
    hyps: &[S],
    refs: &[S],
    train_freq: &HashMap<String, usize>,
    n_buckets: usize,
) -> Result<Vec<Bucket>, EvalError> {
    if n_buckets < 2 {
        return Err(EvalError::TooFewBuckets(n_buckets));
    }
    check_lengths(hyps, refs)?;
    let max_freq = train_freq.values().copied().max().unwrap_or(1);
    let per_word = word_matches(hyps, refs, |w| train_freq.get(w).is_some_and(|&c| c > 0));
    Ok(bucket_ranges(max_freq, n_buckets)
        .into_iter()
        .map(|(lo, hi)| {
            let sub: BTreeMap<String, (usize, usize)> = per_word
                .iter()
                .filter(|(w, _)| (lo..=hi).contains(&train_freq[*w]))
                .map(|(w, v)| (w.clone(), *v))
                .collect();
            Bucket {
                lo,
                hi,
                precision: mean_ratio(&sub),
                word_count: sub.len(),
            }
        })
        .collect())
}

pub fn buckets_csv(buckets: &[Bucket]) -> String {
    let mut s = String::from("lo,hi,precision,word_count\n");
    for b in buckets {
        let p = b.precision.map(|p| format!("{p:.6}")).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", b.lo, b.hi, p, b.word_count));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub prec_rare: Option<f64>,
    pub prec_dict: Option<f64>,
    pub buckets: Vec<Bucket>,
    pub perplexity: Option<f64>,
    pub token_accuracy: Option<f64>,
    pub case_folded: bool,
    pub sentences: usize,
}

/// Inputs besides hypotheses and references that [`evaluate`] can use.
#[derive(Debug, Clone, Default)]
pub struct EvalInputs<'a> {
    pub train_freq: Option<&'a HashMap<String, usize>>,
    pub dict_words: Option<&'a HashSet<String>>,
    pub stats: Option<EvalStats>,
    pub n_buckets: usize,
}

/// Rare words occur fewer than this many times in the training targets.
pub const RARE_THRESHOLD: usize = 10;

pub fn evaluate<S: AsRef<str>>(hyps: &[S], refs: &[S], inputs: &EvalInputs<'_>) -> Result<EvalReport, EvalError> {
    let bleu = corpus_bleu(hyps, refs)?.score;
    let (prec_rare, buckets) = match inputs.train_freq {
        Some(freq) => {
            // Words never seen in training count as rare too.
            let frequent: HashSet<&str> = freq
                .iter()
                .filter(|(_, &c)| c >= RARE_THRESHOLD)
                .map(|(w, _)| w.as_str())
                .collect();
            let per_word = word_matches(hyps, refs, |w| !frequent.contains(w));
            let buckets = freq_bucket_precision(hyps, refs, freq, inputs.n_buckets.max(2))?;
            (mean_ratio(&per_word), buckets)
        }
        None => (None, Vec::new()),
    };
    let prec_dict = match inputs.dict_words {
        Some(set) => prec_info(hyps, refs, set)?,
        None => None,
    };
    Ok(EvalReport {
        bleu,
        prec_rare,
        prec_dict,
        buckets,
        perplexity: inputs.stats.map(|s| s.perplexity),
        token_accuracy: inputs.stats.map(|s| s.token_accuracy),
        case_folded: true,
        sentences: hyps.len(),
    })
}

/// Cross-attention weights of one layer and head for a greedy decode.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// Encoder input ids, `[bos]` and `[eos]` included.
    pub source: Vec<u32>,
    /// Decoded ids, including the final `[eos]` when one was produced.
    pub output: Vec<u32>,
    /// `output.len()` rows of `source.len()` weights.
    pub weights: Vec<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub fn export_attention<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    src: &[u32],
    src_type: u32,
    tgt_type: u32,
    layer: usize,
    head: usize,
    max_len: usize,
) -> Result<AttentionMap, EvalError> {
    if layer >= cfg.dec_layers {
        return Err(EvalError::IndexOutOfRange {
            what: "layer",
            index: layer,
            len: cfg.dec_layers,
        });
    }
    if head >= cfg.n_heads {
        return Err(EvalError::IndexOutOfRange {
            what: "head",
            index: head,
            len: cfg.n_heads,
        });
    }
    let dec = greedy_decode(params, cfg, src, src_type, tgt_type, max_len)?;
    let ex = Example::translation(src, src_type, &dec.tokens, tgt_type);
    let mut output = ex.targets.clone();
    if dec.truncated {
        output.pop();
    }
    let batch = Batch::new(&[&ex]);
    let cache = forward(params, cfg, &batch, RunMode::eval(false))?;
    let (lq, lk) = (batch.dec_len, batch.enc_len);
    let m = cache.dec.cross_attention(layer, head, cfg.n_heads, 0, lq, lk);
    let weights = (0..output.len())
        .map(|i| m[i * lk..(i + 1) * lk].iter().map(|x| x.f64()).collect())
        .collect();
    Ok(AttentionMap {
        source: ex.enc_tokens,
        output,
        weights,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// CSV with a header row of source tokens; each following row starts with
/// the output token.
pub fn attention_csv(map: &AttentionMap, token: impl Fn(u32) -> String) -> String {
    let mut s = String::from("target");
    for &t in &map.source {
        s.push(',');
        s.push_str(&csv_field(&token(t)));
    }
    s.push('\n');
    for (t, row) in map.output.iter().zip(&map.weights) {
        s.push_str(&csv_field(&token(*t)));
        for w in row {
            s.push_str(&format!(",{w:.6}"));
        }
        s.push('\n');
    }
    s
}
