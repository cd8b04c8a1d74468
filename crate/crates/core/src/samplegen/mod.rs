//! Pretraining sample synthesis for the MLM, RLM and IPLM objectives.
//!
//! Every sample is built from one monolingual sentence and the dictionary
//! spans selected in it:
//!
//! * MLM replaces each span with a single `[mask]` and predicts the original
//!   subwords.
//! * RLM replaces each span with one of its dictionary payloads (a translation,
//!   a tag sequence, ...) and predicts the original subwords.
//! * IPLM masks each span and predicts all of its payloads, joined by `[sep]`.
//!
//! Target tokens carry a soft position: the encoder index of the first token
//! of the masked or replaced span they belong to.

mod shard;

pub use shard::{read_shard, write_shard, ShardError, ShardHeader};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::MonoCorpus;
use crate::dictionary::{expand_tag, BilingualDictionary, InfoKind, PhraseMatch};
use crate::tokenizer::{self, Encoding, Vocabulary, MAX_SENTENCE_SUBWORDS};
use crate::types::TypeMap;

/// Longest encoder (and decoder) sequence a sample may have: the subword
/// cutoff plus the objective's start and end tokens.
pub const MAX_SAMPLE_LEN: usize = MAX_SENTENCE_SUBWORDS + 2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SampleError {
    #[error("sentence has no dictionary matches")]
    NoMappableWords,
    #[error("no spans given")]
    NoSpans,
    #[error("spans overlap or are out of order")]
    OverlappingSpans,
    #[error("no selected span has a `{0}` payload")]
    MissingPayload(InfoKind),
    #[error("sample exceeds {MAX_SAMPLE_LEN} tokens")]
    TooLong,
    #[error("language `{0}` has no type id")]
    UnknownLanguage(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("every sentence was skipped")]
    EmptyDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Objective {
    Mlm = 0,
    Rlm = 1,
    Iplm = 2,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Mlm, Objective::Rlm, Objective::Iplm];

    pub fn start_token(self) -> u32 {
        match self {
            Objective::Mlm => tokenizer::MLM_START,
            Objective::Rlm => tokenizer::RLM_START,
            Objective::Iplm => tokenizer::IPLM_START,
        }
    }

    pub fn end_token(self) -> u32 {
        match self {
            Objective::Mlm => tokenizer::MLM_END,
            Objective::Rlm => tokenizer::RLM_END,
            Objective::Iplm => tokenizer::IPLM_END,
        }
    }

    pub fn from_byte(b: u8) -> Option<Objective> {
        Objective::ALL.get(b as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Mlm => "mlm",
            Objective::Rlm => "rlm",
            Objective::Iplm => "iplm",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One objective-tagged training instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PretrainSample {
    pub objective: Objective,
    pub enc_tokens: Vec<u32>,
    pub enc_types: Vec<u32>,
    pub dec_in_tokens: Vec<u32>,
    pub dec_in_types: Vec<u32>,
    pub dec_hard_pos: Vec<u32>,
    pub dec_soft_pos: Vec<u32>,
    pub target_tokens: Vec<u32>,
}

impl PretrainSample {
    /// Assembles a sample, deriving the decoder input (targets shifted right
    /// by the start token) and hard positions.
    pub fn assemble(
        objective: Objective,
        enc_tokens: Vec<u32>,
        enc_types: Vec<u32>,
        dec_soft_pos: Vec<u32>,
        target_tokens: Vec<u32>,
        target_type: u32,
    ) -> Self {
        let n = target_tokens.len();
        let mut dec_in_tokens = Vec::with_capacity(n);
        if n > 0 {
            dec_in_tokens.push(objective.start_token());
            dec_in_tokens.extend_from_slice(&target_tokens[..n - 1]);
        }
        PretrainSample {
            objective,
            enc_tokens,
            enc_types,
            dec_in_tokens,
            dec_in_types: vec![target_type; n],
            dec_hard_pos: (0..n as u32).collect(),
            dec_soft_pos,
            target_tokens,
        }
    }

    /// Checks the structural invariants every sample must satisfy.
    pub fn validate(&self) -> Result<(), String> {
        let n_enc = self.enc_tokens.len();
        let n_dec = self.target_tokens.len();
        if self.enc_types.len() != n_enc {
            return Err("enc_types length".into());
        }
        if [
            self.dec_in_tokens.len(),
            self.dec_in_types.len(),
            self.dec_hard_pos.len(),
            self.dec_soft_pos.len(),
        ]
        .iter()
        .any(|&l| l != n_dec)
        {
            return Err("decoder arrays differ in length".into());
        }
        if n_enc < 2
            || self.enc_tokens[0] != self.objective.start_token()
            || self.enc_tokens[n_enc - 1] != self.objective.end_token()
        {
            return Err("encoder must be wrapped in the objective's start/end tokens".into());
        }
        if n_enc > MAX_SAMPLE_LEN || n_dec > MAX_SAMPLE_LEN {
            return Err("sample too long".into());
        }
        if n_dec == 0 {
            return Err("no targets".into());
        }
        if self.dec_hard_pos.iter().enumerate().any(|(i, &p)| p as usize != i) {
            return Err("hard positions must be 0..n".into());
        }
        if self.dec_soft_pos.iter().any(|&p| p == 0 || p as usize >= n_enc - 1) {
            return Err("soft position outside the sentence".into());
        }
        if self.dec_in_tokens[0] != self.objective.start_token()
            || self.dec_in_tokens[1..] != self.target_tokens[..n_dec - 1]
        {
            return Err("decoder input is not the shifted target".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub mask_ratio: f64,
    pub sample_rate: f64,
    /// Weights for MLM, RLM, IPLM.
    pub mix_ratio: [f64; 3],
    pub info_kind: InfoKind,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            mask_ratio: 0.15,
            sample_rate: 1.0,
            mix_ratio: [1.0, 1.0, 1.0],
            info_kind: InfoKind::Translation,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        let bad = |m: &str| Err(SampleError::InvalidConfig(m.to_string()));
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return bad("mask_ratio must be in (0, 1]");
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return bad("sample_rate must be positive");
        }
        if self.mix_ratio.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || self.mix_ratio.iter().sum::<f64>() <= 0.0 {
            return bad("mix_ratio weights must be non-negative and not all zero");
        }
        Ok(())
    }
}

/// Parses `a,b,c` mixing weights.
pub fn parse_mix(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad weight `{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| "mix needs three weights: mlm,rlm,iplm".to_string())
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Objective::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| format!("unknown objective `{s}`"))
    }
}

/// A sentence with its encoding, ready for span selection.
#[derive(Debug, Clone)]
pub struct PreparedSentence {
    pub language: String,
    pub lang_type: u32,
    pub words: Vec<String>,
    pub encoding: Encoding,
}

impl PreparedSentence {
    pub fn new(language: &str, text: &str, vocab: &Vocabulary, types: &TypeMap) -> Result<Self, SampleError> {
        let lang_type = types
            .language(language)
            .ok_or_else(|| SampleError::UnknownLanguage(language.to_string()))?;
        Ok(PreparedSentence {
            language: language.to_string(),
            lang_type,
            words: text.split_whitespace().map(str::to_string).collect(),
            encoding: vocab.encode(text),
        })
    }

    pub fn matches<'d>(&self, dict: &'d BilingualDictionary) -> Vec<PhraseMatch<'d>> {
        dict.match_phrases(&self.words, &self.language)
    }
}

/// Picks each candidate span independently with probability `mask_ratio`,
/// forcing one uniformly random pick if none was chosen.
pub fn select_spans<'d, R: Rng + ?Sized>(
    candidates: &[PhraseMatch<'d>],
    mask_ratio: f64,
    rng: &mut R,
) -> Result<Vec<PhraseMatch<'d>>, SampleError> {
    if candidates.is_empty() {
        return Err(SampleError::NoMappableWords);
    }
    let p = mask_ratio.clamp(0.0, 1.0);
    let mut chosen: Vec<PhraseMatch<'d>> = candidates.iter().filter(|_| rng.gen_bool(p)).copied().collect();
    if chosen.is_empty() {
        chosen.push(candidates[rng.gen_range(0..candidates.len())]);
    }
    chosen.sort_by_key(|m| m.start);
    Ok(chosen)
}

fn check_spans(spans: &[PhraseMatch<'_>]) -> Result<(), SampleError> {
    if spans.is_empty() {
        return Err(SampleError::NoSpans);
    }
    if spans.windows(2).any(|w| w[0].start + w[0].len > w[1].start) {
        return Err(SampleError::OverlappingSpans);
    }
    Ok(())
}

/// Text that replaces (RLM) or describes (IPLM) a span for one payload.
fn payload_text(kind: InfoKind, payload: &str, span_words: usize) -> String {
    if kind.is_tag() {
        expand_tag(payload, span_words).join(" ")
    } else {
        payload.to_string()
    }
}

/// Encoder sequence with each span's subwords replaced by `replacement(i)`.
/// Returns the tokens, types and the encoder index where each replacement starts.
fn splice(
    sent: &PreparedSentence,
    objective: Objective,
    spans: &[PhraseMatch<'_>],
    replacements: &[(Vec<u32>, u32)],
) -> (Vec<u32>, Vec<u32>, Vec<u32>) {
    let ids = &sent.encoding.ids;
    let mut tokens = vec![objective.start_token()];
    let mut types = vec![sent.lang_type];
    let mut starts = Vec::with_capacity(spans.len());
    let mut cursor = 0;
    for (span, (rep, rep_type)) in spans.iter().zip(replacements) {
        let range = sent.encoding.word_span(span.start, span.len);
        tokens.extend_from_slice(&ids[cursor..range.start]);
        types.resize(tokens.len(), sent.lang_type);
        starts.push(tokens.len() as u32);
        tokens.extend_from_slice(rep);
        types.resize(tokens.len(), *rep_type);
        cursor = range.end;
    }
    tokens.extend_from_slice(&ids[cursor..]);
    tokens.push(objective.end_token());
    types.resize(tokens.len(), sent.lang_type);
    (tokens, types, starts)
}

fn original_targets(sent: &PreparedSentence, spans: &[PhraseMatch<'_>], starts: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut targets = Vec::new();
    let mut soft = Vec::new();
    for (span, &start) in spans.iter().zip(starts) {
        let range = sent.encoding.word_span(span.start, span.len);
        soft.extend(std::iter::repeat_n(start, range.len()));
        targets.extend_from_slice(&sent.encoding.ids[range]);
    }
    (targets, soft)
}

fn finish(
    objective: Objective,
    enc: (Vec<u32>, Vec<u32>),
    soft: Vec<u32>,
    targets: Vec<u32>,
    target_type: u32,
) -> Result<PretrainSample, SampleError> {
    if enc.0.len() > MAX_SAMPLE_LEN || targets.len() > MAX_SAMPLE_LEN {
        return Err(SampleError::TooLong);
    }
    Ok(PretrainSample::assemble(
        objective,
        enc.0,
        enc.1,
        soft,
        targets,
        target_type,
    ))
}

pub fn make_mlm(sent: &PreparedSentence, spans: &[PhraseMatch<'_>]) -> Result<PretrainSample, SampleError> {
    check_spans(spans)?;
    let masks = vec![(vec![tokenizer::MASK], sent.lang_type); spans.len()];
    let (tokens, types, starts) = splice(sent, Objective::Mlm, spans, &masks);
    let (targets, soft) = original_targets(sent, spans, &starts);
    finish(Objective::Mlm, (tokens, types), soft, targets, sent.lang_type)
}

pub fn make_rlm<R: Rng + ?Sized>(
    sent: &PreparedSentence,
    spans: &[PhraseMatch<'_>],
    kind: InfoKind,
    vocab: &Vocabulary,
    types: &TypeMap,
    rng: &mut R,
) -> Result<PretrainSample, SampleError> {
    check_spans(spans)?;
    let info_type = types
        .info(kind, sent.lang_type)
        .ok_or(SampleError::MissingPayload(kind))?;
    let mut kept = Vec::with_capacity(spans.len());
    let mut reps = Vec::with_capacity(spans.len());
    for span in spans {
        let payloads = span.entry.payloads(kind);
        if payloads.is_empty() {
            continue;
        }
        let pick = if payloads.len() == 1 {
            0
        } else {
            rng.gen_range(0..payloads.len())
        };
        let rep = vocab.encode_ids(&payload_text(kind, &payloads[pick], span.len));
        kept.push(*span);
        reps.push((rep, info_type));
    }
    if kept.is_empty() {
        return Err(SampleError::MissingPayload(kind));
    }
    let (tokens, enc_types, starts) = splice(sent, Objective::Rlm, &kept, &reps);
    let (targets, soft) = original_targets(sent, &kept, &starts);
    finish(Objective::Rlm, (tokens, enc_types), soft, targets, sent.lang_type)
}

pub fn make_iplm(
    sent: &PreparedSentence,
    spans: &[PhraseMatch<'_>],
    kind: InfoKind,
    vocab: &Vocabulary,
    types: &TypeMap,
) -> Result<PretrainSample, SampleError> {
    check_spans(spans)?;
    let info_type = types
        .info(kind, sent.lang_type)
        .ok_or(SampleError::MissingPayload(kind))?;
    let kept: Vec<PhraseMatch<'_>> = spans
        .iter()
        .filter(|s| !s.entry.payloads(kind).is_empty())
        .copied()
        .collect();
    if kept.is_empty() {
        return Err(SampleError::MissingPayload(kind));
    }
    let masks = vec![(vec![tokenizer::MASK], sent.lang_type); kept.len()];
    let (tokens, enc_types, starts) = splice(sent, Objective::Iplm, &kept, &masks);
    let mut targets = Vec::new();
    let mut soft = Vec::new();
    for (span, &start) in kept.iter().zip(&starts) {
        let block_start = targets.len();
        for (i, payload) in span.entry.payloads(kind).iter().enumerate() {
            if i > 0 {
                targets.push(tokenizer::SEP);
            }
            targets.extend(vocab.encode_ids(&payload_text(kind, payload, span.len)));
        }
        soft.resize(soft.len() + targets.len() - block_start, start);
    }
    finish(Objective::Iplm, (tokens, enc_types), soft, targets, info_type)
}

/// Counters describing what `build_dataset` kept and dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetStats {
    pub sentences: usize,
    pub filtered_long: usize,
    pub skipped_no_match: usize,
    pub skipped_missing_payload: usize,
    pub skipped_too_long: usize,
    pub per_objective: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub samples: Vec<PretrainSample>,
    pub stats: DatasetStats,
}

/// SplitMix64 finalizer; used to derive independent per-sentence seeds.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the `repeat`-th draw of sentence `sentence`.
pub fn derive_seed(seed: u64, sentence: u64, repeat: u64) -> u64 {
    mix64(mix64(mix64(seed) ^ sentence) ^ repeat)
}

fn pick_objective<R: Rng + ?Sized>(mix: &[f64; 3], rng: &mut R) -> Objective {
    let total: f64 = mix.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (obj, &w) in Objective::ALL.iter().zip(mix) {
        if x < w {
            return *obj;
        }
        x -= w;
    }
    // Rounding can leave `x` just above the last bucket.
    *Objective::ALL
        .iter()
        .zip(mix)
        .rev()
        .find(|(_, &w)| w > 0.0)
        .map(|(o, _)| o)
        .expect("validated mix has a positive weight")
}

/// Draws every sample for one sentence. Depends only on the config seed and
/// the sentence index, never on the order sentences are processed in.
pub fn samples_for_sentence(
    sent: &PreparedSentence,
    index: u64,
    dict: &BilingualDictionary,
    config: &PretrainConfig,
    vocab: &Vocabulary,
    types: &TypeMap,
    stats: &mut DatasetStats,
) -> Vec<PretrainSample> {
    let candidates = sent.matches(dict);
    if candidates.is_empty() {
        stats.skipped_no_match += 1;
        return Vec::new();
    }
    let whole = config.sample_rate.floor() as u64;
    let frac = config.sample_rate - config.sample_rate.floor();
    let mut repeats = whole;
    if frac > 0.0 {
        let mut extra = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, index, u64::MAX));
        if extra.gen_bool(frac) {
            repeats += 1;
        }
    }
    let mut out = Vec::with_capacity(repeats as usize);
    for r in 0..repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, index, r));
        let objective = pick_objective(&config.mix_ratio, &mut rng);
        let spans = match select_spans(&candidates, config.mask_ratio, &mut rng) {
            Ok(s) => s,
            Err(_) => continue,
        };
        let sample = match objective {
            Objective::Mlm => make_mlm(sent, &spans),
            Objective::Rlm => make_rlm(sent, &spans, config.info_kind, vocab, types, &mut rng),
            Objective::Iplm => make_iplm(sent, &spans, config.info_kind, vocab, types),
        };
        match sample {
            Ok(s) => {
                stats.per_objective[objective as usize] += 1;
                out.push(s);
            }
            Err(SampleError::TooLong) => stats.skipped_too_long += 1,
            Err(_) => stats.skipped_missing_payload += 1,
        }
    }
    out
}

/// Generates the combined, shuffled pretraining set for `corpus`.
pub fn build_dataset(
    corpus: &MonoCorpus,
    dict: &BilingualDictionary,
    config: &PretrainConfig,
    vocab: &Vocabulary,
    types: &TypeMap,
) -> Result<Dataset, SampleError> {
    config.validate()?;
    let mut stats = DatasetStats::default();
    let mut samples = Vec::new();
    for (i, s) in corpus.sentences.iter().enumerate() {
        stats.sentences += 1;
        let sent = PreparedSentence::new(&s.language, &s.text, vocab, types)?;
        if sent.encoding.len() > MAX_SENTENCE_SUBWORDS {
            stats.filtered_long += 1;
            continue;
        }
        samples.extend(samples_for_sentence(
            &sent, i as u64, dict, config, vocab, types, &mut stats,
        ));
    }
    if samples.is_empty() {
        return Err(SampleError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, u64::MAX, u64::MAX));
    samples.shuffle(&mut rng);
    Ok(Dataset { samples, stats })
}

#[cfg(test)]
mod tests;
