//! Joint byte-pair-encoded subword vocabulary.
//!
//! Words are split on whitespace. Inside a word, every piece after the first
//! carries the `##` continuation prefix, so word boundaries survive a round
//! trip through token ids without an explicit end-of-word symbol.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use thiserror::Error;

/// Prefix marking a subword that continues the current word.
pub const CONTINUATION: &str = "##";

/// Sentences encoding to more subwords than this are dropped from every dataset.
pub const MAX_SENTENCE_SUBWORDS: usize = 60;

/// Reserved tokens, in id order. They always occupy ids `0..SPECIAL_TOKENS.len()`.
pub const SPECIAL_TOKENS: [&str; 12] = [
    "[pad]", "[unk]", "[bos]", "[eos]", "[mask]", "[sep]", "[mlm_s]", "[mlm_e]", "[rlm_s]", "[rlm_e]", "[iplm_s]",
    "[iplm_e]",
];

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const MASK: u32 = 4;
pub const SEP: u32 = 5;
pub const MLM_START: u32 = 6;
pub const MLM_END: u32 = 7;
pub const RLM_START: u32 = 8;
pub const RLM_END: u32 = 9;
pub const IPLM_START: u32 = 10;
pub const IPLM_END: u32 = 11;

const VOCAB_MAGIC: &str = "bdlm-vocab v1";
const MERGES_MARKER: &str = "#merges";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("target size {requested} cannot hold specials and alphabet ({needed} entries)")]
    TargetSizeTooSmall { needed: usize, requested: usize },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("vocabulary file, line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token ids for one sentence plus the source word of every id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Encoding {
    pub ids: Vec<u32>,
    pub word_index: Vec<usize>,
}

impl Encoding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Subword range covering words `start..start + count`.
    pub fn word_span(&self, start: usize, count: usize) -> std::ops::Range<usize> {
        let lo = self.word_index.partition_point(|&w| w < start);
        let hi = self.word_index.partition_point(|&w| w < start + count);
        lo..hi
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    subwords: Vec<String>,
    merges: Vec<(String, String)>,
    index: HashMap<String, u32>,
    max_piece_chars: usize,
}

fn merged_symbol(left: &str, right: &str) -> String {
    let mut s = String::with_capacity(left.len() + right.len());
    s.push_str(left);
    s.push_str(right.strip_prefix(CONTINUATION).unwrap_or(right));
    s
}

fn word_symbols(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| {
            if i == 0 {
                c.to_string()
            } else {
                format!("{CONTINUATION}{c}")
            }
        })
        .collect()
}

/// Learns a joint vocabulary over `corpus`.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Vocabulary, TokenizerError> {
    build_vocab_with_reserved(corpus, &[], target_size)
}

/// Like [`build_vocab`], but places `reserved` whole-word tokens (for example
/// B/M/E/O tag tokens) right after the special block. They are matched as
/// whole words by [`Vocabulary::encode`] and never take part in merges.
pub fn build_vocab_with_reserved<S: AsRef<str>>(
    corpus: &[S],
    reserved: &[String],
    target_size: usize,
) -> Result<Vocabulary, TokenizerError> {
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut word_counts: BTreeMap<&str, u64> = BTreeMap::new();
    for line in corpus {
        for w in line.as_ref().split_whitespace() {
            *word_counts.entry(w).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }

    let mut subwords: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    let mut seen: BTreeSet<String> = subwords.iter().cloned().collect();
    for r in reserved {
        if !r.is_empty() && !r.contains(char::is_whitespace) && seen.insert(r.clone()) {
            subwords.push(r.clone());
        }
    }

    // Interned symbol table for the merge loop.
    let mut sym_ids: HashMap<String, u32> = HashMap::new();
    let mut sym_names: Vec<String> = Vec::new();
    let mut intern = |s: String, names: &mut Vec<String>| -> u32 {
        if let Some(&id) = sym_ids.get(&s) {
            return id;
        }
        let id = names.len() as u32;
        names.push(s.clone());
        sym_ids.insert(s, id);
        id
    };

    let mut words: Vec<(Vec<u32>, u64)> = Vec::with_capacity(word_counts.len());
    let mut alphabet: BTreeSet<String> = BTreeSet::new();
    for (w, &count) in &word_counts {
        let syms = word_symbols(w);
        alphabet.extend(syms.iter().cloned());
        let ids = syms.into_iter().map(|s| intern(s, &mut sym_names)).collect();
        words.push((ids, count));
    }
    for a in &alphabet {
        if seen.insert(a.clone()) {
            subwords.push(a.clone());
        }
    }
    if target_size < subwords.len() {
        return Err(TokenizerError::TargetSizeTooSmall {
            needed: subwords.len(),
            requested: target_size,
        });
    }

    let mut merges = Vec::new();
    while subwords.len() < target_size {
        let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (syms, count) in &words {
            for p in syms.windows(2) {
                *pair_counts.entry((p[0], p[1])).or_default() += count;
            }
        }
        let Some(&(left, right)) = pair_counts
            .iter()
            .max_by(|(a, ca), (b, cb)| {
                ca.cmp(cb).then_with(|| {
                    // Smaller pair wins ties, so it must compare as "greater" here.
                    let ka = (&sym_names[a.0 as usize], &sym_names[a.1 as usize]);
                    let kb = (&sym_names[b.0 as usize], &sym_names[b.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(p, _)| p)
        else {
            break;
        };
        let new_name = merged_symbol(&sym_names[left as usize], &sym_names[right as usize]);
        merges.push((sym_names[left as usize].clone(), sym_names[right as usize].clone()));
        let new_id = intern(new_name.clone(), &mut sym_names);
        for (syms, _) in words.iter_mut() {
            if syms.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            *syms = out;
        }
        if seen.insert(new_name.clone()) {
            subwords.push(new_name);
        }
    }

    Ok(Vocabulary::from_parts(subwords, merges))
}

impl Vocabulary {
    fn from_parts(subwords: Vec<String>, merges: Vec<(String, String)>) -> Self {
        let index = subwords
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        let max_piece_chars = subwords
            .iter()
            .map(|s| s.strip_prefix(CONTINUATION).unwrap_or(s).chars().count())
            .max()
            .unwrap_or(1);
        Vocabulary {
            subwords,
            merges,
            index,
            max_piece_chars,
        }
    }

    pub fn size(&self) -> usize {
        self.subwords.len()
    }

    pub fn subwords(&self) -> &[String] {
        &self.subwords
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.subwords.get(id as usize).map(String::as_str)
    }

    pub fn special_ids(&self) -> BTreeMap<&'static str, u32> {
        SPECIAL_TOKENS.iter().enumerate().map(|(i, s)| (*s, i as u32)).collect()
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIAL_TOKENS.len()
    }

    /// Greedy longest-match segmentation, word by word.
    pub fn encode(&self, text: &str) -> Encoding {
        let mut enc = Encoding::default();
        for (wi, word) in text.split_whitespace().enumerate() {
            let chars: Vec<char> = word.chars().collect();
            let mut pos = 0;
            let mut key = String::new();
            while pos < chars.len() {
                let first = pos == 0;
                let max_end = chars.len().min(pos + self.max_piece_chars);
                let mut matched = None;
                for end in (pos + 1..=max_end).rev() {
                    key.clear();
                    if !first {
                        key.push_str(CONTINUATION);
                    }
                    key.extend(&chars[pos..end]);
                    if let Some(&id) = self.index.get(key.as_str()) {
                        if !Self::is_special(id) {
                            matched = Some((id, end));
                            break;
                        }
                    }
                }
                let (id, end) = matched.unwrap_or((UNK, pos + 1));
                enc.ids.push(id);
                enc.word_index.push(wi);
                pos = end;
            }
        }
        enc
    }

    pub fn encode_ids(&self, text: &str) -> Vec<u32> {
        self.encode(text).ids
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        let mut in_word = false;
        for &id in ids {
            let piece = self
                .subwords
                .get(id as usize)
                .ok_or(TokenizerError::IdOutOfRange { id, size: self.size() })?;
            if Self::is_special(id) {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(piece);
                in_word = false;
                continue;
            }
            match piece.strip_prefix(CONTINUATION) {
                Some(rest) if in_word => out.push_str(rest),
                Some(rest) => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(rest);
                    in_word = true;
                }
                None => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(piece);
                    in_word = true;
                }
            }
        }
        Ok(out)
    }

    /// Whether `text` survives the subword length filter.
    pub fn fits(&self, text: &str) -> bool {
        self.encode(text).len() <= MAX_SENTENCE_SUBWORDS
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut s = String::new();
        writeln!(s, "{VOCAB_MAGIC} {}", self.size()).unwrap();
        for piece in &self.subwords {
            s.push_str(piece);
            s.push('\n');
        }
        s.push_str(MERGES_MARKER);
        s.push('\n');
        for (l, r) in &self.merges {
            writeln!(s, "{l} {r}").unwrap();
        }
        w.write_all(s.as_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, TokenizerError> {
        let fmt = |line: usize, msg: &str| TokenizerError::Format {
            line,
            msg: msg.to_string(),
        };
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| fmt(1, "missing header"))??;
        let size: usize = header
            .strip_prefix(VOCAB_MAGIC)
            .and_then(|rest| rest.trim().parse().ok())
            .ok_or_else(|| fmt(1, "expected `bdlm-vocab v1 <size>`"))?;
        let mut subwords = Vec::with_capacity(size);
        for i in 0..size {
            let line = lines.next().ok_or_else(|| fmt(i + 2, "truncated subword list"))??;
            subwords.push(line);
        }
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if subwords.get(i).map(String::as_str) != Some(*special) {
                return Err(fmt(i + 2, "special token block out of order"));
            }
        }
        let marker_line = size + 2;
        match lines.next() {
            Some(Ok(l)) if l == MERGES_MARKER => {}
            _ => return Err(fmt(marker_line, "expected `#merges`")),
        }
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| fmt(marker_line + 1 + i, "merge needs two symbols"))?;
            merges.push((l.to_string(), r.to_string()));
        }
        Ok(Vocabulary::from_parts(subwords, merges))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TokenizerError> {
        Self::read_from(bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const N_SPECIAL: usize = SPECIAL_TOKENS.len();

    #[test]
    fn merges_most_frequent_pair() {
        let v = build_vocab(&["aa aa aa"], N_SPECIAL + 3).unwrap();
        assert!(v.id("a").is_some());
        assert!(v.id("aa").is_some());
        assert_eq!(v.size(), N_SPECIAL + 3);
        assert_eq!(v.merges(), &[("a".to_string(), "##a".to_string())]);
    }

    #[test]
    fn single_char_alphabet_has_no_merges() {
        let v = build_vocab(&["x"], N_SPECIAL + 1).unwrap();
        assert_eq!(v.size(), N_SPECIAL + 1);
        assert_eq!(v.token(N_SPECIAL as u32), Some("x"));
        assert!(v.merges().is_empty());
    }

    #[test]
    fn empty_corpus_rejected() {
        let empty: [&str; 0] = [];
        assert!(matches!(build_vocab(&empty, 100), Err(TokenizerError::EmptyCorpus)));
        assert!(matches!(build_vocab(&["   "], 100), Err(TokenizerError::EmptyCorpus)));
    }

    #[test]
    fn too_small_target_rejected() {
        let err = build_vocab(&["ab"], N_SPECIAL + 1).unwrap_err();
        assert!(matches!(
            err,
            TokenizerError::TargetSizeTooSmall { needed, .. } if needed == N_SPECIAL + 2
        ));
    }

    #[test]
    fn ties_break_on_smallest_pair() {
        // "ab" and "cd" both occur once; ("a","##b") < ("c","##d").
        let v = build_vocab(&["ab cd"], N_SPECIAL + 5).unwrap();
        assert_eq!(v.merges()[0], ("a".to_string(), "##b".to_string()));
    }

    #[test]
    fn encode_traces_greedy_segmentation() {
        let v = build_vocab(&["aa aa aa"], N_SPECIAL + 3).unwrap();
        let aa = v.id("aa").unwrap();
        let enc = v.encode("aa aa");
        assert_eq!(enc.ids, vec![aa, aa]);
        assert_eq!(enc.word_index, vec![0, 1]);
        assert!(v.encode("").is_empty());
        let a = v.id("a").unwrap();
        let cont = v.id("##a").unwrap();
        assert_eq!(v.encode("aaa").ids, vec![aa, cont]);
        assert_eq!(v.encode("a").ids, vec![a]);
    }

    #[test]
    fn unknown_char_maps_to_unk() {
        let v = build_vocab(&["aa aa aa"], N_SPECIAL + 3).unwrap();
        let enc = v.encode("aza");
        assert!(enc.ids.contains(&UNK));
        assert_eq!(enc.word_index, vec![0, 0, 0]);
    }

    #[test]
    fn decode_round_trip_and_errors() {
        let v = build_vocab(&["aa aa aa"], N_SPECIAL + 3).unwrap();
        assert_eq!(v.decode(&v.encode_ids("aa aa")).unwrap(), "aa aa");
        assert_eq!(v.decode(&[]).unwrap(), "");
        assert!(matches!(
            v.decode(&[v.size() as u32]),
            Err(TokenizerError::IdOutOfRange { .. })
        ));
        assert_eq!(v.decode(&[MASK, v.id("aa").unwrap()]).unwrap(), "[mask] aa");
    }

    #[test]
    fn reserved_tokens_match_whole_words() {
        let reserved = vec!["B-ADJ".to_string(), "E-ADJ".to_string()];
        let v = build_vocab_with_reserved(&["ab ab"], &reserved, 40).unwrap();
        assert_eq!(v.id("B-ADJ"), Some(N_SPECIAL as u32));
        let enc = v.encode("B-ADJ E-ADJ");
        assert_eq!(enc.ids, vec![N_SPECIAL as u32, N_SPECIAL as u32 + 1]);
        assert_eq!(v.decode(&enc.ids).unwrap(), "B-ADJ E-ADJ");
    }

    #[test]
    fn word_span_maps_words_to_subwords() {
        let v = build_vocab(&["ab c ab"], N_SPECIAL + 3).unwrap();
        let enc = v.encode("c ab c");
        // "ab" stays split: a + ##b.
        assert_eq!(enc.word_index, vec![0, 1, 1, 2]);
        assert_eq!(enc.word_span(1, 1), 1..3);
        assert_eq!(enc.word_span(1, 2), 1..4);
        assert_eq!(enc.word_span(0, 1), 0..1);
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let v = build_vocab(&["the cat sat on the mat", "#merges x"], 60).unwrap();
        let bytes = v.to_bytes();
        let back = Vocabulary::from_bytes(&bytes).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_bytes(), bytes);
        assert!(bytes.starts_with(format!("bdlm-vocab v1 {}\n", v.size()).as_bytes()));
    }

    #[test]
    fn malformed_vocab_file() {
        assert!(Vocabulary::from_bytes(b"nope\n").is_err());
        assert!(Vocabulary::from_bytes(b"bdlm-vocab v1 3\n[pad]\n[unk]\n").is_err());
    }
}
