//! Bilingual dictionary: loading, merging, cleaning, coverage and phrase lookup.
//!
//! Dictionary files are JSONL, one record per line:
//!
//! ```text
//! {"headword": "活泼 开朗", "language": "zh", "kind": "translation", "payloads": ["lively and cheerful", "outgoing"]}
//! ```
//!
//! Entries are keyed by `(language, headword)`. Headwords may span several
//! whitespace-separated words; matching treats such phrases as a unit.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_space, MonoCorpus};

#[derive(Debug, Error)]
pub enum DictError {
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("{file}: headword `{headword}` declared as both `{first}` and `{second}`")]
    ConflictingLanguage {
        file: String,
        headword: String,
        first: String,
        second: String,
    },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("no sentences in language `{0}`")]
    UnknownLanguage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InfoKind {
    Translation,
    Pos,
    Synonym,
    Definition,
    #[serde(rename = "ne")]
    NamedEntity,
}

impl InfoKind {
    pub const ALL: [InfoKind; 5] = [
        InfoKind::Translation,
        InfoKind::Pos,
        InfoKind::Synonym,
        InfoKind::Definition,
        InfoKind::NamedEntity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InfoKind::Translation => "translation",
            InfoKind::Pos => "pos",
            InfoKind::Synonym => "synonym",
            InfoKind::Definition => "definition",
            InfoKind::NamedEntity => "ne",
        }
    }

    /// POS and NE payloads are chunk tags expanded with B/M/E/O prefixes.
    pub fn is_tag(self) -> bool {
        matches!(self, InfoKind::Pos | InfoKind::NamedEntity)
    }
}

impl fmt::Display for InfoKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InfoKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        InfoKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown info kind `{s}` (translation|pos|synonym|definition|ne)"))
    }
}

/// Expands a chunk tag over `n_words` words: `O-X` for a single word,
/// otherwise `B-X`, `M-X`..., `E-X`.
pub fn expand_tag(tag: &str, n_words: usize) -> Vec<String> {
    match n_words {
        0 => Vec::new(),
        1 => vec![format!("O-{tag}")],
        n => (0..n)
            .map(|i| {
                let prefix = if i == 0 {
                    'B'
                } else if i + 1 == n {
                    'E'
                } else {
                    'M'
                };
                format!("{prefix}-{tag}")
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DictEntry {
    pub headword: String,
    pub language: String,
    pub payloads: BTreeMap<InfoKind, Vec<String>>,
}

impl DictEntry {
    pub fn payloads(&self, kind: InfoKind) -> &[String] {
        self.payloads.get(&kind).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn word_count(&self) -> usize {
        self.headword.split_whitespace().count()
    }

    fn push_payloads(&mut self, kind: InfoKind, items: impl IntoIterator<Item = String>) {
        let list = self.payloads.entry(kind).or_default();
        for item in items {
            if !list.contains(&item) {
                list.push(item);
            }
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct Record {
    headword: String,
    language: String,
    kind: String,
    payloads: Vec<String>,
}

/// A dictionary span match inside a sentence, in word units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhraseMatch<'a> {
    pub start: usize,
    pub len: usize,
    pub entry: &'a DictEntry,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BilingualDictionary {
    entries: Vec<DictEntry>,
    index: HashMap<(String, String), usize>,
    max_phrase_len: usize,
}

impl BilingualDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[DictEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_phrase_len(&self) -> usize {
        self.max_phrase_len
    }

    pub fn get(&self, language: &str, headword: &str) -> Option<&DictEntry> {
        self.index
            .get(&(language.to_string(), headword.to_string()))
            .map(|&i| &self.entries[i])
    }

    /// Adds payloads to the `(language, headword)` entry, creating it if needed.
    /// Duplicates are dropped; first-seen order is kept.
    pub fn insert(
        &mut self,
        language: &str,
        headword: &str,
        kind: InfoKind,
        payloads: impl IntoIterator<Item = String>,
    ) {
        let headword = normalize_space(headword);
        let payloads: Vec<String> = payloads
            .into_iter()
            .map(|p| normalize_space(&p))
            .filter(|p| !p.is_empty())
            .collect();
        if headword.is_empty() || payloads.is_empty() {
            return;
        }
        let key = (language.to_string(), headword.clone());
        let idx = match self.index.get(&key) {
            Some(&i) => i,
            None => {
                self.entries.push(DictEntry {
                    headword: headword.clone(),
                    language: language.to_string(),
                    payloads: BTreeMap::new(),
                });
                self.index.insert(key, self.entries.len() - 1);
                self.max_phrase_len = self.max_phrase_len.max(headword.split(' ').count());
                self.entries.len() - 1
            }
        };
        self.entries[idx].push_payloads(kind, payloads);
    }

    /// Merges one JSONL source into this dictionary.
    pub fn merge_jsonl(&mut self, file: &str, text: &str) -> Result<(), DictError> {
        let mut declared: HashMap<String, String> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| DictError::Parse {
                file: file.to_string(),
                line: i + 1,
                msg,
            };
            let rec: Record = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            let kind: InfoKind = rec.kind.parse().map_err(parse_err)?;
            let headword = normalize_space(&rec.headword);
            if headword.is_empty() {
                return Err(parse_err("empty headword".into()));
            }
            if rec.language.trim().is_empty() {
                return Err(parse_err("empty language".into()));
            }
            match declared.get(&headword) {
                Some(lang) if *lang != rec.language => {
                    return Err(DictError::ConflictingLanguage {
                        file: file.to_string(),
                        headword,
                        first: lang.clone(),
                        second: rec.language,
                    })
                }
                Some(_) => {}
                None => {
                    declared.insert(headword.clone(), rec.language.clone());
                }
            }
            self.insert(&rec.language, &headword, kind, rec.payloads);
        }
        Ok(())
    }

    pub fn load_and_merge<P: AsRef<Path>>(sources: &[P]) -> Result<Self, DictError> {
        let mut dict = BilingualDictionary::new();
        for path in sources {
            let path = path.as_ref();
            let text = fs::read_to_string(path).map_err(|source| DictError::Io {
                path: path.display().to_string(),
                source,
            })?;
            dict.merge_jsonl(&path.display().to_string(), &text)?;
        }
        Ok(dict)
    }

    /// One JSONL record per (entry, kind), entries in insertion order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            for (kind, payloads) in &e.payloads {
                let rec = Record {
                    headword: e.headword.clone(),
                    language: e.language.clone(),
                    kind: kind.as_str().to_string(),
                    payloads: payloads.clone(),
                };
                out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
                out.push('\n');
            }
        }
        out
    }

    /// Keeps only translations whose words all occur in `corpus`; entries left
    /// without a translation are dropped with all their other payloads.
    pub fn clean<S: AsRef<str>>(&self, corpus: &[S]) -> Result<Self, DictError> {
        if corpus.is_empty() {
            return Err(DictError::EmptyCorpus);
        }
        let vocab: HashSet<&str> = corpus.iter().flat_map(|s| s.as_ref().split_whitespace()).collect();
        let mut out = BilingualDictionary::new();
        for e in &self.entries {
            let kept: Vec<String> = e
                .payloads(InfoKind::Translation)
                .iter()
                .filter(|t| t.split_whitespace().all(|w| vocab.contains(w)))
                .cloned()
                .collect();
            if kept.is_empty() {
                continue;
            }
            for (kind, payloads) in &e.payloads {
                let items = if *kind == InfoKind::Translation {
                    kept.clone()
                } else {
                    payloads.clone()
                };
                out.insert(&e.language, &e.headword, *kind, items);
            }
        }
        Ok(out)
    }

    /// Greedy leftmost-longest, non-overlapping headword matches.
    pub fn match_phrases<'a, W: AsRef<str>>(&'a self, words: &[W], language: &str) -> Vec<PhraseMatch<'a>> {
        let mut out = Vec::new();
        let mut key = (language.to_string(), String::new());
        let mut i = 0;
        while i < words.len() {
            let longest = self.max_phrase_len.min(words.len() - i);
            let mut hit = None;
            for len in (1..=longest).rev() {
                key.1.clear();
                for (k, w) in words[i..i + len].iter().enumerate() {
                    if k > 0 {
                        key.1.push(' ');
                    }
                    key.1.push_str(w.as_ref());
                }
                if let Some(&idx) = self.index.get(&key) {
                    hit = Some((len, idx));
                    break;
                }
            }
            match hit {
                Some((len, idx)) => {
                    out.push(PhraseMatch {
                        start: i,
                        len,
                        entry: &self.entries[idx],
                    });
                    i += len;
                }
                None => i += 1,
            }
        }
        out
    }

    /// Fraction of `language` word tokens covered by a headword match.
    pub fn coverage(&self, corpus: &MonoCorpus, language: &str) -> Result<f64, DictError> {
        if corpus.is_empty() {
            return Err(DictError::EmptyCorpus);
        }
        let mut total = 0usize;
        let mut covered = 0usize;
        for s in corpus.sentences.iter().filter(|s| s.language == language) {
            let words = s.words();
            total += words.len();
            covered += self
                .match_phrases(&words, language)
                .iter()
                .map(|m| m.len)
                .sum::<usize>();
        }
        if total == 0 {
            return Err(DictError::UnknownLanguage(language.to_string()));
        }
        Ok(covered as f64 / total as f64)
    }

    /// Coverage for every language present in the corpus.
    pub fn coverage_report(&self, corpus: &MonoCorpus) -> Result<BTreeMap<String, f64>, DictError> {
        if corpus.is_empty() {
            return Err(DictError::EmptyCorpus);
        }
        corpus
            .languages()
            .into_iter()
            .map(|lang| self.coverage(corpus, &lang).map(|c| (lang, c)))
            .collect()
    }
}
