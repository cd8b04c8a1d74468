//! Corpus containers and their text formats.
//!
//! Monolingual corpora are UTF-8, one whitespace-pre-tokenized sentence per
//! line. Parallel corpora are TSV lines: `source<TAB>target`.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{file}:{line}: expected `source<TAB>target`")]
    BadTsv { file: String, line: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub language: String,
    pub text: String,
}

impl Sentence {
    pub fn new(language: impl Into<String>, text: impl Into<String>) -> Self {
        Sentence {
            language: language.into(),
            text: text.into(),
        }
    }

    pub fn words(&self) -> Vec<&str> {
        self.text.split_whitespace().collect()
    }
}

/// Sentences from any number of languages, each tagged with its language.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MonoCorpus {
    pub sentences: Vec<Sentence>,
}

impl MonoCorpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_lines(&mut self, language: &str, text: &str) {
        self.sentences.extend(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(|l| Sentence::new(language, normalize_space(l))),
        );
    }

    pub fn load(&mut self, language: &str, path: &Path) -> Result<(), CorpusError> {
        let text = read(path)?;
        self.push_lines(language, &text);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.sentences.iter().map(|s| s.text.as_str()).collect()
    }

    pub fn languages(&self) -> Vec<String> {
        let mut langs: Vec<String> = self.sentences.iter().map(|s| s.language.clone()).collect();
        langs.sort();
        langs.dedup();
        langs
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub src_lang: String,
    pub tgt_lang: String,
    pub pairs: Vec<(String, String)>,
}

impl ParallelCorpus {
    pub fn new(src_lang: impl Into<String>, tgt_lang: impl Into<String>) -> Self {
        ParallelCorpus {
            src_lang: src_lang.into(),
            tgt_lang: tgt_lang.into(),
            pairs: Vec::new(),
        }
    }

    pub fn parse_tsv(&mut self, file: &str, text: &str) -> Result<(), CorpusError> {
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (s, t) = line.split_once('\t').ok_or(CorpusError::BadTsv {
                file: file.to_string(),
                line: i + 1,
            })?;
            self.pairs.push((normalize_space(s), normalize_space(t)));
        }
        Ok(())
    }

    pub fn load_tsv(src_lang: &str, tgt_lang: &str, path: &Path) -> Result<ParallelCorpus, CorpusError> {
        let mut c = ParallelCorpus::new(src_lang, tgt_lang);
        c.parse_tsv(&path.display().to_string(), &read(path)?)?;
        Ok(c)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (a, b) in &self.pairs {
            s.push_str(a);
            s.push('\t');
            s.push_str(b);
            s.push('\n');
        }
        s
    }

    /// Both sides as monolingual data.
    pub fn monolingual(&self) -> MonoCorpus {
        let mut mono = MonoCorpus::new();
        for (s, _) in &self.pairs {
            mono.sentences.push(Sentence::new(&self.src_lang, s.clone()));
        }
        for (_, t) in &self.pairs {
            mono.sentences.push(Sentence::new(&self.tgt_lang, t.clone()));
        }
        mono
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn normalize_space(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn read(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}
