//! Token type ids: one per language, then one per non-translation info kind.

use crate::dictionary::InfoKind;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeMap {
    languages: Vec<String>,
}

impl TypeMap {
    pub fn new<S: Into<String>>(languages: impl IntoIterator<Item = S>) -> Self {
        TypeMap {
            languages: languages.into_iter().map(Into::into).collect(),
        }
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn n_types(&self) -> usize {
        self.languages.len() + 4
    }

    pub fn language(&self, lang: &str) -> Option<u32> {
        self.languages.iter().position(|l| l == lang).map(|i| i as u32)
    }

    /// Type of a token carrying `kind` information about a word of the
    /// language with type id `lang_type`. Translations take the type of the
    /// other language; `None` if there is no other language.
    pub fn info(&self, kind: InfoKind, lang_type: u32) -> Option<u32> {
        let n = self.languages.len() as u32;
        match kind {
            InfoKind::Translation => (0..n).find(|&t| t != lang_type),
            InfoKind::Pos => Some(n),
            InfoKind::Synonym => Some(n + 1),
            InfoKind::Definition => Some(n + 2),
            InfoKind::NamedEntity => Some(n + 3),
        }
    }

    pub fn join(&self) -> String {
        self.languages.join(",")
    }
}
