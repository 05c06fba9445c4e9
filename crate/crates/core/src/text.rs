//! Model-side tokenization and the closed report vocabulary.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clinic::{Registry, ShapeFamily, NORMAL_TEMPLATE};

pub const PAD: &str = "<pad>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const GEN: &str = "<gen>";
pub const REP: &str = "<rep>";
pub const SPECIALS: [&str; 5] = [PAD, EOS, UNK, GEN, REP];

pub const REPRESENTATION_INSTRUCTION: &str =
    "Summarize the following cranial diagnosis in one word:";
pub const GENERATION_INSTRUCTION: &str = "Generate the findings report for the given brain scan:";

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TextError {
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token id {0} out of vocabulary")]
    UnknownId(usize),
}

/// Lowercases and splits on whitespace; `.`, `:`, `,`, `;` become their own
/// tokens. Underscores stay inside words.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let mut cur = String::new();
        for ch in raw.chars() {
            if matches!(ch, '.' | ':' | ',' | ';') {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Specials first, then every word the templates, names and
    /// instructions can produce, sorted.
    pub fn from_registry(registry: &Registry) -> Self {
        let mut words = BTreeSet::new();
        let mut add = |s: &str| words.extend(split_words(s));
        add(REPRESENTATION_INSTRUCTION);
        add(GENERATION_INSTRUCTION);
        add(&NORMAL_TEMPLATE.replace("{name}", ""));
        for fam in [
            ShapeFamily::Ellipse,
            ShapeFamily::Rectangle,
            ShapeFamily::Ring,
        ] {
            add(&fam.abnormal_template().replace("{name}", ""));
        }
        for e in &registry.entities {
            add(&e.name);
            add(&e.abnormal_template.replace("{name}", ""));
            add(&e.normal_template.replace("{name}", ""));
        }
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn eos(&self) -> usize {
        self.index[EOS]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, TextError> {
        split_words(text)
            .into_iter()
            .map(|w| self.id(&w).ok_or(TextError::UnknownToken(w)))
            .collect()
    }

    /// Instruction sequence: a distinguishing special token followed by the
    /// prompt words.
    pub fn instruction(&self, special: &str, text: &str) -> Result<Vec<usize>, TextError> {
        let head = self
            .id(special)
            .ok_or_else(|| TextError::UnknownToken(special.to_string()))?;
        let mut ids = vec![head];
        ids.extend(self.encode(text)?);
        Ok(ids)
    }

    /// Space-joined tokens up to the first end token.
    pub fn decode(&self, ids: &[usize]) -> Result<String, TextError> {
        let eos = self.eos();
        let mut words = Vec::new();
        for &id in ids {
            if id == eos {
                break;
            }
            words.push(self.token(id).ok_or(TextError::UnknownId(id))?);
        }
        Ok(words.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clinic::make_registry;

    #[test]
    fn split_words_separates_punctuation() {
        assert_eq!(
            split_words("Summarize the Basal_Ganglia in one word:"),
            vec![
                "summarize",
                "the",
                "basal_ganglia",
                "in",
                "one",
                "word",
                ":"
            ]
        );
        assert_eq!(split_words("a . b"), vec!["a", ".", "b"]);
    }

    #[test]
    fn vocab_is_closed_over_templates() {
        let (reg, _) = make_registry(0);
        let v = Vocab::from_registry(&reg);
        for e in &reg.entities {
            assert!(v.encode(&e.abnormal_sentence()).is_ok());
            assert!(v.encode(&e.normal_sentence()).is_ok());
        }
        assert_eq!(v.len(), 60);
        assert!(v.encode("unseen").is_err());
        let ids = v.encode("thalamus is normal .").unwrap();
        assert_eq!(v.decode(&ids).unwrap(), "thalamus is normal .");
    }
}
