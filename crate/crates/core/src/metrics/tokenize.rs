use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::text::split_words;

pub const CONTINUATION: &str = "##";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    Word,
    Subword,
}

impl std::str::FromStr for TokenizerMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "word" => Ok(Self::Word),
            "subword" => Ok(Self::Subword),
            other => Err(format!(
                "unknown tokenizer {other:?} (expected word or subword)"
            )),
        }
    }
}

/// Pair-merge subword vocabulary learned from a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubwordModel {
    pub merges: Vec<(String, String)>,
    pub pieces: BTreeSet<String>,
}

impl SubwordModel {
    /// Learns up to `merges` pair merges over word-mode tokens of `corpus`.
    /// The most frequent adjacent pair wins; ties go to the smaller pair.
    pub fn learn<S: AsRef<str>>(corpus: &[S], merges: usize) -> Self {
        let mut words: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for doc in corpus {
            for w in split_words(doc.as_ref()) {
                *words
                    .entry(w.chars().map(String::from).collect())
                    .or_default() += 1;
            }
        }
        let mut pieces: BTreeSet<String> = words.keys().flatten().cloned().collect();
        let mut learned = Vec::new();
        for _ in 0..merges {
            let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (w, &c) in &words {
                for p in w.windows(2) {
                    *pairs.entry((&p[0], &p[1])).or_default() += c;
                }
            }
            let Some(((a, b), _)) = pairs
                .into_iter()
                .max_by(|x, y| x.1.cmp(&y.1).then_with(|| y.0.cmp(&x.0)))
            else {
                break;
            };
            let (a, b) = (a.to_string(), b.to_string());
            let joined = format!("{a}{b}");
            words = words
                .into_iter()
                .map(|(w, c)| {
                    let mut out = Vec::with_capacity(w.len());
                    let mut i = 0;
                    while i < w.len() {
                        if i + 1 < w.len() && w[i] == a && w[i + 1] == b {
                            out.push(joined.clone());
                            i += 2;
                        } else {
                            out.push(w[i].clone());
                            i += 1;
                        }
                    }
                    (out, c)
                })
                .fold(BTreeMap::new(), |mut m, (w, c)| {
                    *m.entry(w).or_default() += c;
                    m
                });
            pieces.insert(joined);
            learned.push((a, b));
        }
        Self {
            merges: learned,
            pieces,
        }
    }

    /// Greedy longest-match segmentation of one word; unknown characters
    /// become single-character pieces. Non-initial pieces carry the
    /// continuation prefix.
    pub fn segment(&self, word: &str) -> Vec<String> {
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let mut end = chars.len();
            while end > i + 1 {
                let s: String = chars[i..end].iter().collect();
                if self.pieces.contains(&s) {
                    break;
                }
                end -= 1;
            }
            let piece: String = chars[i..end].iter().collect();
            out.push(if i == 0 {
                piece
            } else {
                format!("{CONTINUATION}{piece}")
            });
            i = end;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tokenizer {
    Word,
    Subword(SubwordModel),
}

impl Tokenizer {
    pub fn mode(&self) -> TokenizerMode {
        match self {
            Tokenizer::Word => TokenizerMode::Word,
            Tokenizer::Subword(_) => TokenizerMode::Subword,
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let words = split_words(text);
        match self {
            Tokenizer::Word => words,
            Tokenizer::Subword(m) => words.iter().flat_map(|w| m.segment(w)).collect(),
        }
    }
}

/// Rejoins continuation pieces onto their word.
pub fn detokenize(tokens: &[String]) -> String {
    let mut words: Vec<String> = Vec::new();
    for t in tokens {
        match (t.strip_prefix(CONTINUATION), words.last_mut()) {
            (Some(rest), Some(last)) => last.push_str(rest),
            _ => words.push(t.clone()),
        }
    }
    words.join(" ")
}
