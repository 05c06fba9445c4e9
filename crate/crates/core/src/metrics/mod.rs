//! Corpus-level report metrics: BLEU-1..4, METEOR-exact, ROUGE-L, CIDEr-D and
//! keyword clinical efficacy.

mod tokenize;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use tokenize::{detokenize, SubwordModel, Tokenizer, TokenizerMode, CONTINUATION};

use crate::text::split_words;

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_MAX_N: usize = 4;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{0} candidates for {1} references")]
    Length(usize, usize),
    #[error("CIDEr-D needs at least 2 corpus documents, got {0}")]
    SingleDocument(usize),
    #[error("empty keyword list")]
    NoKeywords,
    #[error("n-gram order must be at least 1")]
    Order,
}

type Tokens = [Vec<String>];

fn check(c: &Tokens, r: &Tokens) -> Result<(), MetricError> {
    if c.len() != r.len() {
        return Err(MetricError::Length(c.len(), r.len()));
    }
    if c.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU: geometric mean of clipped n-gram precisions for orders
/// `1..=n`, times the corpus brevity penalty. No smoothing.
pub fn bleu_n(candidates: &Tokens, references: &Tokens, n: usize) -> Result<f64, MetricError> {
    check(candidates, references)?;
    if n == 0 {
        return Err(MetricError::Order);
    }
    let mut log_p = 0.0;
    for k in 1..=n {
        let (mut hit, mut total) = (0usize, 0usize);
        for (c, r) in candidates.iter().zip(references) {
            let rc = ngram_counts(r, k);
            for (g, cnt) in ngram_counts(c, k) {
                hit += cnt.min(rc.get(g).copied().unwrap_or(0));
                total += cnt;
            }
        }
        if hit == 0 {
            return Ok(0.0);
        }
        log_p += (hit as f64 / total as f64).ln();
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    let bp = if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    Ok(bp * (log_p / n as f64).exp())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence ROUGE-L F-measure with `beta`.
pub fn rouge_l_pair(candidate: &[String], reference: &[String], beta: f64) -> f64 {
    let l = lcs(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean sentence ROUGE-L (beta 1.2) over pairs.
pub fn rouge_l(candidates: &Tokens, references: &Tokens) -> Result<f64, MetricError> {
    check(candidates, references)?;
    let s: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_l_pair(c, r, ROUGE_BETA))
        .sum();
    Ok(s / candidates.len() as f64)
}

struct TfIdf<'a> {
    vec: HashMap<&'a [String], f64>,
    norm: f64,
    len: usize,
}

fn tfidf<'a>(
    tokens: &'a [String],
    n: usize,
    df: &HashMap<&[String], usize>,
    log_n: f64,
) -> TfIdf<'a> {
    let vec: HashMap<&[String], f64> = ngram_counts(tokens, n)
        .into_iter()
        .map(|(g, c)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g, c as f64 * (log_n - d.ln()))
        })
        .collect();
    let norm = vec.values().map(|v| v * v).sum::<f64>().sqrt();
    TfIdf {
        vec,
        norm,
        len: tokens.len(),
    }
}

/// CIDEr-D: per-order clipped tf-idf cosine with a Gaussian length penalty,
/// averaged over orders 1..=4, scaled by 10 and averaged over candidates.
/// Document frequencies come from `corpus_refs`. An order whose tf-idf
/// vectors are both zero scores 1 when the raw n-gram counts agree.
pub fn cider_d(
    candidates: &Tokens,
    references: &Tokens,
    corpus_refs: &Tokens,
) -> Result<f64, MetricError> {
    check(candidates, references)?;
    if corpus_refs.len() < 2 {
        return Err(MetricError::SingleDocument(corpus_refs.len()));
    }
    let log_n = (corpus_refs.len() as f64).ln();
    let mut total = 0.0;
    for n in 1..=CIDER_MAX_N {
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for doc in corpus_refs {
            for g in ngram_counts(doc, n).into_keys() {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        for (c, r) in candidates.iter().zip(references) {
            let (vc, vr) = (tfidf(c, n, &df, log_n), tfidf(r, n, &df, log_n));
            let mut dot = 0.0;
            for (g, &x) in &vc.vec {
                if let Some(&y) = vr.vec.get(g) {
                    dot += x.min(y) * y;
                }
            }
            let cosine = if vc.norm != 0.0 && vr.norm != 0.0 {
                dot / (vc.norm * vr.norm)
            } else if vc.norm == 0.0 && vr.norm == 0.0 && ngram_counts(c, n) == ngram_counts(r, n) {
                1.0
            } else {
                0.0
            };
            let delta = vc.len as f64 - vr.len as f64;
            total += cosine * (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        }
    }
    Ok(total / CIDER_MAX_N as f64 * 10.0 / candidates.len() as f64)
}

/// Exact-match METEOR for one pair.
pub fn meteor_pair(candidate: &[String], reference: &[String]) -> f64 {
    let mut used = vec![false; reference.len()];
    let mut align: Vec<usize> = Vec::new();
    for t in candidate {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && &reference[j] == t) {
            used[j] = true;
            align.push(j);
        } else {
            align.push(usize::MAX);
        }
    }
    let matched: Vec<(usize, usize)> = align
        .iter()
        .enumerate()
        .filter(|(_, &j)| j != usize::MAX)
        .map(|(i, &j)| (i, j))
        .collect();
    let m = matched.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + matched
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let frag = chunks as f64 / m as f64;
    f_mean * (1.0 - 0.5 * frag.powi(3))
}

pub fn meteor_exact(candidates: &Tokens, references: &Tokens) -> Result<f64, MetricError> {
    check(candidates, references)?;
    let s: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| meteor_pair(c, r))
        .sum();
    Ok(s / candidates.len() as f64)
}

/// Keywords asserted as abnormal in `text`: present in a sentence that is not
/// exactly `"{keyword} is normal"`.
pub fn asserted_keywords(text: &str, keywords: &[String]) -> BTreeSet<String> {
    let words = split_words(text);
    let mut out = BTreeSet::new();
    for sentence in words.split(|w| w == ".") {
        for w in sentence {
            if !keywords.contains(w) {
                continue;
            }
            let negated = sentence.len() == 3
                && &sentence[0] == w
                && sentence[1] == "is"
                && sentence[2] == "normal";
            if !negated {
                out.insert(w.clone());
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClinicalScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro-averaged keyword precision, recall and F1. A corpus with no
/// predicted and no reference keywords scores 1 throughout.
pub fn clinical_from_sets(pairs: &[(BTreeSet<String>, BTreeSet<String>)]) -> ClinicalScore {
    let (mut tp, mut np, mut nr) = (0usize, 0usize, 0usize);
    for (p, r) in pairs {
        tp += p.intersection(r).count();
        np += p.len();
        nr += r.len();
    }
    if np == 0 && nr == 0 {
        return ClinicalScore {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let precision = if np == 0 { 0.0 } else { tp as f64 / np as f64 };
    let recall = if nr == 0 { 0.0 } else { tp as f64 / nr as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClinicalScore {
        precision,
        recall,
        f1,
    }
}

pub fn clinical_f1<S: AsRef<str>>(
    candidates: &[S],
    references: &[S],
    keywords: &[String],
) -> Result<ClinicalScore, MetricError> {
    if keywords.is_empty() {
        return Err(MetricError::NoKeywords);
    }
    if candidates.len() != references.len() {
        return Err(MetricError::Length(candidates.len(), references.len()));
    }
    if candidates.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let pairs: Vec<_> = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| {
            (
                asserted_keywords(c.as_ref(), keywords),
                asserted_keywords(r.as_ref(), keywords),
            )
        })
        .collect();
    Ok(clinical_from_sets(&pairs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "B1")]
    pub b1: f64,
    #[serde(rename = "B2")]
    pub b2: f64,
    #[serde(rename = "B3")]
    pub b3: f64,
    #[serde(rename = "B4")]
    pub b4: f64,
    #[serde(rename = "METEOR_exact")]
    pub meteor_exact: f64,
    #[serde(rename = "ROUGE_L")]
    pub rouge_l: f64,
    #[serde(rename = "CIDEr_D")]
    pub cider_d: f64,
    pub clinical_precision: f64,
    pub clinical_recall: f64,
    #[serde(rename = "clinical_F1")]
    pub clinical_f1: f64,
}

impl MetricsReport {
    pub const TABLE_HEADER: [&'static str; 8] = ["B1", "B2", "B3", "B4", "M", "RG", "C", "F1"];

    /// The table columns in order, unscaled.
    pub fn columns(&self) -> [f64; 8] {
        [
            self.b1,
            self.b2,
            self.b3,
            self.b4,
            self.meteor_exact,
            self.rouge_l,
            self.cider_d,
            self.clinical_f1,
        ]
    }

    /// One fixed-order row scaled by 100.
    pub fn table_row(&self) -> String {
        self.columns()
            .iter()
            .map(|v| format!("{:>7.1}", v * 100.0))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Field-wise mean; all zeros for an empty slice.
    pub fn mean(reports: &[MetricsReport]) -> MetricsReport {
        let n = reports.len().max(1) as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        MetricsReport {
            b1: avg(|r| r.b1),
            b2: avg(|r| r.b2),
            b3: avg(|r| r.b3),
            b4: avg(|r| r.b4),
            meteor_exact: avg(|r| r.meteor_exact),
            rouge_l: avg(|r| r.rouge_l),
            cider_d: avg(|r| r.cider_d),
            clinical_precision: avg(|r| r.clinical_precision),
            clinical_recall: avg(|r| r.clinical_recall),
            clinical_f1: avg(|r| r.clinical_f1),
        }
    }

    pub fn table_header() -> String {
        Self::TABLE_HEADER
            .iter()
            .map(|h| format!("{h:>7}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Scores generated reports against references. Clinical efficacy always
/// reads word-level sentences; NLG metrics use `tokenizer`.
pub fn score_corpus<S: AsRef<str>>(
    candidates: &[S],
    references: &[S],
    keywords: &[String],
    tokenizer: &Tokenizer,
) -> Result<MetricsReport, MetricError> {
    let tok = |docs: &[S]| -> Vec<Vec<String>> {
        docs.iter()
            .map(|d| tokenizer.tokenize(d.as_ref()))
            .collect()
    };
    let (c, r) = (tok(candidates), tok(references));
    let clinical = clinical_f1(candidates, references, keywords)?;
    Ok(MetricsReport {
        b1: bleu_n(&c, &r, 1)?,
        b2: bleu_n(&c, &r, 2)?,
        b3: bleu_n(&c, &r, 3)?,
        b4: bleu_n(&c, &r, 4)?,
        meteor_exact: meteor_exact(&c, &r)?,
        rouge_l: rouge_l(&c, &r)?,
        cider_d: cider_d(&c, &r, &r)?,
        clinical_precision: clinical.precision,
        clinical_recall: clinical.recall,
        clinical_f1: clinical.f1,
    })
}
