//! Tokenization and sentence-level similarity metrics.
//!
//! BLEU here is the single-reference sentence variant: clipped n-gram
//! precisions, an optional brevity penalty and optional exponential
//! smoothing of zero-match orders. Orders longer than the hypothesis have no
//! n-grams to count and are dropped from the geometric mean (effective
//! order), which keeps `bleu(x, x) == 1` for one-token sequences.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("empty text")]
    EmptyText,
    #[error("token {0:?} contains whitespace")]
    InvalidToken(String),
    #[error("n-gram order must be at least 1, got {0}")]
    InvalidOrder(usize),
    #[error("invalid BLEU config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Ordered lowercase tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if let Some(bad) = tokens
            .iter()
            .find(|t| t.is_empty() || t.chars().any(char::is_whitespace))
        {
            return Err(MetricError::InvalidToken(bad.clone()));
        }
        Ok(Self(tokens))
    }

    /// Builds a sequence from a whitespace-separated string without any
    /// normalization. Mostly useful in tests.
    pub fn from_spaced(s: &str) -> Self {
        Self(s.split_whitespace().map(str::to_owned).collect())
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, String> {
        self.0.iter()
    }
}

impl TryFrom<Vec<String>> for TokenSeq {
    type Error = MetricError;
    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TokenSeq> for Vec<String> {
    fn from(t: TokenSeq) -> Self {
        t.0
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

const DETACHED: [char; 6] = ['.', ',', '?', '!', '\'', '"'];

/// Lowercases, splits on whitespace and detaches trailing punctuation (and
/// leading double quotes) from words.
pub fn tokenize(text: &str) -> Result<TokenSeq> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut w: &str = word;
        while w.len() > 1 && w.starts_with('"') {
            out.push("\"".to_owned());
            w = &w[1..];
        }
        let mut trailing = Vec::new();
        while w.chars().count() > 1 {
            match w.chars().last() {
                Some(c) if DETACHED.contains(&c) => {
                    trailing.push(c.to_string());
                    w = &w[..w.len() - c.len_utf8()];
                }
                _ => break,
            }
        }
        out.push(w.to_lowercase());
        out.extend(trailing.into_iter().rev());
    }
    if out.is_empty() {
        return Err(MetricError::EmptyText);
    }
    Ok(TokenSeq(out))
}

/// Multiset of contiguous n-grams; empty when `n` exceeds the length.
pub fn ngram_counts(seq: &TokenSeq, n: usize) -> Result<HashMap<&[String], usize>> {
    if n < 1 {
        return Err(MetricError::InvalidOrder(n));
    }
    let mut counts = HashMap::new();
    if n <= seq.len() {
        for w in seq.0.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    Ok(counts)
}

/// Matches clipped by reference counts, plus total hypothesis n-grams.
fn clipped_matches(hyp: &TokenSeq, reference: &TokenSeq, n: usize) -> Result<(usize, usize)> {
    let h = ngram_counts(hyp, n)?;
    let r = ngram_counts(reference, n)?;
    let matches = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    Ok((matches, hyp.len().saturating_sub(n - 1)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    None,
    /// The k-th zero-match order gets precision `1 / (2^k * total_n)`.
    #[default]
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub max_n: usize,
    pub smoothing: Smoothing,
    pub brevity_penalty: bool,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self {
            max_n: 4,
            smoothing: Smoothing::Exponential,
            brevity_penalty: true,
        }
    }
}

impl BleuConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.max_n) {
            return Err(MetricError::InvalidConfig(format!(
                "max_n must be in 1..=8, got {}",
                self.max_n
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NgramPrecision {
    pub order: usize,
    pub matches: usize,
    pub total: usize,
    /// Precision after smoothing; what enters the geometric mean.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuComponents {
    /// One entry per order that has at least one hypothesis n-gram.
    pub precisions: Vec<NgramPrecision>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub value: f64,
    pub metric: String,
    pub components: Option<BleuComponents>,
}

fn non_empty(hyp: &TokenSeq, reference: &TokenSeq) -> Result<()> {
    if hyp.is_empty() || reference.is_empty() {
        Err(MetricError::EmptyText)
    } else {
        Ok(())
    }
}

pub fn sentence_bleu(hyp: &TokenSeq, reference: &TokenSeq, cfg: &BleuConfig) -> Result<MetricScore> {
    cfg.validate()?;
    non_empty(hyp, reference)?;
    let mut precisions = Vec::with_capacity(cfg.max_n);
    let mut zero_seen = 0i32;
    let mut annihilated = false;
    for n in 1..=cfg.max_n {
        let (matches, total) = clipped_matches(hyp, reference, n)?;
        if total == 0 {
            break;
        }
        let value = if matches > 0 {
            matches as f64 / total as f64
        } else {
            match cfg.smoothing {
                Smoothing::None => {
                    annihilated = true;
                    0.0
                }
                Smoothing::Exponential => {
                    zero_seen += 1;
                    1.0 / (2f64.powi(zero_seen) * total as f64)
                }
            }
        };
        precisions.push(NgramPrecision {
            order: n,
            matches,
            total,
            value,
        });
    }
    let (h, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = if cfg.brevity_penalty {
        (1.0 - r / h).exp().min(1.0)
    } else {
        1.0
    };
    let value = if annihilated {
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.value.ln()).sum::<f64>() / precisions.len() as f64;
        bp * mean_log.exp()
    };
    Ok(MetricScore {
        value,
        metric: "bleu".into(),
        components: Some(BleuComponents {
            precisions,
            brevity_penalty: bp,
            hyp_len: hyp.len(),
            ref_len: reference.len(),
        }),
    })
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn rouge_n(hyp: &TokenSeq, reference: &TokenSeq, n: usize) -> Result<MetricScore> {
    if n < 1 {
        return Err(MetricError::InvalidOrder(n));
    }
    non_empty(hyp, reference)?;
    let (matches, hyp_total) = clipped_matches(hyp, reference, n)?;
    let ref_total = reference.len().saturating_sub(n - 1);
    let value = if hyp_total == 0 || ref_total == 0 {
        0.0
    } else {
        f1(matches as f64 / hyp_total as f64, matches as f64 / ref_total as f64)
    };
    Ok(MetricScore {
        value,
        metric: format!("rouge-{n}"),
        components: None,
    })
}

/// Longest common subsequence length, two-row dynamic program.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
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

pub fn rouge_l(hyp: &TokenSeq, reference: &TokenSeq) -> Result<MetricScore> {
    non_empty(hyp, reference)?;
    let l = lcs_len(hyp.tokens(), reference.tokens()) as f64;
    Ok(MetricScore {
        value: f1(l / hyp.len() as f64, l / reference.len() as f64),
        metric: "rouge-l".into(),
        components: None,
    })
}
