//! Rewriting corpora: records, difficulty scores and class partitions.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, rouge_l, sentence_bleu, tokenize, BleuConfig, MetricError, TokenSeq};

pub mod canard;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed JSON: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: schema violation: {message}")]
    Schema { line: usize, message: String },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("score {score} of record {index} is outside [0, 1]")]
    ScoreRange { index: usize, score: f64 },
    #[error("invalid scheme: {0}")]
    InvalidScheme(String),
    #[error("{records} records but {scores} scores")]
    LengthMismatch { records: usize, scores: usize },
    #[error("need at least 3 records, got {0}")]
    TooFewRecords(usize),
    #[error("annotation refers to unknown record {0:?}")]
    UnknownRecord(String),
    #[error("invalid annotation for {record_id:?}: {message}")]
    InvalidAnnotation { record_id: String, message: String },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// One (question, history, rewrite) tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub dialogue_id: String,
    pub turn_index: u32,
    pub question: TokenSeq,
    /// Prior turns, oldest first, alternating questions and answers.
    pub history: Vec<TokenSeq>,
    pub rewrite: TokenSeq,
    pub class_label: Option<String>,
}

impl UtteranceRecord {
    pub fn new(
        dialogue_id: impl Into<String>,
        turn_index: u32,
        question: TokenSeq,
        history: Vec<TokenSeq>,
        rewrite: TokenSeq,
        class_label: Option<String>,
    ) -> std::result::Result<Self, String> {
        if question.is_empty() {
            return Err("question is empty".into());
        }
        if rewrite.is_empty() {
            return Err("rewrite is empty".into());
        }
        if turn_index > 0 && history.is_empty() {
            return Err(format!("turn {turn_index} has no history"));
        }
        if history.iter().any(TokenSeq::is_empty) {
            return Err("history contains an empty turn".into());
        }
        Ok(Self {
            dialogue_id: dialogue_id.into(),
            turn_index,
            question,
            history,
            rewrite,
            class_label,
        })
    }

    pub fn id(&self) -> String {
        format!("{}#{}", self.dialogue_id, self.turn_index)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WireRecord {
    dialogue_id: String,
    turn: u32,
    question: String,
    history: Vec<String>,
    rewrite: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorpusFormat {
    #[default]
    Jsonl,
}

fn parse_record(line_no: usize, line: &str) -> Result<UtteranceRecord> {
    let wire: WireRecord = serde_json::from_str(line).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => CorpusError::Schema {
            line: line_no,
            message: e.to_string(),
        },
        _ => CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        },
    })?;
    let schema = |message: String| CorpusError::Schema {
        line: line_no,
        message,
    };
    let tok = |field: &str, s: &str| tokenize(s).map_err(|e| schema(format!("{field}: {e}")));
    let question = tok("question", &wire.question)?;
    let rewrite = tok("rewrite", &wire.rewrite)?;
    let history = wire
        .history
        .iter()
        .map(|h| tok("history", h))
        .collect::<Result<Vec<_>>>()?;
    UtteranceRecord::new(wire.dialogue_id, wire.turn, question, history, rewrite, wire.class)
        .map_err(schema)
}

pub fn parse_corpus(text: &str) -> Result<Vec<UtteranceRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_record(i + 1, l))
        .collect()
}

/// Reads a corpus file; records come back in file order.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<UtteranceRecord>> {
    match format {
        CorpusFormat::Jsonl => parse_corpus(&fs::read_to_string(path)?),
    }
}

pub fn record_to_json(r: &UtteranceRecord) -> String {
    let wire = WireRecord {
        dialogue_id: r.dialogue_id.clone(),
        turn: r.turn_index,
        question: r.question.to_string(),
        history: r.history.iter().map(ToString::to_string).collect(),
        rewrite: r.rewrite.to_string(),
        class: r.class_label.clone(),
    };
    serde_json::to_string(&wire).expect("record serializes")
}

pub fn write_corpus(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        writeln!(w, "{}", record_to_json(r))?;
    }
    w.flush()?;
    Ok(())
}

pub const PRONOUNS: [&str; 13] = [
    "he", "his", "him", "she", "her", "hers", "they", "their", "them", "it", "its", "this", "that",
];

/// Replaces a single pronoun in `q` when that substitution alone turns `q`
/// into `rewrite`; otherwise returns `q` unchanged.
///
/// The pronoun's left context must be a prefix of the rewrite and its right
/// context a suffix, leaving a non-empty middle span as the referent.
pub fn pronoun_replace(q: &TokenSeq, rewrite: &TokenSeq) -> TokenSeq {
    let toks = q.tokens();
    let mut hits = toks
        .iter()
        .enumerate()
        .filter(|(_, t)| PRONOUNS.contains(&t.as_str()));
    let (Some((pos, _)), None) = (hits.next(), hits.next()) else {
        return q.clone();
    };
    let (prefix, suffix) = (&toks[..pos], &toks[pos + 1..]);
    let rw = rewrite.tokens();
    let fits = rw.len() > prefix.len() + suffix.len() && rw.starts_with(prefix) && rw.ends_with(suffix);
    if fits {
        rewrite.clone()
    } else {
        q.clone()
    }
}

/// BLEU of the (optionally pronoun-substituted) question against its
/// rewrite as reference.
pub fn difficulty_score(rec: &UtteranceRecord, apply_pronoun_rule: bool, cfg: &BleuConfig) -> Result<f64> {
    let q = if apply_pronoun_rule {
        pronoun_replace(&rec.question, &rec.rewrite)
    } else {
        rec.question.clone()
    };
    Ok(sentence_bleu(&q, &rec.rewrite, cfg)?.value)
}

pub fn score_corpus(records: &[UtteranceRecord], apply_pronoun_rule: bool, cfg: &BleuConfig) -> Result<Vec<f64>> {
    records
        .par_iter()
        .map(|r| difficulty_score(r, apply_pronoun_rule, cfg))
        .collect()
}

/// A labeled score interval with explicit closure on each end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub label: String,
    pub lo: f64,
    pub hi: f64,
    pub lo_closed: bool,
    pub hi_closed: bool,
}

impl Interval {
    pub fn new(label: impl Into<String>, lo: f64, hi: f64, lo_closed: bool, hi_closed: bool) -> Self {
        Self {
            label: label.into(),
            lo,
            hi,
            lo_closed,
            hi_closed,
        }
    }

    pub fn contains(&self, z: f64) -> bool {
        let above = if self.lo_closed { z >= self.lo } else { z > self.lo };
        let below = if self.hi_closed { z <= self.hi } else { z < self.hi };
        above && below
    }
}

/// Ordered intervals tiling `[0, 1]`. Class index = position in the list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scheme {
    intervals: Vec<Interval>,
}

impl Scheme {
    pub fn new(intervals: Vec<Interval>) -> Result<Self> {
        let bad = |m: String| Err(CorpusError::InvalidScheme(m));
        if intervals.is_empty() {
            return bad("no intervals".into());
        }
        let mut labels: Vec<&str> = intervals.iter().map(|i| i.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate labels".into());
        }
        let mut sorted: Vec<&Interval> = intervals.iter().collect();
        sorted.sort_by(|a, b| a.lo.total_cmp(&b.lo).then(b.lo_closed.cmp(&a.lo_closed)));
        for iv in &sorted {
            let empty = iv.lo > iv.hi || (iv.lo == iv.hi && !(iv.lo_closed && iv.hi_closed));
            if empty {
                return bad(format!("interval {:?} is empty", iv.label));
            }
        }
        let (first, last) = (sorted[0], sorted[sorted.len() - 1]);
        if first.lo != 0.0 || !first.lo_closed {
            return bad("scheme must start at a closed 0".into());
        }
        if last.hi != 1.0 || !last.hi_closed {
            return bad("scheme must end at a closed 1".into());
        }
        for w in sorted.windows(2) {
            let (a, b) = (w[0], w[1]);
            if a.hi > b.lo || (a.hi == b.lo && a.hi_closed && b.lo_closed) {
                return bad(format!("intervals {:?} and {:?} overlap", a.label, b.label));
            }
            if a.hi < b.lo || (!a.hi_closed && !b.lo_closed) {
                return bad(format!("gap between {:?} and {:?}", a.label, b.label));
            }
        }
        Ok(Self { intervals })
    }

    /// hard `[0, 0.2]`, medium `(0.2, 0.5]`, easy `(0.5, 1]`.
    pub fn table3() -> Self {
        Self::new(vec![
            Interval::new("hard", 0.0, 0.2, true, true),
            Interval::new("medium", 0.2, 0.5, false, true),
            Interval::new("easy", 0.5, 1.0, false, true),
        ])
        .expect("valid preset")
    }

    /// Same classes with left-closed boundaries: `[0, 0.2)`, `[0.2, 0.5)`, `[0.5, 1]`.
    pub fn table3_left_closed() -> Self {
        Self::new(vec![
            Interval::new("hard", 0.0, 0.2, true, false),
            Interval::new("medium", 0.2, 0.5, true, false),
            Interval::new("easy", 0.5, 1.0, true, true),
        ])
        .expect("valid preset")
    }

    /// Bin 0 is `[0, 0.1]`, then `(0.1k, 0.1(k+1)]` up to bin 9.
    pub fn ten_bins() -> Self {
        let ivs = (0..10)
            .map(|k| Interval::new(k.to_string(), k as f64 / 10.0, (k + 1) as f64 / 10.0, k == 0, true))
            .collect();
        Self::new(ivs).expect("valid preset")
    }

    /// Ten bins as above except the last is `(0.9, 1)`, plus the single
    /// point `{1}` as class 10.
    pub fn eleven_classes() -> Self {
        let mut ivs: Vec<Interval> = (0..10)
            .map(|k| Interval::new(k.to_string(), k as f64 / 10.0, (k + 1) as f64 / 10.0, k == 0, k < 9))
            .collect();
        ivs.push(Interval::new("10", 1.0, 1.0, true, true));
        Self::new(ivs).expect("valid preset")
    }

    /// `k` equal-width intervals, first closed on both ends, the rest
    /// left-open.
    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(CorpusError::InvalidScheme("k must be positive".into()));
        }
        Self::new(
            (0..k)
                .map(|i| Interval::new(i.to_string(), i as f64 / k as f64, (i + 1) as f64 / k as f64, i == 0, true))
                .collect(),
        )
    }

    /// A single class covering everything.
    pub fn single(label: &str) -> Self {
        Self::new(vec![Interval::new(label, 0.0, 1.0, true, true)]).expect("valid preset")
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "table3" => Some(Self::table3()),
            "table3-left-closed" => Some(Self::table3_left_closed()),
            "ten-bins" => Some(Self::ten_bins()),
            "eleven" => Some(Self::eleven_classes()),
            "single" => Some(Self::single("all")),
            _ => None,
        }
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn labels(&self) -> Vec<String> {
        self.intervals.iter().map(|i| i.label.clone()).collect()
    }

    /// Class index of `z`; `None` only outside `[0, 1]`.
    pub fn classify(&self, z: f64) -> Option<usize> {
        self.intervals.iter().position(|iv| iv.contains(z))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub record_id: String,
    pub class: usize,
}

/// Class labels plus one assignment per record, in record order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyPartition {
    pub labels: Vec<String>,
    /// Present for interval partitions, absent for rank-based ones.
    pub scheme: Option<Scheme>,
    pub assignments: Vec<Assignment>,
}

impl DifficultyPartition {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn label(&self, class: usize) -> &str {
        &self.labels[class]
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn class_of(&self, record_id: &str) -> Option<usize> {
        self.assignments
            .iter()
            .find(|a| a.record_id == record_id)
            .map(|a| a.class)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.labels.len()];
        for a in &self.assignments {
            s[a.class] += 1;
        }
        s
    }

    pub fn proportions(&self) -> Vec<f64> {
        let n = self.assignments.len().max(1) as f64;
        self.sizes().into_iter().map(|c| c as f64 / n).collect()
    }

    /// Positions (in record order) of the members of `class`.
    pub fn members(&self, class: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, a)| a.class == class)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Labels every record by the interval holding its score.
pub fn partition(records: &[UtteranceRecord], scores: &[f64], scheme: &Scheme) -> Result<DifficultyPartition> {
    if records.len() != scores.len() {
        return Err(CorpusError::LengthMismatch {
            records: records.len(),
            scores: scores.len(),
        });
    }
    let assignments = records
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(index, (r, &score))| {
            let class = scheme
                .classify(score)
                .ok_or(CorpusError::ScoreRange { index, score })?;
            Ok(Assignment {
                record_id: r.id(),
                class,
            })
        })
        .collect::<Result<_>>()?;
    Ok(DifficultyPartition {
        labels: scheme.labels(),
        scheme: Some(scheme.clone()),
        assignments,
    })
}

/// Alternative difficulty measures ranked into terciles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyMeasure {
    LenQ,
    LenRewrite,
    LenRatio,
    RougeL,
    Bleu,
}

impl DifficultyMeasure {
    pub fn score(self, r: &UtteranceRecord, cfg: &BleuConfig) -> Result<f64> {
        Ok(match self {
            Self::LenQ => r.question.len() as f64,
            Self::LenRewrite => r.rewrite.len() as f64,
            Self::LenRatio => r.question.len() as f64 / r.rewrite.len() as f64,
            Self::RougeL => rouge_l(&r.question, &r.rewrite)?.value,
            Self::Bleu => difficulty_score(r, true, cfg)?,
        })
    }
}

/// Ranks records ascending by `measure` (ties by record order) and cuts the
/// ranking into three classes `d1`, `d2`, `d3` whose sizes differ by at most
/// one, extra records going to the earlier classes.
pub fn tercile_partition(records: &[UtteranceRecord], measure: DifficultyMeasure, cfg: &BleuConfig) -> Result<DifficultyPartition> {
    let n = records.len();
    if n < 3 {
        return Err(CorpusError::TooFewRecords(n));
    }
    let scores = records
        .iter()
        .map(|r| measure.score(r, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let sizes: Vec<usize> = (0..3).map(|c| n / 3 + usize::from(c < n % 3)).collect();
    let mut class = vec![0; n];
    let mut rank = 0;
    for (c, &size) in sizes.iter().enumerate() {
        for &idx in &order[rank..rank + size] {
            class[idx] = c;
        }
        rank += size;
    }
    Ok(DifficultyPartition {
        labels: vec!["d1".into(), "d2".into(), "d3".into()],
        scheme: None,
        assignments: records
            .iter()
            .zip(class)
            .map(|(r, class)| Assignment {
                record_id: r.id(),
                class,
            })
            .collect(),
    })
}

pub const NUM_RULES: usize = 7;

/// Rewriting rules observed for one record (ids 1 to 7).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleAnnotation {
    pub record_id: String,
    pub rules: Vec<u8>,
}

impl RuleAnnotation {
    pub fn new(record_id: impl Into<String>, rules: Vec<u8>) -> Result<Self> {
        let record_id = record_id.into();
        if rules.is_empty() {
            return Err(CorpusError::InvalidAnnotation {
                record_id,
                message: "no rules".into(),
            });
        }
        if let Some(r) = rules.iter().find(|&&r| !(1..=NUM_RULES as u8).contains(&r)) {
            return Err(CorpusError::InvalidAnnotation {
                message: format!("rule {r} not in 1..=7"),
                record_id,
            });
        }
        Ok(Self { record_id, rules })
    }
}

pub fn load_annotations(path: &Path) -> Result<Vec<RuleAnnotation>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let raw: RuleAnnotation = serde_json::from_str(l).map_err(|e| CorpusError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            RuleAnnotation::new(raw.record_id, raw.rules)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRuleStats {
    pub label: String,
    /// `counts[i]` is the count of rule `i + 1`.
    pub counts: [u64; NUM_RULES],
    /// Counts normalized to sum 1; all zero when the class has no rules.
    pub distribution: [f64; NUM_RULES],
}

/// Sums rule occurrences per class.
pub fn rule_frequency(annotations: &[RuleAnnotation], part: &DifficultyPartition) -> Result<Vec<ClassRuleStats>> {
    let index: HashMap<&str, usize> = part
        .assignments
        .iter()
        .map(|a| (a.record_id.as_str(), a.class))
        .collect();
    let mut counts = vec![[0u64; NUM_RULES]; part.num_classes()];
    for a in annotations {
        let &class = index
            .get(a.record_id.as_str())
            .ok_or_else(|| CorpusError::UnknownRecord(a.record_id.clone()))?;
        for &r in &a.rules {
            counts[class][r as usize - 1] += 1;
        }
    }
    Ok(counts
        .into_iter()
        .zip(&part.labels)
        .map(|(counts, label)| {
            let total: u64 = counts.iter().sum();
            let mut distribution = [0.0; NUM_RULES];
            if total > 0 {
                for (d, c) in distribution.iter_mut().zip(&counts) {
                    *d = *c as f64 / total as f64;
                }
            }
            ClassRuleStats {
                label: label.clone(),
                counts,
                distribution,
            }
        })
        .collect())
}

/// Convenience for tests and fixtures.
pub fn record(id: &str, turn: u32, question: &str, history: &[&str], rewrite: &str) -> UtteranceRecord {
    let tok = |s: &str| metrics::tokenize(s).expect("non-empty text");
    UtteranceRecord::new(
        id,
        turn,
        tok(question),
        history.iter().map(|h| tok(h)).collect(),
        tok(rewrite),
        None,
    )
    .expect("valid record")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(s: &str) -> TokenSeq {
        TokenSeq::from_spaced(s)
    }

    #[test]
    fn pronoun_substitution_fires_on_clean_swap() {
        let q = seq("did he win any awards ?");
        let rw = seq("did robert fripp win any awards ?");
        assert_eq!(pronoun_replace(&q, &rw), rw);
    }

    #[test]
    fn pronoun_substitution_leaves_other_edits() {
        let q = seq("what did robert do ?");
        assert_eq!(pronoun_replace(&q, &seq("what did robert fripp do ?")), q);
        let q = seq("are there other aspects ?");
        let rw = seq("are there other aspects of robert fripp 's career besides king crimson ?");
        assert_eq!(pronoun_replace(&q, &rw), q);
        // two pronouns: not a single substitution
        let q = seq("did he like her ?");
        assert_eq!(pronoun_replace(&q, &seq("did fripp like her ?")), q);
        // extra edit beyond the pronoun
        let q = seq("what did he do ?");
        assert_eq!(pronoun_replace(&q, &seq("what did fripp do in 1990 ?")), q);
    }

    #[test]
    fn worked_difficulty_example() {
        let r = record(
            "d",
            1,
            "did he win any awards ?",
            &["robert fripp"],
            "did robert fripp win any awards ?",
        );
        let cfg = BleuConfig::default();
        assert_eq!(difficulty_score(&r, true, &cfg).unwrap(), 1.0);
        let off = difficulty_score(&r, false, &cfg).unwrap();
        assert!(off < 1.0);
        let same = record("d", 0, "who is he ?", &[], "who is he ?");
        assert_eq!(difficulty_score(&same, false, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn table3_boundaries() {
        let s = Scheme::table3();
        assert_eq!(s.classify(0.0), Some(0));
        assert_eq!(s.classify(0.2), Some(0));
        assert_eq!(s.classify(0.2000001), Some(1));
        assert_eq!(s.classify(0.5), Some(1));
        assert_eq!(s.classify(1.0), Some(2));
        assert_eq!(s.classify(1.01), None);
        let lc = Scheme::table3_left_closed();
        assert_eq!(lc.classify(0.2), Some(1));
        assert_eq!(lc.classify(0.5), Some(2));
    }

    #[test]
    fn presets_are_valid() {
        assert_eq!(Scheme::ten_bins().len(), 10);
        let e = Scheme::eleven_classes();
        assert_eq!(e.classify(1.0), Some(10));
        assert_eq!(e.classify(0.95), Some(9));
        assert_eq!(e.classify(0.1), Some(0));
        assert_eq!(Scheme::uniform(3).unwrap().classify(0.5), Some(1));
    }

    #[test]
    fn overlapping_or_gapped_schemes_rejected() {
        let overlap = Scheme::new(vec![
            Interval::new("a", 0.0, 0.5, true, true),
            Interval::new("b", 0.5, 1.0, true, true),
        ]);
        assert!(matches!(overlap, Err(CorpusError::InvalidScheme(_))));
        let gap = Scheme::new(vec![
            Interval::new("a", 0.0, 0.5, true, false),
            Interval::new("b", 0.5, 1.0, false, true),
        ]);
        assert!(matches!(gap, Err(CorpusError::InvalidScheme(_))));
        let open_end = Scheme::new(vec![Interval::new("a", 0.0, 1.0, true, false)]);
        assert!(open_end.is_err());
    }

    #[test]
    fn partition_rejects_out_of_range() {
        let r = vec![record("d", 0, "a", &[], "a")];
        assert!(matches!(
            partition(&r, &[1.5], &Scheme::table3()),
            Err(CorpusError::ScoreRange { index: 0, .. })
        ));
        assert!(matches!(
            partition(&r, &[], &Scheme::table3()),
            Err(CorpusError::LengthMismatch { .. })
        ));
    }

    fn numbered(n: usize) -> Vec<UtteranceRecord> {
        (0..n)
            .map(|i| {
                let q = vec!["w"; i + 1].join(" ");
                record(&format!("d{i}"), 0, &q, &[], "w w w w w w w w w w w w")
            })
            .collect()
    }

    #[test]
    fn terciles_are_balanced() {
        let cfg = BleuConfig::default();
        let p = tercile_partition(&numbered(6), DifficultyMeasure::LenQ, &cfg).unwrap();
        assert_eq!(p.sizes(), vec![2, 2, 2]);
        let p = tercile_partition(&numbered(7), DifficultyMeasure::LenQ, &cfg).unwrap();
        assert_eq!(p.sizes(), vec![3, 2, 2]);
        // shortest questions rank first
        assert_eq!(p.assignments[0].class, 0);
        assert_eq!(p.assignments[6].class, 2);
        assert!(matches!(
            tercile_partition(&numbered(2), DifficultyMeasure::LenQ, &cfg),
            Err(CorpusError::TooFewRecords(2))
        ));
    }

    #[test]
    fn len_ratio_definition() {
        let r = record("d", 0, "a b c d e", &[], "a b c d e f g h i j");
        assert_eq!(DifficultyMeasure::LenRatio.score(&r, &BleuConfig::default()).unwrap(), 0.5);
    }

    #[test]
    fn tercile_ties_follow_record_order() {
        let recs: Vec<_> = (0..4).map(|i| record(&format!("d{i}"), 0, "a b", &[], "a b")).collect();
        let p = tercile_partition(&recs, DifficultyMeasure::LenQ, &BleuConfig::default()).unwrap();
        let classes: Vec<usize> = p.assignments.iter().map(|a| a.class).collect();
        assert_eq!(classes, vec![0, 0, 1, 2]);
    }

    #[test]
    fn rule_counts() {
        let recs = vec![record("a", 0, "x", &[], "x"), record("b", 0, "y", &[], "y")];
        let part = partition(&recs, &[0.9, 0.9], &Scheme::single("all")).unwrap();
        let ann = vec![
            RuleAnnotation::new("a#0", vec![1]).unwrap(),
            RuleAnnotation::new("b#0", vec![1, 2]).unwrap(),
        ];
        let f = rule_frequency(&ann, &part).unwrap();
        assert_eq!(f[0].counts, [2, 1, 0, 0, 0, 0, 0]);
        assert!((f[0].distribution[0] - 2.0 / 3.0).abs() < 1e-12);
        let empty = rule_frequency(&[], &part).unwrap();
        assert_eq!(empty[0].counts, [0; 7]);
        assert_eq!(empty[0].distribution, [0.0; 7]);
        let orphan = vec![RuleAnnotation::new("zzz", vec![3]).unwrap()];
        assert!(matches!(rule_frequency(&orphan, &part), Err(CorpusError::UnknownRecord(_))));
        assert!(RuleAnnotation::new("a#0", vec![8]).is_err());
        assert!(RuleAnnotation::new("a#0", vec![]).is_err());
    }

    #[test]
    fn easy_class_concentrates_on_rule_one() {
        let recs: Vec<_> = (0..3).map(|i| record(&format!("e{i}"), 0, "x", &[], "x")).collect();
        let part = partition(&recs, &[1.0; 3], &Scheme::table3()).unwrap();
        let ann: Vec<_> = (0..3)
            .map(|i| RuleAnnotation::new(format!("e{i}#0"), vec![1]).unwrap())
            .collect();
        let f = rule_frequency(&ann, &part).unwrap();
        assert_eq!(f[2].label, "easy");
        assert_eq!(f[2].distribution[0], 1.0);
    }
}
