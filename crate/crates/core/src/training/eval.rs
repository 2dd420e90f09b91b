use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::{sentence_bleu, BleuConfig};
use crate::model::{beam_decode, AdapterSet, BaseWeights, Example, ModelScorer, Vocab};

use super::Result;

/// Anything that maps an example to output token ids.
pub trait Rewriter: Sync {
    fn rewrite(&self, ex: &Example) -> Result<Vec<usize>>;
}

/// A base, optionally with adapters, decoded by beam search.
#[derive(Debug, Clone, Copy)]
pub struct SingleModel<'a> {
    pub base: &'a BaseWeights,
    pub adapters: Option<&'a AdapterSet>,
    pub beam_width: usize,
    pub max_len: usize,
}

impl Rewriter for SingleModel<'_> {
    fn rewrite(&self, ex: &Example) -> Result<Vec<usize>> {
        let scorer = ModelScorer::new(self.base, self.adapters, &ex.src)?;
        let hyps = beam_decode(&scorer, self.beam_width, self.max_len)?;
        Ok(hyps.into_iter().next().map(|h| h.tokens).unwrap_or_default())
    }
}

/// Smoothed sentence BLEU of output ids against the example's gold
/// rewrite; an empty output scores 0.
pub fn bleu_against(tokens: &[usize], ex: &Example, vocab: &Vocab) -> Result<f64> {
    let hyp = vocab.decode(tokens);
    if hyp.is_empty() {
        return Ok(0.0);
    }
    Ok(sentence_bleu(&hyp, &ex.reference, &BleuConfig::default())?.value)
}

/// Record-level evaluation result, one line of a score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordScore {
    pub record_id: String,
    pub z: Option<f64>,
    pub class: Option<String>,
    pub bleu: f64,
    pub output_tokens: Vec<String>,
}

/// Mean BLEU of one class; `bleu` is `None` when the class has no records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub label: String,
    pub count: usize,
    pub bleu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassScore>,
    /// Mean over all records.
    pub overall: Option<f64>,
    /// Mean of the present classes' means.
    pub mean_over_classes: Option<f64>,
    pub records: Vec<RecordScore>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl EvalReport {
    /// Aggregates record scores; all report numbers derive from here.
    pub fn from_records(records: Vec<RecordScore>, labels: &[String]) -> Self {
        let per_class: Vec<ClassScore> = labels
            .iter()
            .map(|l| {
                let of = || records.iter().filter(|r| r.class.as_deref() == Some(l.as_str()));
                ClassScore {
                    label: l.clone(),
                    count: of().count(),
                    bleu: mean(of().map(|r| r.bleu)),
                }
            })
            .collect();
        let overall = mean(records.iter().map(|r| r.bleu));
        let mean_over_classes = mean(per_class.iter().filter_map(|c| c.bleu));
        Self {
            per_class,
            overall,
            mean_over_classes,
            records,
        }
    }

    pub fn class(&self, label: &str) -> Option<&ClassScore> {
        self.per_class.iter().find(|c| c.label == label)
    }

    pub fn class_bleu(&self, label: &str) -> Option<f64> {
        self.class(label).and_then(|c| c.bleu)
    }
}

/// Decodes every example and scores it against its rewrite. `labels` name
/// the class indices carried by the examples; `z` optionally gives each
/// example's difficulty score.
pub fn evaluate(
    rewriter: &dyn Rewriter,
    examples: &[Example],
    vocab: &Vocab,
    labels: &[String],
    z: Option<&[f64]>,
) -> Result<EvalReport> {
    let records: Vec<RecordScore> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let out = rewriter.rewrite(ex)?;
            Ok(RecordScore {
                record_id: ex.record_id.clone(),
                z: z.map(|z| z[i]),
                class: ex.class.and_then(|c| labels.get(c).cloned()),
                bleu: bleu_against(&out, ex, vocab)?,
                output_tokens: vocab.decode(&out).tokens().to_vec(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport::from_records(records, labels))
}
