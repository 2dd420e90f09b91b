//! Analysis experiments: BLEU by difficulty bin, the train-class by
//! test-class heatmap and the distillation weight sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use qrw_core::corpus::{Scheme, UtteranceRecord};
use qrw_core::ensemble::{sad_train, EnsembleBundle, EnsembleMode, EnsembleRewriter};
use qrw_core::model::{AdapterSet, BaseWeights, Example, Vocab};
use qrw_core::training::{evaluate, train_private, EvalReport, RecordScore, SingleModel, TrainConfig};

use crate::{HarnessError, Result};

/// Mean BLEU of the records whose z falls in one bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinPoint {
    pub bin: usize,
    pub count: usize,
    /// `None` when the bin holds no records.
    pub bleu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinCurve {
    pub bins: Vec<BinPoint>,
    /// Rank correlation of bin index and mean BLEU over populated bins;
    /// `None` with fewer than two populated bins or a constant curve.
    pub spearman: Option<f64>,
}

/// Groups records into ten z bins (`[0, 0.1]`, then `(0.1k, 0.1(k+1)]`) and
/// averages BLEU per bin. Records without z are ignored.
pub fn ten_bin_eval(records: &[RecordScore]) -> BinCurve {
    let scheme = Scheme::ten_bins();
    let mut sums = [(0.0, 0usize); 10];
    for r in records {
        if let Some(b) = r.z.and_then(|z| scheme.classify(z)) {
            sums[b].0 += r.bleu;
            sums[b].1 += 1;
        }
    }
    let bins: Vec<BinPoint> = sums
        .iter()
        .enumerate()
        .map(|(bin, &(s, n))| BinPoint {
            bin,
            count: n,
            bleu: (n > 0).then(|| s / n as f64),
        })
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = bins
        .iter()
        .filter_map(|p| p.bleu.map(|b| (p.bin as f64, b)))
        .unzip();
    BinCurve {
        spearman: spearman(&xs, &ys),
        bins,
    }
}

/// 1-based ranks; tied values share the mean of their ranks.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson correlation of the tie-averaged
/// ranks. `None` for fewer than two points or zero rank variance.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Rows are training classes, columns test classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub labels: Vec<String>,
    pub matrix: Vec<Vec<Option<f64>>>,
}

impl Heatmap {
    /// Rows whose diagonal entry is at least the mean of the row's
    /// populated entries; rows without a diagonal count as misses.
    pub fn diagonal_wins(&self) -> usize {
        self.matrix
            .iter()
            .enumerate()
            .filter(|(i, row)| {
                let vals: Vec<f64> = row.iter().flatten().copied().collect();
                match row.get(*i).copied().flatten() {
                    Some(d) if !vals.is_empty() => d >= vals.iter().sum::<f64>() / vals.len() as f64,
                    _ => false,
                }
            })
            .count()
    }

    /// Builds the matrix from per-row evaluation reports.
    pub fn from_reports(labels: Vec<String>, rows: &[EvalReport]) -> Self {
        let matrix = rows
            .iter()
            .map(|r| labels.iter().map(|l| r.class_bleu(l)).collect())
            .collect();
        Self { labels, matrix }
    }
}

/// Inputs of the heatmap experiment.
pub struct HeatmapInput<'a> {
    pub train: &'a [UtteranceRecord],
    pub valid: &'a [UtteranceRecord],
    pub test: &'a [UtteranceRecord],
    /// Difficulty score of each record, per split.
    pub z_train: &'a [f64],
    pub z_valid: &'a [f64],
    pub z_test: &'a [f64],
    pub vocab: &'a Vocab,
    pub base: &'a BaseWeights,
    /// Adapters every class starts from; fresh adapters when `None`.
    pub init: Option<&'a AdapterSet>,
}

/// Trains one private adapter set per class of `scheme` and evaluates each
/// on every test class.
pub fn heatmap_experiment(
    input: &HeatmapInput,
    scheme: &Scheme,
    cfg: &TrainConfig,
    beam_width: usize,
    max_len: usize,
) -> Result<Heatmap> {
    let max_seq = input.base.config().max_seq_len;
    let classify = |z: &[f64]| -> Result<Vec<usize>> {
        z.iter()
            .map(|&z| scheme.classify(z).ok_or_else(|| HarnessError::Config(format!("score {z} outside [0, 1]"))))
            .collect()
    };
    let build = |recs: &[UtteranceRecord], z: &[f64]| -> Result<Vec<Example>> {
        if recs.len() != z.len() {
            return Err(HarnessError::Config("one score per record is required".into()));
        }
        let classes = classify(z)?;
        Ok(recs
            .iter()
            .zip(classes)
            .map(|(r, c)| Example::from_record(r, input.vocab, max_seq, Some(c)))
            .collect())
    };
    let train = build(input.train, input.z_train)?;
    let valid = build(input.valid, input.z_valid)?;
    let test = build(input.test, input.z_test)?;
    let k = scheme.len();
    for c in 0..k {
        if !train.iter().any(|e| e.class == Some(c)) {
            return Err(HarnessError::EmptyClass(c));
        }
    }
    let labels = scheme.labels();
    let of = |xs: &[Example], c: usize| -> Vec<Example> { xs.iter().filter(|e| e.class == Some(c)).cloned().collect() };
    let privates = (0..k)
        .into_par_iter()
        .map(|c| {
            let m = train_private(
                input.base,
                input.init,
                &of(&train, c),
                &of(&valid, c),
                input.vocab,
                cfg,
                &labels[c],
            )?;
            Ok(m.adapters.expect("adapter training returns adapters"))
        })
        .collect::<Result<Vec<AdapterSet>>>()?;
    let rows = privates
        .iter()
        .map(|p| {
            let rw = SingleModel {
                base: input.base,
                adapters: Some(p),
                beam_width,
                max_len,
            };
            Ok(evaluate(&rw, &test, input.vocab, &labels, Some(input.z_test))?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Heatmap::from_reports(labels, &rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaPoint {
    pub gamma: f64,
    pub overall: Option<f64>,
    pub mean_over_classes: Option<f64>,
    pub records: Vec<RecordScore>,
}

/// Trains one distilled student per weight in `gammas`, all from the same
/// seed, and evaluates each on `test`.
#[allow(clippy::too_many_arguments)]
pub fn gamma_sweep(
    bundle: &EnsembleBundle,
    train: &[Example],
    valid: &[Example],
    test: &[Example],
    vocab: &Vocab,
    cfg: &TrainConfig,
    gammas: &[f64],
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<GammaPoint>> {
    if gammas.is_empty() {
        return Err(HarnessError::Config("the gamma list is empty".into()));
    }
    if let Some(g) = gammas.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return Err(HarnessError::Config(format!("gamma {g} outside [0, 1]")));
    }
    let labels = bundle.labels();
    let z: Option<Vec<f64>> = None;
    gammas
        .iter()
        .map(|&gamma| {
            let mut b = bundle.clone();
            let mut c = cfg.clone();
            c.gamma = gamma;
            sad_train(&mut b, train, valid, vocab, &c)?;
            let rw = EnsembleRewriter {
                bundle: &b,
                mode: EnsembleMode::Sad,
                beam_width,
                max_len,
            };
            let r = evaluate(&rw, test, vocab, &labels, z.as_deref())?;
            Ok(GammaPoint {
                gamma,
                overall: r.overall,
                mean_over_classes: r.mean_over_classes,
                records: r.records,
            })
        })
        .collect()
}
