//! Combining class-private models: classifier-weighted logit fusion,
//! distillation into one student, and the routing baselines.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use qrw_tensor::kernels::gemm_acc;
use qrw_tensor::{ParamStore, Tape, Tensor, Var};

use crate::model::{
    beam_decode, fingerprint_store, load_adapters, load_base, pool_states, read_params, save_adapters, save_base,
    write_params, AdapterSet, BaseWeights, DecoderCache, Example, Fingerprint, Model, ModelScorer, PaddedBatch,
    StepScorer,
};
use crate::training::{
    bind_frozen, distill_loss, fit, nll_loss, softmax_rows, train_adapters, Learner, LogEvent, Result, Rewriter,
    TeacherBatch, TrainConfig, TrainError, TrainMode,
};

/// How an ensemble turns private models into one output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    Saf,
    Sad,
    MixGold,
    Uniform,
    PredictedRoute,
}

impl EnsembleMode {
    pub const ALL: [EnsembleMode; 5] = [
        EnsembleMode::Saf,
        EnsembleMode::Sad,
        EnsembleMode::MixGold,
        EnsembleMode::Uniform,
        EnsembleMode::PredictedRoute,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EnsembleMode::Saf => "saf",
            EnsembleMode::Sad => "sad",
            EnsembleMode::MixGold => "mix_gold",
            EnsembleMode::Uniform => "uniform",
            EnsembleMode::PredictedRoute => "predicted_route",
        }
    }
}

impl fmt::Display for EnsembleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnsembleMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown ensemble mode '{s}'")))
    }
}

/// Affine map `d_model -> m` followed by softmax.
#[derive(Debug, Clone)]
pub struct ClassClassifier {
    store: ParamStore,
    d_model: usize,
    classes: usize,
}

impl ClassClassifier {
    /// All-zero parameters: the posterior starts uniform.
    pub fn new(d_model: usize, classes: usize) -> Self {
        let mut store = ParamStore::new();
        store.push("classifier.w", Tensor::zeros(&[d_model, classes]).with_requires_grad(true));
        store.push("classifier.b", Tensor::zeros(&[classes]).with_requires_grad(true));
        Self {
            store,
            d_model,
            classes,
        }
    }

    pub fn from_store(store: ParamStore) -> Result<Self> {
        let bad = || TrainError::Manifest("classifier tensors have unexpected shapes".into());
        if store.len() != 2 {
            return Err(bad());
        }
        let shape = store.tensors()[0].shape().to_vec();
        if shape.len() != 2 || store.tensors()[1].shape() != [shape[1]] {
            return Err(bad());
        }
        Ok(Self {
            store,
            d_model: shape[0],
            classes: shape[1],
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn fingerprint(&self) -> Fingerprint {
        fingerprint_store(&self.store)
    }

    /// Logits `[batch, m]` on a tape for features `[batch, d]`.
    fn logits_on(t: &mut Tape, vars: &[Var], features: Var) -> Result<Var> {
        let z = t.matmul(features, vars[0])?;
        Ok(t.add(z, vars[1])?)
    }

    /// Class posterior for one pooled feature vector.
    pub fn posterior(&self, feature: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.classes];
        gemm_acc(feature, self.store.tensors()[0].data(), &mut z, 1, self.d_model, self.classes);
        for (o, b) in z.iter_mut().zip(self.store.tensors()[1].data()) {
            *o += b;
        }
        softmax_rows(&z, self.classes)
    }
}

/// A shared base, m private adapter sets and the optional learned parts.
#[derive(Debug, Clone)]
pub struct EnsembleBundle {
    pub base: BaseWeights,
    pub privates: Vec<AdapterSet>,
    pub classifier: Option<ClassClassifier>,
    pub student: Option<AdapterSet>,
    pub mode: EnsembleMode,
}

impl EnsembleBundle {
    pub fn new(base: BaseWeights, privates: Vec<AdapterSet>, mode: EnsembleMode) -> Result<Self> {
        if privates.is_empty() {
            return Err(TrainError::Config("an ensemble needs at least one private model".into()));
        }
        for (i, p) in privates.iter().enumerate() {
            if privates[..i].iter().any(|q| q.label == p.label) {
                return Err(TrainError::Config(format!("duplicate class label '{}'", p.label)));
            }
            if !p.fits(base.config()) {
                return Err(TrainError::Config(format!("private model '{}' does not fit the base", p.label)));
            }
        }
        Ok(Self {
            base,
            privates,
            classifier: None,
            student: None,
            mode,
        })
    }

    pub fn labels(&self) -> Vec<String> {
        self.privates.iter().map(|p| p.label.clone()).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.privates.len()
    }

    /// Checks that the components `mode` needs are present.
    pub fn require(&self, mode: EnsembleMode) -> Result<()> {
        match mode {
            EnsembleMode::Saf | EnsembleMode::PredictedRoute if self.classifier.is_none() => {
                Err(TrainError::MissingComponent("classifier".into()))
            }
            EnsembleMode::Sad if self.student.is_none() => Err(TrainError::MissingComponent("student".into())),
            _ => Ok(()),
        }
    }

    /// Fingerprints of the base and every private model.
    pub fn frozen_fingerprints(&self) -> Vec<Fingerprint> {
        std::iter::once(self.base.fingerprint())
            .chain(self.privates.iter().map(AdapterSet::fingerprint))
            .collect()
    }

    /// Mean over private models of each model's mean-pooled encoder states,
    /// `[batch, d_model]`.
    pub fn pooled_feature(&self, srcs: &[Vec<usize>]) -> Result<Tensor> {
        let d = self.base.config().d_model;
        let batch = PaddedBatch::new(srcs)?;
        let mut acc = vec![0.0; srcs.len() * d];
        for p in &self.privates {
            let mut t = Tape::new();
            let mut m = Model::new(&self.base, Some(p))?.bind(&mut t);
            let enc = m.encode(&mut t, &batch)?;
            let pooled = pool_states(&mut t, &enc, d)?;
            for (a, x) in acc.iter_mut().zip(t.value(pooled)) {
                *a += x;
            }
        }
        let m = self.privates.len() as f64;
        Ok(Tensor::new(&[srcs.len(), d], acc.into_iter().map(|x| x / m).collect())?)
    }

    /// Classifier posterior over classes for one source sequence.
    pub fn alpha(&self, src: &[usize]) -> Result<Vec<f64>> {
        let c = self
            .classifier
            .as_ref()
            .ok_or_else(|| TrainError::MissingComponent("classifier".into()))?;
        let f = self.pooled_feature(&[src.to_vec()])?;
        Ok(c.posterior(f.data()))
    }

    /// Index of the most probable class; ties go to the lowest index.
    pub fn predicted_class(&self, src: &[usize]) -> Result<usize> {
        let a = self.alpha(src)?;
        Ok(argmax_low(&a))
    }
}

fn argmax_low(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Decodes on `sum_i alpha_i * logits_i` of several private models.
pub struct FusedScorer<'a> {
    parts: Vec<ModelScorer<'a>>,
    alpha: Vec<f64>,
    vocab: usize,
}

impl<'a> FusedScorer<'a> {
    pub fn new(bundle: &'a EnsembleBundle, alpha: Vec<f64>, src: &[usize]) -> Result<Self> {
        if alpha.len() != bundle.privates.len() {
            return Err(TrainError::Config("one weight per private model required".into()));
        }
        let parts = bundle
            .privates
            .iter()
            .map(|p| ModelScorer::new(&bundle.base, Some(p), src))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self {
            parts,
            alpha,
            vocab: bundle.base.config().vocab_size,
        })
    }
}

impl StepScorer for FusedScorer<'_> {
    type State = Vec<DecoderCache>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn init(&self) -> crate::model::Result<Self::State> {
        self.parts.iter().map(StepScorer::init).collect()
    }

    fn advance(&self, state: &mut Self::State, token: usize) -> crate::model::Result<Vec<f64>> {
        let m = self.parts.len();
        let mut stacked = vec![0.0; m * self.vocab];
        for (i, (p, s)) in self.parts.iter().zip(state.iter_mut()).enumerate() {
            if self.alpha[i] != 0.0 {
                let l = p.advance(s, token)?;
                stacked[i * self.vocab..(i + 1) * self.vocab].copy_from_slice(&l);
            }
        }
        Ok(fuse_stacked(&self.alpha, &stacked, self.vocab))
    }

    fn position_limit(&self) -> Option<usize> {
        self.parts.first().and_then(StepScorer::position_limit)
    }
}

fn fuse_stacked(alpha: &[f64], stacked: &[f64], v: usize) -> Vec<f64> {
    let mut fused = vec![0.0; v];
    gemm_acc(alpha, stacked, &mut fused, 1, alpha.len(), v);
    fused
}

/// `sum_i alpha_i * logits_i`, accumulated in model order.
pub fn fuse_logits(alpha: &[f64], logits: &[&[f64]]) -> Vec<f64> {
    assert_eq!(alpha.len(), logits.len(), "one weight per logit vector");
    let v = logits.first().map_or(0, |l| l.len());
    let stacked: Vec<f64> = logits.iter().flat_map(|l| l.iter().copied()).collect();
    fuse_stacked(alpha, &stacked, v)
}

/// Fused-logit decode with the classifier posterior as weights.
pub fn saf_infer(bundle: &EnsembleBundle, src: &[usize], beam_width: usize, max_len: usize) -> Result<Vec<usize>> {
    let alpha = bundle.alpha(src)?;
    fused_decode(bundle, alpha, src, beam_width, max_len)
}

fn fused_decode(
    bundle: &EnsembleBundle,
    alpha: Vec<f64>,
    src: &[usize],
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    let scorer = FusedScorer::new(bundle, alpha, src)?;
    let hyps = beam_decode(&scorer, beam_width, max_len)?;
    Ok(hyps.into_iter().next().map(|h| h.tokens).unwrap_or_default())
}

fn single_decode(
    base: &BaseWeights,
    adapters: &AdapterSet,
    src: &[usize],
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    let scorer = ModelScorer::new(base, Some(adapters), src)?;
    let hyps = beam_decode(&scorer, beam_width, max_len)?;
    Ok(hyps.into_iter().next().map(|h| h.tokens).unwrap_or_default())
}

/// Decodes one example under `mode`.
pub fn route_infer(
    bundle: &EnsembleBundle,
    ex: &Example,
    mode: EnsembleMode,
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    bundle.require(mode)?;
    match mode {
        EnsembleMode::MixGold => {
            let c = ex
                .class
                .filter(|&c| c < bundle.privates.len())
                .ok_or_else(|| TrainError::MissingGoldLabel(ex.record_id.clone()))?;
            single_decode(&bundle.base, &bundle.privates[c], &ex.src, beam_width, max_len)
        }
        EnsembleMode::Uniform => {
            let m = bundle.privates.len();
            fused_decode(bundle, vec![1.0 / m as f64; m], &ex.src, beam_width, max_len)
        }
        EnsembleMode::PredictedRoute => {
            let c = bundle.predicted_class(&ex.src)?;
            single_decode(&bundle.base, &bundle.privates[c], &ex.src, beam_width, max_len)
        }
        EnsembleMode::Saf => saf_infer(bundle, &ex.src, beam_width, max_len),
        EnsembleMode::Sad => {
            let s = bundle.student.as_ref().expect("checked by require");
            single_decode(&bundle.base, s, &ex.src, beam_width, max_len)
        }
    }
}

/// An ensemble decoded under a fixed mode.
#[derive(Debug, Clone, Copy)]
pub struct EnsembleRewriter<'a> {
    pub bundle: &'a EnsembleBundle,
    pub mode: EnsembleMode,
    pub beam_width: usize,
    pub max_len: usize,
}

impl Rewriter for EnsembleRewriter<'_> {
    fn rewrite(&self, ex: &Example) -> Result<Vec<usize>> {
        route_infer(self.bundle, ex, self.mode, self.beam_width, self.max_len)
    }
}

/// Teacher-forced logits `[tgt_len, |V|]` of one model for each example.
pub fn teacher_forced_logits(
    base: &BaseWeights,
    adapters: Option<&AdapterSet>,
    examples: &[Example],
) -> Result<Vec<Vec<f64>>> {
    let v = base.config().vocab_size;
    let model = Model::new(base, adapters)?;
    let chunks: Vec<&[Example]> = examples.chunks(16).collect();
    let per_chunk: Vec<Vec<Vec<f64>>> = chunks
        .par_iter()
        .map(|chunk| {
            let refs: Vec<&Example> = chunk.iter().collect();
            let tb = TeacherBatch::new(&refs)?;
            let mut t = Tape::new();
            let mut m = model.bind(&mut t);
            let logits = crate::training::forward_logits(&mut t, &mut m, &tb)?;
            let all = t.value(logits);
            let w = tb.dec_in.width;
            Ok(refs
                .iter()
                .enumerate()
                .map(|(b, e)| all[b * w * v..(b * w + e.tgt.len()) * v].to_vec())
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_chunk.into_iter().flatten().collect())
}

fn gold_class(ex: &Example, m: usize) -> Result<usize> {
    ex.class
        .filter(|&c| c < m)
        .ok_or_else(|| TrainError::MissingGoldLabel(ex.record_id.clone()))
}

/// Precomputed frozen inputs of the fusion loss for a set of examples.
struct SafData<'a> {
    examples: &'a [Example],
    features: Vec<Vec<f64>>,
    /// Per example, per private model: `[tgt_len * |V|]` logits.
    logits: Vec<Vec<Vec<f64>>>,
    labels: Vec<usize>,
}

impl<'a> SafData<'a> {
    fn new(bundle: &EnsembleBundle, examples: &'a [Example]) -> Result<Self> {
        let m = bundle.num_classes();
        let labels = examples.iter().map(|e| gold_class(e, m)).collect::<Result<Vec<_>>>()?;
        let d = bundle.base.config().d_model;
        let mut features = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(32) {
            let srcs: Vec<Vec<usize>> = chunk.iter().map(|e| e.src.clone()).collect();
            let f = bundle.pooled_feature(&srcs)?;
            features.extend(f.data().chunks(d).map(<[f64]>::to_vec));
        }
        let per_model: Vec<Vec<Vec<f64>>> = bundle
            .privates
            .iter()
            .map(|p| teacher_forced_logits(&bundle.base, Some(p), examples))
            .collect::<Result<_>>()?;
        let logits = (0..examples.len())
            .map(|i| per_model.iter().map(|pm| pm[i].clone()).collect())
            .collect();
        Ok(Self {
            examples,
            features,
            logits,
            labels,
        })
    }

    /// Fusion NLL plus `class_weight` times the classification loss.
    fn loss(&self, t: &mut Tape, vars: &[Var], batch: &[usize], v: usize, class_weight: f64) -> Result<Var> {
        let b = batch.len();
        let m = self.logits[0].len();
        let d = self.features[0].len();
        let feats: Vec<f64> = batch.iter().flat_map(|&i| self.features[i].iter().copied()).collect();
        let feats = t.constant(&[b, d], feats)?;
        let z = ClassClassifier::logits_on(t, vars, feats)?;
        let lp = t.log_softmax(z, 1)?;
        let labels: Vec<usize> = batch.iter().map(|&i| self.labels[i]).collect();
        let picked = t.gather_last(lp, &labels)?;
        let cls = t.sum_all(picked);
        let cls = t.scale(cls, -class_weight / b as f64);

        let refs: Vec<&Example> = batch.iter().map(|&i| &self.examples[i]).collect();
        let tb = TeacherBatch::new(&refs)?;
        let width = tb.dec_in.width;
        let mut stacked = vec![0.0; b * m * width * v];
        for (r, &i) in batch.iter().enumerate() {
            for (k, l) in self.logits[i].iter().enumerate() {
                let off = (r * m + k) * width * v;
                stacked[off..off + l.len()].copy_from_slice(l);
            }
        }
        let stacked = t.constant(&[b, m, width * v], stacked)?;
        let alpha = t.softmax(z, 1)?;
        let alpha = t.reshape(alpha, &[b, 1, m])?;
        let fused = t.matmul(alpha, stacked)?;
        let fused = t.reshape(fused, &[b, width, v])?;
        let nll = nll_loss(t, fused, &tb.targets)?;
        Ok(t.add(nll, cls)?)
    }
}

struct SafLearner<'a> {
    classifier: ClassClassifier,
    train: SafData<'a>,
    valid: Option<SafData<'a>>,
    vocab: usize,
    class_weight: f64,
}

impl Learner for SafLearner<'_> {
    fn store_mut(&mut self) -> &mut ParamStore {
        self.classifier.store_mut()
    }

    fn loss(&mut self, t: &mut Tape, vars: &[Var], batch: &[usize], _step: u64) -> Result<Var> {
        self.train.loss(t, vars, batch, self.vocab, self.class_weight)
    }

    /// Negative mean validation loss.
    fn validate(&self) -> Result<Option<f64>> {
        let Some(valid) = &self.valid else { return Ok(None) };
        let idx: Vec<usize> = (0..valid.examples.len()).collect();
        let mut total = 0.0;
        for chunk in idx.chunks(32) {
            let mut t = Tape::new();
            let vars = bind_frozen(&mut t, self.classifier.store());
            let l = valid.loss(&mut t, &vars, chunk, self.vocab, self.class_weight)?;
            total += t.scalar(l)? * chunk.len() as f64;
        }
        Ok(Some(-total / idx.len() as f64))
    }
}

fn check_frozen(bundle: &EnsembleBundle, before: &[Fingerprint]) -> Result<()> {
    let after = bundle.frozen_fingerprints();
    let labels = std::iter::once("base".to_owned()).chain(bundle.labels());
    for ((b, a), label) in before.iter().zip(&after).zip(labels) {
        if a != b {
            return Err(TrainError::FrozenModelViolated { label });
        }
    }
    Ok(())
}

/// Trains the class classifier of the fusion ensemble on labeled examples;
/// base and private models stay frozen. Returns the training log.
pub fn saf_train(
    bundle: &mut EnsembleBundle,
    train: &[Example],
    valid: &[Example],
    cfg: &TrainConfig,
) -> Result<Vec<LogEvent>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let before = bundle.frozen_fingerprints();
    let d = bundle.base.config().d_model;
    let mut learner = SafLearner {
        classifier: ClassClassifier::new(d, bundle.num_classes()),
        train: SafData::new(bundle, train)?,
        valid: if valid.is_empty() {
            None
        } else {
            Some(SafData::new(bundle, valid)?)
        },
        vocab: bundle.base.config().vocab_size,
        class_weight: cfg.class_weight,
    };
    let lengths: Vec<usize> = train.iter().map(|e| e.src.len()).collect();
    let out = fit(&mut learner, &lengths, cfg)?;
    check_frozen(bundle, &before)?;
    bundle.classifier = Some(learner.classifier);
    Ok(out.log)
}

/// Mean fusion loss of the current classifier over `examples`.
pub fn saf_loss(bundle: &EnsembleBundle, examples: &[Example], class_weight: f64) -> Result<f64> {
    let c = bundle
        .classifier
        .as_ref()
        .ok_or_else(|| TrainError::MissingComponent("classifier".into()))?;
    let data = SafData::new(bundle, examples)?;
    let mut t = Tape::new();
    let vars = bind_frozen(&mut t, c.store());
    let idx: Vec<usize> = (0..examples.len()).collect();
    let l = data.loss(&mut t, &vars, &idx, bundle.base.config().vocab_size, class_weight)?;
    Ok(t.scalar(l)?)
}

/// Distills the private models into one student adapter set: each example
/// is taught by the private model of its gold class, under teacher forcing.
pub fn sad_train(
    bundle: &mut EnsembleBundle,
    train: &[Example],
    valid: &[Example],
    vocab: &crate::model::Vocab,
    cfg: &TrainConfig,
) -> Result<Vec<LogEvent>> {
    if !(0.0..=1.0).contains(&cfg.gamma) {
        return Err(TrainError::Config(format!("gamma {} outside [0, 1]", cfg.gamma)));
    }
    if cfg.mode != TrainMode::AdapterOnly {
        return Err(TrainError::Config("the student is an adapter set; use mode adapter_only".into()));
    }
    let before = bundle.frozen_fingerprints();
    let teacher = teacher_distributions(bundle, train)?;
    let v = bundle.base.config().vocab_size;
    let gamma = cfg.gamma;
    let objective = |t: &mut Tape, logits: Var, batch: &[usize], targets: &[usize]| -> Result<Var> {
        let width = targets.len() / batch.len();
        let mut probs = vec![0.0; targets.len() * v];
        for (r, &i) in batch.iter().enumerate() {
            let p = &teacher[i];
            probs[r * width * v..r * width * v + p.len()].copy_from_slice(p);
        }
        distill_loss(t, logits, &probs, targets, gamma)
    };
    let student = AdapterSet::new(bundle.base.config(), "student", cfg.seed)?;
    let trained = train_adapters(&bundle.base, student, train, valid, vocab, cfg, &objective)?;
    check_frozen(bundle, &before)?;
    bundle.student = trained.adapters;
    Ok(trained.log)
}

/// Teacher-forced softmax distributions of each example's gold-class
/// private model, `[tgt_len * |V|]` per example.
pub fn teacher_distributions(bundle: &EnsembleBundle, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
    let m = bundle.num_classes();
    let v = bundle.base.config().vocab_size;
    let classes = examples.iter().map(|e| gold_class(e, m)).collect::<Result<Vec<_>>>()?;
    let mut out = vec![Vec::new(); examples.len()];
    for (c, private) in bundle.privates.iter().enumerate() {
        let idx: Vec<usize> = (0..examples.len()).filter(|&i| classes[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        let subset: Vec<Example> = idx.iter().map(|&i| examples[i].clone()).collect();
        let logits = teacher_forced_logits(&bundle.base, Some(private), &subset)?;
        for (i, l) in idx.into_iter().zip(logits) {
            out[i] = softmax_rows(&l, v);
        }
    }
    Ok(out)
}

const MANIFEST_MAGIC: &str = "qrw-ensemble 1";

/// Writes a classifier checkpoint naming its classes in order.
pub fn save_classifier(path: &Path, labels: &[String], c: &ClassClassifier) -> Result<()> {
    if labels.len() != c.classes() {
        return Err(TrainError::Config("one label per classifier output required".into()));
    }
    let header = vec![
        ("kind".to_owned(), "classifier".to_owned()),
        ("classes".to_owned(), labels.join(",")),
        ("fingerprint".to_owned(), c.fingerprint().0),
    ];
    Ok(write_params(path, header, c.store())?)
}

/// Reads a classifier checkpoint and its class labels, verifying the
/// stored fingerprint.
pub fn load_classifier(path: &Path) -> Result<(ClassClassifier, Vec<String>)> {
    let parsed = read_params(path)?;
    if parsed.field("kind")? != "classifier" {
        return Err(TrainError::Manifest("not a classifier checkpoint".into()));
    }
    let labels: Vec<String> = parsed.field("classes")?.split(',').map(str::to_owned).collect();
    let expected = parsed.field("fingerprint")?.to_owned();
    let c = ClassClassifier::from_store(parsed.store)?;
    expect_fp(c.fingerprint(), &expected)?;
    if labels.len() != c.classes() {
        return Err(TrainError::Manifest("classifier label count differs from its outputs".into()));
    }
    Ok((c, labels))
}

/// Writes the base, every adapter set and the classifier into `dir`, plus a
/// manifest listing paths and fingerprints. Returns the manifest path.
pub fn save_bundle(dir: &Path, bundle: &EnsembleBundle) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(crate::model::ModelError::from)?;
    let cfg = bundle.base.config();
    let mut lines = vec![MANIFEST_MAGIC.to_owned(), format!("mode {}", bundle.mode)];
    save_base(&dir.join("base.ckpt"), &bundle.base)?;
    lines.push(format!("base base.ckpt {}", bundle.base.fingerprint()));
    for p in &bundle.privates {
        let file = format!("private-{}.ckpt", p.label);
        save_adapters(&dir.join(&file), cfg, p)?;
        lines.push(format!("private {} {file} {}", p.label, p.fingerprint()));
    }
    if let Some(c) = &bundle.classifier {
        save_classifier(&dir.join("classifier.ckpt"), &bundle.labels(), c)?;
        lines.push(format!("classifier classifier.ckpt {}", c.fingerprint()));
    }
    if let Some(s) = &bundle.student {
        save_adapters(&dir.join("student.ckpt"), cfg, s)?;
        lines.push(format!("student student.ckpt {}", s.fingerprint()));
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, lines.join("\n") + "\n").map_err(crate::model::ModelError::from)?;
    Ok(path)
}

fn expect_fp(found: Fingerprint, expected: &str) -> Result<()> {
    if found.0 != expected {
        return Err(crate::model::ModelError::FingerprintMismatch {
            expected: expected.to_owned(),
            found: found.0,
        }
        .into());
    }
    Ok(())
}

/// Loads a bundle from its manifest, checking every fingerprint.
pub fn load_bundle(manifest: &Path) -> Result<EnsembleBundle> {
    let text = std::fs::read_to_string(manifest).map_err(crate::model::ModelError::from)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let bad = |m: &str| TrainError::Manifest(m.to_owned());
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_MAGIC) {
        return Err(bad("unrecognized manifest version"));
    }
    let mut mode = None;
    let mut base = None;
    let mut privates = Vec::new();
    let mut classifier = None;
    let mut student = None;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["mode", m] => mode = Some(m.parse::<EnsembleMode>()?),
            ["base", file, fp] => {
                let b = load_base(&dir.join(file))?;
                expect_fp(b.fingerprint(), fp)?;
                base = Some(b);
            }
            ["private", label, file, fp] => {
                let b = base.as_ref().ok_or_else(|| bad("base must precede private models"))?;
                let p = load_adapters(&dir.join(file), Some(b))?;
                expect_fp(p.fingerprint(), fp)?;
                if p.label != *label {
                    return Err(bad("private label differs from its checkpoint"));
                }
                privates.push(p);
            }
            ["classifier", file, fp] => {
                let (c, _) = load_classifier(&dir.join(file))?;
                expect_fp(c.fingerprint(), fp)?;
                classifier = Some(c);
            }
            ["student", file, fp] => {
                let b = base.as_ref().ok_or_else(|| bad("base must precede the student"))?;
                let s = load_adapters(&dir.join(file), Some(b))?;
                expect_fp(s.fingerprint(), fp)?;
                student = Some(s);
            }
            _ => return Err(bad(&format!("malformed manifest line '{line}'"))),
        }
    }
    let mut bundle = EnsembleBundle::new(
        base.ok_or_else(|| bad("manifest lists no base"))?,
        privates,
        mode.ok_or_else(|| bad("manifest lists no mode"))?,
    )?;
    bundle.classifier = classifier;
    bundle.student = student;
    bundle.require(bundle.mode)?;
    Ok(bundle)
}
