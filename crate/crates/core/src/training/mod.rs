//! Losses, optimizer and training loops for shared and class-private models.

mod config;
mod eval;
mod loss;
mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use qrw_tensor::{ParamStore, Tape, TensorError, Var};

use crate::metrics::MetricError;
use crate::model::{
    greedy_decode, AdapterSet, BaseWeights, BoundModel, Dropout, Example, Fingerprint, ModelError, ModelScorer,
    PaddedBatch, Skeleton, Vocab, PAD,
};

pub use config::{TrainConfig, TrainMode};
pub use eval::{
    bleu_against, evaluate, ClassScore, EvalReport, RecordScore, Rewriter, SingleModel,
};
pub use loss::{distill_loss, kd_loss, nll_loss, softmax_rows};
pub use optim::{clip_grad_norm, grad_norm, Adam};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("frozen base changed during training: {expected} -> {found}")]
    FrozenBaseViolated { expected: Fingerprint, found: Fingerprint },
    #[error("frozen model '{label}' changed during training")]
    FrozenModelViolated { label: String },
    #[error("record {0} has no gold class label")]
    MissingGoldLabel(String),
    #[error("ensemble has no {0}")]
    MissingComponent(String),
    #[error("invalid ensemble manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub epoch: usize,
    pub split: String,
    pub loss: Option<f64>,
    pub bleu: Option<f64>,
}

pub fn log_to_jsonl(events: &[LogEvent]) -> String {
    events
        .iter()
        .map(|e| serde_json::to_string(e).expect("log event serializes") + "\n")
        .collect()
}

/// Outcome of a training job.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub label: String,
    pub mode: TrainMode,
    /// Trained adapters; `None` when the base itself was fine-tuned.
    pub adapters: Option<AdapterSet>,
    /// Fingerprint of the base the model runs on after training.
    pub base_fingerprint: Fingerprint,
    pub log: Vec<LogEvent>,
    /// Epoch whose parameters were kept (0 = initial parameters).
    pub best_epoch: usize,
}

/// Shuffled batches of example indices. Within pools of eight batches,
/// examples are sorted by `lengths` so batches hold similar lengths.
pub fn make_batches(lengths: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    idx.shuffle(&mut rng);
    let mut batches = Vec::new();
    for pool in idx.chunks(batch_size * 8) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&i| lengths[i]);
        batches.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    batches
}

/// Padded encoder inputs, decoder inputs and flat targets for teacher forcing.
#[derive(Debug, Clone)]
pub struct TeacherBatch {
    pub src: PaddedBatch,
    pub dec_in: PaddedBatch,
    /// `[batch * T]` target ids, PAD beyond each row's length.
    pub targets: Vec<usize>,
}

impl TeacherBatch {
    pub fn new(examples: &[&Example]) -> Result<Self> {
        let src = PaddedBatch::new(&examples.iter().map(|e| e.src.clone()).collect::<Vec<_>>())?;
        let dec_in = PaddedBatch::new(&examples.iter().map(|e| e.decoder_input()).collect::<Vec<_>>())?;
        let mut targets = vec![PAD; examples.len() * dec_in.width];
        for (row, e) in targets.chunks_mut(dec_in.width).zip(examples) {
            row[..e.tgt.len()].copy_from_slice(&e.tgt);
        }
        Ok(Self { src, dec_in, targets })
    }

    pub fn len(&self) -> usize {
        self.dec_in.width
    }

    pub fn is_empty(&self) -> bool {
        self.dec_in.width == 0
    }
}

/// Teacher-forced logits `[batch, T, |V|]`.
pub fn forward_logits(t: &mut Tape, m: &mut BoundModel, b: &TeacherBatch) -> Result<Var> {
    let enc = m.encode(t, &b.src)?;
    Ok(m.decode(t, &enc, &b.dec_in)?)
}

/// Base parameters as tape constants.
pub fn bind_frozen(t: &mut Tape, store: &ParamStore) -> Vec<Var> {
    store
        .tensors()
        .iter()
        .map(|x| t.constant(x.shape(), x.data().to_vec()).expect("tensor shape is consistent"))
        .collect()
}

/// Something with trainable parameters and a per-batch objective.
pub(crate) trait Learner {
    fn store_mut(&mut self) -> &mut ParamStore;
    fn loss(&mut self, t: &mut Tape, vars: &[Var], batch: &[usize], step: u64) -> Result<Var>;
    /// Validation score (higher is better), or `None` to keep the last epoch.
    fn validate(&self) -> Result<Option<f64>>;
}

pub(crate) struct FitOutcome {
    pub best_epoch: usize,
    pub log: Vec<LogEvent>,
}

/// Mini-batch Adam with gradient clipping; keeps the parameters of the
/// best-validating epoch, counting the initial parameters as epoch 0.
pub(crate) fn fit(learner: &mut dyn Learner, lengths: &[usize], cfg: &TrainConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    if lengths.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    learner.store_mut().set_requires_grad(true);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut log = Vec::new();
    let snapshot = |s: &mut ParamStore| s.tensors().iter().map(|t| t.data().to_vec()).collect::<Vec<_>>();
    let mut best = match learner.validate()? {
        Some(score) => {
            log.push(LogEvent {
                epoch: 0,
                split: "valid".into(),
                loss: None,
                bleu: Some(score),
            });
            Some((0, score, snapshot(learner.store_mut())))
        }
        None => None,
    };
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        let batches = make_batches(lengths, cfg.batch_size, cfg.seed, epoch);
        for batch in &batches {
            let mut t = Tape::new();
            let vars = learner.store_mut().bind(&mut t);
            let loss = learner.loss(&mut t, &vars, batch, step)?;
            total += t.scalar(loss)?;
            t.backward(loss)?;
            let store = learner.store_mut();
            store.collect_grads(&t, &vars)?;
            clip_grad_norm(store, cfg.clip_norm);
            adam.step(store);
            store.zero_grad();
            step += 1;
        }
        log.push(LogEvent {
            epoch,
            split: "train".into(),
            loss: Some(total / batches.len() as f64),
            bleu: None,
        });
        if let Some(score) = learner.validate()? {
            log.push(LogEvent {
                epoch,
                split: "valid".into(),
                loss: None,
                bleu: Some(score),
            });
            if best.as_ref().is_none_or(|b| score > b.1) {
                best = Some((epoch, score, snapshot(learner.store_mut())));
            }
        }
    }
    let best_epoch = match best {
        Some((epoch, _, params)) => {
            for (t, p) in learner.store_mut().tensors_mut().iter_mut().zip(params) {
                t.data_mut().copy_from_slice(&p);
            }
            epoch
        }
        None => cfg.epochs,
    };
    Ok(FitOutcome { best_epoch, log })
}

/// Mean greedy-decode BLEU of a model over `examples`.
pub fn greedy_bleu(
    base: &BaseWeights,
    adapters: Option<&AdapterSet>,
    examples: &[Example],
    vocab: &Vocab,
    max_len: usize,
) -> Result<f64> {
    let scores: Vec<f64> = examples
        .par_iter()
        .map(|ex| {
            let scorer = ModelScorer::new(base, adapters, &ex.src)?;
            let hyp = greedy_decode(&scorer, max_len)?;
            bleu_against(&hyp.tokens, ex, vocab)
        })
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len().max(1) as f64)
}

fn dropout_for(base: &BaseWeights, seed: u64, step: u64) -> Option<Dropout> {
    let rate = base.config().dropout;
    (rate > 0.0).then(|| Dropout {
        rate,
        rng: ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ step),
    })
}

/// Per-batch objective over teacher-forced logits: `(tape, logits, example
/// indices, flat targets)`.
pub type Objective<'a> = dyn Fn(&mut Tape, Var, &[usize], &[usize]) -> Result<Var> + 'a;

/// Plain NLL objective.
pub fn nll_objective(t: &mut Tape, logits: Var, _batch: &[usize], targets: &[usize]) -> Result<Var> {
    nll_loss(t, logits, targets)
}

struct AdapterLearner<'a> {
    base: &'a BaseWeights,
    skel: Skeleton,
    adapters: AdapterSet,
    train: &'a [Example],
    valid: &'a [Example],
    vocab: &'a Vocab,
    cfg: &'a TrainConfig,
    objective: &'a Objective<'a>,
}

impl Learner for AdapterLearner<'_> {
    fn store_mut(&mut self) -> &mut ParamStore {
        self.adapters.store_mut()
    }

    fn loss(&mut self, t: &mut Tape, vars: &[Var], batch: &[usize], step: u64) -> Result<Var> {
        let base_vars = bind_frozen(t, self.base.store());
        let mut m = BoundModel::attach(self.skel.clone(), base_vars, Some(vars.to_vec()));
        m.dropout = dropout_for(self.base, self.cfg.seed, step);
        let exs: Vec<&Example> = batch.iter().map(|&i| &self.train[i]).collect();
        let tb = TeacherBatch::new(&exs)?;
        let logits = forward_logits(t, &mut m, &tb)?;
        (self.objective)(t, logits, batch, &tb.targets)
    }

    fn validate(&self) -> Result<Option<f64>> {
        if self.valid.is_empty() {
            return Ok(None);
        }
        greedy_bleu(self.base, Some(&self.adapters), self.valid, self.vocab, self.cfg.max_decode_len).map(Some)
    }
}

struct FullLearner<'a> {
    base: &'a mut BaseWeights,
    skel: Skeleton,
    train: &'a [Example],
    valid: &'a [Example],
    vocab: &'a Vocab,
    cfg: &'a TrainConfig,
}

impl Learner for FullLearner<'_> {
    fn store_mut(&mut self) -> &mut ParamStore {
        self.base.store_mut()
    }

    fn loss(&mut self, t: &mut Tape, vars: &[Var], batch: &[usize], step: u64) -> Result<Var> {
        let mut m = BoundModel::attach(self.skel.clone(), vars.to_vec(), None);
        m.dropout = dropout_for(self.base, self.cfg.seed, step);
        let exs: Vec<&Example> = batch.iter().map(|&i| &self.train[i]).collect();
        let tb = TeacherBatch::new(&exs)?;
        let logits = forward_logits(t, &mut m, &tb)?;
        nll_loss(t, logits, &tb.targets)
    }

    fn validate(&self) -> Result<Option<f64>> {
        if self.valid.is_empty() {
            return Ok(None);
        }
        greedy_bleu(self.base, None, self.valid, self.vocab, self.cfg.max_decode_len).map(Some)
    }
}

fn lengths(train: &[Example]) -> Vec<usize> {
    train.iter().map(|e| e.src.len()).collect()
}

/// Trains adapters over a frozen base with a custom objective. The base
/// fingerprint is checked before and after.
#[allow(clippy::too_many_arguments)]
pub fn train_adapters(
    base: &BaseWeights,
    adapters: AdapterSet,
    train: &[Example],
    valid: &[Example],
    vocab: &Vocab,
    cfg: &TrainConfig,
    objective: &Objective<'_>,
) -> Result<TrainedModel> {
    if cfg.mode != TrainMode::AdapterOnly {
        return Err(TrainError::Config("adapter training requires mode adapter_only".into()));
    }
    if !adapters.fits(base.config()) {
        return Err(ModelError::Config("adapter set does not fit the base geometry".into()).into());
    }
    let before = base.fingerprint();
    let mut learner = AdapterLearner {
        base,
        skel: base.skeleton(),
        adapters,
        train,
        valid,
        vocab,
        cfg,
        objective,
    };
    let out = fit(&mut learner, &lengths(train), cfg)?;
    let after = base.fingerprint();
    if after != before {
        return Err(TrainError::FrozenBaseViolated {
            expected: before,
            found: after,
        });
    }
    let mut adapters = learner.adapters;
    adapters.base_fingerprint = Some(after.clone());
    Ok(TrainedModel {
        label: adapters.label.clone(),
        mode: TrainMode::AdapterOnly,
        adapters: Some(adapters),
        base_fingerprint: after,
        log: out.log,
        best_epoch: out.best_epoch,
    })
}

/// Trains one model on all classes. In `finetune_all` mode the base itself
/// is updated; in `adapter_only` mode a fresh adapter set labelled
/// "shared" is trained over the frozen base.
pub fn train_shared(
    base: &mut BaseWeights,
    train: &[Example],
    valid: &[Example],
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    match cfg.mode {
        TrainMode::AdapterOnly => {
            let set = AdapterSet::new(base.config(), "shared", cfg.seed)?;
            train_adapters(base, set, train, valid, vocab, cfg, &nll_objective)
        }
        TrainMode::FinetuneAll => {
            let skel = base.skeleton();
            let mut learner = FullLearner {
                base,
                skel,
                train,
                valid,
                vocab,
                cfg,
            };
            let out = fit(&mut learner, &lengths(train), cfg)?;
            Ok(TrainedModel {
                label: "shared".into(),
                mode: TrainMode::FinetuneAll,
                adapters: None,
                base_fingerprint: base.fingerprint(),
                log: out.log,
                best_epoch: out.best_epoch,
            })
        }
    }
}

/// Trains the private adapters of one class over the frozen base, starting
/// from `init` when given and from fresh adapters (seeded by `cfg.seed`)
/// otherwise.
#[allow(clippy::too_many_arguments)]
pub fn train_private(
    base: &BaseWeights,
    init: Option<&AdapterSet>,
    train: &[Example],
    valid: &[Example],
    vocab: &Vocab,
    cfg: &TrainConfig,
    label: &str,
) -> Result<TrainedModel> {
    let mut set = match init {
        Some(s) => s.clone(),
        None => AdapterSet::new(base.config(), label, cfg.seed)?,
    };
    set.label = label.to_owned();
    train_adapters(base, set, train, valid, vocab, cfg, &nll_objective)
}
