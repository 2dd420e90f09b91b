//! The end-to-end run: score, partition, train the shared model and the
//! class-private adapters, fit the fusion classifier, distill the student,
//! evaluate every system and emit the report. Each stage leaves a marker
//! keyed by its inputs, so reruns skip finished stages.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use qrw_core::corpus::{partition, record_to_json, score_corpus, Scheme, UtteranceRecord};
use qrw_core::ensemble::{
    load_bundle, load_classifier, saf_train, sad_train, save_bundle, save_classifier, EnsembleBundle, EnsembleMode,
    EnsembleRewriter,
};
use qrw_core::metrics::BleuConfig;
use qrw_core::model::{load_adapters, load_base, save_adapters, save_base, AdapterSet, BaseWeights, Example, ModelConfig, Vocab};
use qrw_core::training::{
    evaluate, log_to_jsonl, train_private, train_shared, EvalReport, RecordScore, Rewriter, SingleModel, TrainConfig,
    TrainMode,
};

use crate::experiments::gamma_sweep;
use crate::report::{build_report, ExperimentReport};
use crate::{HarnessError, Result};

/// Version line of the run-directory layout.
pub const RUN_LAYOUT: &str = "qrw-run 1";

/// How much of the pipeline to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Every stage and every system.
    Full,
    /// Shared and private models only, each private evaluated on its own class.
    Reduced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Seeds the base initialization and every training job.
    pub seed: u64,
    pub scheme: String,
    pub pronoun_rule: bool,
    /// Model geometry; `vocab_size` is replaced by the size of the
    /// vocabulary built from the training split.
    pub model: ModelConfig,
    pub vocab_max: Option<usize>,
    pub shared: TrainConfig,
    pub private: TrainConfig,
    pub fusion: TrainConfig,
    pub distill: TrainConfig,
    pub beam_width: usize,
    pub max_decode_len: usize,
    pub scope: Scope,
}

impl PipelineConfig {
    /// Desk-scale settings used by the synthetic experiment.
    pub fn desk(seed: u64) -> Self {
        let model = ModelConfig {
            vocab_size: 0,
            d_model: 32,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            ffn_dim: 64,
            adapter_bottleneck: 16,
            max_seq_len: 32,
            dropout: 0.0,
        };
        let job = |mode, lr, epochs| {
            let mut c = TrainConfig::new(mode);
            c.learning_rate = lr;
            c.epochs = epochs;
            c.seed = seed;
            c.max_decode_len = 20;
            c
        };
        Self {
            seed,
            scheme: "table3".into(),
            pronoun_rule: true,
            model,
            vocab_max: None,
            shared: job(TrainMode::FinetuneAll, 3e-3, 4),
            private: job(TrainMode::AdapterOnly, 3e-3, 8),
            fusion: job(TrainMode::AdapterOnly, 1e-2, 10),
            distill: job(TrainMode::AdapterOnly, 3e-3, 8),
            beam_width: 4,
            max_decode_len: 20,
            scope: Scope::Full,
        }
    }

    pub fn scheme(&self) -> Result<Scheme> {
        parse_scheme(&self.scheme)
    }

    pub fn validate(&self) -> Result<()> {
        self.scheme()?;
        for job in [&self.shared, &self.private, &self.fusion, &self.distill] {
            job.validate()?;
        }
        if self.shared.mode != TrainMode::FinetuneAll {
            return Err(HarnessError::Config("the shared model trains in finetune_all mode".into()));
        }
        if [&self.private, &self.fusion, &self.distill]
            .iter()
            .any(|j| j.mode != TrainMode::AdapterOnly)
        {
            return Err(HarnessError::Config("private, fusion and distill jobs train in adapter_only mode".into()));
        }
        if self.beam_width == 0 || self.max_decode_len == 0 {
            return Err(HarnessError::Config("beam_width and max_decode_len must be positive".into()));
        }
        Ok(())
    }
}

/// Scheme presets by name, plus `uniform-K` for K equal-width bins.
pub fn parse_scheme(name: &str) -> Result<Scheme> {
    if let Some(k) = name.strip_prefix("uniform-") {
        let k: usize = k
            .parse()
            .map_err(|_| HarnessError::Config(format!("bad bin count in scheme '{name}'")))?;
        return Ok(Scheme::uniform(k)?);
    }
    Scheme::by_name(name).ok_or_else(|| HarnessError::Config(format!("unknown scheme '{name}'")))
}

/// Train, valid and optional test records.
#[derive(Debug, Clone)]
pub struct CorpusSplits {
    pub train: Vec<UtteranceRecord>,
    pub valid: Vec<UtteranceRecord>,
    pub test: Option<Vec<UtteranceRecord>>,
}

impl CorpusSplits {
    fn named(&self) -> Vec<(&'static str, &[UtteranceRecord])> {
        let mut v = vec![("train", self.train.as_slice()), ("valid", self.valid.as_slice())];
        if let Some(t) = &self.test {
            v.push(("test", t.as_slice()));
        }
        v
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, recs) in self.named() {
            h.update(name.as_bytes());
            for r in recs {
                h.update(record_to_json(r).as_bytes());
                h.update(b"\n");
            }
        }
        hex::encode(h.finalize())
    }
}

/// Fixed paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }

    pub fn scores(&self, split: &str) -> PathBuf {
        self.root.join("scores").join(format!("{split}.jsonl"))
    }

    pub fn partition(&self) -> PathBuf {
        self.root.join("partition.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn base(&self) -> PathBuf {
        self.checkpoints().join("base.ckpt")
    }

    pub fn private(&self, label: &str) -> PathBuf {
        self.checkpoints().join(format!("private-{label}.ckpt"))
    }

    pub fn classifier(&self) -> PathBuf {
        self.checkpoints().join("classifier.ckpt")
    }

    pub fn student(&self) -> PathBuf {
        self.checkpoints().join("student.ckpt")
    }

    pub fn log(&self, job: &str) -> PathBuf {
        self.root.join("logs").join(format!("{job}.jsonl"))
    }

    pub fn eval(&self, system: &str) -> PathBuf {
        self.root.join("eval").join(format!("{system}.jsonl"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn tables(&self) -> PathBuf {
        self.root.join("tables")
    }

    pub fn timing(&self) -> PathBuf {
        self.root.join("timing.json")
    }

    fn marker(&self, stage: &str) -> PathBuf {
        self.root.join("stages").join(format!("{stage}.done"))
    }

    fn create(&self) -> Result<()> {
        for d in ["scores", "checkpoints", "logs", "eval", "tables", "stages"] {
            fs::create_dir_all(self.root.join(d))?;
        }
        let layout = self.root.join("layout.txt");
        match fs::read_to_string(&layout) {
            Ok(v) if v.trim() != RUN_LAYOUT => Err(HarnessError::Config(format!(
                "run directory uses layout '{}', expected '{RUN_LAYOUT}'",
                v.trim()
            ))),
            Ok(_) => Ok(()),
            Err(_) => Ok(fs::write(layout, format!("{RUN_LAYOUT}\n"))?),
        }
    }
}

/// Difficulty score and class of one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub record_id: String,
    pub z: f64,
    pub class: String,
}

/// Class labels plus, per split, each record's class index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionFile {
    pub scheme: String,
    pub labels: Vec<String>,
    pub splits: Vec<SplitClasses>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitClasses {
    pub split: String,
    pub sizes: Vec<usize>,
    pub proportions: Vec<f64>,
    pub classes: Vec<usize>,
    pub z: Vec<f64>,
}

impl PartitionFile {
    pub fn split(&self, name: &str) -> Option<&SplitClasses> {
        self.splits.iter().find(|s| s.split == name)
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut text = String::new();
    for it in items {
        text.push_str(&serde_json::to_string(it)?);
        text.push('\n');
    }
    Ok(fs::write(path, text)?)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Tracks stage markers for one run.
struct Stages<'a> {
    dir: &'a RunDir,
    key: String,
}

impl Stages<'_> {
    fn stage_key(&self, stage: &str) -> String {
        hex::encode(Sha256::digest(format!("{}:{stage}", self.key)))
    }

    fn done(&self, stage: &str) -> bool {
        fs::read_to_string(self.dir.marker(stage)).is_ok_and(|k| k.trim() == self.stage_key(stage))
    }

    fn mark(&self, stage: &str) -> Result<()> {
        Ok(fs::write(self.dir.marker(stage), self.stage_key(stage) + "\n")?)
    }
}

fn stage_err(stage: &str) -> impl Fn(HarnessError) -> HarnessError + '_ {
    move |e| match e {
        HarnessError::Stage { .. } => e,
        other => HarnessError::Stage {
            stage: stage.to_owned(),
            message: other.to_string(),
        },
    }
}

/// Examples of one split with classes attached.
fn examples(records: &[UtteranceRecord], classes: &[usize], vocab: &Vocab, max_len: usize) -> Vec<Example> {
    records
        .iter()
        .zip(classes)
        .map(|(r, &c)| Example::from_record(r, vocab, max_len, Some(c)))
        .collect()
}

fn of_class(examples: &[Example], c: usize) -> Vec<Example> {
    examples.iter().filter(|e| e.class == Some(c)).cloned().collect()
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Partition,
    Shared,
    Private,
    Fusion,
    Distill,
    Evaluate,
    Report,
}

/// Runs (or resumes) every stage in `dir` and returns the report.
pub fn run_pipeline(corpus: &CorpusSplits, dir: &RunDir, cfg: &PipelineConfig) -> Result<ExperimentReport> {
    Ok(run_stages(corpus, dir, cfg, Stage::Report)?.expect("the report stage returns a report"))
}

/// Runs (or resumes) the stages up to and including `until`. Returns the
/// report when the report stage ran.
pub fn run_stages(
    corpus: &CorpusSplits,
    dir: &RunDir,
    cfg: &PipelineConfig,
    until: Stage,
) -> Result<Option<ExperimentReport>> {
    cfg.validate()?;
    dir.create()?;
    let config_json = serde_json::to_string_pretty(cfg)?;
    fs::write(dir.config(), &config_json)?;
    let stages = Stages {
        dir,
        key: hex::encode(Sha256::digest(format!("{}\n{config_json}", corpus.fingerprint()))),
    };
    let mut timing = serde_json::Map::new();
    let mut timed = |name: &str, start: Instant| {
        timing.insert(name.to_owned(), serde_json::json!(start.elapsed().as_secs_f64()));
    };

    let t = Instant::now();
    let part = score_and_partition(corpus, dir, cfg, &stages).map_err(stage_err("partition"))?;
    timed("partition", t);
    let labels = part.labels.clone();
    let vocab = Vocab::build(&corpus.train, cfg.vocab_max);
    fs::write(dir.vocab(), vocab.to_text())?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = vocab.len();
    let max_len = model_cfg.max_seq_len;
    let split_examples = |name: &str, recs: &[UtteranceRecord]| {
        let s = part.split(name).expect("every split is partitioned");
        examples(recs, &s.classes, &vocab, max_len)
    };
    let train = split_examples("train", &corpus.train);
    let valid = split_examples("valid", &corpus.valid);

    let report = (|| -> Result<Option<ExperimentReport>> {
        if until == Stage::Partition {
            return Ok(None);
        }
        let t = Instant::now();
        let base = shared_stage(dir, cfg, &stages, &model_cfg, &train, &valid, &vocab).map_err(stage_err("shared"))?;
        timed("shared", t);
        if until == Stage::Shared {
            return Ok(None);
        }
        let t = Instant::now();
        let privates =
            private_stage(dir, cfg, &stages, &base, &labels, &train, &valid, &vocab).map_err(stage_err("private"))?;
        timed("private", t);

        let mut bundle = EnsembleBundle::new(base, privates, EnsembleMode::Saf)?;
        if cfg.scope == Scope::Full && until >= Stage::Fusion {
            let t = Instant::now();
            fusion_stage(dir, cfg, &stages, &mut bundle, &labels, &train, &valid).map_err(stage_err("fusion"))?;
            timed("fusion", t);
        }
        if cfg.scope == Scope::Full && until >= Stage::Distill {
            let t = Instant::now();
            distill_stage(dir, cfg, &stages, &mut bundle, &train, &valid, &vocab).map_err(stage_err("distill"))?;
            timed("distill", t);
        }
        if until < Stage::Evaluate {
            return Ok(None);
        }

        let t = Instant::now();
        let test_records = corpus.test.as_ref().ok_or_else(|| HarnessError::Stage {
            stage: "evaluate".into(),
            message: "missing test split".into(),
        })?;
        let test = split_examples("test", test_records);
        let z = &part.split("test").expect("test split is partitioned").z;
        evaluate_stage(dir, cfg, &stages, &bundle, &labels, &test, z, &vocab).map_err(stage_err("evaluate"))?;
        timed("evaluate", t);
        if until == Stage::Evaluate {
            return Ok(None);
        }
        Ok(Some(build_report(dir).map_err(stage_err("report"))?))
    })()?;
    fs::write(dir.timing(), serde_json::to_string_pretty(&timing)?)?;
    Ok(report)
}

fn score_and_partition(
    corpus: &CorpusSplits,
    dir: &RunDir,
    cfg: &PipelineConfig,
    stages: &Stages,
) -> Result<PartitionFile> {
    if stages.done("partition") {
        return Ok(serde_json::from_str(&fs::read_to_string(dir.partition())?)?);
    }
    let scheme = cfg.scheme()?;
    let bleu = BleuConfig::default();
    let mut splits = Vec::new();
    for (name, recs) in corpus.named() {
        let z = score_corpus(recs, cfg.pronoun_rule, &bleu)?;
        let p = partition(recs, &z, &scheme)?;
        let lines: Vec<ScoreLine> = recs
            .iter()
            .zip(&z)
            .zip(&p.assignments)
            .map(|((r, &z), a)| ScoreLine {
                record_id: r.id(),
                z,
                class: p.labels[a.class].clone(),
            })
            .collect();
        write_jsonl(&dir.scores(name), &lines)?;
        splits.push(SplitClasses {
            split: name.into(),
            sizes: p.sizes(),
            proportions: p.proportions(),
            classes: p.assignments.iter().map(|a| a.class).collect(),
            z,
        });
    }
    let part = PartitionFile {
        scheme: cfg.scheme.clone(),
        labels: scheme.labels(),
        splits,
    };
    let train = part.split("train").expect("train split present");
    if let Some(c) = train.sizes.iter().position(|&n| n == 0) {
        return Err(HarnessError::EmptyClass(c));
    }
    fs::write(dir.partition(), serde_json::to_string_pretty(&part)?)?;
    stages.mark("partition")?;
    Ok(part)
}

fn shared_stage(
    dir: &RunDir,
    cfg: &PipelineConfig,
    stages: &Stages,
    model_cfg: &ModelConfig,
    train: &[Example],
    valid: &[Example],
    vocab: &Vocab,
) -> Result<BaseWeights> {
    if stages.done("shared") {
        return Ok(load_base(&dir.base())?);
    }
    let mut base = BaseWeights::init(model_cfg, cfg.seed)?;
    let trained = train_shared(&mut base, train, valid, vocab, &cfg.shared)?;
    fs::write(dir.log("shared"), log_to_jsonl(&trained.log))?;
    save_base(&dir.base(), &base)?;
    stages.mark("shared")?;
    Ok(base)
}

#[allow(clippy::too_many_arguments)]
fn private_stage(
    dir: &RunDir,
    cfg: &PipelineConfig,
    stages: &Stages,
    base: &BaseWeights,
    labels: &[String],
    train: &[Example],
    valid: &[Example],
    vocab: &Vocab,
) -> Result<Vec<AdapterSet>> {
    if stages.done("private") {
        return labels
            .iter()
            .map(|l| Ok(load_adapters(&dir.private(l), Some(base))?))
            .collect();
    }
    let mut out = Vec::new();
    for (c, label) in labels.iter().enumerate() {
        let m = train_private(base, None, &of_class(train, c), &of_class(valid, c), vocab, &cfg.private, label)?;
        fs::write(dir.log(&format!("private-{label}")), log_to_jsonl(&m.log))?;
        let set = m.adapters.expect("adapter training returns adapters");
        save_adapters(&dir.private(label), base.config(), &set)?;
        out.push(set);
    }
    stages.mark("private")?;
    Ok(out)
}

fn fusion_stage(
    dir: &RunDir,
    cfg: &PipelineConfig,
    stages: &Stages,
    bundle: &mut EnsembleBundle,
    labels: &[String],
    train: &[Example],
    valid: &[Example],
) -> Result<()> {
    if stages.done("fusion") {
        bundle.classifier = Some(load_classifier(&dir.classifier())?.0);
        return Ok(());
    }
    let log = saf_train(bundle, train, valid, &cfg.fusion)?;
    fs::write(dir.log("fusion"), log_to_jsonl(&log))?;
    save_classifier(&dir.classifier(), labels, bundle.classifier.as_ref().expect("trained"))?;
    stages.mark("fusion")
}

fn distill_stage(
    dir: &RunDir,
    cfg: &PipelineConfig,
    stages: &Stages,
    bundle: &mut EnsembleBundle,
    train: &[Example],
    valid: &[Example],
    vocab: &Vocab,
) -> Result<()> {
    if stages.done("distill") {
        bundle.student = Some(load_adapters(&dir.student(), Some(&bundle.base))?);
        return Ok(());
    }
    let log = sad_train(bundle, train, valid, vocab, &cfg.distill)?;
    fs::write(dir.log("distill"), log_to_jsonl(&log))?;
    save_bundle(&dir.checkpoints(), bundle)?;
    stages.mark("distill")
}

/// System names as they appear in score files and the report.
pub fn private_system(label: &str) -> String {
    format!("private-{label}")
}

fn write_scores(dir: &RunDir, system: &str, records: &[RecordScore]) -> Result<()> {
    write_jsonl(&dir.eval(system), records)
}

/// Picks, per record, the score line of the system `choose` names.
fn routed(
    choose: impl Fn(usize) -> Result<usize>,
    per_private: &[EvalReport],
    n: usize,
) -> Result<Vec<RecordScore>> {
    (0..n).map(|i| Ok(per_private[choose(i)?].records[i].clone())).collect()
}

#[allow(clippy::too_many_arguments)]
fn evaluate_stage(
    dir: &RunDir,
    cfg: &PipelineConfig,
    stages: &Stages,
    bundle: &EnsembleBundle,
    labels: &[String],
    test: &[Example],
    z: &[f64],
    vocab: &Vocab,
) -> Result<()> {
    if stages.done("evaluate") {
        return Ok(());
    }
    for old in fs::read_dir(dir.eval_dir())? {
        fs::remove_file(old?.path())?;
    }
    let run = |rw: &dyn Rewriter, exs: &[Example], zs: &[f64]| evaluate(rw, exs, vocab, labels, Some(zs));
    let single = |adapters| SingleModel {
        base: &bundle.base,
        adapters,
        beam_width: cfg.beam_width,
        max_len: cfg.max_decode_len,
    };
    let shared = run(&single(None), test, z)?;
    write_scores(dir, "shared", &shared.records)?;

    match cfg.scope {
        Scope::Reduced => {
            let mut gold = Vec::new();
            for (c, p) in bundle.privates.iter().enumerate() {
                let idx: Vec<usize> = (0..test.len()).filter(|&i| test[i].class == Some(c)).collect();
                let exs: Vec<Example> = idx.iter().map(|&i| test[i].clone()).collect();
                let zs: Vec<f64> = idx.iter().map(|&i| z[i]).collect();
                let r = run(&single(Some(p)), &exs, &zs)?;
                write_scores(dir, &private_system(&labels[c]), &r.records)?;
                gold.extend(idx.into_iter().zip(r.records));
            }
            gold.sort_by_key(|(i, _)| *i);
            let mix: Vec<RecordScore> = gold.into_iter().map(|(_, r)| r).collect();
            write_scores(dir, EnsembleMode::MixGold.as_str(), &mix)?;
        }
        Scope::Full => {
            let per_private: Vec<EvalReport> = bundle
                .privates
                .iter()
                .map(|p| Ok(run(&single(Some(p)), test, z)?))
                .collect::<Result<_>>()?;
            for (c, r) in per_private.iter().enumerate() {
                write_scores(dir, &private_system(&labels[c]), &r.records)?;
            }
            let gold = |i: usize| {
                test[i]
                    .class
                    .ok_or_else(|| HarnessError::Config(format!("record {} has no class", test[i].record_id)))
            };
            let mix = routed(gold, &per_private, test.len())?;
            write_scores(dir, EnsembleMode::MixGold.as_str(), &mix)?;
            let predicted = |i: usize| Ok(bundle.predicted_class(&test[i].src)?);
            let pred = routed(predicted, &per_private, test.len())?;
            write_scores(dir, EnsembleMode::PredictedRoute.as_str(), &pred)?;
            for mode in [EnsembleMode::Saf, EnsembleMode::Uniform, EnsembleMode::Sad] {
                let rw = EnsembleRewriter {
                    bundle,
                    mode,
                    beam_width: cfg.beam_width,
                    max_len: cfg.max_decode_len,
                };
                let r = run(&rw, test, z)?;
                write_scores(dir, mode.as_str(), &r.records)?;
            }
        }
    }
    stages.mark("evaluate")
}

/// Runs the distillation weight sweep against a finished full-scope run,
/// writing one score file per weight under `sweep/` and refreshing the
/// report.
pub fn run_gamma_sweep(corpus: &CorpusSplits, dir: &RunDir, gammas: &[f64]) -> Result<ExperimentReport> {
    let cfg: PipelineConfig = serde_json::from_str(&fs::read_to_string(dir.config())?)?;
    let part: PartitionFile = serde_json::from_str(&fs::read_to_string(dir.partition())?)?;
    let vocab = Vocab::from_text(&fs::read_to_string(dir.vocab())?);
    let bundle = load_bundle(&dir.checkpoints().join("manifest.txt"))?;
    let max_len = bundle.base.config().max_seq_len;
    let split = |name: &str, recs: &[UtteranceRecord]| -> Result<Vec<Example>> {
        let s = part
            .split(name)
            .ok_or_else(|| HarnessError::Config(format!("run has no {name} split")))?;
        if s.classes.len() != recs.len() {
            return Err(HarnessError::Config(format!("{name} split differs from the run's corpus")));
        }
        Ok(examples(recs, &s.classes, &vocab, max_len))
    };
    let train = split("train", &corpus.train)?;
    let valid = split("valid", &corpus.valid)?;
    let test_records = corpus.test.as_ref().ok_or_else(|| HarnessError::Stage {
        stage: "evaluate".into(),
        message: "missing test split".into(),
    })?;
    let test = split("test", test_records)?;
    let z = &part.split("test").expect("checked above").z;
    let points = gamma_sweep(&bundle, &train, &valid, &test, &vocab, &cfg.distill, gammas, cfg.beam_width, cfg.max_decode_len)?;
    let sweep = dir.root.join("sweep");
    fs::create_dir_all(&sweep)?;
    for mut p in points {
        for (r, &z) in p.records.iter_mut().zip(z) {
            r.z = Some(z);
        }
        write_jsonl(&sweep.join(format!("gamma-{:.3}.jsonl", p.gamma)), &p.records)?;
    }
    build_report(dir)
}
