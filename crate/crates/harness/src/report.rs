//! The experiment report: every number is recomputed from the record-level
//! score files in the run directory, then written as one JSON document and
//! a set of CSV tables.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use qrw_core::model::{count_adapter_params, BaseWeights, ModelConfig, BART_BASE_PARAMS};
use qrw_core::training::{ClassScore, EvalReport, RecordScore};

use crate::experiments::{ten_bin_eval, BinCurve, Heatmap};
use crate::pipeline::{private_system, read_jsonl, PartitionFile, PipelineConfig, RunDir};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFile {
    pub path: String,
    pub sha256: String,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub scheme: String,
    pub labels: Vec<String>,
    pub config: PipelineConfig,
    pub partition: Vec<SplitSummary>,
    /// Every score file the report draws on, with its digest.
    pub score_files: Vec<ScoreFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: String,
    pub sizes: Vec<usize>,
    pub proportions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemScores {
    pub system: String,
    pub records: usize,
    pub per_class: Vec<ClassScore>,
    pub overall: Option<f64>,
    pub mean_over_classes: Option<f64>,
    pub ten_bin: BinCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub gamma: f64,
    pub overall: Option<f64>,
    pub mean_over_classes: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub model: String,
    pub d_model: usize,
    pub layers: usize,
    pub bottleneck: usize,
    pub adapter_params: usize,
    pub base_params: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub meta: RunMeta,
    pub systems: Vec<SystemScores>,
    /// Private models (rows) evaluated on each test class (columns).
    pub heatmap: Heatmap,
    pub gamma_sweep: Vec<GammaRow>,
    pub params: Vec<ParamRow>,
}

impl ExperimentReport {
    pub fn system(&self, name: &str) -> Option<&SystemScores> {
        self.systems.iter().find(|s| s.system == name)
    }
}

const SYSTEM_ORDER: [&str; 6] = ["shared", "mix_gold", "predicted_route", "saf", "uniform", "sad"];

fn digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn jsonl_files(dir: &Path) -> Result<Vec<(String, std::path::PathBuf)>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "jsonl") {
            let stem = path.file_stem().expect("has a name").to_string_lossy().into_owned();
            out.push((stem, path));
        }
    }
    out.sort();
    Ok(out)
}

fn rel(dir: &RunDir, p: &Path) -> String {
    p.strip_prefix(&dir.root).unwrap_or(p).to_string_lossy().into_owned()
}

/// Adapter accounting at BART-base scale plus the run's own model.
pub fn param_table(desk: &ModelConfig) -> Vec<ParamRow> {
    let mut rows: Vec<ParamRow> = [384, 256, 64]
        .iter()
        .map(|&b| {
            let cfg = ModelConfig::bart_base(b);
            let n = count_adapter_params(&cfg);
            ParamRow {
                model: format!("bart_base_b{b}"),
                d_model: cfg.d_model,
                layers: cfg.n_enc_layers,
                bottleneck: b,
                adapter_params: n,
                base_params: BART_BASE_PARAMS,
                ratio: n as f64 / BART_BASE_PARAMS as f64,
            }
        })
        .collect();
    if let Ok(base) = BaseWeights::init(desk, 0) {
        let n = count_adapter_params(desk);
        rows.push(ParamRow {
            model: "desk".into(),
            d_model: desk.d_model,
            layers: desk.n_enc_layers,
            bottleneck: desk.adapter_bottleneck,
            adapter_params: n,
            base_params: base.num_params(),
            ratio: n as f64 / base.num_params() as f64,
        });
    }
    rows
}

/// Recomputes the report from the run directory and writes `report.json`
/// and `tables/*.csv`.
pub fn build_report(dir: &RunDir) -> Result<ExperimentReport> {
    let config: PipelineConfig = serde_json::from_str(&fs::read_to_string(dir.config())?)?;
    let part: PartitionFile = serde_json::from_str(&fs::read_to_string(dir.partition())?)?;
    let labels = part.labels.clone();
    let mut score_files = Vec::new();

    let mut evals = jsonl_files(&dir.eval_dir())?;
    let rank = |name: &str| SYSTEM_ORDER.iter().position(|s| *s == name).unwrap_or(SYSTEM_ORDER.len());
    evals.sort_by(|a, b| (rank(&a.0), &a.0).cmp(&(rank(&b.0), &b.0)));
    let mut systems = Vec::new();
    let mut by_name = std::collections::HashMap::new();
    for (name, path) in evals {
        let records: Vec<RecordScore> = read_jsonl(&path)?;
        score_files.push(ScoreFile {
            path: rel(dir, &path),
            sha256: digest(&path)?,
            records: records.len(),
        });
        let ten_bin = ten_bin_eval(&records);
        let n = records.len();
        let r = EvalReport::from_records(records, &labels);
        systems.push(SystemScores {
            system: name.clone(),
            records: n,
            per_class: r.per_class.clone(),
            overall: r.overall,
            mean_over_classes: r.mean_over_classes,
            ten_bin,
        });
        by_name.insert(name, r);
    }

    let rows: Vec<EvalReport> = labels
        .iter()
        .map(|l| {
            by_name
                .get(&private_system(l))
                .cloned()
                .unwrap_or_else(|| EvalReport::from_records(Vec::new(), &labels))
        })
        .collect();
    let heatmap = Heatmap::from_reports(labels.clone(), &rows);

    let mut gamma_sweep = Vec::new();
    for (name, path) in jsonl_files(&dir.root.join("sweep"))? {
        let Some(gamma) = name.strip_prefix("gamma-").and_then(|g| g.parse::<f64>().ok()) else {
            continue;
        };
        let records: Vec<RecordScore> = read_jsonl(&path)?;
        score_files.push(ScoreFile {
            path: rel(dir, &path),
            sha256: digest(&path)?,
            records: records.len(),
        });
        let r = EvalReport::from_records(records, &labels);
        gamma_sweep.push(GammaRow {
            gamma,
            overall: r.overall,
            mean_over_classes: r.mean_over_classes,
        });
    }
    gamma_sweep.sort_by(|a, b| a.gamma.total_cmp(&b.gamma));

    let mut desk = config.model.clone();
    desk.vocab_size = qrw_core::model::Vocab::from_text(&fs::read_to_string(dir.vocab())?).len();
    let report = ExperimentReport {
        meta: RunMeta {
            seed: config.seed,
            scheme: config.scheme.clone(),
            labels,
            partition: part
                .splits
                .iter()
                .map(|s| SplitSummary {
                    split: s.split.clone(),
                    sizes: s.sizes.clone(),
                    proportions: s.proportions.clone(),
                })
                .collect(),
            score_files,
            config,
        },
        systems,
        heatmap,
        gamma_sweep,
        params: param_table(&desk),
    };
    fs::write(dir.report(), serde_json::to_string_pretty(&report)? + "\n")?;
    write_tables(dir, &report)?;
    Ok(report)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> crate::HarnessError {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => e.into(),
        other => crate::HarnessError::Config(format!("csv: {other:?}")),
    }
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_tables(dir: &RunDir, r: &ExperimentReport) -> Result<()> {
    let t = dir.tables();
    fs::create_dir_all(&t)?;
    let mut rows = Vec::new();
    for s in &r.systems {
        for c in &s.per_class {
            rows.push(vec![s.system.clone(), c.label.clone(), c.count.to_string(), opt(c.bleu)]);
        }
        rows.push(vec![s.system.clone(), "overall".into(), s.records.to_string(), opt(s.overall)]);
        rows.push(vec![s.system.clone(), "mean_over_classes".into(), String::new(), opt(s.mean_over_classes)]);
    }
    write_csv(&t.join("systems.csv"), &["system", "class", "count", "bleu"], rows)?;

    let mut rows = Vec::new();
    for s in &r.systems {
        for b in &s.ten_bin.bins {
            rows.push(vec![s.system.clone(), b.bin.to_string(), b.count.to_string(), opt(b.bleu)]);
        }
    }
    write_csv(&t.join("ten_bin.csv"), &["system", "bin", "count", "bleu"], rows)?;

    let mut header = vec!["train_class"];
    header.extend(r.heatmap.labels.iter().map(String::as_str));
    let rows = r
        .heatmap
        .labels
        .iter()
        .zip(&r.heatmap.matrix)
        .map(|(l, row)| std::iter::once(l.clone()).chain(row.iter().map(|x| opt(*x))).collect())
        .collect();
    write_csv(&t.join("heatmap.csv"), &header, rows)?;

    let rows = r
        .gamma_sweep
        .iter()
        .map(|g| vec![g.gamma.to_string(), opt(g.overall), opt(g.mean_over_classes)])
        .collect();
    write_csv(&t.join("gamma.csv"), &["gamma", "overall", "mean_over_classes"], rows)?;

    let rows = r
        .params
        .iter()
        .map(|p| {
            vec![
                p.model.clone(),
                p.d_model.to_string(),
                p.layers.to_string(),
                p.bottleneck.to_string(),
                p.adapter_params.to_string(),
                p.base_params.to_string(),
                format!("{:.6}", p.ratio),
            ]
        })
        .collect();
    write_csv(
        &t.join("params.csv"),
        &["model", "d_model", "layers", "bottleneck", "adapter_params", "base_params", "ratio"],
        rows,
    )
}
