//! `qrw`: difficulty scoring, partitioning, the training pipeline and
//! reports from the command line. Results go to stdout as one JSON
//! document; failures go to stderr as `{"error": ...}` with exit code 1.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use qrw_core::corpus::{canard, load_corpus, partition, score_corpus, write_corpus, CorpusFormat, UtteranceRecord};
use qrw_core::metrics::BleuConfig;
use qrw_harness::pipeline::{
    parse_scheme, run_gamma_sweep, run_stages, CorpusSplits, PipelineConfig, RunDir, Scope, ScoreLine, Stage,
};
use qrw_harness::report::build_report;
use qrw_harness::synth::{gen_synthetic, SyntheticSpec};

#[derive(Parser)]
#[command(name = "qrw", version, about = "Difficulty-aware query rewriting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score every record's difficulty
    Score {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "table3")]
        scheme: String,
        /// Score the raw question without pronoun replacement
        #[arg(long)]
        no_pronoun_rule: bool,
    },
    /// Partition records into difficulty classes and summarize the classes
    Partition {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "table3")]
        scheme: String,
        #[arg(long)]
        no_pronoun_rule: bool,
        /// Also write the full partition as JSON
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the shared model and the class-private adapters
    Train(RunArgs),
    /// Train the fusion classifier over the private models
    Fuse(RunArgs),
    /// Distill the private models into one student
    Distill {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated distillation weights to sweep after training
        #[arg(long, value_delimiter = ',')]
        gammas: Vec<f64>,
    },
    /// Evaluate every system on the test split and write the report
    Eval(RunArgs),
    /// Rebuild the report from a run's score files
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Generate a synthetic corpus
    Synth {
        #[arg(long, default_value_t = 17)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 600)]
        train_per_class: usize,
        #[arg(long, default_value_t = 100)]
        valid_per_class: usize,
        #[arg(long, default_value_t = 200)]
        test_per_class: usize,
        #[arg(long, default_value_t = 120)]
        entities: usize,
        #[arg(long, default_value_t = 24)]
        fillers: usize,
    },
    /// Convert a CANARD release file to the JSONL corpus format
    ConvertCanard {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Full,
    Reduced,
}

#[derive(Args)]
struct RunArgs {
    /// Run directory; relative paths resolve against QRW_RUN_ROOT when set
    #[arg(long)]
    run: PathBuf,
    /// Directory holding train.jsonl, valid.jsonl and optionally test.jsonl
    #[arg(long)]
    corpus: PathBuf,
    /// Pipeline configuration (JSON); defaults to the run's saved config,
    /// then to the desk settings
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed and every job seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    scope: Option<ScopeArg>,
}

fn run_dir(path: &Path) -> RunDir {
    match std::env::var_os("QRW_RUN_ROOT") {
        Some(root) if path.is_relative() => RunDir::new(Path::new(&root).join(path)),
        _ => RunDir::new(path),
    }
}

fn load(path: &Path) -> Result<Vec<UtteranceRecord>> {
    load_corpus(path, CorpusFormat::Jsonl).with_context(|| format!("reading {}", path.display()))
}

fn load_splits(dir: &Path) -> Result<CorpusSplits> {
    let test = dir.join("test.jsonl");
    Ok(CorpusSplits {
        train: load(&dir.join("train.jsonl"))?,
        valid: load(&dir.join("valid.jsonl"))?,
        test: if test.exists() { Some(load(&test)?) } else { None },
    })
}

fn resolve_config(args: &RunArgs, dir: &RunDir) -> Result<PipelineConfig> {
    let mut cfg = if let Some(path) = &args.config {
        serde_json::from_str(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)?
    } else if dir.config().exists() {
        serde_json::from_str(&fs::read_to_string(dir.config())?)?
    } else {
        PipelineConfig::desk(args.seed.unwrap_or(17))
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        for job in [&mut cfg.shared, &mut cfg.private, &mut cfg.fusion, &mut cfg.distill] {
            job.seed = seed;
        }
    }
    if let Some(scope) = args.scope {
        cfg.scope = match scope {
            ScopeArg::Full => Scope::Full,
            ScopeArg::Reduced => Scope::Reduced,
        };
    }
    Ok(cfg)
}

fn stages(args: &RunArgs, until: Stage) -> Result<(RunDir, CorpusSplits, Value)> {
    let dir = run_dir(&args.run);
    let corpus = load_splits(&args.corpus)?;
    let cfg = resolve_config(args, &dir)?;
    let report = run_stages(&corpus, &dir, &cfg, until)?;
    let mut out = json!({ "run": dir.root, "completed": until });
    if report.is_some() {
        out["report"] = json!(dir.report());
    }
    Ok((dir, corpus, out))
}

fn score_lines(records: &[UtteranceRecord], scheme: &str, no_rule: bool) -> Result<Vec<ScoreLine>> {
    let scheme = parse_scheme(scheme)?;
    let z = score_corpus(records, !no_rule, &BleuConfig::default())?;
    let labels = scheme.labels();
    records
        .iter()
        .zip(z)
        .map(|(r, z)| {
            let class = scheme.classify(z).with_context(|| format!("score {z} outside [0, 1]"))?;
            Ok(ScoreLine {
                record_id: r.id(),
                z,
                class: labels[class].clone(),
            })
        })
        .collect()
}

fn execute(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::Score {
            input,
            out,
            scheme,
            no_pronoun_rule,
        } => {
            let lines = score_lines(&load(&input)?, &scheme, no_pronoun_rule)?;
            let text: String = lines
                .iter()
                .map(|l| serde_json::to_string(l).map(|s| s + "\n"))
                .collect::<serde_json::Result<_>>()?;
            fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
            Ok(json!({ "records": lines.len(), "out": out }))
        }
        Command::Partition {
            input,
            scheme,
            no_pronoun_rule,
            out,
        } => {
            let records = load(&input)?;
            let z = score_corpus(&records, !no_pronoun_rule, &BleuConfig::default())?;
            let p = partition(&records, &z, &parse_scheme(&scheme)?)?;
            if let Some(out) = &out {
                fs::write(out, serde_json::to_string_pretty(&p)?)?;
            }
            Ok(json!({ "scheme": scheme, "labels": p.labels, "sizes": p.sizes(), "proportions": p.proportions() }))
        }
        Command::Train(args) => Ok(stages(&args, Stage::Private)?.2),
        Command::Fuse(args) => Ok(stages(&args, Stage::Fusion)?.2),
        Command::Distill { run, gammas } => {
            let (dir, corpus, mut out) = stages(&run, Stage::Distill)?;
            if !gammas.is_empty() {
                let report = run_gamma_sweep(&corpus, &dir, &gammas)?;
                out["gamma_sweep"] = json!(report.gamma_sweep);
            }
            Ok(out)
        }
        Command::Eval(args) => Ok(stages(&args, Stage::Report)?.2),
        Command::Report { run } => {
            let dir = run_dir(&run);
            if !dir.config().exists() {
                bail!("{} is not a run directory", dir.root.display());
            }
            let report = build_report(&dir)?;
            Ok(json!({ "report": dir.report(), "systems": report.systems.len() }))
        }
        Command::Synth {
            seed,
            out,
            train_per_class,
            valid_per_class,
            test_per_class,
            entities,
            fillers,
        } => {
            let spec = SyntheticSpec {
                seed,
                entities,
                fillers,
                train_per_class,
                valid_per_class,
                test_per_class,
            };
            let corpus = gen_synthetic(&spec)?;
            corpus.write(&out)?;
            let sizes: serde_json::Map<String, Value> =
                corpus.splits().iter().map(|(n, r)| (n.to_string(), json!(r.len()))).collect();
            Ok(json!({ "out": out, "records": sizes, "resampled": corpus.resampled }))
        }
        Command::ConvertCanard { input, out } => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let converted = canard::convert(&text)?;
            write_corpus(&out, &converted.records)?;
            Ok(json!({ "records": converted.records.len(), "skipped": converted.skipped.len(), "out": out }))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(out) => {
            println!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}
