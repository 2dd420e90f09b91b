use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    FinetuneAll,
    AdapterOnly,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::FinetuneAll => "finetune_all",
            TrainMode::AdapterOnly => "adapter_only",
        }
    }

    pub fn default_learning_rate(self) -> f64 {
        match self {
            TrainMode::FinetuneAll => 1e-5,
            TrainMode::AdapterOnly => 1e-4,
        }
    }
}

impl FromStr for TrainMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune_all" => Ok(TrainMode::FinetuneAll),
            "adapter_only" => Ok(TrainMode::AdapterOnly),
            other => Err(TrainError::Config(format!("unknown mode '{other}'"))),
        }
    }
}

/// Optimization and decoding settings for one training job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Weight of the NLL term in the distillation loss.
    pub gamma: f64,
    /// Weight of the classification term in the fusion loss.
    pub class_weight: f64,
    /// Beam width for test decoding; validation decodes greedily.
    pub beam_width: usize,
    pub max_decode_len: usize,
}

impl TrainConfig {
    pub fn new(mode: TrainMode) -> Self {
        Self {
            mode,
            learning_rate: mode.default_learning_rate(),
            epochs: 10,
            batch_size: 16,
            seed: 17,
            clip_norm: 1.0,
            gamma: 0.5,
            class_weight: 1.0,
            beam_width: 4,
            max_decode_len: 48,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be a non-negative finite number");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail("gamma must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.beam_width == 0 || self.max_decode_len == 0 {
            return fail("batch_size, beam_width and max_decode_len must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return fail("clip_norm must be positive");
        }
        if !(self.class_weight >= 0.0) {
            return fail("class_weight must be non-negative");
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Keys not given keep
    /// the defaults of the given (or default adapter) mode.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((k.trim().to_owned(), v.trim().to_owned(), n + 1));
        }
        let mode = match pairs.iter().find(|(k, _, _)| k == "mode") {
            Some((_, v, _)) => v.parse()?,
            None => TrainMode::AdapterOnly,
        };
        let mut cfg = Self::new(mode);
        for (k, v, line) in pairs {
            let bad = |e: &dyn std::fmt::Display| TrainError::Config(format!("line {line}: {k}: {e}"));
            macro_rules! set {
                ($field:ident) => {
                    cfg.$field = v.parse().map_err(|e| bad(&e))?
                };
            }
            match k.as_str() {
                "mode" => {}
                "learning_rate" => set!(learning_rate),
                "epochs" => set!(epochs),
                "batch_size" => set!(batch_size),
                "seed" => set!(seed),
                "clip_norm" => set!(clip_norm),
                "gamma" => set!(gamma),
                "class_weight" => set!(class_weight),
                "beam_width" => set!(beam_width),
                "max_decode_len" => set!(max_decode_len),
                _ => return Err(TrainError::Config(format!("line {line}: unknown key '{k}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode = {}", self.mode.as_str());
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "clip_norm = {}", self.clip_norm);
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "class_weight = {}", self.class_weight);
        let _ = writeln!(s, "beam_width = {}", self.beam_width);
        let _ = writeln!(s, "max_decode_len = {}", self.max_decode_len);
        s
    }
}
