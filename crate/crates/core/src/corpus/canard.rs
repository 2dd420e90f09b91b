//! Conversion from the public CANARD release layout.
//!
//! The release ships one JSON array per split; each element carries
//! `History`, `QuAC_dialog_id`, `Question`, `Question_no` (1-based) and
//! `Rewrite`.

use serde::Deserialize;

use super::{CorpusError, Result, UtteranceRecord};
use crate::metrics::tokenize;

#[derive(Debug, Deserialize)]
struct CanardEntry {
    #[serde(rename = "History")]
    history: Vec<String>,
    #[serde(rename = "QuAC_dialog_id")]
    dialog_id: String,
    #[serde(rename = "Question")]
    question: String,
    #[serde(rename = "Question_no")]
    question_no: u32,
    #[serde(rename = "Rewrite")]
    rewrite: String,
}

#[derive(Debug, Default)]
pub struct Converted {
    pub records: Vec<UtteranceRecord>,
    /// Entries dropped for blank question or rewrite, with their array index.
    pub skipped: Vec<(usize, String)>,
}

pub fn convert(json: &str) -> Result<Converted> {
    let entries: Vec<CanardEntry> = serde_json::from_str(json).map_err(|e| CorpusError::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut out = Converted::default();
    for (i, e) in entries.into_iter().enumerate() {
        let (Ok(q), Ok(rw)) = (tokenize(&e.question), tokenize(&e.rewrite)) else {
            out.skipped.push((i, "blank question or rewrite".into()));
            continue;
        };
        let history = e.history.iter().filter_map(|h| tokenize(h).ok()).collect();
        match UtteranceRecord::new(e.dialog_id, e.question_no.saturating_sub(1), q, history, rw, None) {
            Ok(r) => out.records.push(r),
            Err(msg) => out.skipped.push((i, msg)),
        }
    }
    Ok(out)
}
