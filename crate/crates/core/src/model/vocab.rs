use std::collections::HashMap;

use crate::corpus::UtteranceRecord;
use crate::metrics::TokenSeq;

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<s>", "</s>", "|||", "<unk>"];

/// Word-level vocabulary; ids 0-4 are the special tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in words {
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Most frequent tokens first (ties alphabetical), capped at `max_size`
    /// entries including the specials.
    pub fn build<'a>(records: impl IntoIterator<Item = &'a UtteranceRecord>, max_size: Option<usize>) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for r in records {
            let seqs = std::iter::once(&r.question)
                .chain(&r.history)
                .chain(std::iter::once(&r.rewrite));
            for s in seqs {
                for t in s.iter() {
                    *counts.entry(t.as_str()).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !SPECIALS.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let keep = max_size.map_or(ranked.len(), |m| m.saturating_sub(SPECIALS.len()));
        Self::from_tokens(ranked.into_iter().take(keep).map(|(t, _)| t.to_owned()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn encode(&self, seq: &TokenSeq) -> Vec<usize> {
        seq.iter().map(|t| self.id(t)).collect()
    }

    /// Maps ids back to tokens, dropping pad/start/end/separator.
    pub fn decode(&self, ids: &[usize]) -> TokenSeq {
        TokenSeq::new(
            ids.iter()
                .filter(|&&i| !matches!(i, PAD | START | END | SEP))
                .map(|&i| self.token(i).to_owned())
                .collect(),
        )
        .expect("vocabulary tokens contain no whitespace")
    }

    pub fn to_text(&self) -> String {
        self.tokens[SPECIALS.len()..].join("\n")
    }

    pub fn from_text(text: &str) -> Self {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()).map(str::to_owned))
    }
}

/// Encoder input: `question ||| turn 1 ||| turn 2 ...`. When that exceeds
/// `max_len`, the oldest history turns are dropped first; a question longer
/// than `max_len` is truncated.
pub fn assemble_source(r: &UtteranceRecord, vocab: &Vocab, max_len: usize) -> Vec<usize> {
    let mut q = vocab.encode(&r.question);
    q.truncate(max_len);
    let turns: Vec<Vec<usize>> = r.history.iter().map(|h| vocab.encode(h)).collect();
    let mut first = 0;
    let total = |from: usize| q.len() + turns[from..].iter().map(|t| t.len() + 1).sum::<usize>();
    while first < turns.len() && total(first) > max_len {
        first += 1;
    }
    let mut out = q;
    for t in &turns[first..] {
        out.push(SEP);
        out.extend(t);
    }
    out
}

/// Decoder target: rewrite ids followed by END, at most `max_len` long.
pub fn assemble_target(r: &UtteranceRecord, vocab: &Vocab, max_len: usize) -> Vec<usize> {
    let mut t = vocab.encode(&r.rewrite);
    t.truncate(max_len.saturating_sub(1));
    t.push(END);
    t
}

/// Model-ready form of one record.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub record_id: String,
    pub src: Vec<usize>,
    /// Target ids ending in END; the decoder input is START followed by all
    /// but the last of these.
    pub tgt: Vec<usize>,
    /// Gold rewrite tokens, used as the BLEU reference.
    pub reference: TokenSeq,
    pub class: Option<usize>,
}

impl Example {
    pub fn from_record(r: &UtteranceRecord, vocab: &Vocab, max_len: usize, class: Option<usize>) -> Self {
        Self {
            record_id: r.id(),
            src: assemble_source(r, vocab, max_len),
            tgt: assemble_target(r, vocab, max_len),
            reference: r.rewrite.clone(),
            class,
        }
    }

    pub fn decoder_input(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.tgt.len());
        d.push(START);
        d.extend(&self.tgt[..self.tgt.len() - 1]);
        d
    }
}
