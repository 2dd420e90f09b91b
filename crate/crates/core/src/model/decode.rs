use super::infer::{CrossCache, DecoderCache, Incremental};
use super::{AdapterSet, BaseWeights, Result, END, PAD, START};

/// Source of next-token logits, fed one token at a time.
pub trait StepScorer {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    /// State before any token has been fed.
    fn init(&self) -> Result<Self::State>;

    /// Feeds `token` and returns the logits for the following position.
    fn advance(&self, state: &mut Self::State, token: usize) -> Result<Vec<f64>>;

    /// Most tokens (START included) the scorer accepts; decoding lengths
    /// are capped to it.
    fn position_limit(&self) -> Option<usize> {
        None
    }
}

fn cap<S: StepScorer>(scorer: &S, max_len: usize) -> usize {
    scorer.position_limit().map_or(max_len, |l| max_len.min(l))
}

/// One decoded sequence. `tokens` excludes START and END; `score` is the
/// log-probability divided by the generated length (END included).
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub score: f64,
}

/// Log-probabilities with PAD and START excluded from generation.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter()
        .enumerate()
        .map(|(i, x)| if i == PAD || i == START { f64::NEG_INFINITY } else { x - lse })
        .collect()
}

fn finish(tokens: &[usize], log_prob: f64, gen_len: usize) -> Hypothesis {
    Hypothesis {
        tokens: tokens.iter().copied().filter(|&t| t != END).collect(),
        log_prob,
        score: log_prob / gen_len as f64,
    }
}

/// Picks the highest-scoring token each step; ties go to the lowest id.
pub fn greedy_decode<S: StepScorer>(scorer: &S, max_len: usize) -> Result<Hypothesis> {
    let max_len = cap(scorer, max_len);
    let mut state = scorer.init()?;
    let mut logits = scorer.advance(&mut state, START)?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for step in 1..=max_len {
        let lp = log_softmax_row(&logits);
        let (best, cum) = lp
            .iter()
            .enumerate()
            .map(|(v, l)| (v, log_prob + l))
            .fold((0, f64::NEG_INFINITY), |acc, c| if c.1 > acc.1 { c } else { acc });
        tokens.push(best);
        log_prob = cum;
        if best == END || step == max_len {
            return Ok(finish(&tokens, log_prob, step));
        }
        logits = scorer.advance(&mut state, best)?;
    }
    Ok(finish(&tokens, log_prob, 1))
}

struct Beam<St> {
    tokens: Vec<usize>,
    log_prob: f64,
    state: St,
    logits: Vec<f64>,
}

/// Beam search with length normalization (exponent 1). Active beams are
/// ranked by cumulative log-probability; finished hypotheses by normalized
/// score. Returns up to `beam_width` hypotheses, best first.
pub fn beam_decode<S: StepScorer>(scorer: &S, beam_width: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    let k = beam_width.max(1);
    let max_len = cap(scorer, max_len);
    let mut state = scorer.init()?;
    let logits = scorer.advance(&mut state, START)?;
    let mut active = vec![Beam {
        tokens: Vec::new(),
        log_prob: 0.0,
        state,
        logits,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 1..=max_len {
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(active.len() * scorer.vocab_size());
        for (i, beam) in active.iter().enumerate() {
            for (tok, l) in log_softmax_row(&beam.logits).into_iter().enumerate() {
                if l.is_finite() {
                    cands.push((beam.log_prob + l, i, tok));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(k);
        for (rank, &(lp, i, tok)) in cands.iter().enumerate() {
            if next.len() == k {
                break;
            }
            let mut tokens = active[i].tokens.clone();
            tokens.push(tok);
            if tok == END {
                if rank < k {
                    finished.push(finish(&tokens, lp, step));
                }
            } else if step == max_len {
                finished.push(finish(&tokens, lp, step));
                next.push(Beam {
                    tokens,
                    log_prob: lp,
                    state: active[i].state.clone(),
                    logits: Vec::new(),
                });
            } else {
                let mut state = active[i].state.clone();
                let logits = scorer.advance(&mut state, tok)?;
                next.push(Beam {
                    tokens,
                    log_prob: lp,
                    state,
                    logits,
                });
            }
        }
        if finished.len() >= k || step == max_len || next.is_empty() {
            break;
        }
        active = next;
    }
    finished.sort_by(|a, b| b.score.total_cmp(&a.score));
    finished.truncate(k);
    Ok(finished)
}

/// Scores continuations with one model against a fixed encoded source.
#[derive(Debug, Clone)]
pub struct ModelScorer<'a> {
    model: Incremental<'a>,
    cross: CrossCache,
}

impl<'a> ModelScorer<'a> {
    pub fn new(base: &'a BaseWeights, adapters: Option<&'a AdapterSet>, src: &[usize]) -> Result<Self> {
        let model = Incremental::new(base, adapters)?;
        let cross = model.prepare(src)?;
        Ok(Self { model, cross })
    }
}

impl StepScorer for ModelScorer<'_> {
    type State = DecoderCache;

    fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }

    fn init(&self) -> Result<DecoderCache> {
        Ok(self.model.empty_cache())
    }

    fn advance(&self, state: &mut DecoderCache, token: usize) -> Result<Vec<f64>> {
        self.model.step(&self.cross, state, token)
    }

    fn position_limit(&self) -> Option<usize> {
        Some(self.model.max_seq_len())
    }
}
