//! Greedy and beam-search caption generation.

use std::cmp::Ordering;
use std::sync::Arc;

use crate::autodiff::log_softmax;
use crate::data::{END, START};
use crate::error::{Error, Result};
use crate::model::{CaptionModel, DecoderState};

pub const DEFAULT_BEAM: usize = 3;
pub const DEFAULT_MAX_LEN: usize = 20;

/// A partial or finished caption.
#[derive(Clone, Debug)]
pub struct Hypothesis {
    /// Starts with the start token; ends with the end token once completed.
    pub tokens: Vec<usize>,
    /// Exact sum of the chosen per-step log-softmax values.
    pub log_prob: f64,
    pub completed: bool,
    pub state: Arc<DecoderState>,
}

impl Hypothesis {
    /// Generated tokens without start/end markers.
    pub fn words(&self) -> &[usize] {
        let body = &self.tokens[1..];
        if self.completed {
            &body[..body.len() - 1]
        } else {
            body
        }
    }

    fn generated(&self) -> usize {
        self.tokens.len() - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    /// Maximum number of generated tokens, end token included.
    pub max_len: usize,
    /// Rank by log-probability divided by generated length.
    pub length_normalize: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam: DEFAULT_BEAM,
            max_len: DEFAULT_MAX_LEN,
            length_normalize: false,
        }
    }
}

impl BeamConfig {
    pub fn new(beam: usize, max_len: usize) -> Self {
        BeamConfig {
            beam,
            max_len,
            length_normalize: false,
        }
    }

    fn score(&self, h: &Hypothesis) -> f64 {
        if self.length_normalize {
            h.log_prob / h.generated().max(1) as f64
        } else {
            h.log_prob
        }
    }

    /// Higher score first; equal scores in lexicographic token order.
    fn rank(&self, a: &Hypothesis, b: &Hypothesis) -> Ordering {
        self.score(b)
            .total_cmp(&self.score(a))
            .then_with(|| a.tokens.cmp(&b.tokens))
    }
}

/// Keeps the `beam` best hypotheses at every step. Completed hypotheses stay
/// in the pool unchanged and compete with the extensions of live ones.
/// Stops once every kept hypothesis is complete or `max_len` tokens have been
/// generated. Returns at most `beam` hypotheses, best first.
pub fn beam_search(model: &CaptionModel, features: &[f64], config: &BeamConfig) -> Result<Vec<Hypothesis>> {
    if config.beam == 0 || config.max_len == 0 {
        return Err(Error::Config("beam and max_len must be at least 1".into()));
    }
    let (decoder, state) = model.condition(features)?;
    let mut pool = vec![Hypothesis {
        tokens: vec![START],
        log_prob: 0.0,
        completed: false,
        state: Arc::new(state),
    }];

    for _ in 0..config.max_len {
        if pool.iter().all(|h| h.completed) {
            break;
        }
        let mut candidates = Vec::with_capacity(pool.len() * decoder.vocab_size());
        for h in pool {
            if h.completed {
                candidates.push(h);
                continue;
            }
            let last = *h.tokens.last().unwrap();
            let (logits, next) = decoder.step(last, &h.state)?;
            let next = Arc::new(next);
            for (tok, lp) in log_softmax(&logits).into_iter().enumerate() {
                let mut tokens = Vec::with_capacity(h.tokens.len() + 1);
                tokens.extend_from_slice(&h.tokens);
                tokens.push(tok);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + lp,
                    completed: tok == END,
                    state: Arc::clone(&next),
                });
            }
        }
        if candidates.len() > config.beam {
            candidates.select_nth_unstable_by(config.beam - 1, |a, b| config.rank(a, b));
            candidates.truncate(config.beam);
        }
        candidates.sort_by(|a, b| config.rank(a, b));
        pool = candidates;
    }
    pool.sort_by(|a, b| config.rank(a, b));
    Ok(pool)
}

/// Picks the most likely token at every step (lowest index on ties).
pub fn greedy(model: &CaptionModel, features: &[f64], max_len: usize) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let (decoder, mut state) = model.condition(features)?;
    let mut tokens = vec![START];
    let mut log_prob = 0.0;
    while tokens.len() <= max_len {
        let (logits, next) = decoder.step(*tokens.last().unwrap(), &state)?;
        let lp = log_softmax(&logits);
        let (best, &best_lp) = lp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        tokens.push(best);
        log_prob += best_lp;
        state = next;
        if best == END {
            break;
        }
    }
    let completed = *tokens.last().unwrap() == END;
    Ok(Hypothesis {
        tokens,
        log_prob,
        completed,
        state: Arc::new(state),
    })
}

/// The sentence set used for classword matching: the words of each beam
/// hypothesis, start/end markers stripped.
pub fn generate_caption_set(
    model: &CaptionModel,
    features: &[f64],
    beam: usize,
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    let hyps = beam_search(model, features, &BeamConfig::new(beam, max_len))?;
    Ok(hyps.iter().map(|h| h.words().to_vec()).collect())
}
