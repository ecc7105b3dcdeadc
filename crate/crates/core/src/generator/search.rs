use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};

/// Anything that can score the next token for a batch of prefixes.
///
/// Every prefix starts with BOS and all prefixes in one call have the same
/// length. The result holds one row of `vocab_size` log-probabilities per
/// prefix.
pub trait StepModel {
    fn vocab_size(&self) -> usize;
    fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// A decoded sequence. `tokens` excludes BOS and ends with EOS when
/// `finished`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub cum_logprob: f64,
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens without the trailing EOS.
    pub fn content(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// What the beam kept and discarded at one expansion step.
#[derive(Debug, Clone)]
pub struct BeamStep {
    pub step: usize,
    /// Cumulative log-probabilities of the selected candidates, best first.
    pub kept: Vec<f64>,
    /// Best cumulative log-probability among the candidates not selected.
    pub best_pruned: Option<f64>,
}

fn length_score(cum: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        cum
    } else {
        cum / (len as f64).powf(alpha)
    }
}

fn check_row(row: &[f64], vocab: usize) -> Result<()> {
    if row.len() != vocab {
        return Err(Error::contract(format!("step model returned {} scores for a vocabulary of {vocab}", row.len())));
    }
    if row.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("step model produced NaN log-probabilities".into()));
    }
    Ok(())
}

/// Highest-probability token at each step; ties go to the lowest id.
pub fn greedy_decode(model: &dyn StepModel, max_len: usize) -> Result<Hypothesis> {
    let vocab = model.vocab_size();
    let mut prefix = vec![BOS];
    let mut cum = 0.0;
    while prefix.len() <= max_len {
        let rows = model.next_log_probs(std::slice::from_ref(&prefix))?;
        let row = rows.first().ok_or_else(|| Error::contract("step model returned no rows"))?;
        check_row(row, vocab)?;
        let (best, lp) = row
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
        prefix.push(best);
        cum += lp;
        if best == EOS {
            break;
        }
    }
    let tokens = prefix[1..].to_vec();
    let finished = tokens.last() == Some(&EOS);
    Ok(Hypothesis {
        score: cum,
        cum_logprob: cum,
        tokens,
        finished,
    })
}

/// Beam search returning every retired hypothesis ranked by score.
pub fn beam_search(model: &dyn StepModel, beam: usize, max_len: usize, alpha: f64) -> Result<Vec<Hypothesis>> {
    beam_search_observed(model, beam, max_len, alpha, |_| {})
}

/// [`beam_search`] with a callback after each expansion step.
///
/// Each step expands every live hypothesis by every token and keeps the
/// `beam` candidates with the highest cumulative log-probability (ties by
/// token id, then by parent order). Selected candidates ending in EOS retire
/// to the finished pool; the rest stay live. Live hypotheses still present
/// after `max_len` tokens retire unfinished. With `alpha == 0` the search
/// stops as soon as no live hypothesis can overtake the best finished one.
pub fn beam_search_observed(
    model: &dyn StepModel,
    beam: usize,
    max_len: usize,
    alpha: f64,
    mut observe: impl FnMut(&BeamStep),
) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::config("beam size must be at least 1"));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::config(format!("length penalty alpha must be non-negative, got {alpha}")));
    }
    let vocab = model.vocab_size();
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
    let mut pool: Vec<Hypothesis> = Vec::new();

    for step in 0..max_len {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = live.iter().map(|(p, _)| p.clone()).collect();
        let rows = model.next_log_probs(&prefixes)?;
        if rows.len() != live.len() {
            return Err(Error::contract("step model returned the wrong number of rows"));
        }
        let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * vocab);
        for (parent, row) in rows.iter().enumerate() {
            check_row(row, vocab)?;
            let base = live[parent].1;
            candidates.extend(row.iter().enumerate().map(|(tok, &lp)| (base + lp, tok, parent)));
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let keep = beam.min(candidates.len());
        observe(&BeamStep {
            step,
            kept: candidates[..keep].iter().map(|c| c.0).collect(),
            best_pruned: candidates.get(keep).map(|c| c.0),
        });

        let mut next = Vec::with_capacity(keep);
        for &(cum, tok, parent) in &candidates[..keep] {
            let mut seq = live[parent].0.clone();
            seq.push(tok);
            if tok == EOS {
                let tokens = seq[1..].to_vec();
                pool.push(Hypothesis {
                    score: length_score(cum, tokens.len(), alpha),
                    cum_logprob: cum,
                    tokens,
                    finished: true,
                });
            } else {
                next.push((seq, cum));
            }
        }
        live = next;

        if alpha == 0.0 {
            let best_done = pool.iter().map(|h| h.cum_logprob).fold(f64::NEG_INFINITY, f64::max);
            let best_live = live.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= best_live {
                break;
            }
        }
    }
    for (seq, cum) in live {
        let tokens = seq[1..].to_vec();
        pool.push(Hypothesis {
            score: length_score(cum, tokens.len(), alpha),
            cum_logprob: cum,
            tokens,
            finished: false,
        });
    }
    pool.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(pool)
}
