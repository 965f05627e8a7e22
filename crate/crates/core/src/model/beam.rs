//! Greedy and beam decoding over the hybrid output space.
//!
//! A vocabulary entry and a copy of a source token that spell the same
//! surface string are the same output token, so their probabilities are
//! summed before ranking.

use std::collections::HashMap;

use super::transformer::{Encoded, HybridDistribution, ModelError, Seq2Seq};
use crate::vocab::{BOS, EOS, PAD};

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Output tokens without `<bos>`/`<eos>`.
    pub tokens: Vec<String>,
    /// Decoder input ids, starting with `<bos>`.
    pub inputs: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenChoice {
    pub token: String,
    pub prob: f64,
}

/// Surface tokens ranked by merged probability (ties broken lexically).
pub fn token_choices(dist: &HybridDistribution, model: &Seq2Seq, enc: &Encoded) -> Vec<TokenChoice> {
    let mut merged: HashMap<&str, f64> = HashMap::new();
    for (i, &p) in dist.vocab().iter().enumerate() {
        let tok = model.vocab.token(i);
        if p > 0.0 && tok != PAD && tok != BOS {
            *merged.entry(tok).or_insert(0.0) += p;
        }
    }
    for (j, &p) in dist.pointer().iter().enumerate() {
        if p > 0.0 {
            *merged.entry(enc.source[j].as_str()).or_insert(0.0) += p;
        }
    }
    let mut out: Vec<TokenChoice> =
        merged.into_iter().map(|(t, p)| TokenChoice { token: t.to_string(), prob: p }).collect();
    out.sort_by(|a, b| b.prob.total_cmp(&a.prob).then_with(|| a.token.cmp(&b.token)));
    out
}

/// Beam search where each live hypothesis proposes `width(hyp)` extensions
/// and at most `cap` hypotheses survive each step.
///
/// Finished hypotheses come first, ordered by log-probability; any still
/// open at `max_len` follow.
pub fn beam_search_with(
    model: &Seq2Seq,
    source: &[String],
    max_len: usize,
    cap: usize,
    mut width: impl FnMut(&Hypothesis) -> usize,
) -> Result<Vec<Hypothesis>, ModelError> {
    let cap = cap.max(1);
    let enc = model.encode(source)?;
    let mut live =
        vec![Hypothesis { tokens: Vec::new(), inputs: vec![model.vocab.bos()], log_prob: 0.0, finished: false }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let mut pool: Vec<Hypothesis> = Vec::new();
        for h in &live {
            let w = width(h).clamp(1, cap);
            let dist = model.decode_step(&enc, &h.inputs)?;
            for c in token_choices(&dist, model, &enc).into_iter().take(w) {
                let mut next = h.clone();
                next.log_prob += c.prob.ln();
                if c.token == EOS {
                    next.finished = true;
                } else {
                    next.inputs.push(model.vocab.input_id(&c.token));
                    next.tokens.push(c.token);
                }
                pool.push(next);
            }
        }
        pool.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
        pool.truncate(cap);
        live.clear();
        for h in pool {
            if h.finished {
                done.push(h);
            } else {
                live.push(h);
            }
        }
        // Log-probabilities only fall, so once `cap` finished hypotheses beat
        // every live one nothing can enter the top `cap`.
        if done.len() >= cap {
            done.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
            let floor = done[cap - 1].log_prob;
            if live.iter().all(|h| h.log_prob <= floor) {
                live.clear();
            }
        }
    }
    done.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
    live.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
    done.extend(live);
    Ok(done)
}

pub fn beam_search(model: &Seq2Seq, source: &[String], width: usize, max_len: usize) -> Result<Vec<Hypothesis>, ModelError> {
    beam_search_with(model, source, max_len, width, |_| width)
}

pub fn greedy(model: &Seq2Seq, source: &[String], max_len: usize) -> Result<Hypothesis, ModelError> {
    let mut hyps = beam_search_with(model, source, max_len, 1, |_| 1)?;
    Ok(hyps.remove(0))
}
