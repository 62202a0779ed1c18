//! Count-based n-gram language model with add-k smoothing.
//!
//! Backs the baseline that fixes sampling probabilities from per-corpus
//! n-gram likelihoods. Contexts are `<s>`-padded, `</s>` terminates every
//! record, and the model shares the neural model's vocabulary so the two
//! produce comparable interpolation weights.

use std::collections::HashMap;

use crate::corpus::{Corpus, Record, BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::SentenceScorer;

#[derive(Debug, Clone, Default)]
struct ContextCounts {
    total: u64,
    next: HashMap<u32, u64>,
}

/// Smoothed conditional model of order `order` (context = order - 1 tokens).
#[derive(Debug, Clone)]
pub struct NgramModel {
    order: usize,
    smoothing_k: f64,
    vocab_size: usize,
    contexts: HashMap<Vec<u32>, ContextCounts>,
}

impl NgramModel {
    /// A model with no counts: every conditional is the uniform `1/V`.
    pub fn empty(order: usize, smoothing_k: f64, vocab_size: usize) -> Result<Self> {
        if order < 1 {
            return Err(Error::invalid("n-gram order must be at least 1"));
        }
        if smoothing_k <= 0.0 || !smoothing_k.is_finite() {
            return Err(Error::invalid(format!(
                "smoothing k must be positive and finite, got {smoothing_k}"
            )));
        }
        if vocab_size == 0 {
            return Err(Error::invalid("vocab size must be at least 1"));
        }
        Ok(NgramModel {
            order,
            smoothing_k,
            vocab_size,
            contexts: HashMap::new(),
        })
    }

    /// Accumulate counts over all records of `corpus`.
    pub fn fit(corpus: &Corpus, order: usize, smoothing_k: f64, vocab_size: usize) -> Result<Self> {
        let mut model = NgramModel::empty(order, smoothing_k, vocab_size)?;
        let mut ctx = vec![0u32; order - 1];
        for record in corpus.records() {
            for t in 0..=record.len() {
                let target = fill_context(record, t, &mut ctx);
                let entry = model.contexts.entry(ctx.clone()).or_default();
                entry.total += 1;
                *entry.next.entry(target).or_insert(0) += 1;
            }
        }
        Ok(model)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Raw count of `next` after `ctx` (test and debug aid).
    pub fn count(&self, ctx: &[u32], next: u32) -> u64 {
        self.contexts
            .get(ctx)
            .and_then(|c| c.next.get(&next))
            .copied()
            .unwrap_or(0)
    }

    /// Add-k conditional `(count + k) / (context_total + k * V)`.
    /// An unseen context degrades to the uniform `1/V`.
    pub fn conditional(&self, ctx: &[u32], next: u32) -> f64 {
        let (count, total) = match self.contexts.get(ctx) {
            Some(c) => (c.next.get(&next).copied().unwrap_or(0), c.total),
            None => (0, 0),
        };
        (count as f64 + self.smoothing_k)
            / (total as f64 + self.smoothing_k * self.vocab_size as f64)
    }

    /// Sum of smoothed conditional log-probabilities, `</s>` included.
    pub fn record_log_prob(&self, record: &Record) -> f64 {
        let mut ctx = vec![0u32; self.order - 1];
        let mut total = 0.0;
        for t in 0..=record.len() {
            let target = fill_context(record, t, &mut ctx);
            total += self.conditional(&ctx, target).ln();
        }
        total
    }

    /// Counts sorted by context then token, one n-gram per line.
    pub fn dump_counts(&self) -> String {
        let mut lines: Vec<String> = Vec::new();
        for (ctx, counts) in &self.contexts {
            for (&next, &count) in &counts.next {
                let mut gram: Vec<String> = ctx.iter().map(|id| id.to_string()).collect();
                gram.push(next.to_string());
                lines.push(format!("{}\t{}", gram.join(" "), count));
            }
        }
        lines.sort();
        lines.join("\n")
    }
}

/// Fill `ctx` with the order-1 tokens preceding position `t` (`<s>`-padded)
/// and return the target id at `t` (`</s>` past the last token).
fn fill_context(record: &Record, t: usize, ctx: &mut [u32]) -> u32 {
    let ids = record.ids();
    let n = ctx.len();
    for (slot, c) in ctx.iter_mut().enumerate() {
        let offset = t as i64 - n as i64 + slot as i64;
        *c = if offset < 0 { BOS_ID } else { ids[offset as usize] };
    }
    if t < ids.len() {
        ids[t]
    } else {
        EOS_ID
    }
}

impl SentenceScorer for NgramModel {
    fn log_prob_record(&self, record: &Record) -> Result<f64> {
        Ok(self.record_log_prob(record))
    }
}
