//! Multi-corpus language model training with adaptive corpus sampling.
//!
//! The toolkit trains a small feed-forward neural language model on
//! minibatches drawn from several text corpora at once. The probability of
//! drawing from each corpus can be fixed up front (uniform, hand-picked, or
//! derived from per-corpus n-gram models) or re-optimized during training:
//! before each epoch the current model is fine-tuned on every corpus
//! separately, the fine-tuned models are interpolated, and the interpolation
//! weights that minimize validation NLL become the sampling probabilities
//! for the epoch.
//!
//! Modules:
//! - [`corpus`]: vocabulary, tokenized corpora, synthetic Markov corpora
//! - [`sampler`]: simplex weights and the mixture minibatch sampler
//! - [`nnlm`]: the feed-forward neural LM with manual backprop
//! - [`ngram`]: add-k smoothed count models for the static baseline
//! - [`weight_opt`]: interpolation-weight optimization (GD / EM / grid)
//! - [`trainer`]: fine-tune operator, epoch loop, training strategies
//! - [`eval_report`]: perplexity evaluation and CSV reports
//! - [`runspec`]: run configuration files and end-to-end orchestration

pub mod corpus;
pub mod error;
pub mod eval_report;
pub mod ngram;
pub mod nnlm;
pub mod runspec;
pub mod sampler;
pub mod trainer;
pub mod weight_opt;

pub use error::{Error, Result};

use corpus::Record;

/// Anything that can assign a log-probability to a whole record.
///
/// Implemented by the neural model and the n-gram model so scoring and
/// evaluation code is shared between them.
pub trait SentenceScorer {
    /// Natural log of the record's probability, end-of-sentence included.
    fn log_prob_record(&self, record: &Record) -> Result<f64>;
}
