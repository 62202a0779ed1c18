//! Mixture sampling over corpora.
//!
//! A minibatch is built by repeatedly (1) picking corpus `k` with
//! probability `w_k` and (2) picking a record uniformly inside that corpus.
//! Sampling is with replacement: the weights define a distribution over
//! records, not a partition of them, so batch composition is multinomial
//! rather than exact-quota.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{CorpusSet, Record};
use crate::error::{Error, Result};

/// Simplex tolerance for weight validation.
pub const SIMPLEX_TOL: f64 = 1e-9;
/// Weights below this are clamped to zero and the rest renormalized,
/// so numerical dust cannot keep a corpus nominally alive.
pub const WEIGHT_DUST: f64 = 1e-6;

/// A point on the K-simplex: per-corpus sampling probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingWeights {
    w: Vec<f64>,
}

impl SamplingWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::invalid("weights must have at least one entry"));
        }
        if w.iter().any(|&x| !x.is_finite() || !(0.0..=1.0).contains(&x)) {
            return Err(Error::invalid(format!(
                "weights must lie in [0, 1], got {w:?}"
            )));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!(
                "weights sum to {sum}, expected 1 within {SIMPLEX_TOL}"
            )));
        }
        Ok(SamplingWeights { w })
    }

    pub fn uniform(k: usize) -> Self {
        assert!(k >= 1, "need at least one corpus");
        SamplingWeights {
            w: vec![1.0 / k as f64; k],
        }
    }

    /// Normalize an arbitrary non-negative vector onto the simplex.
    pub fn normalized(raw: &[f64]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::invalid("weights must have at least one entry"));
        }
        if raw.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(Error::invalid(format!(
                "weights must be finite and non-negative, got {raw:?}"
            )));
        }
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return Err(Error::invalid("weights sum to zero"));
        }
        SamplingWeights::new(raw.iter().map(|&x| x / sum).collect()).or_else(|_| {
            // Renormalization can leave the sum a few ulps off 1; fix the
            // largest component.
            let mut w: Vec<f64> = raw.iter().map(|&x| x / sum).collect();
            let total: f64 = w.iter().sum();
            let imax = (0..w.len()).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap();
            w[imax] += 1.0 - total;
            SamplingWeights::new(w)
        })
    }

    /// Clamp sub-dust components to zero and renormalize.
    pub fn clamp_dust(&self) -> SamplingWeights {
        if self.w.iter().all(|&x| x == 0.0 || x >= WEIGHT_DUST) {
            return self.clone();
        }
        let raw: Vec<f64> = self
            .w
            .iter()
            .map(|&x| if x < WEIGHT_DUST { 0.0 } else { x })
            .collect();
        SamplingWeights::normalized(&raw).expect("sum >= 1 - K * dust > 0")
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn get(&self, k: usize) -> f64 {
        self.w[k]
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        false // enforced non-empty at construction
    }
}

/// Seeded sampler over a corpus set with fixed weights.
///
/// Single-threaded by design; parallel consumers each own a sampler with
/// an independent seed.
pub struct MixtureSampler<'a> {
    corpus_set: &'a CorpusSet,
    weights: SamplingWeights,
    cumulative: Vec<f64>,
    rng: ChaCha8Rng,
}

impl<'a> MixtureSampler<'a> {
    pub fn new(corpus_set: &'a CorpusSet, weights: &SamplingWeights, seed: u64) -> Result<Self> {
        if weights.len() != corpus_set.num_corpora() {
            return Err(Error::invalid(format!(
                "{} weights for {} corpora",
                weights.len(),
                corpus_set.num_corpora()
            )));
        }
        let weights = weights.clamp_dust();
        let mut cumulative = Vec::with_capacity(weights.len());
        let mut cum = 0.0;
        for &x in weights.as_slice() {
            cum += x;
            cumulative.push(cum);
        }
        Ok(MixtureSampler {
            corpus_set,
            weights,
            cumulative,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn weights(&self) -> &SamplingWeights {
        &self.weights
    }

    /// Draw corpus index `k` with probability `w_k`, then a record
    /// uniformly within that corpus.
    pub fn sample_record(&mut self) -> (usize, &'a Record) {
        let u: f64 = self.rng.random();
        // `u < cum` can only first hold where the cumulative sum increased,
        // so zero-weight corpora are never selected.
        let k = self
            .cumulative
            .iter()
            .position(|&cum| u < cum)
            .unwrap_or_else(|| {
                // u fell into the rounding sliver above the last cumulative
                // value; use the last corpus with positive weight.
                self.weights
                    .as_slice()
                    .iter()
                    .rposition(|&x| x > 0.0)
                    .expect("weights sum to 1")
            });
        let corpus = self.corpus_set.corpus(k);
        let idx = self.rng.random_range(0..corpus.len());
        (k, corpus.record(idx))
    }

    /// `batch_size` independent draws; composition is multinomial.
    pub fn sample_minibatch(&mut self, batch_size: usize) -> Vec<(usize, &'a Record)> {
        (0..batch_size).map(|_| self.sample_record()).collect()
    }
}
