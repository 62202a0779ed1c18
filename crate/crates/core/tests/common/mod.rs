//! Shared fixtures for the integration and acceptance suites: synthetic
//! Markov sources, the exact source-entropy oracle, and NLL statistics.

#![allow(dead_code)]

use mixlm::corpus::{generate_synthetic, vocab_from_specs, Corpus, CorpusSet, MarkovSpec, Vocab};
use mixlm::SentenceScorer;

/// A structured chain over `n` states: from state `i` most mass goes to
/// `i+1`, some to `i+skip`, a little stays, and the rest spreads evenly.
/// Low entropy, learnable structure.
pub fn structured_chain(
    n: usize,
    advance: f64,
    skip_mass: f64,
    skip: usize,
    stay: f64,
    min_len: usize,
    max_len: usize,
) -> MarkovSpec {
    let states: Vec<String> = (0..n).map(|i| format!("w{i:02}")).collect();
    let dust = (1.0 - advance - skip_mass - stay) / (n - 3) as f64;
    assert!(dust >= 0.0, "transition masses exceed 1");
    let transitions: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = vec![0.0; n];
            let mut spread = 0usize;
            for j in 0..n {
                if j == (i + 1) % n {
                    row[j] = advance;
                } else if j == (i + skip) % n {
                    row[j] = skip_mass;
                } else if j == i {
                    row[j] = stay;
                } else {
                    row[j] = dust;
                    spread += 1;
                }
            }
            debug_assert_eq!(spread, n - 3);
            // Absorb rounding into the dominant entry so the row sums to 1
            // well within the validator's 1e-9.
            let sum: f64 = row.iter().sum();
            row[(i + 1) % n] += 1.0 - sum;
            row
        })
        .collect();
    MarkovSpec {
        states,
        initial: vec![1.0 / n as f64; n],
        transitions,
        min_len,
        max_len,
    }
}

/// Maximum-entropy source over the same states: uniform transitions.
pub fn noise_chain(n: usize, min_len: usize, max_len: usize) -> MarkovSpec {
    MarkovSpec {
        states: (0..n).map(|i| format!("w{i:02}")).collect(),
        initial: vec![1.0 / n as f64; n],
        transitions: vec![vec![1.0 / n as f64; n]; n],
        min_len,
        max_len,
    }
}

/// The three-source adaptation setup: target A, related B, noise C, all
/// over one shared state set.
pub struct AdaptationSetup {
    pub vocab: Vocab,
    pub target: MarkovSpec,
    pub related: MarkovSpec,
    pub noise: MarkovSpec,
}

pub fn adaptation_setup(n_states: usize, min_len: usize, max_len: usize) -> AdaptationSetup {
    let target = structured_chain(n_states, 0.72, 0.12, 2, 0.06, min_len, max_len);
    let related = structured_chain(n_states, 0.58, 0.18, 2, 0.08, min_len, max_len);
    let noise = noise_chain(n_states, min_len, max_len);
    let vocab = vocab_from_specs(&[&target, &related, &noise]).unwrap();
    AdaptationSetup {
        vocab,
        target,
        related,
        noise,
    }
}

impl AdaptationSetup {
    /// Corpora A (target, small), B (related, large), C (noise, large) plus
    /// a validation split from the target source. Seeds derive from `seed`.
    pub fn corpus_set(
        &self,
        n_a: usize,
        n_b: usize,
        n_c: usize,
        n_val: usize,
        seed: u64,
    ) -> CorpusSet {
        let a = generate_synthetic(&self.target, n_a, seed * 10 + 1, "a", &self.vocab).unwrap();
        let b = generate_synthetic(&self.related, n_b, seed * 10 + 2, "b", &self.vocab).unwrap();
        let c = generate_synthetic(&self.noise, n_c, seed * 10 + 3, "c", &self.vocab).unwrap();
        let val =
            generate_synthetic(&self.target, n_val, seed * 10 + 4, "val", &self.vocab).unwrap();
        CorpusSet::new(self.vocab.clone(), vec![a, b, c], val).unwrap()
    }

    pub fn test_corpus(&self, n: usize, seed: u64) -> Corpus {
        generate_synthetic(&self.target, n, seed * 10 + 5, "test", &self.vocab).unwrap()
    }
}

/// Exact expected per-token NLL of fixed-length records from the source
/// (the entropy floor; no model can beat it in expectation). Token count
/// includes the end-of-sentence position, which is deterministic at a
/// fixed length and contributes zero entropy.
pub fn markov_entropy_per_token(spec: &MarkovSpec, len: usize) -> f64 {
    assert_eq!(
        spec.min_len, spec.max_len,
        "entropy oracle assumes fixed-length records"
    );
    assert_eq!(spec.min_len, len);
    let h = |dist: &[f64]| -> f64 {
        dist.iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    };
    let mut total = h(&spec.initial);
    let mut dist = spec.initial.clone();
    for _t in 2..=len {
        total += dist
            .iter()
            .enumerate()
            .map(|(s, &p)| p * h(&spec.transitions[s]))
            .sum::<f64>();
        let mut next = vec![0.0; dist.len()];
        for (s, &p) in dist.iter().enumerate() {
            for (t, &q) in spec.transitions[s].iter().enumerate() {
                next[t] += p * q;
            }
        }
        dist = next;
    }
    total / (len + 1) as f64
}

/// Mean per-token NLL over the corpus and the standard error of that
/// ratio estimator (records independent; linearization variance).
pub fn nll_stats<S: SentenceScorer>(model: &S, corpus: &Corpus) -> (f64, f64) {
    let per_record: Vec<(f64, f64)> = corpus
        .records()
        .iter()
        .map(|r| {
            (
                -model.log_prob_record(r).unwrap(),
                (r.len() + 1) as f64,
            )
        })
        .collect();
    let total_nll: f64 = per_record.iter().map(|(x, _)| x).sum();
    let total_tok: f64 = per_record.iter().map(|(_, w)| w).sum();
    let ratio = total_nll / total_tok;
    let var: f64 = per_record
        .iter()
        .map(|(x, w)| {
            let d = x - ratio * w;
            d * d
        })
        .sum::<f64>()
        / (total_tok * total_tok);
    (ratio, var.sqrt())
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
