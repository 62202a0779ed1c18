//! Corpus ingestion, vocabulary handling, and synthetic corpus generation.
//!
//! Corpora are plain UTF-8 text, one record per line, whitespace-tokenized.
//! A [`Vocab`] maps token strings to dense ids; the reserved tokens
//! `<unk>`, `<s>`, `</s>` always occupy ids 0..3. Records store content
//! token ids only; sentence boundaries are added by the models at scoring
//! time. Synthetic corpora are drawn from first-order Markov sources so
//! experiments are reproducible and their true entropy is computable.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unknown-word token, id 0.
pub const UNK_TOKEN: &str = "<unk>";
/// Beginning-of-sentence token, id 1. Used as context padding, never stored.
pub const BOS_TOKEN: &str = "<s>";
/// End-of-sentence token, id 2. Scored as each record's final position.
pub const EOS_TOKEN: &str = "</s>";

pub const UNK_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;

const RESERVED: [&str; 3] = [UNK_TOKEN, BOS_TOKEN, EOS_TOKEN];

/// Token string <-> dense id mapping with the three reserved tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Build a vocabulary from whitespace token counts: the `max_size - 3`
    /// most frequent tokens plus the reserved ones. Frequency ties are
    /// broken lexicographically (smaller string wins).
    pub fn from_token_counts(counts: &HashMap<String, u64>, max_size: usize) -> Result<Self> {
        if max_size < RESERVED.len() {
            return Err(Error::invalid(format!(
                "vocab max_size must be at least {}, got {max_size}",
                RESERVED.len()
            )));
        }
        let mut ranked: Vec<(&String, u64)> = counts
            .iter()
            .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
            .map(|(t, &c)| (t, c))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - RESERVED.len());

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t.clone()));
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    /// Scan text files and build a vocabulary; see [`Vocab::from_token_counts`].
    pub fn build(files: &[impl AsRef<Path>], max_size: usize) -> Result<Self> {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for file in files {
            let path = file.as_ref();
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for token in text.split_whitespace() {
                *counts.entry(token.to_string()).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::invalid("no tokens"));
        }
        Self::from_token_counts(&counts, max_size)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    /// Tokenize one line; out-of-vocabulary tokens map to `<unk>`.
    /// Returns `None` for blank lines.
    pub fn encode_line(&self, line: &str) -> Option<Record> {
        let ids: Vec<u32> = line
            .split_whitespace()
            .map(|t| self.id(t).unwrap_or(UNK_ID))
            .collect();
        if ids.is_empty() {
            None
        } else {
            Some(Record { ids })
        }
    }

    pub fn decode(&self, record: &Record) -> String {
        record
            .ids()
            .iter()
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Write one token per line; line number = id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.tokens.join("\n") + "\n").map_err(|e| Error::io(path, e))
    }

    /// Load a vocabulary file written by [`Vocab::save`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.len() < RESERVED.len()
            || tokens[0] != UNK_TOKEN
            || tokens[1] != BOS_TOKEN
            || tokens[2] != EOS_TOKEN
        {
            return Err(Error::invalid(format!(
                "{}: not a vocab file (reserved tokens missing)",
                path.display()
            )));
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::invalid(format!(
                "{}: duplicate tokens in vocab file",
                path.display()
            )));
        }
        Ok(vocab)
    }
}

/// One training record: a non-empty sequence of content token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Record {
    ids: Vec<u32>,
}

impl Record {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("record must contain at least one token"));
        }
        Ok(Record { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false // enforced non-empty at construction
    }
}

/// A named list of records.
#[derive(Debug, Clone)]
pub struct Corpus {
    name: String,
    records: Vec<Record>,
}

impl Corpus {
    pub fn from_records(name: impl Into<String>, records: Vec<Record>) -> Result<Self> {
        let name = name.into();
        if records.is_empty() {
            return Err(Error::invalid(format!("corpus '{name}' has no records")));
        }
        if name.contains(',') {
            return Err(Error::invalid(format!(
                "corpus name '{name}' must not contain commas (reserved for CSV output)"
            )));
        }
        Ok(Corpus { name, records })
    }

    /// Load a one-record-per-line text file. Blank lines are skipped,
    /// out-of-vocabulary tokens map to `<unk>`, order is preserved.
    pub fn load(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records: Vec<Record> = text.lines().filter_map(|l| vocab.encode_line(l)).collect();
        if records.is_empty() {
            return Err(Error::invalid(format!(
                "{}: no non-blank lines",
                path.display()
            )));
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "corpus".to_string());
        Corpus::from_records(name, records)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &Record {
        &self.records[i]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        false // enforced non-empty at construction
    }

    pub fn token_count(&self) -> usize {
        self.records.iter().map(|r| r.len()).sum()
    }
}

/// The K training corpora plus the target-domain validation corpus,
/// all sharing one vocabulary.
#[derive(Debug, Clone)]
pub struct CorpusSet {
    vocab: Vocab,
    corpora: Vec<Corpus>,
    validation: Corpus,
}

impl CorpusSet {
    pub fn new(vocab: Vocab, corpora: Vec<Corpus>, validation: Corpus) -> Result<Self> {
        if corpora.is_empty() {
            return Err(Error::invalid("corpus set needs at least one corpus"));
        }
        let v = vocab.len() as u32;
        for corpus in corpora.iter().chain(std::iter::once(&validation)) {
            for record in corpus.records() {
                if let Some(&id) = record.ids().iter().find(|&&id| id >= v) {
                    return Err(Error::invalid(format!(
                        "corpus '{}' holds token id {id} outside vocab of size {v}",
                        corpus.name()
                    )));
                }
            }
        }
        Ok(CorpusSet {
            vocab,
            corpora,
            validation,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn corpora(&self) -> &[Corpus] {
        &self.corpora
    }

    pub fn corpus(&self, k: usize) -> &Corpus {
        &self.corpora[k]
    }

    pub fn validation(&self) -> &Corpus {
        &self.validation
    }

    pub fn num_corpora(&self) -> usize {
        self.corpora.len()
    }

    pub fn total_train_records(&self) -> usize {
        self.corpora.iter().map(|c| c.len()).sum()
    }

    pub fn corpus_names(&self) -> Vec<String> {
        self.corpora.iter().map(|c| c.name().to_string()).collect()
    }
}

/// A first-order Markov text source. Record lengths are drawn uniformly
/// from `min_len..=max_len`, the first token from `initial`, and each
/// following token from the previous token's transition row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkovSpec {
    pub states: Vec<String>,
    pub initial: Vec<f64>,
    pub transitions: Vec<Vec<f64>>,
    pub min_len: usize,
    pub max_len: usize,
}

const DIST_TOL: f64 = 1e-9;

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::invalid(format!(
            "{what}: probabilities must lie in [0, 1]"
        )));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > DIST_TOL {
        return Err(Error::invalid(format!(
            "{what}: probabilities sum to {sum}, expected 1 within {DIST_TOL}"
        )));
    }
    Ok(())
}

impl MarkovSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.states.len();
        if n == 0 {
            return Err(Error::invalid("markov spec: states list is empty"));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.states {
            if !seen.insert(s) {
                return Err(Error::invalid(format!(
                    "markov spec: duplicate state '{s}'"
                )));
            }
        }
        if self.initial.len() != n {
            return Err(Error::invalid(format!(
                "markov spec: initial has {} entries, expected {n}",
                self.initial.len()
            )));
        }
        check_distribution(&self.initial, "markov spec initial")?;
        if self.transitions.len() != n {
            return Err(Error::invalid(format!(
                "markov spec: {} transition rows, expected {n}",
                self.transitions.len()
            )));
        }
        for (i, row) in self.transitions.iter().enumerate() {
            if row.len() != n {
                return Err(Error::invalid(format!(
                    "markov spec: transition row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            check_distribution(row, &format!("markov spec transition row {i}"))?;
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::invalid(format!(
                "markov spec: need 1 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: MarkovSpec = toml::from_str(&text)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string(self)
            .map_err(|e| Error::invalid(format!("serialize markov spec: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn sample_index(rng: &mut ChaCha8Rng, dist: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    // Rounding left a sliver below 1.0; take the last positive entry.
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Sample record token strings from the Markov source. Pure function of
/// `(spec, n_records, seed)`.
pub fn generate_synthetic_lines(
    spec: &MarkovSpec,
    n_records: usize,
    seed: u64,
) -> Result<Vec<String>> {
    spec.validate()?;
    if n_records == 0 {
        return Err(Error::invalid("n_records must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut state = sample_index(&mut rng, &spec.initial);
        let mut tokens = Vec::with_capacity(len);
        tokens.push(spec.states[state].as_str());
        for _ in 1..len {
            state = sample_index(&mut rng, &spec.transitions[state]);
            tokens.push(spec.states[state].as_str());
        }
        lines.push(tokens.join(" "));
    }
    Ok(lines)
}

/// Sample a corpus from the Markov source and encode it with `vocab`.
/// States missing from the vocabulary map to `<unk>`.
pub fn generate_synthetic(
    spec: &MarkovSpec,
    n_records: usize,
    seed: u64,
    name: impl Into<String>,
    vocab: &Vocab,
) -> Result<Corpus> {
    let lines = generate_synthetic_lines(spec, n_records, seed)?;
    let records = lines
        .iter()
        .map(|l| {
            vocab
                .encode_line(l)
                .expect("generated lines are never blank")
        })
        .collect();
    Corpus::from_records(name, records)
}

/// Build a vocabulary holding every state of the given Markov sources
/// (plus the reserved tokens). Convenient for in-memory experiments.
pub fn vocab_from_specs(specs: &[&MarkovSpec]) -> Result<Vocab> {
    let mut counts: HashMap<String, u64> = HashMap::new();
    for spec in specs {
        for s in &spec.states {
            *counts.entry(s.clone()).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::invalid("no tokens"));
    }
    let size = counts.len() + RESERVED.len();
    Vocab::from_token_counts(&counts, size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(dir: &tempfile::TempDir, name: &str, contents: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    #[test]
    fn build_vocab_keeps_all_tokens_when_they_fit() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tmp(&dir, "a.txt", "a a b");
        let vocab = Vocab::build(&[path], 5).unwrap();
        assert_eq!(vocab.len(), 5);
        assert_eq!(vocab.token(0), Some(UNK_TOKEN));
        assert_eq!(vocab.token(1), Some(BOS_TOKEN));
        assert_eq!(vocab.token(2), Some(EOS_TOKEN));
        assert_eq!(vocab.id("a"), Some(3)); // more frequent first
        assert_eq!(vocab.id("b"), Some(4));
    }

    #[test]
    fn build_vocab_drops_low_frequency_token() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tmp(&dir, "a.txt", "a a b");
        let vocab = Vocab::build(&[path], 4).unwrap();
        assert_eq!(vocab.len(), 4);
        assert!(vocab.id("a").is_some());
        assert_eq!(vocab.id("b"), None);
    }

    #[test]
    fn build_vocab_breaks_frequency_ties_lexicographically() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = write_tmp(&dir, "one.txt", "b a");
        let p2 = write_tmp(&dir, "two.txt", "a b");
        let vocab = Vocab::build(&[p1, p2], 4).unwrap();
        assert!(vocab.id("a").is_some());
        assert_eq!(vocab.id("b"), None);
    }

    #[test]
    fn build_vocab_rejects_empty_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tmp(&dir, "empty.txt", "  \n \n");
        let err = Vocab::build(&[path], 10).unwrap_err();
        assert!(err.to_string().contains("no tokens"));
    }

    #[test]
    fn load_corpus_maps_oov_to_unk_and_keeps_order() {
        let dir = tempfile::tempdir().unwrap();
        let vpath = write_tmp(&dir, "v.txt", "a b");
        let vocab = Vocab::build(&[vpath], 5).unwrap();
        let cpath = write_tmp(&dir, "c.txt", "a b\nc a");
        let corpus = Corpus::load(&cpath, &vocab).unwrap();
        assert_eq!(corpus.len(), 2);
        let a = vocab.id("a").unwrap();
        let b = vocab.id("b").unwrap();
        assert_eq!(corpus.record(0).ids(), &[a, b]);
        assert_eq!(corpus.record(1).ids(), &[UNK_ID, a]);
    }

    #[test]
    fn load_corpus_counts_lines_and_skips_blanks() {
        let dir = tempfile::tempdir().unwrap();
        let vpath = write_tmp(&dir, "v.txt", "x");
        let vocab = Vocab::build(&[vpath], 4).unwrap();
        let mut text = String::new();
        for i in 0..138 {
            text.push_str("x x\n");
            if i % 10 == 0 {
                text.push('\n'); // blank lines do not count
            }
        }
        let cpath = write_tmp(&dir, "c.txt", &text);
        let corpus = Corpus::load(&cpath, &vocab).unwrap();
        assert_eq!(corpus.len(), 138);
    }

    #[test]
    fn load_corpus_rejects_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let vpath = write_tmp(&dir, "v.txt", "x");
        let vocab = Vocab::build(&[vpath], 4).unwrap();
        let cpath = write_tmp(&dir, "c.txt", "\n\n");
        assert!(Corpus::load(&cpath, &vocab).is_err());
    }

    #[test]
    fn vocab_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let vpath = write_tmp(&dir, "v.txt", "c a b a");
        let vocab = Vocab::build(&[vpath], 6).unwrap();
        let out = dir.path().join("vocab.out");
        vocab.save(&out).unwrap();
        let loaded = Vocab::load(&out).unwrap();
        assert_eq!(vocab, loaded);
    }

    fn two_state_spec(p: f64) -> MarkovSpec {
        MarkovSpec {
            states: vec!["x".into(), "y".into()],
            initial: vec![0.5, 0.5],
            transitions: vec![vec![p, 1.0 - p], vec![1.0 - p, p]],
            min_len: 6,
            max_len: 6,
        }
    }

    #[test]
    fn degenerate_chain_yields_constant_records() {
        let spec = two_state_spec(1.0); // each token always followed by itself
        let lines = generate_synthetic_lines(&spec, 20, 7).unwrap();
        for line in lines {
            let toks: Vec<&str> = line.split_whitespace().collect();
            assert!(toks.windows(2).all(|w| w[0] == w[1]), "line {line:?}");
        }
    }

    #[test]
    fn synthetic_generation_is_deterministic_per_seed() {
        let spec = two_state_spec(0.7);
        let a = generate_synthetic_lines(&spec, 100, 42).unwrap();
        let b = generate_synthetic_lines(&spec, 100, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_lines(&spec, 100, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_bigram_frequencies_match_transition_matrix() {
        // Oracle: per origin state, the count of transitions to state 0 is
        // Binomial(n_from, p); check the empirical rate within 3 sigma.
        let spec = two_state_spec(0.9);
        let lines = generate_synthetic_lines(&spec, 10_000, 11).unwrap();
        let mut from_counts = [0u64; 2];
        let mut to_zero = [0u64; 2];
        for line in &lines {
            let toks: Vec<&str> = line.split_whitespace().collect();
            for w in toks.windows(2) {
                let from = usize::from(w[0] == "y");
                from_counts[from] += 1;
                if w[1] == "x" {
                    to_zero[from] += 1;
                }
            }
        }
        for from in 0..2 {
            let n = from_counts[from] as f64;
            let p = spec.transitions[from][0];
            let sigma = (p * (1.0 - p) / n).sqrt();
            let freq = to_zero[from] as f64 / n;
            assert!(
                (freq - p).abs() <= 3.0 * sigma,
                "from={from}: freq {freq} vs p {p} (3sigma {})",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn markov_spec_rejects_bad_rows() {
        let mut spec = two_state_spec(0.7);
        spec.transitions[0][0] = 0.7 + 1e-6; // row sums to 1 + 1e-6
        assert!(spec.validate().is_err());

        let mut spec = two_state_spec(0.7);
        spec.initial = vec![0.5, 0.4];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn corpus_set_rejects_out_of_vocab_ids() {
        let dir = tempfile::tempdir().unwrap();
        let vpath = write_tmp(&dir, "v.txt", "a");
        let vocab = Vocab::build(&[vpath], 4).unwrap();
        let good = Corpus::from_records("g", vec![Record::new(vec![3]).unwrap()]).unwrap();
        let bad = Corpus::from_records("b", vec![Record::new(vec![9]).unwrap()]).unwrap();
        assert!(CorpusSet::new(vocab.clone(), vec![good.clone()], good.clone()).is_ok());
        assert!(CorpusSet::new(vocab, vec![bad], good).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // Round trip: encoding a line of in-vocab tokens and decoding it
            // reproduces the original token sequence.
            #[test]
            fn encode_decode_round_trip(idx in proptest::collection::vec(0usize..4, 1..20)) {
                let counts: HashMap<String, u64> =
                    [("alpha", 4u64), ("beta", 3), ("gamma", 2), ("delta", 1)]
                        .iter()
                        .map(|(s, c)| (s.to_string(), *c))
                        .collect();
                let vocab = Vocab::from_token_counts(&counts, 7).unwrap();
                let words = ["alpha", "beta", "gamma", "delta"];
                let line = idx.iter().map(|&i| words[i]).collect::<Vec<_>>().join(" ");
                let record = vocab.encode_line(&line).unwrap();
                prop_assert_eq!(vocab.decode(&record), line);
            }

            // generate_synthetic is a pure function of (spec, n, seed).
            #[test]
            fn synthetic_is_pure(seed in 0u64..1000, n in 1usize..30) {
                let spec = two_state_spec(0.6);
                let a = generate_synthetic_lines(&spec, n, seed).unwrap();
                let b = generate_synthetic_lines(&spec, n, seed).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
