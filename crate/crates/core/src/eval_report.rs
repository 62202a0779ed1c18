//! Perplexity evaluation and CSV report emission.
//!
//! Perplexity is token-level over the whole test set: `exp` of the summed
//! record NLLs divided by the summed token counts, end-of-sentence
//! included. CSV formats:
//!
//! - `results.csv`: `strategy,corpora,test_set,ppl`
//! - `trajectory_<run>.csv`: `epoch,w_1..w_K,train_loss,val_nll,val_ppl,wall_time`

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::trainer::TrainReport;
use crate::SentenceScorer;

/// Token-level evaluation of one model on one corpus.
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub corpus_name: String,
    /// Mean per-token negative log-likelihood in nats.
    pub nll_per_token: f64,
    /// `exp(nll_per_token)`.
    pub ppl: f64,
    /// Token positions scored, end-of-sentence included.
    pub tokens: usize,
}

/// Corpus perplexity: `-sum_i ln P(y_i) / sum_i (len_i + 1)`.
pub fn evaluate_ppl<S: SentenceScorer>(model: &S, test: &Corpus) -> Result<EvalResult> {
    let mut nll_sum = 0.0;
    let mut tokens = 0usize;
    for record in test.records() {
        nll_sum -= model.log_prob_record(record)?;
        tokens += record.len() + 1;
    }
    let nll_per_token = nll_sum / tokens as f64;
    let ppl = nll_per_token.exp();
    if !ppl.is_finite() || ppl <= 0.0 {
        return Err(Error::invalid(format!(
            "perplexity on '{}' is not a positive finite number: {ppl}",
            test.name()
        )));
    }
    Ok(EvalResult {
        corpus_name: test.name().to_string(),
        nll_per_token,
        ppl,
        tokens,
    })
}

/// One completed training run plus its test-set evaluations.
#[derive(Debug, Clone)]
pub struct RunResults {
    pub report: TrainReport,
    pub evals: Vec<EvalResult>,
}

pub(crate) fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

/// Render the `results.csv` payload for a set of runs.
pub fn results_csv(runs: &[RunResults]) -> String {
    let mut out = String::from("strategy,corpora,test_set,ppl\n");
    for run in runs {
        let corpora = run.report.corpus_names.join("+");
        for eval in &run.evals {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                run.report.strategy,
                corpora,
                eval.corpus_name,
                fmt_f(eval.ppl)
            );
        }
    }
    out
}

/// Write `results.csv` plus one trajectory CSV per run into `out_dir`.
/// Returns the paths written. Re-running on the same inputs produces
/// byte-identical files.
pub fn emit_report(runs: &[RunResults], out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    if runs.is_empty() {
        return Err(Error::invalid("emit_report needs at least one run"));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    let results_path = out_dir.join("results.csv");
    std::fs::write(&results_path, results_csv(runs)).map_err(|e| Error::io(&results_path, e))?;
    written.push(results_path);

    for (i, run) in runs.iter().enumerate() {
        let path = out_dir.join(format!("trajectory_{i:02}_{}.csv", run.report.strategy));
        run.report.write_csv(&path)?;
        written.push(path);
    }
    Ok(written)
}
