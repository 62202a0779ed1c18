//! Run configuration files and end-to-end orchestration.
//!
//! A run is described by one TOML file (paths, vocab settings, model shape,
//! training knobs, output directory); CLI flags may override single fields
//! for sweeps. Every run writes into its output directory:
//!
//! - `resolved_config.toml` — the fully resolved configuration snapshot
//! - `vocab.txt` — the vocabulary actually used (one token per line)
//! - `trajectory.csv` — per-epoch weights and losses (partial on abort)
//! - `checkpoints/epoch_NNNN.ckpt` and `model.ckpt`
//! - `eval.csv` — test-set perplexities, when test paths are configured

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusSet, Vocab};
use crate::error::{Error, Result};
use crate::eval_report::{evaluate_ppl, results_csv, EvalResult, RunResults};
use crate::nnlm::{ModelConfig, ModelSnapshot};
use crate::sampler::SamplingWeights;
use crate::trainer::{run_strategy_with_hook, Strategy, TrainConfig, TrainReport};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub path: PathBuf,
    /// Defaults to the file stem.
    #[serde(default)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorporaSpec {
    pub train: Vec<CorpusEntry>,
    pub validation: PathBuf,
    #[serde(default)]
    pub test: Vec<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabSpec {
    pub max_size: usize,
    /// Load an existing vocab file instead of building one from the
    /// training corpora.
    pub file: Option<PathBuf>,
}

impl Default for VocabSpec {
    fn default() -> Self {
        VocabSpec {
            max_size: 8000,
            file: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub context_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            context_size: 3,
            embed_dim: 32,
            hidden_dim: 64,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub strategy: String,
    pub static_weights: Option<Vec<f64>>,
    pub finetune_iters: Option<usize>,
    pub finetune_lr: Option<f64>,
    pub reweight_interval: Option<usize>,
    pub seed: u64,
    pub ngram_order: usize,
    pub ngram_smoothing: f64,
    pub record_timing: bool,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSpec {
            epochs: d.epochs,
            batch_size: d.batch_size,
            base_lr: d.base_lr,
            lr_decay: d.lr_decay,
            strategy: "adaptive".to_string(),
            static_weights: None,
            finetune_iters: None,
            finetune_lr: None,
            reweight_interval: None,
            seed: d.seed,
            ngram_order: d.ngram_order,
            ngram_smoothing: d.ngram_smoothing,
            record_timing: d.record_timing,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputSpec {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSpec {
    pub corpora: CorporaSpec,
    #[serde(default)]
    pub vocab: VocabSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainSpec,
    pub output: OutputSpec,
}

impl RunSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: RunSpec = toml::from_str(&text)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpora.train.is_empty() {
            return Err(Error::invalid(
                "corpora.train: at least one training corpus is required",
            ));
        }
        self.parse_strategy()?;
        Ok(())
    }

    /// Strategy string -> [`Strategy`], validating `static_weights`.
    pub fn parse_strategy(&self) -> Result<Strategy> {
        match self.train.strategy.as_str() {
            "uniform" => Ok(Strategy::Uniform),
            "ngram-opt" => Ok(Strategy::NgramOpt),
            "adaptive" => Ok(Strategy::Adaptive),
            "static" => {
                let w = self.train.static_weights.clone().ok_or_else(|| {
                    Error::invalid(
                        "train.static_weights: required when strategy = \"static\"",
                    )
                })?;
                if w.len() != self.corpora.train.len() {
                    return Err(Error::invalid(format!(
                        "train.static_weights: {} entries for {} training corpora",
                        w.len(),
                        self.corpora.train.len()
                    )));
                }
                Ok(Strategy::Static(SamplingWeights::new(w).map_err(|e| {
                    Error::invalid(format!("train.static_weights: {e}"))
                })?))
            }
            other => Err(Error::invalid(format!(
                "train.strategy: unknown strategy '{other}' \
                 (expected uniform | ngram-opt | adaptive | static)"
            ))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            base_lr: self.train.base_lr,
            lr_decay: self.train.lr_decay,
            finetune_iters: self.train.finetune_iters,
            finetune_lr: self.train.finetune_lr,
            reweight_interval: self.train.reweight_interval,
            strategy: self.parse_strategy()?,
            seed: self.train.seed,
            ngram_order: self.train.ngram_order,
            ngram_smoothing: self.train.ngram_smoothing,
            record_timing: self.train.record_timing,
        })
    }
}

/// Artifacts of a completed run.
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub report: TrainReport,
    pub evals: Vec<EvalResult>,
    pub final_model: ModelSnapshot,
}

fn load_named_corpus(entry: &CorpusEntry, vocab: &Vocab) -> Result<Corpus> {
    let mut corpus = Corpus::load(&entry.path, vocab)?;
    if let Some(name) = &entry.name {
        corpus.set_name(name.clone());
    }
    Ok(corpus)
}

/// Build the corpus set described by the spec. The vocabulary comes from
/// the training corpora only (never from validation or test data) unless
/// an explicit vocab file is configured.
pub fn assemble_corpus_set(spec: &RunSpec) -> Result<(CorpusSet, Vec<Corpus>)> {
    let vocab = match &spec.vocab.file {
        Some(path) => Vocab::load(path)?,
        None => {
            let paths: Vec<&PathBuf> = spec.corpora.train.iter().map(|e| &e.path).collect();
            Vocab::build(&paths, spec.vocab.max_size)?
        }
    };
    let corpora: Result<Vec<Corpus>> = spec
        .corpora
        .train
        .iter()
        .map(|e| load_named_corpus(e, &vocab))
        .collect();
    let validation = Corpus::load(&spec.corpora.validation, &vocab)?;
    let tests: Result<Vec<Corpus>> = spec
        .corpora
        .test
        .iter()
        .map(|p| Corpus::load(p, &vocab))
        .collect();
    let set = CorpusSet::new(vocab, corpora?, validation)?;
    Ok((set, tests?))
}

/// Execute a run end to end, writing all artifacts into the output
/// directory. On divergence the partial trajectory is still written and
/// the error propagates.
pub fn run_train(spec: &RunSpec, quiet: bool) -> Result<RunOutcome> {
    spec.validate()?;
    let out_dir = spec.output.dir.clone();
    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;

    let (corpus_set, tests) = assemble_corpus_set(spec)?;
    corpus_set.vocab().save(out_dir.join("vocab.txt"))?;

    let model_cfg = ModelConfig {
        context_size: spec.model.context_size,
        embed_dim: spec.model.embed_dim,
        hidden_dim: spec.model.hidden_dim,
        vocab_size: corpus_set.vocab().len(),
        seed: spec.model.seed,
    };
    let train_cfg = spec.train_config()?;

    // Full-provenance snapshot with every default and fallback resolved.
    let mut resolved = spec.clone();
    resolved.train.finetune_iters = Some(train_cfg.resolved_finetune_iters(&corpus_set));
    resolved.vocab.max_size = corpus_set.vocab().len();
    let resolved_path = out_dir.join("resolved_config.toml");
    let resolved_text = toml::to_string(&resolved)
        .map_err(|e| Error::invalid(format!("serialize resolved config: {e}")))?;
    std::fs::write(&resolved_path, resolved_text).map_err(|e| Error::io(&resolved_path, e))?;

    let mut hook = |epoch: usize, model: &ModelSnapshot, rec: &crate::trainer::EpochRecord| {
        model.save(ckpt_dir.join(format!("epoch_{epoch:04}.ckpt")))?;
        if !quiet {
            let ws: Vec<String> = rec
                .weights
                .as_slice()
                .iter()
                .map(|w| format!("{w:.3}"))
                .collect();
            println!(
                "epoch {:>3}  W=[{}]  train_nll={:.4}  val_ppl={:.2}",
                epoch,
                ws.join(", "),
                rec.train_loss,
                rec.validation_ppl
            );
        }
        Ok(())
    };

    let result = run_strategy_with_hook(&corpus_set, &model_cfg, &train_cfg, Some(&mut hook));
    let (model, report) = match result {
        Ok(pair) => pair,
        Err(Error::Diverged { context, partial }) => {
            if let Some(partial) = &partial {
                let _ = partial.write_csv(out_dir.join("trajectory.csv"));
            }
            return Err(Error::Diverged { context, partial });
        }
        Err(e) => return Err(e),
    };

    report.write_csv(out_dir.join("trajectory.csv"))?;
    model.save(out_dir.join("model.ckpt"))?;

    let evals: Result<Vec<EvalResult>> = tests
        .iter()
        .map(|t| evaluate_ppl(&model, t))
        .collect();
    let evals = evals?;
    if !evals.is_empty() {
        let runs = [RunResults {
            report: report.clone(),
            evals: evals.clone(),
        }];
        let path = out_dir.join("eval.csv");
        std::fs::write(&path, results_csv(&runs)).map_err(|e| Error::io(&path, e))?;
    }

    Ok(RunOutcome {
        out_dir,
        report,
        evals,
        final_model: model,
    })
}

/// Evaluate a checkpoint on test corpora; returns one result per corpus
/// and optionally writes them in the `results.csv` schema (the strategy
/// column carries the checkpoint stem).
pub fn run_eval(
    checkpoint: &Path,
    vocab_path: &Path,
    test_paths: &[PathBuf],
    out_csv: Option<&Path>,
) -> Result<Vec<EvalResult>> {
    if test_paths.is_empty() {
        return Err(Error::invalid("at least one test corpus is required"));
    }
    let model = ModelSnapshot::load(checkpoint)?;
    let vocab = Vocab::load(vocab_path)?;
    if vocab.len() != model.config().vocab_size {
        return Err(Error::invalid(format!(
            "vocab has {} tokens but the checkpoint expects {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let mut evals = Vec::new();
    for path in test_paths {
        let corpus = Corpus::load(path, &vocab)?;
        evals.push(evaluate_ppl(&model, &corpus)?);
    }
    if let Some(path) = out_csv {
        let stem = checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".into());
        let mut csv = String::from("strategy,corpora,test_set,ppl\n");
        for e in &evals {
            csv.push_str(&format!(
                "checkpoint,{stem},{},{}\n",
                e.corpus_name,
                crate::eval_report::fmt_f(e.ppl)
            ));
        }
        std::fs::write(path, csv).map_err(|e| Error::io(path, e))?;
    }
    Ok(evals)
}
