//! Training strategies: fixed-weight baselines and the adaptive loop.
//!
//! An epoch is always `ceil(total_train_records / batch_size)` minibatch
//! iterations regardless of the weights, so every strategy spends the same
//! compute per epoch and runs are comparable.
//!
//! The adaptive strategy re-derives the sampling weights from the data
//! before each epoch (or every `reweight_interval` iterations): the current
//! model is fine-tuned on each corpus separately for the same number of
//! iterations, the fine-tuned models are scored on the validation set, and
//! the mixture weights minimizing validation NLL become the sampling
//! probabilities. The fine-tuned snapshots are then discarded — they exist
//! only to measure what further training on each corpus would buy — and the
//! epoch trains the pre-fine-tune model on the reweighted mixture. This
//! costs K*S extra training iterations per reweight on top of the static
//! loop; the K fine-tunes are independent and run on parallel workers with
//! per-worker seeds derived from (seed, epoch, iteration, k), so results do
//! not depend on scheduling.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{Corpus, CorpusSet, Record};
use crate::error::{Error, Result};
use crate::eval_report::{evaluate_ppl, fmt_f};
use crate::ngram::NgramModel;
use crate::nnlm::{ModelConfig, ModelSnapshot};
use crate::sampler::{MixtureSampler, SamplingWeights};
use crate::weight_opt::{optimize_weights, score_matrix};

/// How sampling weights are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    /// Same probability for every corpus.
    Uniform,
    /// Fixed weights from interpolating per-corpus n-gram models.
    NgramOpt,
    /// Re-optimized before every epoch (or every Q iterations).
    Adaptive,
    /// A caller-supplied fixed weight vector.
    Static(SamplingWeights),
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Uniform => "uniform",
            Strategy::NgramOpt => "ngram-opt",
            Strategy::Adaptive => "adaptive",
            Strategy::Static(_) => "static",
        }
    }
}

/// Knobs for one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Multiplicative learning-rate factor applied per epoch.
    pub lr_decay: f64,
    /// Fine-tune iterations per corpus per reweight. Default: one pass over
    /// the smallest corpus's batches, capped at 200.
    pub finetune_iters: Option<usize>,
    /// Fine-tune learning rate. Default: the current epoch's rate.
    pub finetune_lr: Option<f64>,
    /// Reweight every Q iterations within an epoch instead of once at the
    /// start (adaptive strategy only).
    pub reweight_interval: Option<usize>,
    pub strategy: Strategy,
    pub seed: u64,
    /// Order of the n-gram models behind the ngram-opt baseline.
    pub ngram_order: usize,
    pub ngram_smoothing: f64,
    /// When false, wall_time is recorded as 0.0 so run artifacts are byte-
    /// reproducible.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 64,
            base_lr: 0.5,
            lr_decay: 0.7,
            finetune_iters: None,
            finetune_lr: None,
            reweight_interval: None,
            strategy: Strategy::Uniform,
            seed: 0,
            ngram_order: 3,
            ngram_smoothing: 0.1,
            record_timing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("base_lr must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::invalid("lr_decay must be positive"));
        }
        if let Some(lr) = self.finetune_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::invalid("finetune_lr must be positive"));
            }
        }
        if self.reweight_interval == Some(0) {
            return Err(Error::invalid("reweight_interval must be at least 1"));
        }
        Ok(())
    }

    /// S when not set explicitly: one pass over the smallest corpus,
    /// capped at 200 iterations.
    pub fn resolved_finetune_iters(&self, corpus_set: &CorpusSet) -> usize {
        self.finetune_iters.unwrap_or_else(|| {
            let smallest = corpus_set
                .corpora()
                .iter()
                .map(|c| c.len())
                .min()
                .unwrap_or(1);
            smallest.div_ceil(self.batch_size).max(1).min(200)
        })
    }

    /// Iterations per epoch: `ceil(total_train_records / batch_size)`,
    /// independent of the sampling weights.
    pub fn epoch_iterations(&self, corpus_set: &CorpusSet) -> usize {
        corpus_set
            .total_train_records()
            .div_ceil(self.batch_size)
            .max(1)
    }
}

/// Per-epoch metrics; `weights` are the epoch's first sampling weights.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub weights: SamplingWeights,
    pub train_loss: f64,
    pub validation_nll: f64,
    pub validation_ppl: f64,
    pub wall_time_secs: f64,
}

/// One weight (re)computation inside an adaptive run.
#[derive(Debug, Clone)]
pub struct WeightEvent {
    pub epoch: usize,
    /// Iteration offset within the epoch at which the weights took effect.
    pub iteration: usize,
    pub weights: SamplingWeights,
}

/// Everything a run reports: the per-epoch trajectory, every computed
/// weight vector, and the total number of train-step invocations
/// (fine-tune steps included).
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub strategy: String,
    pub corpus_names: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub weight_events: Vec<WeightEvent>,
    pub total_train_steps: u64,
}

impl TrainReport {
    pub fn num_corpora(&self) -> usize {
        self.corpus_names.len()
    }

    /// Render the trajectory CSV:
    /// `epoch,w_1..w_K,train_loss,val_nll,val_ppl,wall_time`.
    pub fn to_csv(&self) -> String {
        let k = self.num_corpora();
        let mut out = String::from("epoch");
        for i in 1..=k {
            let _ = write!(out, ",w_{i}");
        }
        out.push_str(",train_loss,val_nll,val_ppl,wall_time\n");
        for e in &self.epochs {
            let _ = write!(out, "{}", e.epoch);
            for &w in e.weights.as_slice() {
                let _ = write!(out, ",{}", fmt_f(w));
            }
            let _ = writeln!(
                out,
                ",{},{},{},{:.3}",
                fmt_f(e.train_loss),
                fmt_f(e.validation_nll),
                fmt_f(e.validation_ppl),
                e.wall_time_secs
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed for a named stream: every worker and sampler gets
/// its own reproducible generator regardless of scheduling.
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    let mut s = splitmix64(base);
    for &x in stream {
        s = splitmix64(s ^ splitmix64(x));
    }
    s
}

// Stream tag separating sampler seeds from fine-tune worker seeds.
const SAMPLER_STREAM: u64 = u64::MAX;

/// Fine-tune operator: train a fresh copy of `model` for `iters`
/// minibatch iterations on batches drawn uniformly from `corpus`. The
/// input is untouched; the clone starts with cleared optimizer
/// accumulators. Deterministic per seed.
pub fn fine_tune(
    model: &ModelSnapshot,
    corpus: &Corpus,
    iters: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<ModelSnapshot> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let mut tuned = model.clone();
    tuned.reset_optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..iters {
        let batch: Vec<&Record> = (0..batch_size)
            .map(|_| corpus.record(rng.random_range(0..corpus.len())))
            .collect();
        tuned.train_step(&batch, lr)?;
    }
    Ok(tuned)
}

/// Train `model` in place for `iters` minibatches from `sampler`.
/// Returns the token-weighted mean per-token NLL across the epoch.
pub fn train_epoch(
    model: &mut ModelSnapshot,
    sampler: &mut MixtureSampler,
    iters: usize,
    batch_size: usize,
    lr: f64,
) -> Result<f64> {
    if iters < 1 {
        return Err(Error::invalid("train_epoch needs at least one iteration"));
    }
    let (loss, _tokens) = train_chunk(model, sampler, iters, batch_size, lr)?;
    Ok(loss)
}

fn train_chunk(
    model: &mut ModelSnapshot,
    sampler: &mut MixtureSampler,
    iters: usize,
    batch_size: usize,
    lr: f64,
) -> Result<(f64, usize)> {
    let mut nll_sum = 0.0;
    let mut tokens = 0usize;
    for _ in 0..iters {
        let batch: Vec<&Record> = sampler
            .sample_minibatch(batch_size)
            .into_iter()
            .map(|(_, r)| r)
            .collect();
        let stats = model.train_step(&batch, lr)?;
        nll_sum += stats.loss * stats.tokens as f64;
        tokens += stats.tokens;
    }
    Ok((nll_sum / tokens as f64, tokens))
}

/// Weights for the non-adaptive strategies: uniform `1/K`, the verbatim
/// static vector, or the n-gram interpolation optimum on the validation
/// set.
pub fn compute_static_weights(
    strategy: &Strategy,
    corpus_set: &CorpusSet,
    ngram_order: usize,
    ngram_smoothing: f64,
) -> Result<SamplingWeights> {
    let k = corpus_set.num_corpora();
    match strategy {
        Strategy::Uniform => Ok(SamplingWeights::uniform(k)),
        Strategy::Static(w) => {
            if w.len() != k {
                return Err(Error::invalid(format!(
                    "static weights have {} entries for {k} corpora",
                    w.len()
                )));
            }
            Ok(w.clone())
        }
        Strategy::NgramOpt => {
            let models: Result<Vec<NgramModel>> = corpus_set
                .corpora()
                .iter()
                .map(|c| NgramModel::fit(c, ngram_order, ngram_smoothing, corpus_set.vocab().len()))
                .collect();
            let matrix = score_matrix(&models?, corpus_set.validation())?;
            Ok(optimize_weights(&matrix)?.weights)
        }
        Strategy::Adaptive => Err(Error::invalid(
            "adaptive strategy has no static weights; use adaptive_train",
        )),
    }
}

/// Fine-tune each corpus in parallel, optimize mixture weights on the
/// validation set, and report (weights, fine-tune steps spent).
fn reweight(
    corpus_set: &CorpusSet,
    model: &ModelSnapshot,
    finetune_iters: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
    epoch: usize,
    iteration: usize,
) -> Result<(SamplingWeights, u64)> {
    let tuned: Result<Vec<ModelSnapshot>> = corpus_set
        .corpora()
        .par_iter()
        .enumerate()
        .map(|(k, corpus)| {
            let worker_seed = derive_seed(seed, &[epoch as u64, iteration as u64, k as u64]);
            fine_tune(model, corpus, finetune_iters, batch_size, lr, worker_seed)
        })
        .collect();
    let tuned = tuned?;
    let steps: u64 = tuned
        .iter()
        .map(|t| t.step_count() - model.step_count())
        .sum();
    let matrix = score_matrix(&tuned, corpus_set.validation())?;
    let weights = optimize_weights(&matrix)?.weights;
    Ok((weights, steps))
}

/// Called after each epoch with the fresh model state and metrics
/// (checkpointing hook for the run orchestration).
pub type EpochHook<'a> = &'a mut dyn FnMut(usize, &ModelSnapshot, &EpochRecord) -> Result<()>;

/// Run any strategy end to end. Weight handling is the only difference
/// between the static and adaptive paths; everything else is this one loop.
pub fn run_strategy_with_hook(
    corpus_set: &CorpusSet,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mut hook: Option<EpochHook<'_>>,
) -> Result<(ModelSnapshot, TrainReport)> {
    train_cfg.validate()?;
    let static_weights = match &train_cfg.strategy {
        Strategy::Adaptive => None,
        s => Some(compute_static_weights(
            s,
            corpus_set,
            train_cfg.ngram_order,
            train_cfg.ngram_smoothing,
        )?),
    };
    let finetune_iters = train_cfg.resolved_finetune_iters(corpus_set);
    let epoch_iters = train_cfg.epoch_iterations(corpus_set);

    let mut model = ModelSnapshot::init(model_cfg)?;
    let mut report = TrainReport {
        strategy: train_cfg.strategy.name().to_string(),
        corpus_names: corpus_set.corpus_names(),
        epochs: Vec::with_capacity(train_cfg.epochs),
        weight_events: Vec::new(),
        total_train_steps: 0,
    };
    let mut finetune_steps = 0u64;

    for epoch in 1..=train_cfg.epochs {
        let started = Instant::now();
        let lr = train_cfg.base_lr * train_cfg.lr_decay.powi(epoch as i32 - 1);
        let interval = train_cfg.reweight_interval.unwrap_or(epoch_iters);

        let mut done = 0usize;
        let mut nll_sum = 0.0;
        let mut token_sum = 0usize;
        let mut first_weights: Option<SamplingWeights> = None;

        while done < epoch_iters {
            let chunk = interval.min(epoch_iters - done);
            let weights = match &static_weights {
                Some(w) => w.clone(),
                None => {
                    let ft_lr = train_cfg.finetune_lr.unwrap_or(lr);
                    let (w, steps) = reweight(
                        corpus_set,
                        &model,
                        finetune_iters,
                        train_cfg.batch_size,
                        ft_lr,
                        train_cfg.seed,
                        epoch,
                        done,
                    )
                    .map_err(|e| attach_partial(e, &report))?;
                    finetune_steps += steps;
                    report.weight_events.push(WeightEvent {
                        epoch,
                        iteration: done,
                        weights: w.clone(),
                    });
                    w
                }
            };
            if first_weights.is_none() {
                first_weights = Some(weights.clone());
            }
            let sampler_seed = derive_seed(
                train_cfg.seed,
                &[epoch as u64, done as u64, SAMPLER_STREAM],
            );
            let mut sampler = MixtureSampler::new(corpus_set, &weights, sampler_seed)?;
            let (chunk_loss, chunk_tokens) =
                train_chunk(&mut model, &mut sampler, chunk, train_cfg.batch_size, lr)
                    .map_err(|e| attach_partial(e, &report))?;
            nll_sum += chunk_loss * chunk_tokens as f64;
            token_sum += chunk_tokens;
            done += chunk;
        }

        // A non-finite validation score means the parameters blew up even
        // if saturation kept the training loss finite.
        let val = evaluate_ppl(&model, corpus_set.validation())
            .map_err(|e| match e {
                Error::Invalid(msg) => Error::Diverged {
                    context: format!("validation after epoch {epoch}: {msg}"),
                    partial: Some(Box::new(report.clone())),
                },
                other => attach_partial(other, &report),
            })?;
        let record = EpochRecord {
            epoch,
            weights: first_weights.expect("epoch ran at least one chunk"),
            train_loss: nll_sum / token_sum as f64,
            validation_nll: val.nll_per_token,
            validation_ppl: val.ppl,
            wall_time_secs: if train_cfg.record_timing {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        if let Some(h) = hook.as_deref_mut() {
            h(epoch, &model, &record)?;
        }
        report.epochs.push(record);
    }

    report.total_train_steps = model.step_count() + finetune_steps;
    Ok((model, report))
}

fn attach_partial(err: Error, report: &TrainReport) -> Error {
    match err {
        Error::Diverged { context, .. } => Error::Diverged {
            context,
            partial: Some(Box::new(report.clone())),
        },
        other => other,
    }
}

/// Adaptive training (weights re-optimized every epoch / every Q
/// iterations). `train_cfg.strategy` must be [`Strategy::Adaptive`].
pub fn adaptive_train(
    corpus_set: &CorpusSet,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(ModelSnapshot, TrainReport)> {
    if train_cfg.strategy != Strategy::Adaptive {
        return Err(Error::invalid(format!(
            "adaptive_train called with strategy '{}'",
            train_cfg.strategy.name()
        )));
    }
    run_strategy_with_hook(corpus_set, model_cfg, train_cfg, None)
}

/// Training with weights fixed for the whole run (uniform, ngram-opt, or
/// caller-supplied). `train_cfg.strategy` must not be adaptive.
pub fn static_train(
    corpus_set: &CorpusSet,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(ModelSnapshot, TrainReport)> {
    if train_cfg.strategy == Strategy::Adaptive {
        return Err(Error::invalid(
            "static_train called with the adaptive strategy",
        ));
    }
    run_strategy_with_hook(corpus_set, model_cfg, train_cfg, None)
}
