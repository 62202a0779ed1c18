//! Feed-forward n-gram neural language model with manual backpropagation.
//!
//! Architecture: the `n` previous token embeddings are concatenated, passed
//! through one tanh hidden layer, and projected to softmax logits over the
//! vocabulary. Histories shorter than `n` are padded with `<s>`; `</s>` is
//! appended and scored as every record's final position, which makes
//! sentence probabilities proper.
//!
//! The optimizer is SGD with a per-parameter squared-gradient accumulator
//! (adaptive step size) and global gradient-norm clipping at 5.0.
//!
//! # Checkpoint format
//!
//! Little-endian binary, fixed layout:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "MXLMCKPT"
//! 8       4     format version (u32) = 1
//! 12      4     context_size (u32)
//! 16      4     embed_dim (u32)
//! 20      4     hidden_dim (u32)
//! 24      4     vocab_size (u32)
//! 28      8     seed (u64)
//! 36      8     step_count (u64)
//! 44      8     param_count (u64)
//! 52      8     opt_state_count (u64)
//! 60      8*P   parameters (f64), order: embedding table (V x d,
//!               row-major), hidden weights (n*d x h, row-major),
//!               hidden bias (h), output weights (h x V, row-major),
//!               output bias (V)
//! then    8*P   optimizer accumulators (f64), same order
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Record, BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::SentenceScorer;

const MAGIC: &[u8; 8] = b"MXLMCKPT";
const FORMAT_VERSION: u32 = 1;
/// Global L2 gradient-norm clip applied before each optimizer step.
pub const GRAD_CLIP: f64 = 5.0;
const ADAGRAD_EPS: f64 = 1e-8;

/// Model shape and init seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Number of history tokens fed to the model.
    pub context_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_size == 0
            || self.embed_dim == 0
            || self.hidden_dim == 0
            || self.vocab_size == 0
        {
            return Err(Error::invalid(format!(
                "model dimensions must all be at least 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// Total parameter count:
    /// `V*d + (n*d)*h + h + h*V + V`.
    pub fn param_count(&self) -> usize {
        let (n, d, h, v) = (
            self.context_size,
            self.embed_dim,
            self.hidden_dim,
            self.vocab_size,
        );
        v * d + (n * d) * h + h + h * v + v
    }
}

/// Offsets of each parameter group inside the flat vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    emb: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    total: usize,
}

impl Layout {
    fn of(cfg: &ModelConfig) -> Layout {
        let (n, d, h, v) = (
            cfg.context_size,
            cfg.embed_dim,
            cfg.hidden_dim,
            cfg.vocab_size,
        );
        let emb = 0;
        let w1 = emb + v * d;
        let b1 = w1 + (n * d) * h;
        let w2 = b1 + h;
        let b2 = w2 + h * v;
        Layout {
            emb,
            w1,
            b1,
            w2,
            b2,
            total: b2 + v,
        }
    }
}

/// Stats for one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct TrainStepStats {
    /// Mean per-token negative log-likelihood of the batch, pre-update (nats).
    pub loss: f64,
    /// Token positions in the batch, end-of-sentence included.
    pub tokens: usize,
    /// L2 norm of the mean gradient before clipping.
    pub grad_norm: f64,
}

/// Full parameter and optimizer state of one model. `clone()` yields a
/// deep, independent copy.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    config: ModelConfig,
    params: Vec<f64>,
    opt_state: Vec<f64>,
    step_count: u64,
}

/// Reusable per-position buffers for forward/backward passes.
struct Scratch {
    history: Vec<u32>,
    x: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    d_logits: Vec<f64>,
    d_hidden: Vec<f64>,
    d_x: Vec<f64>,
}

impl Scratch {
    fn for_config(cfg: &ModelConfig) -> Scratch {
        let nd = cfg.context_size * cfg.embed_dim;
        Scratch {
            history: vec![BOS_ID; cfg.context_size],
            x: vec![0.0; nd],
            hidden: vec![0.0; cfg.hidden_dim],
            logits: vec![0.0; cfg.vocab_size],
            d_logits: vec![0.0; cfg.vocab_size],
            d_hidden: vec![0.0; cfg.hidden_dim],
            d_x: vec![0.0; nd],
        }
    }
}

impl ModelSnapshot {
    /// Initialize with weights drawn uniformly from ±1/sqrt(fan_in) and
    /// zero biases, deterministically from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::of(config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let emb_scale = 1.0 / (config.embed_dim as f64).sqrt();
        for p in &mut params[layout.emb..layout.w1] {
            *p = rng.random_range(-emb_scale..emb_scale);
        }
        let w1_scale = 1.0 / ((config.context_size * config.embed_dim) as f64).sqrt();
        for p in &mut params[layout.w1..layout.b1] {
            *p = rng.random_range(-w1_scale..w1_scale);
        }
        let w2_scale = 1.0 / (config.hidden_dim as f64).sqrt();
        for p in &mut params[layout.w2..layout.b2] {
            *p = rng.random_range(-w2_scale..w2_scale);
        }

        Ok(ModelSnapshot {
            config: *config,
            opt_state: vec![0.0; layout.total],
            step_count: 0,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; used by tests to hand-set weights.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Clear the optimizer accumulators (fine-tune clones start fresh).
    pub fn reset_optimizer(&mut self) {
        self.opt_state.iter_mut().for_each(|x| *x = 0.0);
    }

    fn check_record(&self, record: &Record) -> Result<()> {
        let v = self.config.vocab_size as u32;
        if let Some(&id) = record.ids().iter().find(|&&id| id >= v) {
            return Err(Error::invalid(format!(
                "token id {id} out of range for vocab size {v}"
            )));
        }
        Ok(())
    }

    /// Fill `scratch.history` with the `n` tokens preceding position `t`
    /// (`<s>`-padded) and return the target id at `t`.
    fn position(&self, record: &Record, t: usize, history: &mut [u32]) -> u32 {
        let ids = record.ids();
        let n = self.config.context_size;
        for (slot, h) in history.iter_mut().enumerate() {
            let offset = t as i64 - n as i64 + slot as i64;
            *h = if offset < 0 { BOS_ID } else { ids[offset as usize] };
        }
        if t < ids.len() {
            ids[t]
        } else {
            EOS_ID
        }
    }

    /// Forward pass for one history; fills `scratch.x/hidden/logits` and
    /// returns log-softmax denominator pieces `(max, ln sum exp)`.
    fn forward(&self, scratch: &mut Scratch) -> (f64, f64) {
        let cfg = &self.config;
        let layout = Layout::of(cfg);
        let (d, h, v) = (cfg.embed_dim, cfg.hidden_dim, cfg.vocab_size);

        for (slot, &tok) in scratch.history.iter().enumerate() {
            let row = layout.emb + tok as usize * d;
            scratch.x[slot * d..(slot + 1) * d].copy_from_slice(&self.params[row..row + d]);
        }

        scratch
            .hidden
            .copy_from_slice(&self.params[layout.b1..layout.b1 + h]);
        for (i, &xi) in scratch.x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.params[layout.w1 + i * h..layout.w1 + (i + 1) * h];
            for (z, &w) in scratch.hidden.iter_mut().zip(row) {
                *z += xi * w;
            }
        }
        for z in scratch.hidden.iter_mut() {
            *z = z.tanh();
        }

        scratch
            .logits
            .copy_from_slice(&self.params[layout.b2..layout.b2 + v]);
        for (j, &aj) in scratch.hidden.iter().enumerate() {
            if aj == 0.0 {
                continue;
            }
            let row = &self.params[layout.w2 + j * v..layout.w2 + (j + 1) * v];
            for (u, &w) in scratch.logits.iter_mut().zip(row) {
                *u += aj * w;
            }
        }

        let max = scratch.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = scratch.logits.iter().map(|&u| (u - max).exp()).sum();
        (max, sum_exp.ln())
    }

    /// log P(record): sum of per-position log-softmax probabilities with
    /// `<s>` padding and a scored `</s>`. Always finite and <= 0.
    pub fn record_log_prob(&self, record: &Record) -> Result<f64> {
        self.check_record(record)?;
        let mut scratch = Scratch::for_config(&self.config);
        let mut total = 0.0;
        for t in 0..=record.len() {
            let target = self.position(record, t, &mut scratch.history);
            let (max, ln_sum) = self.forward(&mut scratch);
            total += scratch.logits[target as usize] - max - ln_sum;
        }
        Ok(total)
    }

    /// Next-token distribution given a history (last `n` tokens are used;
    /// shorter histories are `<s>`-padded on the left).
    pub fn predict_distribution(&self, history: &[u32]) -> Result<Vec<f64>> {
        let v = self.config.vocab_size as u32;
        if let Some(&id) = history.iter().find(|&&id| id >= v) {
            return Err(Error::invalid(format!(
                "token id {id} out of range for vocab size {v}"
            )));
        }
        let n = self.config.context_size;
        let mut scratch = Scratch::for_config(&self.config);
        for (slot, h) in scratch.history.iter_mut().enumerate() {
            let offset = history.len() as i64 - n as i64 + slot as i64;
            *h = if offset < 0 {
                BOS_ID
            } else {
                history[offset as usize]
            };
        }
        let (max, ln_sum) = self.forward(&mut scratch);
        Ok(scratch
            .logits
            .iter()
            .map(|&u| (u - max - ln_sum).exp())
            .collect())
    }

    /// Mean per-token NLL of the batch and its gradient (same layout as
    /// [`ModelSnapshot::params`]). Does not modify the model.
    pub fn nll_and_grad(&self, batch: &[&Record]) -> Result<(f64, Vec<f64>, usize)> {
        if batch.is_empty() {
            return Err(Error::invalid("batch must contain at least one record"));
        }
        for r in batch {
            self.check_record(r)?;
        }
        let cfg = &self.config;
        let layout = Layout::of(cfg);
        let (d, h, v) = (cfg.embed_dim, cfg.hidden_dim, cfg.vocab_size);

        let mut grad = vec![0.0; layout.total];
        let mut scratch = Scratch::for_config(cfg);
        let mut loss_sum = 0.0;
        let mut tokens = 0usize;

        for record in batch {
            for t in 0..=record.len() {
                let target = self.position(record, t, &mut scratch.history) as usize;
                let (max, ln_sum) = self.forward(&mut scratch);
                loss_sum -= scratch.logits[target] - max - ln_sum;
                tokens += 1;

                // dLoss/dlogits = softmax - one_hot(target)
                for (dl, &u) in scratch.d_logits.iter_mut().zip(&scratch.logits) {
                    *dl = (u - max - ln_sum).exp();
                }
                scratch.d_logits[target] -= 1.0;

                // Output layer.
                for (g, &dl) in grad[layout.b2..layout.b2 + v]
                    .iter_mut()
                    .zip(&scratch.d_logits)
                {
                    *g += dl;
                }
                for (j, &aj) in scratch.hidden.iter().enumerate() {
                    let w_row = &self.params[layout.w2 + j * v..layout.w2 + (j + 1) * v];
                    let g_row = &mut grad[layout.w2 + j * v..layout.w2 + (j + 1) * v];
                    let mut da = 0.0;
                    for ((g, &w), &dl) in g_row.iter_mut().zip(w_row).zip(&scratch.d_logits) {
                        *g += aj * dl;
                        da += w * dl;
                    }
                    // tanh' = 1 - a^2
                    scratch.d_hidden[j] = da * (1.0 - aj * aj);
                }

                // Hidden layer.
                for (g, &dz) in grad[layout.b1..layout.b1 + h]
                    .iter_mut()
                    .zip(&scratch.d_hidden)
                {
                    *g += dz;
                }
                for (i, &xi) in scratch.x.iter().enumerate() {
                    let w_row = &self.params[layout.w1 + i * h..layout.w1 + (i + 1) * h];
                    let g_row = &mut grad[layout.w1 + i * h..layout.w1 + (i + 1) * h];
                    let mut dx = 0.0;
                    for ((g, &w), &dz) in g_row.iter_mut().zip(w_row).zip(&scratch.d_hidden) {
                        *g += xi * dz;
                        dx += w * dz;
                    }
                    scratch.d_x[i] = dx;
                }

                // Embedding rows.
                for (slot, &tok) in scratch.history.iter().enumerate() {
                    let row = layout.emb + tok as usize * d;
                    for (g, &dx) in grad[row..row + d]
                        .iter_mut()
                        .zip(&scratch.d_x[slot * d..(slot + 1) * d])
                    {
                        *g += dx;
                    }
                }
            }
        }

        let scale = 1.0 / tokens as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok((loss_sum * scale, grad, tokens))
    }

    /// One optimizer step on the mean per-token NLL of `batch`. Returns the
    /// pre-update loss. A non-finite loss aborts with a divergence error.
    pub fn train_step(&mut self, batch: &[&Record], lr: f64) -> Result<TrainStepStats> {
        let (loss, mut grad, tokens) = self.nll_and_grad(batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                context: format!("train step {}", self.step_count),
                partial: None,
            });
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > GRAD_CLIP {
            let scale = GRAD_CLIP / norm;
            grad.iter_mut().for_each(|g| *g *= scale);
        }
        for ((p, acc), &g) in self
            .params
            .iter_mut()
            .zip(self.opt_state.iter_mut())
            .zip(&grad)
        {
            *acc += g * g;
            *p -= lr * g / (acc.sqrt() + ADAGRAD_EPS);
        }
        self.step_count += 1;
        Ok(TrainStepStats {
            loss,
            tokens,
            grad_norm: norm,
        })
    }

    /// Write the checkpoint format documented in the module docs.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(60 + 16 * self.params.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.config.context_size as u32).to_le_bytes());
        buf.extend_from_slice(&(self.config.embed_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.config.hidden_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.config.vocab_size as u32).to_le_bytes());
        buf.extend_from_slice(&self.config.seed.to_le_bytes());
        buf.extend_from_slice(&self.step_count.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.opt_state.len() as u64).to_le_bytes());
        for &p in &self.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        for &a in &self.opt_state {
            buf.extend_from_slice(&a.to_le_bytes());
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let corrupt = |what: &str| {
            Error::invalid(format!("{}: corrupt checkpoint ({what})", path.display()))
        };

        if bytes.len() < 60 || &bytes[0..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        if u32_at(8) != FORMAT_VERSION {
            return Err(corrupt("unsupported version"));
        }
        let config = ModelConfig {
            context_size: u32_at(12) as usize,
            embed_dim: u32_at(16) as usize,
            hidden_dim: u32_at(20) as usize,
            vocab_size: u32_at(24) as usize,
            seed: u64_at(28),
        };
        config.validate().map_err(|_| corrupt("bad dimensions"))?;
        let step_count = u64_at(36);
        let param_count = u64_at(44) as usize;
        let opt_count = u64_at(52) as usize;
        if param_count != config.param_count() || opt_count != param_count {
            return Err(corrupt("length fields disagree with dimensions"));
        }
        let expected = 60 + 16 * param_count;
        if bytes.len() != expected {
            return Err(corrupt("truncated payload"));
        }
        let f64_vec = |start: usize, count: usize| -> Vec<f64> {
            (0..count)
                .map(|i| {
                    let o = start + i * 8;
                    f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap())
                })
                .collect()
        };
        let params = f64_vec(60, param_count);
        let opt_state = f64_vec(60 + 8 * param_count, param_count);
        if params.iter().any(|p| !p.is_finite()) {
            return Err(corrupt("non-finite parameters"));
        }
        Ok(ModelSnapshot {
            config,
            params,
            opt_state,
            step_count,
        })
    }
}

impl SentenceScorer for ModelSnapshot {
    fn log_prob_record(&self, record: &Record) -> Result<f64> {
        self.record_log_prob(record)
    }
}
