//! Optimisation loop, mixed precision, and checkpoints.

pub mod checkpoint;
mod optim;

use std::collections::VecDeque;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use optim::{
    clip_global_norm, global_norm, AdamW, AdamWConfig, LossScaler, LrSchedule, UpdateStats,
    INITIAL_LOSS_SCALE, LOSS_SCALE_GROWTH_INTERVAL, MAX_LOSS_SCALE,
};

use crate::data::{sample_batch, Batch, Vocabulary};
use crate::error::{Error, Pass, Result};
use crate::model::{self, BoundWeights, ModelConfig, ModelWeights};
use crate::tensor::{Backend, Precision, RopeTable, Tape};

pub const LOSS_HISTORY_CAPACITY: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparameters {
    pub batch_size: usize,
    pub lr_max: f32,
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub min_lr_ratio: f32,
    pub seed: u64,
    pub mixed_precision: bool,
    pub optimizer: AdamWConfig,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr_max: 3e-3,
            warmup_steps: 100,
            max_steps: 2000,
            min_lr_ratio: 0.1,
            seed: 0,
            mixed_precision: false,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl Hyperparameters {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            lr_max: self.lr_max,
            warmup_steps: self.warmup_steps,
            max_steps: self.max_steps,
            min_ratio: self.min_lr_ratio,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Contract("batch_size must be at least 1".into()));
        }
        if !(self.lr_max.is_finite() && self.lr_max >= 0.0) {
            return Err(Error::Contract(format!("lr_max {} must be finite and non-negative", self.lr_max)));
        }
        Ok(())
    }
}

/// Everything a training run mutates.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub weights: ModelWeights,
    pub optimizer: AdamW,
    pub step: u64,
    pub tokens_seen: u64,
    pub loss_history: VecDeque<(u64, f32)>,
    pub seed: u64,
    pub loss_scaler: Option<LossScaler>,
}

impl TrainState {
    pub fn new(cfg: &ModelConfig, weights: ModelWeights, hyper: &Hyperparameters) -> Self {
        Self {
            weights,
            optimizer: AdamW::for_model(hyper.optimizer, cfg),
            step: 0,
            tokens_seen: 0,
            loss_history: VecDeque::new(),
            seed: hyper.seed,
            loss_scaler: hyper.mixed_precision.then(LossScaler::default),
        }
    }

    /// Resumes from a checkpoint with fresh optimizer moments.
    pub fn from_checkpoint(ckpt: &Checkpoint, hyper: &Hyperparameters) -> Self {
        let mut state = Self::new(&ckpt.config, ckpt.weights.clone(), hyper);
        state.step = ckpt.step;
        state.tokens_seen = ckpt.tokens_seen;
        state
    }

    pub fn checkpoint(&self, cfg: &ModelConfig, vocab: &Vocabulary) -> Checkpoint {
        Checkpoint {
            config: *cfg,
            vocab: vocab.clone(),
            weights: self.weights.clone(),
            step: self.step,
            tokens_seen: self.tokens_seen,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f32,
    pub tokens_seen: u64,
    pub tokens_per_sec: f64,
    pub lr: f32,
    pub grad_norm: f32,
    pub loss_scale: Option<f32>,
    /// True when a mixed-precision overflow skipped the update.
    pub skipped: bool,
}

/// Seconds since an arbitrary origin; injectable so embedders without a
/// system clock can supply one.
pub type Clock = Arc<dyn Fn() -> f64 + Send + Sync>;

pub fn system_clock() -> Clock {
    #[cfg(not(target_arch = "wasm32"))]
    {
        let origin = std::time::Instant::now();
        Arc::new(move || origin.elapsed().as_secs_f64())
    }
    #[cfg(target_arch = "wasm32")]
    {
        Arc::new(|| 0.0)
    }
}

/// Owns one run: model, optimizer, data stream and rng.
pub struct Trainer {
    cfg: ModelConfig,
    hyper: Hyperparameters,
    state: TrainState,
    train: Arc<[u32]>,
    rng: ChaCha8Rng,
    backend: Arc<dyn Backend>,
    rope: Arc<RopeTable>,
    clock: Clock,
}

impl Trainer {
    pub fn new(
        cfg: ModelConfig,
        state: TrainState,
        train: Arc<[u32]>,
        hyper: Hyperparameters,
        backend: Arc<dyn Backend>,
    ) -> Result<Self> {
        cfg.validate()?;
        hyper.validate()?;
        if train.len() < cfg.context_len + 1 {
            return Err(Error::Data(format!(
                "training slice of {} tokens is too short for one window of {}+1",
                train.len(),
                cfg.context_len
            )));
        }
        if let Some(&bad) = train.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Data(format!("token id {bad} outside vocabulary of size {}", cfg.vocab_size)));
        }
        let rope = cfg.rope_table()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(hyper.seed),
            cfg,
            hyper,
            state,
            train,
            backend,
            rope,
            clock: system_clock(),
        })
    }

    /// Fresh weights from `hyper.seed`.
    pub fn from_scratch(
        cfg: ModelConfig,
        train: Arc<[u32]>,
        hyper: Hyperparameters,
        backend: Arc<dyn Backend>,
    ) -> Result<Self> {
        let weights = ModelWeights::init(&cfg, hyper.seed)?;
        let state = TrainState::new(&cfg, weights, &hyper);
        Self::new(cfg, state, train, hyper, backend)
    }

    pub fn set_clock(&mut self, clock: Clock) {
        self.clock = clock;
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.hyper
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.state.weights
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        sample_batch(&self.train, self.cfg.context_len, self.hyper.batch_size, &mut self.rng)
    }

    /// Forward and backward over one batch. Returns the unscaled loss and
    /// gradients in manifest order, or `None` for the gradients when a
    /// half-precision overflow was detected.
    pub fn loss_and_grads(&self, batch: &Batch, precision: Precision, seed: f32) -> Result<(f32, Option<Vec<Vec<f32>>>)> {
        let mut tape = Tape::with_precision(self.backend.clone(), precision);
        let params = BoundWeights::bind(&mut tape, &self.state.weights);
        let logits = model::forward(
            &mut tape,
            &params,
            &self.cfg,
            &self.rope,
            &batch.inputs,
            batch.batch_size,
            batch.context_len,
        )?;
        let loss = tape.cross_entropy(logits, &batch.targets)?;
        let loss_value = tape.value(loss).item().expect("scalar loss");
        let mut grads = match tape.backward_scaled(loss, seed) {
            Ok(g) => g,
            Err(Error::NonFinite { pass: Pass::Backward, .. }) if precision == Precision::Half => {
                return Ok((loss_value, None))
            }
            Err(e) => return Err(e),
        };
        let inv = 1.0 / seed;
        let mut out = Vec::with_capacity(params.vars.len());
        for &v in &params.vars {
            let mut g = grads.take(v).expect("every parameter is trainable").into_vec();
            if seed != 1.0 {
                for x in &mut g {
                    *x *= inv;
                }
            }
            if !g.iter().all(|x| x.is_finite()) {
                if precision == Precision::Half {
                    return Ok((loss_value, None));
                }
                return Err(Error::NonFinite {
                    op: crate::error::OpKind::Leaf,
                    pass: Pass::Backward,
                });
            }
            out.push(g);
        }
        Ok((loss_value, Some(out)))
    }

    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let started = (self.clock)();
        let batch = self.next_batch()?;
        let (precision, seed) = match &self.state.loss_scaler {
            Some(s) => (Precision::Half, s.scale()),
            None => (Precision::Full, 1.0),
        };
        let (loss, grads) = self.loss_and_grads(&batch, precision, seed)?;
        // step s is produced with lr(s); the first update uses lr(1)
        let lr = self.hyper.schedule().lr(self.state.step + 1);

        let (grad_norm, skipped) = match grads {
            Some(mut grads) => {
                let mut params = self.state.weights.tensors_mut();
                let stats = self.state.optimizer.step(&mut params, &mut grads, lr)?;
                if let Some(s) = &mut self.state.loss_scaler {
                    s.on_clean_step();
                }
                (stats.grad_norm, false)
            }
            None => {
                let scaler = self.state.loss_scaler.as_mut().expect("overflow only in mixed precision");
                scaler.on_overflow()?;
                (f32::INFINITY, true)
            }
        };

        self.state.step += 1;
        self.state.tokens_seen += (batch.batch_size * batch.context_len) as u64;
        if self.state.loss_history.len() == LOSS_HISTORY_CAPACITY {
            self.state.loss_history.pop_front();
        }
        self.state.loss_history.push_back((self.state.step, loss));
        let elapsed = (self.clock)() - started;
        let tokens = (batch.batch_size * batch.context_len) as f64;
        Ok(StepMetrics {
            step: self.state.step,
            loss,
            tokens_seen: self.state.tokens_seen,
            tokens_per_sec: if elapsed > 0.0 { tokens / elapsed } else { 0.0 },
            lr,
            grad_norm,
            loss_scale: self.state.loss_scaler.map(|s| s.scale()),
            skipped,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub weights: usize,
    pub moments: usize,
    pub gradients: usize,
    pub activations: usize,
}

impl MemoryReport {
    pub fn total(&self) -> usize {
        self.weights + self.moments + self.gradients + self.activations
    }
}

/// Buffer-size accounting for one training step, measured by running a
/// real forward pass and summing what the tape holds.
pub fn measure_memory(
    cfg: &ModelConfig,
    batch_size: usize,
    precision: Precision,
    backend: Arc<dyn Backend>,
) -> Result<MemoryReport> {
    let weights = ModelWeights::init(cfg, 0)?;
    let rope = cfg.rope_table()?;
    let mut tape = Tape::with_precision(backend, precision);
    let params = BoundWeights::bind(&mut tape, &weights);
    let tokens: Vec<u32> = (0..batch_size * cfg.context_len)
        .map(|i| (i % cfg.vocab_size) as u32)
        .collect();
    let logits = model::forward(&mut tape, &params, cfg, &rope, &tokens, batch_size, cfg.context_len)?;
    tape.cross_entropy(logits, &tokens)?;
    let weight_bytes = weights.param_count() * 4;
    Ok(MemoryReport {
        weights: weight_bytes,
        moments: 2 * weight_bytes,
        gradients: weight_bytes,
        activations: tape.activation_bytes(),
    })
}
