//! Automatic model-quality report: holdout loss, memorization of the training
//! text, and a coarse grade.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Vocabulary, UNK_ID};
use crate::error::{Error, Result};
use crate::inference::{generate, Decoder, GenerationSettings};
use crate::model::{self, BoundWeights, ModelConfig, ModelWeights};
use crate::tensor::{Backend, Tape};

pub const PROMPT_COUNT: usize = 16;
pub const TOKENS_PER_PROMPT: usize = 32;
pub const MEMORIZATION_NGRAM: usize = 8;
/// Windows per forward pass when scoring the holdout.
const EVAL_BATCH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradeThresholds {
    /// Fraction of `ln(vocab)` at or above which output is noise.
    pub noise_fraction: f64,
    pub memorized_rate: f64,
    pub fluent_loss: f64,
    pub structured_loss: f64,
}

impl Default for GradeThresholds {
    fn default() -> Self {
        Self {
            noise_fraction: 0.9,
            memorized_rate: 0.8,
            fluent_loss: 1.4,
            structured_loss: 2.4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grade {
    Noise,
    Babble,
    Structured,
    Fluent,
    Memorized,
}

/// Rubric: noise, then memorized, then fluent, structured, babble.
pub fn grade(holdout_loss: f64, memorization_rate: f64, vocab_size: usize, t: &GradeThresholds) -> Grade {
    if !(holdout_loss < t.noise_fraction * (vocab_size as f64).ln()) {
        Grade::Noise
    } else if memorization_rate >= t.memorized_rate {
        Grade::Memorized
    } else if holdout_loss < t.fluent_loss {
        Grade::Fluent
    } else if holdout_loss < t.structured_loss {
        Grade::Structured
    } else {
        Grade::Babble
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub holdout_loss: f64,
    pub holdout_perplexity: f64,
    pub memorization_rate: f64,
    pub charset_validity: f64,
    pub grade: Grade,
    pub holdout_windows: usize,
    pub generated_tokens: usize,
}

impl EvalReport {
    /// Canonical key-sorted document.
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("report serializes");
        serde_json::to_string(&value).expect("value serializes")
    }
}

/// Mean cross-entropy over consecutive non-overlapping windows of the
/// holdout; each window scores `context_len` next-token predictions.
pub fn holdout_loss(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    holdout: &[u32],
    backend: Arc<dyn Backend>,
) -> Result<(f64, usize)> {
    let ctx = cfg.context_len;
    let windows = holdout.len().saturating_sub(1) / ctx;
    if windows == 0 {
        return Err(Error::Data("holdout shorter than one window".into()));
    }
    let rope = cfg.rope_table()?;
    let mut total = 0.0f64;
    for first in (0..windows).step_by(EVAL_BATCH) {
        let count = EVAL_BATCH.min(windows - first);
        let mut inputs = Vec::with_capacity(count * ctx);
        let mut targets = Vec::with_capacity(count * ctx);
        for w in first..first + count {
            inputs.extend_from_slice(&holdout[w * ctx..(w + 1) * ctx]);
            targets.extend_from_slice(&holdout[w * ctx + 1..(w + 1) * ctx + 1]);
        }
        let mut tape = Tape::new(backend.clone());
        let params = BoundWeights::bind(&mut tape, weights);
        let logits = model::forward(&mut tape, &params, cfg, &rope, &inputs, count, ctx)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        total += tape.value(loss).item().expect("scalar") as f64 * count as f64;
    }
    Ok((total / windows as f64, windows))
}

/// Evenly spaced prompt starts over the holdout.
fn prompt_offsets(holdout_len: usize, prompt_len: usize) -> Vec<usize> {
    let span = holdout_len - prompt_len;
    (0..PROMPT_COUNT).map(|i| i * span / PROMPT_COUNT).collect()
}

/// Fraction of `ngrams` that occur verbatim somewhere in `train`.
pub fn memorization_rate(ngrams: &[Vec<u32>], train: &[u32]) -> f64 {
    if ngrams.is_empty() {
        return 0.0;
    }
    let n = MEMORIZATION_NGRAM;
    let mut found: HashMap<&[u32], bool> = ngrams.iter().map(|g| (g.as_slice(), false)).collect();
    for window in train.windows(n) {
        if let Some(hit) = found.get_mut(window) {
            *hit = true;
        }
    }
    let hits = ngrams.iter().filter(|g| found[g.as_slice()]).count();
    hits as f64 / ngrams.len() as f64
}

pub fn evaluate(
    weights: &Arc<ModelWeights>,
    cfg: &ModelConfig,
    corpus: &Corpus,
    backend: Arc<dyn Backend>,
) -> Result<EvalReport> {
    evaluate_slices(weights, cfg, corpus.train_tokens(), corpus.holdout_tokens(), backend)
}

/// Same as [`evaluate`] with explicit slices, so a model can be scored
/// against its own training text.
pub fn evaluate_slices(
    weights: &Arc<ModelWeights>,
    cfg: &ModelConfig,
    train: &[u32],
    holdout: &[u32],
    backend: Arc<dyn Backend>,
) -> Result<EvalReport> {
    let ctx = cfg.context_len;
    if holdout.len() < 2 * ctx {
        return Err(Error::Data(format!(
            "holdout of {} tokens is shorter than two context windows ({}); use a larger corpus or a larger holdout fraction",
            holdout.len(),
            2 * ctx
        )));
    }
    let (loss, windows) = holdout_loss(weights, cfg, holdout, backend.clone())?;

    let decoder = Decoder::new(weights.clone(), *cfg, backend)?;
    let prompt_len = (ctx / 4).max(1);
    let mut ngrams = Vec::new();
    let (mut generated, mut valid) = (0usize, 0usize);
    for offset in prompt_offsets(holdout.len(), prompt_len) {
        let prompt = &holdout[offset..offset + prompt_len];
        let out = generate(&decoder, prompt, GenerationSettings::greedy(TOKENS_PER_PROMPT))?;
        generated += out.len();
        valid += out.iter().filter(|&&t| t != UNK_ID).count();
        ngrams.extend(out.windows(MEMORIZATION_NGRAM).map(<[u32]>::to_vec));
    }
    let memorization = memorization_rate(&ngrams, train);
    let validity = if generated == 0 { 0.0 } else { valid as f64 / generated as f64 };
    Ok(EvalReport {
        holdout_loss: loss,
        holdout_perplexity: loss.exp(),
        memorization_rate: memorization,
        charset_validity: validity,
        grade: grade(loss, memorization, cfg.vocab_size, &GradeThresholds::default()),
        holdout_windows: windows,
        generated_tokens: generated,
    })
}

/// Decodes an id sequence for display, for reports and the CLI.
pub fn render(vocab: &Vocabulary, ids: &[u32]) -> String {
    ids.iter().map(|&i| vocab.symbol(i).unwrap_or(crate::data::UNK_CHAR)).collect()
}
