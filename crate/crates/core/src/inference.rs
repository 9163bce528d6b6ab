//! Autoregressive generation with a key/value cache.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Vocabulary, UNK_ID};
use crate::error::{Error, Result};
use crate::model::{self, BoundWeights, ModelConfig, ModelWeights, RMS_EPS};
use crate::tensor::kernels::{gelu, rmsnorm_row, softmax_in_place};
use crate::tensor::{Backend, RopeTable, Strides, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSettings {
    /// Zero selects greedy decoding.
    pub temperature: f32,
    pub top_k: Option<usize>,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            temperature: 0.8,
            top_k: Some(40),
            max_new_tokens: 200,
            seed: 0,
        }
    }
}

impl GenerationSettings {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            temperature: 0.0,
            top_k: None,
            max_new_tokens,
            seed: 0,
        }
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0 || self.top_k == Some(1)
    }
}

/// Index of the largest logit; the lower id wins ties.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Sampling distribution after temperature scaling and top-k truncation.
/// Greedy settings give a one-hot vector.
pub fn token_distribution(logits: &[f32], temperature: f32, top_k: Option<usize>) -> Vec<f64> {
    let mut probs = vec![0.0f64; logits.len()];
    if logits.is_empty() {
        return probs;
    }
    if temperature <= 0.0 || top_k == Some(1) {
        probs[argmax(logits) as usize] = 1.0;
        return probs;
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // stable sort keeps lower ids first among equal logits
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    let keep = top_k.unwrap_or(logits.len()).clamp(1, logits.len());
    let kept = &order[..keep];
    let t = temperature as f64;
    let max = logits[kept[0]] as f64 / t;
    let mut total = 0.0;
    for &i in kept {
        let p = (logits[i] as f64 / t - max).exp();
        probs[i] = p;
        total += p;
    }
    for &i in kept {
        probs[i] /= total;
    }
    probs
}

pub fn sample_from_logits<R: Rng + ?Sized>(
    logits: &[f32],
    temperature: f32,
    top_k: Option<usize>,
    rng: &mut R,
) -> u32 {
    if temperature <= 0.0 || top_k == Some(1) {
        return argmax(logits);
    }
    let probs = token_distribution(logits, temperature, top_k);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i as u32;
            }
        }
    }
    last as u32
}

/// Per-layer keys and values for positions already processed.
#[derive(Clone, Debug)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    filled: usize,
    capacity: usize,
    width: usize,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        let per_layer = cfg.context_len * cfg.d_model;
        Self {
            keys: (0..cfg.n_layers).map(|_| Vec::with_capacity(per_layer)).collect(),
            values: (0..cfg.n_layers).map(|_| Vec::with_capacity(per_layer)).collect(),
            filled: 0,
            capacity: cfg.context_len,
            width: cfg.d_model,
        }
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_full(&self) -> bool {
        self.filled == self.capacity
    }

    /// Cached keys of `layer`, `[filled, d_model]` with heads interleaved.
    pub fn keys(&self, layer: usize) -> &[f32] {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &[f32] {
        &self.values[layer]
    }

    /// Rows written per layer; equal across layers.
    pub fn layer_len(&self, layer: usize) -> usize {
        self.keys[layer].len() / self.width
    }

    pub fn clear(&mut self) {
        for k in &mut self.keys {
            k.clear();
        }
        for v in &mut self.values {
            v.clear();
        }
        self.filled = 0;
    }
}

/// Runs a frozen weight snapshot one token at a time.
#[derive(Clone, Debug)]
pub struct Decoder {
    weights: Arc<ModelWeights>,
    cfg: ModelConfig,
    rope: Arc<RopeTable>,
    backend: Arc<dyn Backend>,
}

impl Decoder {
    pub fn new(weights: Arc<ModelWeights>, cfg: ModelConfig, backend: Arc<dyn Backend>) -> Result<Self> {
        cfg.validate()?;
        let rope = cfg.rope_table()?;
        Ok(Self {
            weights,
            cfg,
            rope,
            backend,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &Arc<ModelWeights> {
        &self.weights
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(&self.cfg)
    }

    fn project(&self, x: &[f32], w: &[f32], out_dim: usize) -> Vec<f32> {
        let mut out = vec![0.0; out_dim];
        self.backend.gemm(
            1,
            x.len(),
            out_dim,
            1.0,
            x,
            Strides::row_major(x.len()),
            w,
            Strides::row_major(out_dim),
            0.0,
            &mut out,
            Strides::row_major(out_dim),
        );
        out
    }

    /// Appends `token` at the next free position and returns its logits.
    pub fn forward_token(&self, cache: &mut KvCache, token: u32) -> Result<Vec<f32>> {
        let cfg = &self.cfg;
        if cache.is_full() {
            return Err(Error::Contract(format!(
                "cache holds {} positions; slide the window first",
                cache.capacity
            )));
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::Data(format!(
                "token id {token} outside vocabulary of size {}",
                cfg.vocab_size
            )));
        }
        let (d, heads, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head());
        let pos = cache.filled;
        let emb = self.weights.token_embedding.values();
        let mut x = emb[token as usize * d..(token as usize + 1) * d].to_vec();
        let mut h = vec![0.0; d];
        let scale = 1.0 / (dh as f32).sqrt();

        for (layer, block) in self.weights.blocks.iter().enumerate() {
            rmsnorm_row(&x, &block.attn_norm.values(), RMS_EPS, &mut h);
            let mut q = self.project(&h, &block.wq.values(), d);
            let mut k = self.project(&h, &block.wk.values(), d);
            let v = self.project(&h, &block.wv.values(), d);
            for head in 0..heads {
                self.rope.rotate(&mut q[head * dh..(head + 1) * dh], pos)?;
                self.rope.rotate(&mut k[head * dh..(head + 1) * dh], pos)?;
            }
            cache.keys[layer].extend_from_slice(&k);
            cache.values[layer].extend_from_slice(&v);
            let (keys, values) = (&cache.keys[layer], &cache.values[layer]);

            let mut attended = vec![0.0; d];
            let mut scores = vec![0.0; pos + 1];
            for head in 0..heads {
                let qh = &q[head * dh..(head + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &keys[j * d + head * dh..j * d + (head + 1) * dh];
                    *s = qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                }
                softmax_in_place(&mut scores);
                let out = &mut attended[head * dh..(head + 1) * dh];
                for (j, &p) in scores.iter().enumerate() {
                    let vj = &values[j * d + head * dh..j * d + (head + 1) * dh];
                    for (o, &val) in out.iter_mut().zip(vj) {
                        *o += p * val;
                    }
                }
            }
            let o = self.project(&attended, &block.wo.values(), d);
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }

            rmsnorm_row(&x, &block.mlp_norm.values(), RMS_EPS, &mut h);
            let mut u = self.project(&h, &block.w_up.values(), cfg.d_mlp());
            for ui in &mut u {
                *ui = gelu(*ui);
            }
            let down = self.project(&u, &block.w_down.values(), d);
            for (xi, di) in x.iter_mut().zip(&down) {
                *xi += di;
            }
        }
        cache.filled += 1;

        rmsnorm_row(&x, &self.weights.final_norm.values(), RMS_EPS, &mut h);
        let mut logits = vec![0.0; cfg.vocab_size];
        self.backend.gemm(
            1,
            d,
            cfg.vocab_size,
            1.0,
            &h,
            Strides::row_major(d),
            &emb,
            Strides::transposed(d),
            0.0,
            &mut logits,
            Strides::row_major(cfg.vocab_size),
        );
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                op: crate::error::OpKind::Matmul,
                pass: crate::error::Pass::Forward,
            });
        }
        Ok(logits)
    }

    /// Logits at the last position from a full forward pass over `tokens`,
    /// without any cache.
    pub fn forward_full(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        let mut tape = Tape::new(self.backend.clone());
        let params = BoundWeights::bind(&mut tape, &self.weights);
        let out = model::forward(&mut tape, &params, &self.cfg, &self.rope, tokens, 1, tokens.len())?;
        let v = self.cfg.vocab_size;
        let all = tape.value(out).values();
        Ok(all[all.len() - v..].to_vec())
    }
}

/// Encodes a prompt for generation. An empty prompt starts from a newline
/// when the vocabulary has one, otherwise from the unknown symbol.
pub fn prompt_ids(vocab: &Vocabulary, prompt: &str) -> Vec<u32> {
    if prompt.is_empty() {
        vec![vocab.id_of('\n').unwrap_or(UNK_ID)]
    } else {
        vocab.encode(prompt)
    }
}

fn truncate_prompt(prompt: &[u32], context_len: usize) -> Result<&[u32]> {
    if prompt.is_empty() {
        return Err(Error::Contract("prompt must contain at least one token".into()));
    }
    let keep = context_len.saturating_sub(1).max(1);
    Ok(&prompt[prompt.len().saturating_sub(keep)..])
}

/// One emitted token and the logits it was sampled from.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub token: u32,
    pub logits: Vec<f32>,
}

/// Streaming generator. Each call to [`Generator::next_step`] emits one token.
///
/// Prompts longer than `context_len - 1` keep only their tail. When the
/// cache is full and another token must be fed, the cache is rebuilt from
/// the last `context_len - 1` tokens.
pub struct Generator<'a> {
    decoder: &'a Decoder,
    cache: KvCache,
    history: Vec<u32>,
    window_start: usize,
    logits: Vec<f32>,
    pending: Option<u32>,
    rng: ChaCha8Rng,
    settings: GenerationSettings,
    emitted: usize,
}

impl<'a> Generator<'a> {
    pub fn new(decoder: &'a Decoder, prompt: &[u32], settings: GenerationSettings) -> Result<Self> {
        let prompt = truncate_prompt(prompt, decoder.cfg.context_len)?;
        let mut cache = decoder.new_cache();
        let mut logits = Vec::new();
        for &t in prompt {
            logits = decoder.forward_token(&mut cache, t)?;
        }
        Ok(Self {
            decoder,
            cache,
            history: prompt.to_vec(),
            window_start: 0,
            logits,
            pending: None,
            rng: ChaCha8Rng::seed_from_u64(settings.seed),
            settings,
            emitted: 0,
        })
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    /// Prompt (after truncation) followed by everything emitted so far.
    pub fn history(&self) -> &[u32] {
        &self.history
    }

    pub fn next_step(&mut self) -> Result<Option<Step>> {
        if self.emitted >= self.settings.max_new_tokens {
            return Ok(None);
        }
        if let Some(t) = self.pending.take() {
            self.feed(t)?;
        }
        let s = &self.settings;
        let token = sample_from_logits(&self.logits, s.temperature, s.top_k, &mut self.rng);
        self.history.push(token);
        self.pending = Some(token);
        self.emitted += 1;
        Ok(Some(Step {
            token,
            logits: self.logits.clone(),
        }))
    }

    fn feed(&mut self, token: u32) -> Result<()> {
        if self.cache.is_full() {
            let n = self.history.len();
            self.window_start = n - (self.cache.capacity() - 1);
            self.cache.clear();
            let window = self.history[self.window_start..].to_vec();
            for t in window {
                self.logits = self.decoder.forward_token(&mut self.cache, t)?;
            }
        } else {
            self.logits = self.decoder.forward_token(&mut self.cache, token)?;
        }
        Ok(())
    }
}

impl Iterator for Generator<'_> {
    type Item = Result<Step>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_step().transpose()
    }
}

/// Generates with the cache and collects the emitted ids.
pub fn generate(decoder: &Decoder, prompt: &[u32], settings: GenerationSettings) -> Result<Vec<u32>> {
    Generator::new(decoder, prompt, settings)?
        .map(|s| s.map(|s| s.token))
        .collect()
}

/// The same policy without a cache: every step re-runs a full forward pass
/// over the current window. Slow; exists to check the cached path.
pub fn generate_uncached(decoder: &Decoder, prompt: &[u32], settings: GenerationSettings) -> Result<Vec<Step>> {
    let ctx = decoder.cfg.context_len;
    let mut history = truncate_prompt(prompt, ctx)?.to_vec();
    let mut start = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut steps = Vec::with_capacity(settings.max_new_tokens);
    for _ in 0..settings.max_new_tokens {
        if history.len() - start > ctx {
            start = history.len() - (ctx - 1);
        }
        let logits = decoder.forward_full(&history[start..])?;
        let token = sample_from_logits(&logits, settings.temperature, settings.top_k, &mut rng);
        history.push(token);
        steps.push(Step { token, logits });
    }
    Ok(steps)
}
