//! The transformer: configuration, presets, weights and the differentiable
//! forward pass.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RopeTable, Tape, Tensor, Var};

pub const RMS_EPS: f32 = 1e-5;
pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub mlp_ratio: usize,
    pub rope_base: f64,
}

impl ModelConfig {
    pub fn new(n_layers: usize, n_heads: usize, d_model: usize, context_len: usize, vocab_size: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            d_model,
            context_len,
            vocab_size,
            mlp_ratio: 4,
            rope_base: 10_000.0,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn d_mlp(&self) -> usize {
        self.mlp_ratio * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Contract(msg));
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a non-zero multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_head() % 2 != 0 {
            return fail(format!("head width {} must be even", self.d_head()));
        }
        if self.context_len == 0 {
            return fail("context_len must be at least 1".into());
        }
        if self.vocab_size < 2 {
            return fail(format!("vocab_size {} must be at least 2", self.vocab_size));
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be at least 1".into());
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return fail(format!("rope_base {} must be finite and > 1", self.rope_base));
        }
        Ok(())
    }

    /// Closed-form parameter count with the output projection tied to the
    /// token embedding.
    pub fn param_count(&self) -> usize {
        let (v, d, l, r) = (self.vocab_size, self.d_model, self.n_layers, self.mlp_ratio);
        v * d + l * (4 * d * d + 2 * r * d * d + 2 * d) + d
    }

    pub fn rope_table(&self) -> Result<Arc<RopeTable>> {
        RopeTable::new(self.d_head(), self.context_len, self.rope_base).map(Arc::new)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "standard-4M")]
    Standard4M,
    #[serde(rename = "tiny-2M")]
    Tiny2M,
}

impl Preset {
    pub const ALL: [Preset; 2] = [Preset::Standard4M, Preset::Tiny2M];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Standard4M => "standard-4M",
            Preset::Tiny2M => "tiny-2M",
        }
    }

    pub fn config(self, vocab_size: usize) -> ModelConfig {
        match self {
            Preset::Standard4M => ModelConfig::new(8, 3, 192, 128, vocab_size),
            Preset::Tiny2M => ModelConfig::new(6, 4, 160, 128, vocab_size),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Data(format!("unknown preset {s:?}; expected standard-4M or tiny-2M")))
    }
}

/// Learnable tensors of one block. Projection matrices are stored
/// `[in, out]` so activations multiply on the left.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

const BLOCK_FIELDS: [&str; 8] = ["attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_up", "w_down"];

impl Block {
    fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_norm,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// Role of a parameter, which decides weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Gain,
    Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub token_embedding: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Tensor,
}

fn field_kind(field: &str) -> ParamKind {
    match field {
        "attn_norm" | "mlp_norm" => ParamKind::Gain,
        _ => ParamKind::Matrix,
    }
}

/// Manifest names in canonical order, with their shapes and kinds.
pub fn manifest(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, ParamKind)> {
    let (d, m) = (cfg.d_model, cfg.d_mlp());
    let mut out = vec![("token_embedding".to_owned(), vec![cfg.vocab_size, d], ParamKind::Embedding)];
    for layer in 0..cfg.n_layers {
        for field in BLOCK_FIELDS {
            let shape = match field {
                "attn_norm" | "mlp_norm" => vec![d],
                "w_up" => vec![d, m],
                "w_down" => vec![m, d],
                _ => vec![d, d],
            };
            out.push((format!("blocks.{layer}.{field}"), shape, field_kind(field)));
        }
    }
    out.push(("final_norm".to_owned(), vec![d], ParamKind::Gain));
    out
}

impl ModelWeights {
    /// Normal(0, 0.02) matrices, with the two residual output projections
    /// scaled down by `sqrt(2 * n_layers)`; unit gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Normal::new(0.0f32, INIT_STD).expect("positive std");
        let resid = Normal::new(0.0f32, INIT_STD / (2.0 * cfg.n_layers.max(1) as f32).sqrt())
            .expect("positive std");
        let tensors = manifest(cfg)
            .into_iter()
            .map(|(name, shape, kind)| {
                let len = shape.iter().product();
                let data: Vec<f32> = match kind {
                    ParamKind::Gain => vec![1.0; len],
                    _ if name.ends_with(".wo") || name.ends_with(".w_down") => {
                        (0..len).map(|_| resid.sample(&mut rng)).collect()
                    }
                    _ => (0..len).map(|_| base.sample(&mut rng)).collect(),
                };
                Tensor::new(&shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(cfg, tensors)
    }

    /// Assembles weights from tensors in manifest order, checking shapes.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let expected = manifest(cfg);
        if tensors.len() != expected.len() {
            return Err(Error::Contract(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape, _), t) in expected.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Contract(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        let mut iter = tensors.into_iter();
        let token_embedding = iter.next().expect("length checked");
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let mut next = || iter.next().expect("length checked");
            blocks.push(Block {
                attn_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                mlp_norm: next(),
                w_up: next(),
                w_down: next(),
            });
        }
        let final_norm = iter.next().expect("length checked");
        Ok(Self {
            token_embedding,
            blocks,
            final_norm,
        })
    }

    /// Tensors in manifest order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_embedding];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.push(&self.final_norm);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        let mut out = vec![self.token_embedding];
        for b in self.blocks {
            out.extend([b.attn_norm, b.wq, b.wk, b.wv, b.wo, b.mlp_norm, b.w_up, b.w_down]);
        }
        out.push(self.final_norm);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Weights pushed onto a tape as trainable leaves, in manifest order.
pub struct BoundWeights {
    pub vars: Vec<Var>,
}

impl BoundWeights {
    pub fn bind(tape: &mut Tape, weights: &ModelWeights) -> Self {
        let vars = weights.tensors().into_iter().map(|t| tape.param(t.clone())).collect();
        Self { vars }
    }

    fn embedding(&self) -> Var {
        self.vars[0]
    }

    fn block(&self, layer: usize) -> &[Var] {
        let start = 1 + layer * BLOCK_FIELDS.len();
        &self.vars[start..start + BLOCK_FIELDS.len()]
    }

    fn final_norm(&self) -> Var {
        *self.vars.last().expect("at least embedding and final norm")
    }
}

/// Logits `[batch, seq, vocab]` for `tokens` laid out row-major `[batch, seq]`.
pub fn forward(
    tape: &mut Tape,
    params: &BoundWeights,
    cfg: &ModelConfig,
    rope: &Arc<RopeTable>,
    tokens: &[u32],
    batch: usize,
    seq: usize,
) -> Result<Var> {
    if seq == 0 || seq > cfg.context_len {
        return Err(Error::Contract(format!(
            "sequence length {seq} outside 1..={}",
            cfg.context_len
        )));
    }
    if tokens.len() != batch * seq {
        return Err(Error::Contract(format!(
            "{} tokens do not fill a {batch}×{seq} batch",
            tokens.len()
        )));
    }
    let heads = cfg.n_heads;
    let mut x = tape.embedding(params.embedding(), tokens, &[batch, seq])?;
    for layer in 0..cfg.n_layers {
        let &[attn_norm, wq, wk, wv, wo, mlp_norm, w_up, w_down] = params.block(layer) else {
            unreachable!("block slice has fixed width")
        };
        let h = tape.rmsnorm(x, attn_norm, RMS_EPS)?;
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let q = tape.rope(q, rope.clone(), heads, 0)?;
        let k = tape.rope(k, rope.clone(), heads, 0)?;
        let a = tape.causal_attention(q, k, v, heads)?;
        let o = tape.matmul(a, wo)?;
        x = tape.add(x, o)?;

        let h = tape.rmsnorm(x, mlp_norm, RMS_EPS)?;
        let u = tape.matmul(h, w_up)?;
        let u = tape.gelu(u)?;
        let down = tape.matmul(u, w_down)?;
        x = tape.add(x, down)?;
    }
    let x = tape.rmsnorm(x, params.final_norm(), RMS_EPS)?;
    tape.matmul_transposed(x, params.embedding())
}
