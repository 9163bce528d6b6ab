use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{manifest, ModelConfig, ParamKind};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f32>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: Some(1.0),
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f32) -> f32 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

pub fn global_norm(grads: &[Vec<f32>]) -> f32 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt() as f32
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Gradient norm before clipping.
    pub grad_norm: f32,
    pub clipped: bool,
}

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    decay: Vec<bool>,
    t: u64,
}

impl AdamW {
    /// `params` gives each tensor's element count and whether it decays.
    pub fn new(config: AdamWConfig, params: &[(usize, bool)]) -> Self {
        Self {
            config,
            m: params.iter().map(|&(n, _)| vec![0.0; n]).collect(),
            v: params.iter().map(|&(n, _)| vec![0.0; n]).collect(),
            decay: params.iter().map(|&(_, d)| d).collect(),
            t: 0,
        }
    }

    /// Decay applies to projection matrices only, not gains or embeddings.
    pub fn for_model(config: AdamWConfig, cfg: &ModelConfig) -> Self {
        let params: Vec<(usize, bool)> = manifest(cfg)
            .iter()
            .map(|(_, shape, kind)| (shape.iter().product(), *kind == ParamKind::Matrix))
            .collect();
        Self::new(config, &params)
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// Number of updates applied so far.
    pub fn updates(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Vec<f32>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f32>] {
        &self.v
    }

    pub fn moment_bytes(&self) -> usize {
        self.m.iter().chain(&self.v).map(|x| x.len() * 4).sum()
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &mut [Vec<f32>], lr: f32) -> Result<UpdateStats> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::Contract(format!("tensor {i}: gradient shape differs from parameter")));
            }
        }
        if !grads.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::Contract("update rejected: non-finite gradient".into()));
        }
        let c = self.config;
        let grad_norm = match c.clip_norm {
            Some(max) => clip_global_norm(grads, max),
            None => global_norm(grads),
        };
        let clipped = c.clip_norm.is_some_and(|max| grad_norm > max);

        self.t += 1;
        let bc1 = 1.0 - (c.beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (c.beta2 as f64).powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let wd = if self.decay[i] { c.weight_decay } else { 0.0 };
            let w = p
                .as_mut_slice()
                .ok_or_else(|| Error::Contract("parameters must be full precision".into()))?;
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..w.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let m_hat = m[j] as f64 / bc1;
                let v_hat = v[j] as f64 / bc2;
                let update = m_hat / (v_hat.sqrt() + c.eps as f64) + wd as f64 * w[j] as f64;
                w[j] -= (lr as f64 * update) as f32;
            }
        }
        Ok(UpdateStats { grad_norm, clipped })
    }
}

/// Linear warmup from zero, then cosine decay to `min_ratio * lr_max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_max: f32,
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub min_ratio: f32,
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f32 {
        let min = self.min_ratio * self.lr_max;
        if step < self.warmup_steps {
            return self.lr_max * step as f32 / self.warmup_steps as f32;
        }
        if step >= self.max_steps {
            return min;
        }
        let progress = (step - self.warmup_steps) as f64 / (self.max_steps - self.warmup_steps) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        (min as f64 + (self.lr_max - min) as f64 * cosine) as f32
    }
}

pub const INITIAL_LOSS_SCALE: f32 = 65_536.0;
pub const MAX_LOSS_SCALE: f32 = 65_536.0;
pub const LOSS_SCALE_GROWTH_INTERVAL: u32 = 1000;

/// Dynamic loss scale: halves on overflow, doubles after a run of clean
/// steps, and never leaves `[1, MAX_LOSS_SCALE]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossScaler {
    scale: f32,
    clean_steps: u32,
}

impl Default for LossScaler {
    fn default() -> Self {
        Self {
            scale: INITIAL_LOSS_SCALE,
            clean_steps: 0,
        }
    }
}

impl LossScaler {
    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn clean_steps(&self) -> u32 {
        self.clean_steps
    }

    pub fn on_overflow(&mut self) -> Result<()> {
        self.clean_steps = 0;
        if self.scale <= 1.0 {
            return Err(Error::LossScaleUnderflow);
        }
        self.scale /= 2.0;
        Ok(())
    }

    pub fn on_clean_step(&mut self) {
        self.clean_steps += 1;
        if self.clean_steps >= LOSS_SCALE_GROWTH_INTERVAL {
            self.clean_steps = 0;
            self.scale = (self.scale * 2.0).min(MAX_LOSS_SCALE);
        }
    }
}
