//! Double-precision reference network used as a gradient oracle.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use tinylm::model::{forward, manifest, BoundWeights, ModelConfig, ModelWeights, RMS_EPS};
use tinylm::tensor::{Backend, Tape, Tensor};

const VOCAB: usize = 11;
const BATCH: usize = 2;
const SEQ: usize = 4;

fn config() -> ModelConfig {
    ModelConfig::new(2, 2, 16, SEQ, VOCAB)
}

/// Weights large enough that every gradient entry is well above f32 noise.
fn weights(cfg: &ModelConfig, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.4).unwrap();
    manifest(cfg)
        .into_iter()
        .map(|(name, shape, _)| {
            let n: usize = shape.iter().product();
            (0..n)
                .map(|_| {
                    let z: f64 = normal.sample(&mut rng);
                    if name.ends_with("norm") { 1.0 + z } else { z }
                })
                .collect()
        })
        .collect()
}

fn rmsnorm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + RMS_EPS as f64).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * r * g).collect()
}

/// `x` is `[n, din]` row-major, `w` is `[din, dout]`.
fn matmul(x: &[f64], w: &[f64], din: usize, dout: usize) -> Vec<f64> {
    let n = x.len() / din;
    let mut out = vec![0.0; n * dout];
    for i in 0..n {
        for k in 0..din {
            let xv = x[i * din + k];
            for j in 0..dout {
                out[i * dout + j] += xv * w[k * dout + j];
            }
        }
    }
    out
}

fn rope(x: &mut [f64], pos: usize, dh: usize) {
    for (i, pair) in x.chunks_exact_mut(2).enumerate() {
        let theta = 10_000f64.powf(-2.0 * i as f64 / dh as f64) * pos as f64;
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * theta.cos() - b * theta.sin();
        pair[1] = a * theta.sin() + b * theta.cos();
    }
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Mean next-token cross entropy of the reference network.
fn reference_loss(cfg: &ModelConfig, p: &[Vec<f64>], tokens: &[u32], targets: &[u32]) -> f64 {
    let (d, heads, dh, m) = (cfg.d_model, cfg.n_heads, cfg.d_head(), cfg.d_mlp());
    let emb = &p[0];
    let mut total = 0.0;
    for b in 0..BATCH {
        let toks = &tokens[b * SEQ..(b + 1) * SEQ];
        let mut x: Vec<f64> = toks
            .iter()
            .flat_map(|&t| emb[t as usize * d..(t as usize + 1) * d].to_vec())
            .collect();
        for layer in 0..cfg.n_layers {
            let w = &p[1 + layer * 8..1 + (layer + 1) * 8];
            let h: Vec<f64> = x.chunks(d).flat_map(|row| rmsnorm(row, &w[0])).collect();
            let mut q = matmul(&h, &w[1], d, d);
            let mut k = matmul(&h, &w[2], d, d);
            let v = matmul(&h, &w[3], d, d);
            for t in 0..SEQ {
                for hd in 0..heads {
                    let r = t * d + hd * dh..t * d + (hd + 1) * dh;
                    rope(&mut q[r.clone()], t, dh);
                    rope(&mut k[r], t, dh);
                }
            }
            let mut att = vec![0.0; SEQ * d];
            for hd in 0..heads {
                for i in 0..SEQ {
                    let qi = &q[i * d + hd * dh..i * d + (hd + 1) * dh];
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| {
                            let kj = &k[j * d + hd * dh..j * d + (hd + 1) * dh];
                            qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                        })
                        .collect();
                    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                    for (j, s) in scores.iter().enumerate() {
                        let pj = (s - mx).exp() / z;
                        for e in 0..dh {
                            att[i * d + hd * dh + e] += pj * v[j * d + hd * dh + e];
                        }
                    }
                }
            }
            let o = matmul(&att, &w[4], d, d);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let h: Vec<f64> = x.chunks(d).flat_map(|row| rmsnorm(row, &w[5])).collect();
            let up: Vec<f64> = matmul(&h, &w[6], d, m).into_iter().map(gelu).collect();
            let down = matmul(&up, &w[7], m, d);
            x.iter_mut().zip(&down).for_each(|(a, b)| *a += b);
        }
        let fin = p.last().unwrap();
        for (t, row) in x.chunks(d).enumerate() {
            let h = rmsnorm(row, fin);
            let logits: Vec<f64> = (0..VOCAB)
                .map(|c| h.iter().zip(&emb[c * d..(c + 1) * d]).map(|(a, b)| a * b).sum())
                .collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
            total += lse - logits[targets[b * SEQ + t] as usize];
        }
    }
    total / (BATCH * SEQ) as f64
}

fn tape_loss_and_grads(cfg: &ModelConfig, p: &[Vec<f64>], tokens: &[u32], targets: &[u32], backend: Arc<dyn Backend>) -> (f64, Vec<Vec<f32>>) {
    let tensors = manifest(cfg)
        .iter()
        .zip(p)
        .map(|((_, shape, _), v)| Tensor::new(shape, v.iter().map(|&x| x as f32).collect()).unwrap())
        .collect();
    let w = ModelWeights::from_tensors(cfg, tensors).unwrap();
    let mut tape = Tape::new(backend);
    let bound = BoundWeights::bind(&mut tape, &w);
    let rope = cfg.rope_table().unwrap();
    let logits = forward(&mut tape, &bound, cfg, &rope, tokens, BATCH, SEQ).unwrap();
    let loss = tape.cross_entropy(logits, targets).unwrap();
    let value = tape.value(loss).item().unwrap() as f64;
    let mut grads = tape.backward(loss).unwrap();
    let out = bound.vars.iter().map(|&v| grads.take(v).unwrap().into_vec()).collect();
    (value, out)
}

fn data(seed: u64) -> (Vec<u32>, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seq: Vec<u32> = (0..BATCH * (SEQ + 1)).map(|_| rand::Rng::random_range(&mut rng, 0..VOCAB as u32)).collect();
    let mut tokens = Vec::new();
    let mut targets = Vec::new();
    for row in seq.chunks(SEQ + 1) {
        tokens.extend_from_slice(&row[..SEQ]);
        targets.extend_from_slice(&row[1..]);
    }
    (tokens, targets)
}

/// Worst relative error of the tape gradient over every parameter entry.
pub fn worst_relative_error(seed: u64, backend: Arc<dyn Backend>) -> (f64, String) {
    let cfg = config();
    let mut p = weights(&cfg, seed);
    let (tokens, targets) = data(seed);
    let (tape_loss, grads) = tape_loss_and_grads(&cfg, &p, &tokens, &targets, backend);
    let ref_loss = reference_loss(&cfg, &p, &tokens, &targets);
    assert!((tape_loss - ref_loss).abs() < 1e-4, "forward disagrees: {tape_loss} vs {ref_loss}");

    let names = manifest(&cfg);
    let h = 1e-5;
    let mut worst = (0.0, String::new());
    for t in 0..p.len() {
        for i in 0..p[t].len() {
            let orig = p[t][i];
            p[t][i] = orig + h;
            let up = reference_loss(&cfg, &p, &tokens, &targets);
            p[t][i] = orig - h;
            let down = reference_loss(&cfg, &p, &tokens, &targets);
            p[t][i] = orig;
            let fd = (up - down) / (2.0 * h);
            let got = grads[t][i] as f64;
            // f32 accumulation noise is ~1e-6 absolute; the floor keeps it from
            // being reported as relative error on entries that are nearly zero
            let rel = (got - fd).abs() / fd.abs().max(got.abs()).max(1e-4);
            if rel > worst.0 {
                worst = (rel, format!("{}[{i}]: tape {got:e}, fd {fd:e}", names[t].0));
            }
        }
    }
    worst
}

