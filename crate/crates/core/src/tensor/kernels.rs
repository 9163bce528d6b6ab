//! Scalar kernels shared by the tape and the cached inference path.

const GELU_COEFF: f32 = 0.044_715;
// sqrt(2 / pi)
const GELU_SCALE: f32 = 0.797_884_6;

/// GELU, tanh approximation, evaluated as `x·σ(2u)` which is the same
/// function and avoids the much slower `tanh`.
#[inline]
pub fn gelu(x: f32) -> f32 {
    let inner = GELU_SCALE * (x + GELU_COEFF * x * x * x);
    x / (1.0 + (-2.0 * inner).exp())
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let inner = GELU_SCALE * (x + GELU_COEFF * x * x * x);
    let s = 1.0 / (1.0 + (-2.0 * inner).exp());
    let d_inner = GELU_SCALE * (1.0 + 3.0 * GELU_COEFF * x * x);
    s + 2.0 * x * s * (1.0 - s) * d_inner
}

/// Numerically stable softmax over `row` in place. Returns the
/// log-sum-exp of the original values.
pub fn softmax_in_place(row: &mut [f32]) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
    max + sum.ln()
}

/// Log-sum-exp of a row, stable for large magnitudes.
pub fn log_sum_exp(row: &[f32]) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// `out_i = gain_i * x_i / sqrt(mean(x^2) + eps)`. Returns the reciprocal rms.
pub fn rmsnorm_row(x: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) -> f32 {
    let mean_sq = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv_rms = 1.0 / (mean_sq + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = g * v * inv_rms;
    }
    inv_rms
}

/// Rotates interleaved pairs `(x[2i], x[2i+1])` by the angles whose
/// cosines and sines are given.
#[inline]
pub fn rotate_pairs(x: &mut [f32], cos: &[f32], sin: &[f32]) {
    for (i, pair) in x.chunks_exact_mut(2).enumerate() {
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * cos[i] - b * sin[i];
        pair[1] = a * sin[i] + b * cos[i];
    }
}

/// Inverse rotation, used by the backward rule.
#[inline]
pub fn rotate_pairs_inverse(x: &mut [f32], cos: &[f32], sin: &[f32]) {
    for (i, pair) in x.chunks_exact_mut(2).enumerate() {
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * cos[i] + b * sin[i];
        pair[1] = -a * sin[i] + b * cos[i];
    }
}
