//! Small numeric helpers shared across the crate.
//!
//! All transcendental functions route through `libm` so that results are
//! bit-identical on every platform; the system libm is never called.
//! `sqrt` stays on the hardware instruction, which IEEE 754 requires to be
//! correctly rounded.

/// exp for f32, platform-independent.
#[inline]
pub fn exp32(x: f32) -> f32 {
    libm::expf(x)
}

/// Natural log for f64, platform-independent.
#[inline]
pub fn ln64(x: f64) -> f64 {
    libm::log(x)
}

/// Sine/cosine of an f64 angle, platform-independent.
#[inline]
pub fn sincos64(x: f64) -> (f64, f64) {
    (libm::sin(x), libm::cos(x))
}

/// x^y for f64, platform-independent.
#[inline]
pub fn pow64(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

/// Dot product, fixed left-to-right accumulation order.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// y = x · W for row-major W of shape `[x.len(), out_dim]`.
pub fn matvec(x: &[f32], w: &[f32], out_dim: usize, y: &mut [f32]) {
    debug_assert_eq!(w.len(), x.len() * out_dim);
    debug_assert_eq!(y.len(), out_dim);
    y.fill(0.0);
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * out_dim..(i + 1) * out_dim];
        for j in 0..out_dim {
            y[j] += xi * row[j];
        }
    }
}

/// Numerically stable in-place softmax (max subtraction).
pub fn softmax_in_place(scores: &mut [f32]) {
    if scores.is_empty() {
        return;
    }
    let mut max = scores[0];
    for &s in scores.iter() {
        if s > max {
            max = s;
        }
    }
    let mut sum = 0.0f32;
    for s in scores.iter_mut() {
        *s = exp32(*s - max);
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// RMS normalization with learned gains: x / rms(x) * gain.
pub fn rms_norm(x: &[f32], gain: &[f32], out: &mut [f32]) {
    debug_assert_eq!(x.len(), gain.len());
    let mut ss = 0.0f32;
    for &v in x {
        ss += v * v;
    }
    let inv = 1.0 / (ss / x.len() as f32 + 1e-6).sqrt();
    for i in 0..x.len() {
        out[i] = x[i] * inv * gain[i];
    }
}

/// SiLU activation x * sigmoid(x).
#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + exp32(-x))
}

/// Cosine of the angle between two vectors; 0.0 when either has zero norm.
/// Returns (cosine, had_zero_norm).
pub fn cosine(a: &[f32], b: &[f32]) -> (f64, bool) {
    let mut num = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for i in 0..a.len() {
        num += a[i] as f64 * b[i] as f64;
        na += a[i] as f64 * a[i] as f64;
        nb += b[i] as f64 * b[i] as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return (0.0, true);
    }
    let c = num / (na.sqrt() * nb.sqrt());
    (c.clamp(-1.0, 1.0), false)
}

/// FNV-1a over a byte stream; used to pin deterministic outputs in tests
/// and reports.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// FNV-1a over the little-endian bytes of an f32 slice.
pub fn fnv1a_f32(values: &[f32]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}
