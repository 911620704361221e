//! Attention kernels: exact full attention, the two-stage sparse decode,
//! approximate scoring against the label cache, and top-k selection.
//!
//! The sparse decode runs in two stages. Stage one scores every cached
//! token approximately using only the calibrated channels of the 4-bit
//! label cache (no softmax, no 1/sqrt(d_h) scaling — a positive monotone
//! rescaling cannot change the top-k). Stage two gathers the selected k
//! rows of K and V and computes exact softmax attention over them.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::calibration::ChannelSet;
use crate::error::{DsError, Result};
use crate::label_cache::LabelCacheHead;
use crate::math::{dot, softmax_in_place};
use crate::traffic::TrafficLedger;

/// One decode step's inputs for a single head: the query vector and the
/// head's full key/value caches.
#[derive(Debug, Clone, Copy)]
pub struct AttentionInput<'a> {
    q: &'a [f32],
    k: &'a [f32],
    v: &'a [f32],
    d_h: usize,
    s: usize,
}

impl<'a> AttentionInput<'a> {
    pub fn new(q: &'a [f32], k: &'a [f32], v: &'a [f32], d_h: usize) -> Result<Self> {
        if d_h == 0 || q.len() != d_h {
            return Err(DsError::ShapeMismatch(format!(
                "q has length {}, expected d_h = {d_h}",
                q.len()
            )));
        }
        if k.len() != v.len() || k.len() % d_h != 0 || k.is_empty() {
            return Err(DsError::ShapeMismatch(
                "K and V must share a nonempty [S, d_h] shape".into(),
            ));
        }
        Ok(AttentionInput { q, k, v, d_h, s: k.len() / d_h })
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn d_h(&self) -> usize {
        self.d_h
    }

    pub fn q(&self) -> &[f32] {
        self.q
    }

    fn k_row(&self, t: usize) -> &[f32] {
        &self.k[t * self.d_h..(t + 1) * self.d_h]
    }

    fn v_row(&self, t: usize) -> &[f32] {
        &self.v[t * self.d_h..(t + 1) * self.d_h]
    }
}

/// Channel sparsity alpha and token sparsity beta, both in (0, 1].
/// The derived counts r and k round half up and never drop below 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityConfig {
    alpha: f64,
    beta: f64,
}

impl SparsityConfig {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(DsError::InvalidConfig(format!(
                    "{name} = {v} must lie in (0, 1]"
                )));
            }
        }
        Ok(SparsityConfig { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Number of label channels for a head dimension: max(1, round(alpha * d_h)).
    pub fn rank(&self, d_h: usize) -> usize {
        ((self.alpha * d_h as f64).round() as usize).clamp(1, d_h)
    }

    /// Number of selected tokens at sequence length s: max(1, round(beta * s)).
    pub fn top_k(&self, s: usize) -> usize {
        ((self.beta * s as f64).round() as usize).clamp(1, s)
    }
}

/// Selection produced by the approximate-scoring stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TopkResult {
    /// Ascending, distinct token indices of the k best approximate scores.
    pub indices: Vec<usize>,
    /// The full approximate score vector the selection was taken from.
    pub approx_scores: Vec<f32>,
}

/// Exact attention: softmax(q.K^T / sqrt(d_h)) . V in f32 with max
/// subtraction. This is the oracle every sparse path is measured against.
pub fn full_attention(input: &AttentionInput) -> Vec<f32> {
    let scale = 1.0 / (input.d_h as f32).sqrt();
    let mut scores: Vec<f32> = (0..input.s)
        .map(|t| dot(input.q, input.k_row(t)) * scale)
        .collect();
    softmax_in_place(&mut scores);
    let mut y = vec![0.0f32; input.d_h];
    for t in 0..input.s {
        let w = scores[t];
        let row = input.v_row(t);
        for j in 0..input.d_h {
            y[j] += w * row[j];
        }
    }
    y
}

/// Stage-one scores: for every cached token t,
/// s_hat[t] = sum over calibrated channels j of q[j] * dequant(label[t, j]).
/// No softmax and no sqrt(d_h) scaling here.
pub fn approx_scores(
    q: &[f32],
    channels: &ChannelSet,
    label: &LabelCacheHead,
) -> Result<Vec<f32>> {
    channels.check_range(q.len())?;
    if channels.indices() != label.channels().indices() {
        return Err(DsError::ShapeMismatch(
            "label cache was built from a different channel set".into(),
        ));
    }
    let q_restricted: Vec<f32> = channels.indices().iter().map(|&c| q[c]).collect();
    Ok((0..label.len()).map(|t| label.score_row(&q_restricted, t)).collect())
}

#[derive(PartialEq)]
struct HeapEntry {
    score: f32,
    index: usize,
}

impl Eq for HeapEntry {}

// Orders by desirability: higher score wins, ties go to the lower index.
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Indices of the k largest scores, ties broken toward the lower index,
/// returned in ascending index order so the following gather walks memory
/// forward.
pub fn argtopk(scores: &[f32], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(DsError::KTooLarge { k, s: scores.len() });
    }
    // Min-heap over the k best so far; the root is the weakest kept entry.
    let mut heap: BinaryHeap<std::cmp::Reverse<HeapEntry>> = BinaryHeap::with_capacity(k + 1);
    for (index, &score) in scores.iter().enumerate() {
        let entry = HeapEntry { score, index };
        if heap.len() < k {
            heap.push(std::cmp::Reverse(entry));
        } else if entry > heap.peek().unwrap().0 {
            heap.pop();
            heap.push(std::cmp::Reverse(entry));
        }
    }
    let mut indices: Vec<usize> = heap.into_iter().map(|e| e.0.index).collect();
    indices.sort_unstable();
    Ok(indices)
}

/// Gather the given K/V rows into contiguous buffers, then run exact
/// attention over them. This is the stage-two kernel shared by the sparse
/// decode paths; `indices` must be distinct and in range.
pub fn gather_attend(input: &AttentionInput, indices: &[usize]) -> Result<Vec<f32>> {
    let d_h = input.d_h;
    let mut k_gather = Vec::with_capacity(indices.len() * d_h);
    let mut v_gather = Vec::with_capacity(indices.len() * d_h);
    for &t in indices {
        if t >= input.s {
            return Err(DsError::IndexOutOfRange { index: t, s: input.s });
        }
        k_gather.extend_from_slice(input.k_row(t));
        v_gather.extend_from_slice(input.v_row(t));
    }
    let scale = 1.0 / (d_h as f32).sqrt();
    let mut scores: Vec<f32> = (0..indices.len())
        .map(|i| dot(input.q, &k_gather[i * d_h..(i + 1) * d_h]) * scale)
        .collect();
    softmax_in_place(&mut scores);
    let mut y = vec![0.0f32; d_h];
    for (i, &w) in scores.iter().enumerate() {
        let row = &v_gather[i * d_h..(i + 1) * d_h];
        for j in 0..d_h {
            y[j] += w * row[j];
        }
    }
    Ok(y)
}

/// The sparse decode for one head:
///
/// 1. restrict q to the calibrated channels,
/// 2. score all S tokens against the label cache,
/// 3. take the top k = beta * S tokens,
/// 4. softmax(q . K[selected]^T / sqrt(d_h)),
/// 5. weight the selected V rows.
///
/// Charges the ledger for the query read, the label-cache scan, and the
/// gathered KV rows. The exact-attention stage touches only the selected
/// rows.
pub fn ds_decode(
    input: &AttentionInput,
    channels: &ChannelSet,
    label: &LabelCacheHead,
    cfg: &SparsityConfig,
    ledger: &mut TrafficLedger,
) -> Result<(Vec<f32>, TopkResult)> {
    if label.len() != input.s {
        return Err(DsError::ShapeMismatch(format!(
            "label cache has {} rows but K has {}",
            label.len(),
            input.s
        )));
    }
    let scores = approx_scores(input.q, channels, label)?;
    let k = cfg.top_k(input.s);
    let indices = argtopk(&scores, k)?;
    ledger.charge_ds_decode(input.s, input.d_h, label.rank(), k);
    let y = gather_attend(input, &indices)?;
    Ok((y, TopkResult { indices, approx_scores: scores }))
}

/// Exact attention restricted to the given rows, computed in place without
/// a gather. Independent of the `gather_attend` code path; tests use it to
/// isolate selection error from attention error.
pub fn truncated_attention(input: &AttentionInput, indices: &[usize]) -> Result<Vec<f32>> {
    let mut seen = vec![false; input.s];
    for &t in indices {
        if t >= input.s {
            return Err(DsError::IndexOutOfRange { index: t, s: input.s });
        }
        if seen[t] {
            return Err(DsError::IndexOutOfRange { index: t, s: input.s });
        }
        seen[t] = true;
    }
    let scale = 1.0 / (input.d_h as f32).sqrt();
    let mut scores: Vec<f32> =
        indices.iter().map(|&t| dot(input.q, input.k_row(t)) * scale).collect();
    softmax_in_place(&mut scores);
    let mut y = vec![0.0f32; input.d_h];
    for (i, &t) in indices.iter().enumerate() {
        let row = input.v_row(t);
        for j in 0..input.d_h {
            y[j] += scores[i] * row[j];
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::CalibrationMode;
    use crate::label_cache::LabelCacheHead;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn all_channels(d_h: usize) -> ChannelSet {
        ChannelSet::from_indices((0..d_h).collect(), CalibrationMode::Random, 0, 0).unwrap()
    }

    fn random_instance(rng: &mut Rng, s: usize, d_h: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let q: Vec<f32> = (0..d_h).map(|_| rng.normal_f32()).collect();
        let k: Vec<f32> = (0..s * d_h).map(|_| rng.normal_f32()).collect();
        let v: Vec<f32> = (0..s * d_h).map(|_| rng.normal_f32()).collect();
        (q, k, v)
    }

    #[test]
    fn zero_query_gives_column_mean_of_v() {
        let q = vec![0.0, 0.0];
        let k = vec![0.3, -0.7, 1.2, 0.5];
        let v = vec![1.0, 2.0, 3.0, 4.0];
        let input = AttentionInput::new(&q, &k, &v, 2).unwrap();
        let y = full_attention(&input);
        assert!((y[0] - 2.0).abs() < 1e-6);
        assert!((y[1] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn single_token_passes_value_through() {
        let q = vec![0.4, -1.0, 2.0, 0.0];
        let k = vec![1.0, 1.0, 1.0, 1.0];
        let v = vec![5.0, 6.0, 7.0, 8.0];
        let input = AttentionInput::new(&q, &k, &v, 4).unwrap();
        let y = full_attention(&input);
        for (a, b) in y.iter().zip(&v) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn matches_scalar_formula_evaluation() {
        // d_h = 2, q = [1, 0], K = [[10, 0], [0, 10]], V = I.
        let q = vec![1.0, 0.0];
        let k = vec![10.0, 0.0, 0.0, 10.0];
        let v = vec![1.0, 0.0, 0.0, 1.0];
        let input = AttentionInput::new(&q, &k, &v, 2).unwrap();
        let y = full_attention(&input);

        // Independent evaluation: scores [10/sqrt(2), 0].
        let s0 = (10.0f64 / 2.0f64.sqrt()).exp();
        let s1 = 1.0f64;
        let w0 = s0 / (s0 + s1);
        let w1 = s1 / (s0 + s1);
        assert!((y[0] as f64 - w0).abs() < 1e-6);
        assert!((y[1] as f64 - w1).abs() < 1e-6);
    }

    #[test]
    fn attention_weights_sum_to_one_and_output_in_hull() {
        let mut rng = Rng::new(2);
        for _ in 0..50 {
            let (q, k, v) = random_instance(&mut rng, 16, 8);
            let input = AttentionInput::new(&q, &k, &v, 8).unwrap();
            let y = full_attention(&input);
            // Convex hull: each coordinate within [min, max] of the V column.
            for j in 0..8 {
                let col: Vec<f32> = (0..16).map(|t| v[t * 8 + j]).collect();
                let lo = col.iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = col.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                assert!(y[j] >= lo - 1e-5 && y[j] <= hi + 1e-5);
            }
        }
    }

    #[test]
    fn approx_scores_full_channels_match_exact() {
        let mut rng = Rng::new(4);
        let (q, k, _v) = random_instance(&mut rng, 12, 6);
        let channels = all_channels(6);
        let label = LabelCacheHead::build(&k, 6, &channels, false).unwrap();
        let scores = approx_scores(&q, &channels, &label).unwrap();
        for t in 0..12 {
            let exact = dot(&q, &k[t * 6..(t + 1) * 6]);
            assert!((scores[t] - exact).abs() < 1e-6);
        }
    }

    #[test]
    fn approx_scores_zero_query_is_zero() {
        let k = vec![1.0f32; 4 * 4];
        let channels = all_channels(4);
        let label = LabelCacheHead::build(&k, 4, &channels, true).unwrap();
        let scores = approx_scores(&[0.0; 4], &channels, &label).unwrap();
        assert!(scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn approx_scores_restricted_dot_product() {
        // d_h = 4, C = {1, 3}, hand-set labels, unquantized.
        let d_h = 4;
        let k = vec![
            0.0, 2.0, 0.0, -1.0, //
            0.0, 0.5, 0.0, 4.0, //
        ];
        let channels =
            ChannelSet::from_indices(vec![1, 3], CalibrationMode::QkOutlier, 0, 0).unwrap();
        let label = LabelCacheHead::build(&k, d_h, &channels, false).unwrap();
        let q = vec![9.0, 1.5, -9.0, -2.0];
        let scores = approx_scores(&q, &channels, &label).unwrap();
        // Independent evaluation over the two channels.
        assert!((scores[0] - (1.5 * 2.0 + -2.0 * -1.0)).abs() < 1e-6);
        assert!((scores[1] - (1.5 * 0.5 + -2.0 * 4.0)).abs() < 1e-6);
    }

    #[test]
    fn approx_score_quantization_degradation_bound() {
        let mut rng = Rng::new(17);
        for _ in 0..1000 {
            let d_h = 8;
            let s = 10;
            let (q, k, _v) = random_instance(&mut rng, s, d_h);
            let channels =
                ChannelSet::from_indices(vec![0, 2, 5, 7], CalibrationMode::QkOutlier, 0, 0)
                    .unwrap();
            let quant = LabelCacheHead::build(&k, d_h, &channels, true).unwrap();
            let float = LabelCacheHead::build(&k, d_h, &channels, false).unwrap();
            let sq = approx_scores(&q, &channels, &quant).unwrap();
            let sf = approx_scores(&q, &channels, &float).unwrap();
            let q_abs_sum: f32 = channels.indices().iter().map(|&c| q[c].abs()).sum();
            for t in 0..s {
                let bound = q_abs_sum * quant.scale(t) / 2.0 + 1e-5;
                assert!(
                    (sq[t] - sf[t]).abs() <= bound,
                    "degradation {} exceeds bound {bound}",
                    (sq[t] - sf[t]).abs()
                );
            }
        }
    }

    #[test]
    fn argtopk_tie_breaks_to_lower_index() {
        let idx = argtopk(&[0.5, 0.9, 0.5, 0.1], 2).unwrap();
        assert_eq!(idx, vec![0, 1]);
    }

    #[test]
    fn argtopk_k_equals_s_selects_everything() {
        let idx = argtopk(&[0.3, -0.1, 2.0], 3).unwrap();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    #[test]
    fn argtopk_rejects_oversized_k() {
        assert!(matches!(
            argtopk(&[1.0, 2.0], 3).unwrap_err(),
            DsError::KTooLarge { k: 3, s: 2 }
        ));
    }

    /// Full-sort reference used to validate the heap implementation.
    fn sort_oracle(scores: &[f32], k: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
        });
        let mut top: Vec<usize> = order[..k].to_vec();
        top.sort_unstable();
        top
    }

    #[test]
    fn argtopk_matches_sort_oracle_on_random_input() {
        let mut rng = Rng::new(8);
        let scores: Vec<f32> = (0..1000).map(|_| rng.normal_f32()).collect();
        assert_eq!(argtopk(&scores, 37).unwrap(), sort_oracle(&scores, 37));
    }

    #[test]
    fn argtopk_matches_sort_oracle_with_duplicates() {
        let mut rng = Rng::new(15);
        for _ in 0..200 {
            let s = 1 + rng.next_below(50);
            // Coarse grid of values forces many exact duplicates.
            let scores: Vec<f32> =
                (0..s).map(|_| (rng.next_below(7) as f32) - 3.0).collect();
            let k = 1 + rng.next_below(s);
            assert_eq!(argtopk(&scores, k).unwrap(), sort_oracle(&scores, k));
        }
    }

    #[test]
    fn ds_decode_beta_one_equals_full_attention() {
        let mut rng = Rng::new(30);
        for _ in 0..20 {
            let (s, d_h) = (24, 8);
            let (q, k, v) = random_instance(&mut rng, s, d_h);
            let input = AttentionInput::new(&q, &k, &v, d_h).unwrap();
            let channels =
                ChannelSet::from_indices(vec![1, 6], CalibrationMode::QkOutlier, 0, 0).unwrap();
            let label = LabelCacheHead::build(&k, d_h, &channels, true).unwrap();
            let cfg = SparsityConfig::new(0.25, 1.0).unwrap();
            let mut ledger = TrafficLedger::new();
            let (y, sel) = ds_decode(&input, &channels, &label, &cfg, &mut ledger).unwrap();
            let oracle = full_attention(&input);
            assert_eq!(sel.indices.len(), s);
            let err: f32 = y
                .iter()
                .zip(&oracle)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f32>()
                .sqrt();
            let norm: f32 = oracle.iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!(err <= 1e-5 * norm.max(1e-12), "relative error {}", err / norm);
        }
    }

    #[test]
    fn ds_decode_alpha_one_unquantized_selection_is_exact() {
        let mut rng = Rng::new(31);
        for _ in 0..20 {
            let (s, d_h) = (40, 8);
            let (q, k, v) = random_instance(&mut rng, s, d_h);
            let input = AttentionInput::new(&q, &k, &v, d_h).unwrap();
            let channels = all_channels(d_h);
            let label = LabelCacheHead::build(&k, d_h, &channels, false).unwrap();
            let cfg = SparsityConfig::new(1.0, 0.25).unwrap();
            let mut ledger = TrafficLedger::new();
            let (_y, sel) = ds_decode(&input, &channels, &label, &cfg, &mut ledger).unwrap();
            let exact: Vec<f32> =
                (0..s).map(|t| dot(&q, &k[t * d_h..(t + 1) * d_h])).collect();
            assert_eq!(sel.indices, argtopk(&exact, cfg.top_k(s)).unwrap());
        }
    }

    #[test]
    fn truncated_attention_all_rows_equals_full() {
        let mut rng = Rng::new(32);
        let (q, k, v) = random_instance(&mut rng, 10, 4);
        let input = AttentionInput::new(&q, &k, &v, 4).unwrap();
        let all: Vec<usize> = (0..10).collect();
        let a = truncated_attention(&input, &all).unwrap();
        let b = full_attention(&input);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn truncated_attention_single_row_returns_value() {
        let mut rng = Rng::new(33);
        let (q, k, v) = random_instance(&mut rng, 6, 4);
        let input = AttentionInput::new(&q, &k, &v, 4).unwrap();
        let y = truncated_attention(&input, &[3]).unwrap();
        for j in 0..4 {
            assert!((y[j] - v[3 * 4 + j]).abs() < 1e-6);
        }
    }

    #[test]
    fn truncated_attention_rejects_bad_indices() {
        let q = vec![0.0; 2];
        let k = vec![0.0; 4];
        let v = vec![0.0; 4];
        let input = AttentionInput::new(&q, &k, &v, 2).unwrap();
        assert!(truncated_attention(&input, &[2]).is_err());
        assert!(truncated_attention(&input, &[0, 0]).is_err());
    }

    #[test]
    fn ds_decode_matches_truncated_attention_on_same_indices() {
        // Cross-check of the two independent stage-two code paths.
        let mut rng = Rng::new(5);
        let (s, d_h) = (32, 8);
        let (q, k, v) = random_instance(&mut rng, s, d_h);
        let input = AttentionInput::new(&q, &k, &v, d_h).unwrap();
        let channels = all_channels(d_h);
        let label = LabelCacheHead::build(&k, d_h, &channels, false).unwrap();
        let cfg = SparsityConfig::new(1.0, 0.25).unwrap();
        let mut ledger = TrafficLedger::new();
        let (y, sel) = ds_decode(&input, &channels, &label, &cfg, &mut ledger).unwrap();
        let oracle = truncated_attention(&input, &sel.indices).unwrap();
        for (a, b) in y.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sparsity_config_rounding() {
        let cfg = SparsityConfig::new(0.25, 0.5).unwrap();
        assert_eq!(cfg.rank(16), 4);
        assert_eq!(cfg.top_k(3), 2); // 1.5 rounds half up to 2
        assert_eq!(cfg.rank(1), 1);
        let tiny = SparsityConfig::new(0.01, 0.01).unwrap();
        assert_eq!(tiny.rank(16), 1); // floor at 1
        assert_eq!(tiny.top_k(10), 1);
        assert!(SparsityConfig::new(0.0, 1.0).is_err());
        assert!(SparsityConfig::new(1.0, 1.1).is_err());
    }

    #[test]
    fn error_trend_is_statistically_monotone_in_k() {
        // With alpha = 1 and unquantized labels, the mean gap to the full
        // oracle must not increase as k grows (5% slack, per-seed
        // monotonicity is not asserted).
        let (s, d_h) = (64, 16);
        let channels = all_channels(d_h);
        let ks: Vec<usize> = (0..).map(|i| 1usize << i).take_while(|&k| k <= s).collect();
        let mut mean_err = vec![0.0f64; ks.len()];
        let seeds = 200;
        for seed in 0..seeds {
            let mut rng = Rng::new(seed);
            let (q, k, v) = random_instance(&mut rng, s, d_h);
            let input = AttentionInput::new(&q, &k, &v, d_h).unwrap();
            let label = LabelCacheHead::build(&k, d_h, &channels, false).unwrap();
            let oracle = full_attention(&input);
            for (i, &kk) in ks.iter().enumerate() {
                let beta = kk as f64 / s as f64;
                let cfg = SparsityConfig::new(1.0, beta).unwrap();
                let mut ledger = TrafficLedger::new();
                let (y, _) = ds_decode(&input, &channels, &label, &cfg, &mut ledger).unwrap();
                let err: f64 = y
                    .iter()
                    .zip(&oracle)
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                mean_err[i] += err / seeds as f64;
            }
        }
        for w in mean_err.windows(2) {
            assert!(
                w[1] <= w[0] * 1.05 + 1e-12,
                "mean error increased: {} -> {}",
                w[0],
                w[1]
            );
        }
        // At k = S the sparse path selects everything.
        assert!(mean_err[ks.len() - 1] < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]

        #[test]
        fn argtopk_agrees_with_sort_oracle(
            scores in proptest::collection::vec(-1000i32..1000, 1..80),
            k_frac in 0.0f64..1.0,
        ) {
            // Integer-derived scores include many duplicates.
            let scores: Vec<f32> = scores.iter().map(|&x| x as f32 / 8.0).collect();
            let k = ((scores.len() as f64 * k_frac) as usize).clamp(1, scores.len());
            prop_assert_eq!(argtopk(&scores, k).unwrap(), sort_oracle(&scores, k));
        }
    }
}
