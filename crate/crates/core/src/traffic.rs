//! Deterministic memory-traffic accounting.
//!
//! Attention decode is bandwidth-bound, so the engine models bytes moved
//! instead of measuring wall-clock time. Charges are analytical: useful
//! bytes at a charged element size (KV data charged at 2 bytes per element
//! regardless of compute precision), plus a 128-byte-line model for the
//! strided no-label-cache ablation. Top-k selection itself is charged zero
//! bytes — it operates on scores already produced on-chip — so ratios stay
//! interpretable.

use serde::Serialize;

use crate::attention::{argtopk, TopkResult};
use crate::calibration::{calibrate_model, CalibrationMode, ChannelMap};
use crate::error::Result;
use crate::math::dot;
use crate::model::{decode_step_traced, prefill, AttnMode, ModelWeights};
use crate::rng::Rng;
use crate::SparsityConfig;

/// Charged element sizes. KV and query elements are charged at the f16
/// storage cost; label scales default to f32 with an option to model
/// half-precision scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ChargePolicy {
    pub kv_elem_bytes: u64,
    pub scale_bytes: u64,
}

impl Default for ChargePolicy {
    fn default() -> Self {
        ChargePolicy { kv_elem_bytes: 2, scale_bytes: 4 }
    }
}

impl ChargePolicy {
    /// Bytes per label-cache row: packed 4-bit codes plus the row scale.
    pub fn label_row_bytes(&self, r: usize) -> u64 {
        r.div_ceil(2) as u64 + self.scale_bytes
    }
}

/// Byte counters for one evaluation stream. Counters only increase;
/// `reset` is explicit.
#[derive(Debug, Clone, Default, Serialize)]
pub struct TrafficLedger {
    pub query_read: u64,
    pub label_read: u64,
    pub kv_gather_read: u64,
    pub full_kv_read: u64,
    pub host_to_device: u64,
    #[serde(skip)]
    policy: ChargePolicy,
}

impl TrafficLedger {
    pub fn new() -> Self {
        Self::with_policy(ChargePolicy::default())
    }

    pub fn with_policy(policy: ChargePolicy) -> Self {
        TrafficLedger {
            query_read: 0,
            label_read: 0,
            kv_gather_read: 0,
            full_kv_read: 0,
            host_to_device: 0,
            policy,
        }
    }

    pub fn policy(&self) -> ChargePolicy {
        self.policy
    }

    /// Sum of every counter.
    pub fn total(&self) -> u64 {
        self.query_read
            + self.label_read
            + self.kv_gather_read
            + self.full_kv_read
            + self.host_to_device
    }

    pub fn reset(&mut self) {
        *self = TrafficLedger::with_policy(self.policy);
    }

    /// Fold another ledger's counters into this one.
    pub fn merge(&mut self, other: &TrafficLedger) {
        self.query_read += other.query_read;
        self.label_read += other.label_read;
        self.kv_gather_read += other.kv_gather_read;
        self.full_kv_read += other.full_kv_read;
        self.host_to_device += other.host_to_device;
    }

    /// Baseline full-attention decode step: the query plus all S rows of
    /// K and V.
    pub fn charge_full_attention(&mut self, s: usize, d_h: usize) {
        let e = self.policy.kv_elem_bytes;
        self.query_read += d_h as u64 * e;
        self.full_kv_read += 2 * s as u64 * d_h as u64 * e;
    }

    /// Sparse decode step: the query, a contiguous scan of the label cache
    /// (S rows of packed codes plus scales), and the gathered k rows of K
    /// and V.
    pub fn charge_ds_decode(&mut self, s: usize, d_h: usize, r: usize, k: usize) {
        let e = self.policy.kv_elem_bytes;
        self.query_read += d_h as u64 * e;
        self.label_read += s as u64 * self.policy.label_row_bytes(r);
        self.kv_gather_read += 2 * k as u64 * d_h as u64 * e;
    }

    /// Host-to-device transfer of one prefetched buffer: per head, k rows
    /// of both K and V.
    pub fn charge_host_to_device(&mut self, heads: usize, k: usize, d_h: usize) {
        self.host_to_device +=
            heads as u64 * 2 * k as u64 * d_h as u64 * self.policy.kv_elem_bytes;
    }

    /// One contiguous scan of a label cache (the offload planner's
    /// stage-one read; the query itself is produced on-device).
    pub fn charge_label_scan(&mut self, s: usize, r: usize) {
        self.label_read += s as u64 * self.policy.label_row_bytes(r);
    }
}

/// Closed form matching [`TrafficLedger::charge_full_attention`].
pub fn full_attention_bytes(s: usize, d_h: usize, policy: &ChargePolicy) -> u64 {
    let e = policy.kv_elem_bytes;
    d_h as u64 * e + 2 * s as u64 * d_h as u64 * e
}

/// Closed form matching [`TrafficLedger::charge_ds_decode`].
pub fn ds_decode_bytes(s: usize, d_h: usize, r: usize, k: usize, policy: &ChargePolicy) -> u64 {
    let e = policy.kv_elem_bytes;
    d_h as u64 * e + s as u64 * policy.label_row_bytes(r) + 2 * k as u64 * d_h as u64 * e
}

/// Large-S limit of the sparse/full traffic ratio at fixed sparsity:
/// beta from the gathered KV rows plus the per-token label bytes over the
/// per-token full-KV bytes. The query term vanishes as S grows.
pub fn ds_traffic_ratio_asymptote(d_h: usize, r: usize, beta: f64, policy: &ChargePolicy) -> f64 {
    let per_token_label = policy.label_row_bytes(r) as f64;
    let per_token_full = 2.0 * d_h as f64 * policy.kv_elem_bytes as f64;
    beta + per_token_label / per_token_full
}

/// Byte comparison of the approximate-scoring stage with and without a
/// label cache.
#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub s: usize,
    pub d_h: usize,
    pub r: usize,
    pub with_label_bytes: u64,
    pub without_label_bytes: u64,
    pub ratio: f64,
}

/// With a label cache the stage reads S contiguous rows of packed codes
/// and scales. Without one it reads r channels strided out of the full
/// f16 key cache, which costs one standard 128-byte access per token row
/// (a contiguous full-row read when r = d_h).
pub fn label_ablation_report(
    s: usize,
    d_h: usize,
    r: usize,
    policy: &ChargePolicy,
) -> AblationReport {
    let with_label_bytes = s as u64 * policy.label_row_bytes(r);
    let without_label_bytes = if r == d_h {
        s as u64 * d_h as u64 * policy.kv_elem_bytes
    } else {
        s as u64 * 128
    };
    AblationReport {
        s,
        d_h,
        r,
        with_label_bytes,
        without_label_bytes,
        ratio: without_label_bytes as f64 / with_label_bytes as f64,
    }
}

/// One grid point of the sparsity sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub beta: f64,
    pub seed_count: usize,
    pub mean_l2_error: f64,
    pub mean_recall: f64,
    pub traffic_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,beta,seed_count,mean_l2_error,mean_recall,traffic_ratio\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{:.6e},{:.6},{:.6}\n",
                p.alpha, p.beta, p.seed_count, p.mean_l2_error, p.mean_recall, p.traffic_ratio
            ));
        }
        out
    }
}

/// Sweep configuration beyond the grid itself.
#[derive(Debug, Clone)]
pub struct SweepOptions {
    /// Context length prefilled before the measured decode step.
    pub prefill_len: usize,
    /// Calibration dataset: number of sequences and their length.
    pub calib_sequences: usize,
    pub calib_len: usize,
    /// Calibration mode used to rank channels.
    pub mode: CalibrationMode,
    /// Quantize label caches. Off by default so the sweep isolates
    /// channel/token selection error; selection recall at alpha = 1 is then
    /// exact by construction.
    pub quantized_labels: bool,
    pub base_seed: u64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            prefill_len: 48,
            calib_sequences: 2,
            calib_len: 48,
            mode: CalibrationMode::QkOutlier,
            quantized_labels: false,
            base_seed: 0,
        }
    }
}

/// Run the sparsity grid: for every (alpha, beta) pair, decode one step in
/// sparse mode and in full mode from the same seeded context and record the
/// output gap, the selection recall against exact top-k, and the traffic
/// ratio. Channels are ranked once per model by offline calibration and
/// truncated per alpha.
pub fn run_sparsity_sweep(
    weights: &ModelWeights,
    alphas: &[f64],
    betas: &[f64],
    seeds: usize,
    opts: &SweepOptions,
) -> Result<SweepResult> {
    let cfg = weights.config();
    let d_h = cfg.d_h();
    let group = cfg.group_size();

    // Offline phase: full-rank channel ranking, shared by all grid points.
    let mut calib_rng = Rng::new(opts.base_seed ^ 0xCA11_B8A7E);
    let calib_data: Vec<Vec<u32>> = (0..opts.calib_sequences)
        .map(|_| {
            (0..opts.calib_len)
                .map(|_| calib_rng.next_below(cfg.vocab_size) as u32)
                .collect()
        })
        .collect();
    let full_rank_map = calibrate_model(weights, &calib_data, d_h, opts.mode, &mut calib_rng)?;

    let n_points = alphas.len() * betas.len();
    let mut err_sum = vec![0.0f64; n_points];
    let mut recall_sum = vec![0.0f64; n_points];
    let mut ds_bytes = vec![0u64; n_points];
    let mut full_bytes_total = 0u64;

    for seed in 0..seeds {
        let mut rng = Rng::new(opts.base_seed.wrapping_add(seed as u64));
        let tokens: Vec<u32> = (0..opts.prefill_len)
            .map(|_| rng.next_below(cfg.vocab_size) as u32)
            .collect();
        let next_token = rng.next_below(cfg.vocab_size) as u32;

        let (base_caches, _) = prefill(weights, &tokens)?;
        let s_ctx = base_caches.len();

        // Full-attention reference for this seed.
        let mut full_ledger = TrafficLedger::new();
        let mut full_caches = base_caches.clone();
        let (full_logits, full_trace) = decode_step_traced(
            weights,
            &mut full_caches,
            next_token,
            AttnMode::Full,
            None,
            &mut full_ledger,
        )?;
        full_bytes_total += full_ledger.total();

        // Exact stage-one scores per (layer, query head) over the context.
        let exact_scores: Vec<Vec<Vec<f32>>> = (0..cfg.n_layers)
            .map(|l| {
                (0..cfg.n_heads_q)
                    .map(|qh| {
                        let q = &full_trace.layers[l].queries[qh];
                        let kvh = qh / group;
                        let k_mat = base_caches.kv[l][kvh].k_matrix();
                        (0..s_ctx).map(|t| dot(q, &k_mat[t * d_h..(t + 1) * d_h])).collect()
                    })
                    .collect()
            })
            .collect();

        for (ai, &alpha) in alphas.iter().enumerate() {
            let sp_probe = SparsityConfig::new(alpha, 1.0)?;
            let r = sp_probe.rank(d_h);
            let truncated: ChannelMap = full_rank_map
                .iter()
                .map(|(&key, set)| Ok((key, set.truncate(r)?)))
                .collect::<Result<_>>()?;

            for (bi, &beta) in betas.iter().enumerate() {
                let point = ai * betas.len() + bi;
                let sp = SparsityConfig::new(alpha, beta)?;
                let k_sel = sp.top_k(s_ctx);

                let mut caches = base_caches.clone();
                caches.attach_labels(&truncated, opts.quantized_labels)?;
                let mut ledger = TrafficLedger::new();
                let (logits, trace) = decode_step_traced(
                    weights,
                    &mut caches,
                    next_token,
                    AttnMode::DoubleSparsity,
                    Some(&sp),
                    &mut ledger,
                )?;
                ds_bytes[point] += ledger.total();

                let err: f64 = logits
                    .iter()
                    .zip(&full_logits)
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                err_sum[point] += err;

                let mut recall_acc = 0.0f64;
                for l in 0..cfg.n_layers {
                    for qh in 0..cfg.n_heads_q {
                        let exact: TopkResult = TopkResult {
                            indices: argtopk(&exact_scores[l][qh], k_sel)?,
                            approx_scores: Vec::new(),
                        };
                        let selected = &trace.layers[l].selections[qh];
                        let hits = selected
                            .iter()
                            .filter(|t| exact.indices.binary_search(t).is_ok())
                            .count();
                        recall_acc += hits as f64 / k_sel as f64;
                    }
                }
                recall_sum[point] += recall_acc / (cfg.n_layers * cfg.n_heads_q) as f64;
            }
        }
    }

    let mut points = Vec::with_capacity(n_points);
    for (ai, &alpha) in alphas.iter().enumerate() {
        for (bi, &beta) in betas.iter().enumerate() {
            let point = ai * betas.len() + bi;
            points.push(SweepPoint {
                alpha,
                beta,
                seed_count: seeds,
                mean_l2_error: err_sum[point] / seeds as f64,
                mean_recall: recall_sum[point] / seeds as f64,
                traffic_ratio: ds_bytes[point] as f64 / full_bytes_total as f64,
            });
        }
    }
    Ok(SweepResult { points })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_attention_charge_examples() {
        let mut ledger = TrafficLedger::new();
        ledger.charge_full_attention(1024, 64);
        assert_eq!(ledger.query_read, 128);
        assert_eq!(ledger.full_kv_read, 262144);
        assert_eq!(ledger.total(), 262272);

        let mut edge = TrafficLedger::new();
        edge.charge_full_attention(0, 64);
        assert_eq!(edge.total(), 128);

        ledger.charge_full_attention(1024, 64);
        assert_eq!(ledger.total(), 2 * 262272);
    }

    #[test]
    fn ds_decode_charge_example() {
        let mut ledger = TrafficLedger::new();
        ledger.charge_ds_decode(1024, 64, 4, 64);
        // 128 query + 1024 * (2 + 4) label + 2 * 64 * 64 * 2 gather.
        assert_eq!(ledger.query_read, 128);
        assert_eq!(ledger.label_read, 1024 * 6);
        assert_eq!(ledger.kv_gather_read, 16384);
        assert_eq!(ledger.total(), 22656);

        let full = full_attention_bytes(1024, 64, &ChargePolicy::default());
        let ratio = ledger.total() as f64 / full as f64;
        assert!((ratio - 0.0864).abs() < 0.0005, "ratio {ratio}");
    }

    #[test]
    fn dense_sparse_is_never_cheaper_at_full_density() {
        let p = ChargePolicy::default();
        for &(s, d_h) in &[(16usize, 8usize), (128, 32), (1024, 64)] {
            let ds = ds_decode_bytes(s, d_h, d_h, s, &p);
            let full = full_attention_bytes(s, d_h, &p);
            assert!(ds >= full);
        }
    }

    #[test]
    fn gather_component_linear_in_k() {
        let p = ChargePolicy::default();
        let a = ds_decode_bytes(4096, 64, 4, 256, &p);
        let b = ds_decode_bytes(4096, 64, 4, 128, &p);
        let gather_a = 2 * 256 * 64 * 2;
        let gather_b = 2 * 128 * 64 * 2;
        assert_eq!(a - b, gather_a - gather_b);
    }

    #[test]
    fn ratio_approaches_asymptote_at_large_s() {
        let p = ChargePolicy::default();
        let (d_h, r, beta) = (64usize, 4usize, 1.0 / 16.0);
        let s = 4096;
        let k = (beta * s as f64).round() as usize;
        let ratio =
            ds_decode_bytes(s, d_h, r, k, &p) as f64 / full_attention_bytes(s, d_h, &p) as f64;
        let asym = ds_traffic_ratio_asymptote(d_h, r, beta, &p);
        assert!((ratio / asym - 1.0).abs() < 0.02, "ratio {ratio} vs asymptote {asym}");
    }

    #[test]
    fn ablation_report_examples() {
        let p = ChargePolicy::default();
        let rep = label_ablation_report(4096, 64, 8, &p);
        assert_eq!(rep.with_label_bytes, 32768);
        assert_eq!(rep.without_label_bytes, 524288);
        assert_eq!(rep.ratio, 16.0);

        // r = d_h: the no-label read is contiguous, so only the dtype and
        // scale overhead differ.
        let dense = label_ablation_report(4096, 64, 64, &p);
        assert_eq!(dense.without_label_bytes, 4096 * 64 * 2);
        assert_eq!(dense.with_label_bytes, 4096 * 36);

        let tiny = label_ablation_report(1, 64, 8, &p);
        assert_eq!(tiny.with_label_bytes, 8);
        assert_eq!(tiny.without_label_bytes, 128);
    }

    #[test]
    fn half_precision_scale_option() {
        let p = ChargePolicy { kv_elem_bytes: 2, scale_bytes: 2 };
        let mut ledger = TrafficLedger::with_policy(p);
        ledger.charge_ds_decode(100, 16, 4, 10);
        assert_eq!(ledger.label_read, 100 * (2 + 2));
    }

    #[test]
    fn merge_adds_counters() {
        let mut a = TrafficLedger::new();
        a.charge_full_attention(10, 8);
        let mut b = TrafficLedger::new();
        b.charge_ds_decode(10, 8, 2, 3);
        b.charge_host_to_device(4, 3, 8);
        let total = a.total() + b.total();
        a.merge(&b);
        assert_eq!(a.total(), total);
    }
}
