//! Offline outlier-channel identification.
//!
//! The attention score decomposes over feature channels as a sum of
//! per-channel products q_j * K_{t,j}; only a few channels carry most of
//! the weight. Calibration runs full-precision prefill passes over a small
//! dataset, accumulates a per-channel importance statistic for every
//! (layer, KV head), and keeps the top-r channels. The statistic is the
//! mean of absolute contributions (swappable; see `accumulate_stats`).
//! Channel sets are keyed by KV head so that grouped-query models share one
//! set per group; query-head statistics within a group are summed into the
//! shared KV head.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dst1;
use crate::error::{DsError, Result};
use crate::math::fnv1a;
use crate::model::{self, ModelWeights};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// How channel importance is measured during calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CalibrationMode {
    /// Draw channels uniformly at random (baseline; ignores statistics).
    Random,
    /// Importance of channel j is |q_j|, accumulated over queries.
    QOutlier,
    /// Importance of channel j is mean_t |K_{t,j}|.
    KOutlier,
    /// Importance of channel j is mean_t |q_j * K_{t,j}|.
    QkOutlier,
}

impl CalibrationMode {
    pub fn code(self) -> u8 {
        match self {
            CalibrationMode::Random => 0,
            CalibrationMode::QOutlier => 1,
            CalibrationMode::KOutlier => 2,
            CalibrationMode::QkOutlier => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(CalibrationMode::Random),
            1 => Ok(CalibrationMode::QOutlier),
            2 => Ok(CalibrationMode::KOutlier),
            3 => Ok(CalibrationMode::QkOutlier),
            other => Err(DsError::Format(format!("unknown calibration mode code {other}"))),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(CalibrationMode::Random),
            "q" => Ok(CalibrationMode::QOutlier),
            "k" => Ok(CalibrationMode::KOutlier),
            "qk" => Ok(CalibrationMode::QkOutlier),
            other => Err(DsError::InvalidConfig(format!(
                "unknown mode {other:?}, expected random|q|k|qk"
            ))),
        }
    }
}

impl fmt::Display for CalibrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CalibrationMode::Random => "random",
            CalibrationMode::QOutlier => "q",
            CalibrationMode::KOutlier => "k",
            CalibrationMode::QkOutlier => "qk",
        };
        f.write_str(s)
    }
}

/// Calibrated outlier channels for one (layer, KV head).
///
/// `indices()` is always sorted ascending; `by_rank()` preserves the
/// importance order (most important first) so the set can be truncated to a
/// smaller rank without re-calibrating.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelSet {
    sorted: Vec<usize>,
    by_rank: Vec<usize>,
    mode: CalibrationMode,
    layer: usize,
    head: usize,
}

impl ChannelSet {
    /// Build from importance-ordered indices (most important first).
    pub fn from_indices(
        by_rank: Vec<usize>,
        mode: CalibrationMode,
        layer: usize,
        head: usize,
    ) -> Result<Self> {
        if by_rank.is_empty() {
            return Err(DsError::InvalidConfig("channel set cannot be empty".into()));
        }
        let mut sorted = by_rank.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(DsError::InvalidConfig("duplicate channel index".into()));
        }
        Ok(ChannelSet { sorted, by_rank, mode, layer, head })
    }

    /// Ascending channel indices.
    pub fn indices(&self) -> &[usize] {
        &self.sorted
    }

    /// Indices in decreasing importance order.
    pub fn by_rank(&self) -> &[usize] {
        &self.by_rank
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn mode(&self) -> CalibrationMode {
        self.mode
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn head(&self) -> usize {
        self.head
    }

    /// Keep only the `r` most important channels.
    pub fn truncate(&self, r: usize) -> Result<Self> {
        if r == 0 || r > self.by_rank.len() {
            return Err(DsError::InvalidConfig(format!(
                "cannot truncate {} channels to {r}",
                self.by_rank.len()
            )));
        }
        ChannelSet::from_indices(self.by_rank[..r].to_vec(), self.mode, self.layer, self.head)
    }

    pub fn check_range(&self, d_h: usize) -> Result<()> {
        for &c in &self.sorted {
            if c >= d_h {
                return Err(DsError::ChannelOutOfRange { channel: c, d_h });
            }
        }
        Ok(())
    }
}

/// Accumulated per-channel importance for one (layer, KV head).
#[derive(Debug, Clone)]
pub struct CalibrationStats {
    importance: Vec<f64>,
    samples: u64,
}

impl CalibrationStats {
    pub fn new(d_h: usize) -> Self {
        CalibrationStats { importance: vec![0.0; d_h], samples: 0 }
    }

    pub fn importance(&self) -> &[f64] {
        &self.importance
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }
}

/// Add one sample's contribution. `q` is one query vector, `k_matrix` is the
/// head's [S, d_h] key matrix. Random mode only counts the sample.
pub fn accumulate_stats(
    stats: &mut CalibrationStats,
    q: &[f32],
    k_matrix: &[f32],
    d_h: usize,
    mode: CalibrationMode,
) -> Result<()> {
    if q.len() != d_h || stats.importance.len() != d_h || k_matrix.len() % d_h != 0 {
        return Err(DsError::ShapeMismatch(
            "q must be [d_h] and K must be [S, d_h]".into(),
        ));
    }
    let s = k_matrix.len() / d_h;
    if matches!(mode, CalibrationMode::KOutlier | CalibrationMode::QkOutlier) && s == 0 {
        return Err(DsError::ShapeMismatch("K is empty".into()));
    }
    match mode {
        CalibrationMode::Random => {}
        CalibrationMode::QOutlier => {
            for j in 0..d_h {
                stats.importance[j] += q[j].abs() as f64;
            }
        }
        CalibrationMode::KOutlier => {
            for j in 0..d_h {
                let mut acc = 0.0f64;
                for t in 0..s {
                    acc += k_matrix[t * d_h + j].abs() as f64;
                }
                stats.importance[j] += acc / s as f64;
            }
        }
        CalibrationMode::QkOutlier => {
            for j in 0..d_h {
                let mut acc = 0.0f64;
                for t in 0..s {
                    acc += (q[j] * k_matrix[t * d_h + j]).abs() as f64;
                }
                stats.importance[j] += acc / s as f64;
            }
        }
    }
    stats.samples += 1;
    Ok(())
}

/// Pick the top-r channels by importance (ties go to the lower index).
/// Random mode draws r distinct channels from `rng` instead.
pub fn select_channels(
    stats: &CalibrationStats,
    r: usize,
    mode: CalibrationMode,
    rng: &mut Rng,
    layer: usize,
    head: usize,
) -> Result<ChannelSet> {
    let d_h = stats.importance.len();
    if r == 0 || r > d_h {
        return Err(DsError::InvalidConfig(format!("r = {r} must be in 1..={d_h}")));
    }
    let by_rank = match mode {
        CalibrationMode::Random => {
            // Partial Fisher-Yates; the draw order is the rank order.
            let mut pool: Vec<usize> = (0..d_h).collect();
            for i in 0..r {
                let j = i + rng.next_below(d_h - i);
                pool.swap(i, j);
            }
            pool.truncate(r);
            pool
        }
        _ => {
            if stats.samples == 0 {
                return Err(DsError::EmptyStats);
            }
            let mut order: Vec<usize> = (0..d_h).collect();
            order.sort_by(|&a, &b| {
                stats.importance[b]
                    .partial_cmp(&stats.importance[a])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            order.truncate(r);
            order
        }
    };
    ChannelSet::from_indices(by_rank, mode, layer, head)
}

/// Calibrated channel sets keyed by (layer, KV head).
pub type ChannelMap = BTreeMap<(usize, usize), ChannelSet>;

/// Run offline calibration over a token dataset.
///
/// Prefills each sequence at full precision, accumulates statistics per
/// (layer, KV head) — summing the group's query heads for q/qk modes — and
/// selects `r = alpha * d_h` channels per set. k-outlier mode rejects
/// grouped-query configurations (per-KV-head K statistics cannot stand in
/// for the group's distinct query heads).
pub fn calibrate_model(
    weights: &ModelWeights,
    dataset: &[Vec<u32>],
    r: usize,
    mode: CalibrationMode,
    rng: &mut Rng,
) -> Result<ChannelMap> {
    let cfg = weights.config();
    if dataset.is_empty() || dataset.iter().any(|s| s.is_empty()) {
        return Err(DsError::EmptyDataset);
    }
    if mode == CalibrationMode::KOutlier && cfg.n_heads_q != cfg.n_heads_kv {
        return Err(DsError::GqaIncompatible {
            heads_q: cfg.n_heads_q,
            heads_kv: cfg.n_heads_kv,
        });
    }
    let d_h = cfg.d_h();
    let group = cfg.group_size();

    let mut stats: Vec<Vec<CalibrationStats>> = (0..cfg.n_layers)
        .map(|_| (0..cfg.n_heads_kv).map(|_| CalibrationStats::new(d_h)).collect())
        .collect();

    if mode != CalibrationMode::Random {
        for seq in dataset {
            let (caches, _) = model::prefill(weights, seq)?;
            for l in 0..cfg.n_layers {
                let hidden = &caches.hiddens[l];
                for t in 0..seq.len() {
                    let q_all = model::query_from_input(
                        weights,
                        l,
                        &hidden[t * cfg.d_model..(t + 1) * cfg.d_model],
                        t,
                    )?;
                    for qh in 0..cfg.n_heads_q {
                        let kvh = qh / group;
                        accumulate_stats(
                            &mut stats[l][kvh],
                            &q_all[qh * d_h..(qh + 1) * d_h],
                            caches.kv[l][kvh].k_matrix(),
                            d_h,
                            mode,
                        )?;
                    }
                }
            }
        }
    }

    let mut map = ChannelMap::new();
    for l in 0..cfg.n_layers {
        for kvh in 0..cfg.n_heads_kv {
            let set = select_channels(&stats[l][kvh], r, mode, rng, l, kvh)?;
            map.insert((l, kvh), set);
        }
    }
    Ok(map)
}

/// Fraction of this decode step's online outlier channels that offline
/// calibration also selected.
///
/// Online outliers are the top ceil(ratio * d_h) channels by |q_j * k_j|
/// for the step's query and key row; the offline set is truncated to the
/// same size by importance rank. Returns |offline ∩ online| / |online|.
pub fn overlap_ratio(offline: &ChannelSet, q: &[f32], k_row: &[f32], ratio: f64) -> f64 {
    debug_assert_eq!(q.len(), k_row.len());
    debug_assert!(ratio > 0.0 && ratio <= 1.0);
    let d_h = q.len();
    let m = ((ratio * d_h as f64).ceil() as usize).clamp(1, d_h);

    let mut order: Vec<usize> = (0..d_h).collect();
    order.sort_by(|&a, &b| {
        let ia = (q[a] * k_row[a]).abs();
        let ib = (q[b] * k_row[b]).abs();
        ib.partial_cmp(&ia).unwrap().then(a.cmp(&b))
    });
    let online = &order[..m];

    let take = m.min(offline.by_rank().len());
    let offline_trunc = &offline.by_rank()[..take];
    let hits = online.iter().filter(|c| offline_trunc.contains(c)).count();
    hits as f64 / m as f64
}

/// Sidecar metadata stored next to a channel-map file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelMapMeta {
    pub mode: String,
    pub r: usize,
    pub d_h: usize,
    pub seed: u64,
    pub dataset_checksum: String,
}

/// Hash a token dataset for the sidecar record.
pub fn dataset_checksum(dataset: &[Vec<u32>]) -> String {
    let mut bytes = Vec::new();
    for seq in dataset {
        bytes.extend_from_slice(&(seq.len() as u64).to_le_bytes());
        for &t in seq {
            bytes.extend_from_slice(&t.to_le_bytes());
        }
    }
    format!("{:016x}", fnv1a(&bytes))
}

/// Write a channel map as DST1 (per-set channel tensors plus a small meta
/// tensor) with a JSON sidecar at `<path>.json`.
pub fn save_channel_map<P: AsRef<Path>>(
    path: P,
    map: &ChannelMap,
    meta: &ChannelMapMeta,
) -> Result<()> {
    if map.is_empty() {
        return Err(DsError::InvalidConfig("channel map is empty".into()));
    }
    let mode = map.values().next().unwrap().mode();
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    tensors.push((
        "meta".to_string(),
        Tensor::from_i32(vec![2], vec![mode.code() as i32, meta.r as i32])?,
    ));
    for ((layer, head), set) in map {
        let sorted: Vec<i32> = set.indices().iter().map(|&c| c as i32).collect();
        let ranked: Vec<i32> = set.by_rank().iter().map(|&c| c as i32).collect();
        tensors.push((
            format!("layer{layer}.head{head}.channels"),
            Tensor::from_i32(vec![sorted.len()], sorted)?,
        ));
        tensors.push((
            format!("layer{layer}.head{head}.channels_by_rank"),
            Tensor::from_i32(vec![ranked.len()], ranked)?,
        ));
    }
    let refs: Vec<(&str, &Tensor)> =
        tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    dst1::save(&path, &refs)?;

    let sidecar = path.as_ref().with_extension("dst1.json");
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| DsError::Format(format!("sidecar serialization failed: {e}")))?;
    std::fs::write(sidecar, json + "\n")?;
    Ok(())
}

/// Read a channel map written by [`save_channel_map`].
pub fn load_channel_map<P: AsRef<Path>>(path: P) -> Result<ChannelMap> {
    let file = dst1::load(path)?;
    let meta = file
        .get("meta")
        .ok_or_else(|| DsError::Format("channel map is missing the meta tensor".into()))?
        .i32_slice()?
        .to_vec();
    if meta.len() != 2 {
        return Err(DsError::Format("malformed channel-map meta tensor".into()));
    }
    let mode = CalibrationMode::from_code(meta[0] as u8)?;

    let mut map = ChannelMap::new();
    for (name, tensor) in file.entries() {
        let Some(rest) = name.strip_prefix("layer") else { continue };
        let Some((layer_str, rest)) = rest.split_once(".head") else { continue };
        let Some((head_str, field)) = rest.split_once('.') else { continue };
        if field != "channels_by_rank" {
            continue;
        }
        let layer: usize = layer_str
            .parse()
            .map_err(|_| DsError::Format(format!("bad tensor name {name:?}")))?;
        let head: usize = head_str
            .parse()
            .map_err(|_| DsError::Format(format!("bad tensor name {name:?}")))?;
        let ranked: Vec<usize> =
            tensor.i32_slice()?.iter().map(|&c| c as usize).collect();
        map.insert((layer, head), ChannelSet::from_indices(ranked, mode, layer, head)?);
    }
    if map.is_empty() {
        return Err(DsError::Format("channel map contains no channel tensors".into()));
    }
    Ok(map)
}
