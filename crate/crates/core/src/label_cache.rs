//! Per-head KV cache and its channel-restricted, 4-bit label cache.
//!
//! The label cache holds the calibrated outlier channels of every key row,
//! quantized to signed 4-bit codes with one f32 scale per row. It is grown
//! in lockstep with the KV cache: fully during prefill, one row per decode
//! step afterwards. Approximate attention scores read only this compact,
//! contiguous structure instead of the full key cache.

use std::path::Path;

use crate::calibration::ChannelSet;
use crate::dst1;
use crate::error::{DsError, Result};
use crate::tensor::{pack_i4, unpack_i4, Tensor};

/// Key/value matrices for one (layer, head), append-grown during decode.
#[derive(Debug, Clone)]
pub struct KvCacheHead {
    k: Vec<f32>,
    v: Vec<f32>,
    d_h: usize,
    len: usize,
    capacity: usize,
}

impl KvCacheHead {
    pub fn new(d_h: usize, capacity: usize) -> Self {
        KvCacheHead {
            k: Vec::with_capacity(capacity * d_h),
            v: Vec::with_capacity(capacity * d_h),
            d_h,
            len: 0,
            capacity,
        }
    }

    /// Build from existing row-major [S, d_h] matrices.
    pub fn from_rows(k: Vec<f32>, v: Vec<f32>, d_h: usize, capacity: usize) -> Result<Self> {
        if k.len() != v.len() || k.len() % d_h != 0 {
            return Err(DsError::ShapeMismatch(
                "K and V must both be [S, d_h]".into(),
            ));
        }
        let len = k.len() / d_h;
        if len > capacity {
            return Err(DsError::CapacityExceeded { capacity });
        }
        Ok(KvCacheHead { k, v, d_h, len, capacity })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn d_h(&self) -> usize {
        self.d_h
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn k_row(&self, t: usize) -> &[f32] {
        &self.k[t * self.d_h..(t + 1) * self.d_h]
    }

    pub fn v_row(&self, t: usize) -> &[f32] {
        &self.v[t * self.d_h..(t + 1) * self.d_h]
    }

    /// Full [S, d_h] key matrix.
    pub fn k_matrix(&self) -> &[f32] {
        &self.k
    }

    pub fn v_matrix(&self) -> &[f32] {
        &self.v
    }

    /// Append one token's key and value rows. Earlier rows never move.
    pub fn append(&mut self, new_k: &[f32], new_v: &[f32]) -> Result<()> {
        if new_k.len() != self.d_h || new_v.len() != self.d_h {
            return Err(DsError::ShapeMismatch(format!(
                "appended rows must have length d_h = {}",
                self.d_h
            )));
        }
        if self.len == self.capacity {
            return Err(DsError::CapacityExceeded { capacity: self.capacity });
        }
        self.k.extend_from_slice(new_k);
        self.v.extend_from_slice(new_v);
        self.len += 1;
        Ok(())
    }
}

/// Symmetric per-row 4-bit quantization.
///
/// scale = max|row| / 7 (1.0 for an all-zero row); codes are
/// round-half-away-from-zero(row / scale) clamped to [-7, 7], so the
/// reconstruction error is at most scale / 2 per element.
pub fn quantize_row_4bit(row: &[f32]) -> Result<(Vec<i8>, f32)> {
    if row.iter().any(|v| !v.is_finite()) {
        return Err(DsError::NonFiniteInput);
    }
    let max_abs = row.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    let scale = if max_abs == 0.0 { 1.0 } else { max_abs / 7.0 };
    let codes = row
        .iter()
        .map(|&v| (v / scale).round().clamp(-7.0, 7.0) as i8)
        .collect();
    Ok((codes, scale))
}

#[derive(Debug, Clone)]
enum LabelStorage {
    /// Packed 4-bit codes with row stride ceil(r/2) bytes, plus per-row scales.
    Quantized { codes: Vec<u8>, scales: Vec<f32> },
    /// Verbatim f32 channel values; test-only escape hatch that isolates
    /// channel-restriction error from quantization error.
    Float(Vec<f32>),
}

/// Channel-restricted label copy of one head's key cache.
#[derive(Debug, Clone)]
pub struct LabelCacheHead {
    channels: ChannelSet,
    storage: LabelStorage,
    len: usize,
}

impl LabelCacheHead {
    /// Build from a full [S, d_h] key matrix (the prefill path).
    pub fn build(k_matrix: &[f32], d_h: usize, channels: &ChannelSet, quantized: bool) -> Result<Self> {
        if k_matrix.len() % d_h != 0 {
            return Err(DsError::ShapeMismatch("K must be [S, d_h]".into()));
        }
        channels.check_range(d_h)?;
        let s = k_matrix.len() / d_h;
        let mut cache = LabelCacheHead::empty(channels.clone(), quantized);
        for t in 0..s {
            cache.append_row(&k_matrix[t * d_h..(t + 1) * d_h])?;
        }
        Ok(cache)
    }

    pub fn empty(channels: ChannelSet, quantized: bool) -> Self {
        let storage = if quantized {
            LabelStorage::Quantized { codes: Vec::new(), scales: Vec::new() }
        } else {
            LabelStorage::Float(Vec::new())
        };
        LabelCacheHead { channels, storage, len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channels(&self) -> &ChannelSet {
        &self.channels
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self.storage, LabelStorage::Quantized { .. })
    }

    /// Number of stored channels per row.
    pub fn rank(&self) -> usize {
        self.channels.len()
    }

    fn row_stride(&self) -> usize {
        self.rank().div_ceil(2)
    }

    /// Restrict a full d_h key row to the channel set and append it
    /// (the decode path).
    pub fn append_row(&mut self, new_k: &[f32]) -> Result<()> {
        self.channels.check_range(new_k.len())?;
        let restricted: Vec<f32> =
            self.channels.indices().iter().map(|&c| new_k[c]).collect();
        match &mut self.storage {
            LabelStorage::Quantized { codes, scales } => {
                let (row_codes, scale) = quantize_row_4bit(&restricted)?;
                codes.extend_from_slice(&pack_i4(&row_codes));
                scales.push(scale);
            }
            LabelStorage::Float(rows) => rows.extend_from_slice(&restricted),
        }
        self.len += 1;
        Ok(())
    }

    /// Dequantized value of channel position `pos` (0..rank) in row `t`.
    pub fn value(&self, t: usize, pos: usize) -> f32 {
        let r = self.rank();
        debug_assert!(t < self.len && pos < r);
        match &self.storage {
            LabelStorage::Quantized { codes, scales } => {
                let stride = self.row_stride();
                let byte = codes[t * stride + pos / 2];
                let nib = if pos % 2 == 0 { byte & 0x0F } else { byte >> 4 };
                let code = if nib >= 8 { nib as i8 - 16 } else { nib as i8 };
                code as f32 * scales[t]
            }
            LabelStorage::Float(rows) => rows[t * r + pos],
        }
    }

    /// Per-row quantization scale (1.0 in float mode, where the error is 0).
    pub fn scale(&self, t: usize) -> f32 {
        match &self.storage {
            LabelStorage::Quantized { scales, .. } => scales[t],
            LabelStorage::Float(_) => 1.0,
        }
    }

    /// Dot product of a channel-restricted query with row `t`:
    /// sum over channel positions of q_restricted[pos] * value(t, pos).
    pub fn score_row(&self, q_restricted: &[f32], t: usize) -> f32 {
        debug_assert_eq!(q_restricted.len(), self.rank());
        let r = self.rank();
        match &self.storage {
            LabelStorage::Quantized { codes, scales } => {
                let stride = self.row_stride();
                let row = &codes[t * stride..t * stride + stride];
                let mut acc = 0.0f32;
                for pos in 0..r {
                    let byte = row[pos / 2];
                    let nib = if pos % 2 == 0 { byte & 0x0F } else { byte >> 4 };
                    let code = if nib >= 8 { nib as i8 - 16 } else { nib as i8 };
                    acc += q_restricted[pos] * code as f32;
                }
                acc * scales[t]
            }
            LabelStorage::Float(rows) => {
                let row = &rows[t * r..(t + 1) * r];
                crate::math::dot(q_restricted, row)
            }
        }
    }

    /// Exact on-device byte footprint: S * (ceil(r/2) code bytes +
    /// `scale_bytes` per row). Float mode stores S * r * 4.
    pub fn byte_footprint(&self, scale_bytes: u64) -> u64 {
        match &self.storage {
            LabelStorage::Quantized { .. } => {
                self.len as u64 * (self.row_stride() as u64 + scale_bytes)
            }
            LabelStorage::Float(_) => self.len as u64 * self.rank() as u64 * 4,
        }
    }

    /// Serialize to DST1: codes [S, r] int4, scales [S] f32, channels [r]
    /// int32, meta [4] int32 (mode code, layer, head, quantized flag).
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let r = self.rank();
        if self.len == 0 {
            return Err(DsError::Format("cannot serialize an empty label cache".into()));
        }
        let (codes_dense, scales) = match &self.storage {
            LabelStorage::Quantized { codes, scales } => {
                // Repack row-aligned storage into a dense [S, r] code stream.
                let stride = self.row_stride();
                let mut dense = Vec::with_capacity(self.len * r);
                for t in 0..self.len {
                    let row = unpack_i4(&codes[t * stride..(t + 1) * stride], r);
                    dense.extend_from_slice(&row);
                }
                (dense, scales.clone())
            }
            LabelStorage::Float(rows) => {
                // Quantize on the fly so the file is always 4-bit.
                let mut dense = Vec::with_capacity(self.len * r);
                let mut scales = Vec::with_capacity(self.len);
                for t in 0..self.len {
                    let (c, sc) = quantize_row_4bit(&rows[t * r..(t + 1) * r])?;
                    dense.extend_from_slice(&c);
                    scales.push(sc);
                }
                (dense, scales)
            }
        };
        let codes_t = Tensor::from_i4_codes(vec![self.len, r], &codes_dense)?;
        let scales_t = Tensor::from_f32(vec![self.len], scales)?;
        let channels_t = Tensor::from_i32(
            vec![r],
            self.channels.indices().iter().map(|&c| c as i32).collect(),
        )?;
        let meta_t = Tensor::from_i32(
            vec![4],
            vec![
                self.channels.mode().code() as i32,
                self.channels.layer() as i32,
                self.channels.head() as i32,
                self.is_quantized() as i32,
            ],
        )?;
        dst1::save(
            path,
            &[
                ("codes", &codes_t),
                ("scales", &scales_t),
                ("channels", &channels_t),
                ("meta", &meta_t),
            ],
        )
    }
}

/// Append one token to a (KV cache, label cache) pair, keeping them
/// synchronized. The label row is the quantized channel restriction of
/// `new_k`; prior rows are untouched.
pub fn append_token(
    label: &mut LabelCacheHead,
    kv: &mut KvCacheHead,
    new_k: &[f32],
    new_v: &[f32],
) -> Result<()> {
    if label.len() != kv.len() {
        return Err(DsError::ShapeMismatch(format!(
            "label cache has {} rows but KV cache has {}",
            label.len(),
            kv.len()
        )));
    }
    kv.append(new_k, new_v)?;
    label.append_row(new_k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{CalibrationMode, ChannelSet};
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn all_channels(d_h: usize) -> ChannelSet {
        ChannelSet::from_indices((0..d_h).collect(), CalibrationMode::Random, 0, 0).unwrap()
    }

    #[test]
    fn quantize_zero_row() {
        let (codes, scale) = quantize_row_4bit(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(codes, vec![0, 0, 0]);
        assert_eq!(scale, 1.0);
    }

    #[test]
    fn quantize_known_row() {
        // max|row| = 7 so scale = 1; 3.5 rounds half away from zero to 4.
        let (codes, scale) = quantize_row_4bit(&[0.0, 7.0, -7.0, 3.5]).unwrap();
        assert_eq!(scale, 1.0);
        assert_eq!(codes, vec![0, 7, -7, 4]);
    }

    #[test]
    fn quantize_rejects_non_finite() {
        assert!(matches!(
            quantize_row_4bit(&[1.0, f32::NAN]).unwrap_err(),
            DsError::NonFiniteInput
        ));
        assert!(matches!(
            quantize_row_4bit(&[f32::INFINITY]).unwrap_err(),
            DsError::NonFiniteInput
        ));
    }

    #[test]
    fn reconstruction_error_bounded_over_random_rows() {
        let mut rng = Rng::new(11);
        for _ in 0..10_000 {
            let n = 1 + rng.next_below(16);
            let row: Vec<f32> = (0..n).map(|_| rng.normal_f32() * 3.0).collect();
            let (codes, scale) = quantize_row_4bit(&row).unwrap();
            for (c, orig) in codes.iter().zip(&row) {
                let err = (*c as f32 * scale - orig).abs();
                assert!(err <= scale / 2.0 + 1e-7, "err {err} > scale/2 {}", scale / 2.0);
            }
        }
    }

    #[test]
    fn full_channels_unquantized_is_verbatim() {
        let d_h = 4;
        let k: Vec<f32> = (0..12).map(|i| i as f32 - 5.0).collect();
        let cache = LabelCacheHead::build(&k, d_h, &all_channels(d_h), false).unwrap();
        for t in 0..3 {
            for j in 0..d_h {
                assert_eq!(cache.value(t, j), k[t * d_h + j]);
            }
        }
    }

    #[test]
    fn empty_build_is_valid() {
        let cache = LabelCacheHead::build(&[], 4, &all_channels(4), true).unwrap();
        assert_eq!(cache.len(), 0);
    }

    #[test]
    fn quantized_rows_match_row_oracle() {
        let mut rng = Rng::new(9);
        let d_h = 8;
        let s = 17;
        let k: Vec<f32> = (0..s * d_h).map(|_| rng.normal_f32()).collect();
        let channels =
            ChannelSet::from_indices(vec![2, 5], CalibrationMode::KOutlier, 0, 0).unwrap();
        let cache = LabelCacheHead::build(&k, d_h, &channels, true).unwrap();
        for t in 0..s {
            let restricted = vec![k[t * d_h + 2], k[t * d_h + 5]];
            let (codes, scale) = quantize_row_4bit(&restricted).unwrap();
            assert_eq!(cache.scale(t), scale);
            for (pos, c) in codes.iter().enumerate() {
                assert_eq!(cache.value(t, pos), *c as f32 * scale);
            }
        }
    }

    #[test]
    fn incremental_append_equals_batch_build() {
        let mut rng = Rng::new(3);
        let d_h = 6;
        let channels =
            ChannelSet::from_indices(vec![0, 3, 5], CalibrationMode::QkOutlier, 1, 2).unwrap();
        let rows: Vec<Vec<f32>> = (0..100)
            .map(|_| (0..d_h).map(|_| rng.normal_f32()).collect())
            .collect();

        let mut kv = KvCacheHead::new(d_h, 128);
        let mut label = LabelCacheHead::empty(channels.clone(), true);
        for row in &rows {
            append_token(&mut label, &mut kv, row, row).unwrap();
        }

        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        let batch = LabelCacheHead::build(&flat, d_h, &channels, true).unwrap();
        assert_eq!(batch.len(), label.len());
        for t in 0..batch.len() {
            assert_eq!(batch.scale(t).to_bits(), label.scale(t).to_bits());
            for pos in 0..batch.rank() {
                assert_eq!(batch.value(t, pos).to_bits(), label.value(t, pos).to_bits());
            }
        }
    }

    #[test]
    fn capacity_exceeded_on_overflow() {
        let mut kv = KvCacheHead::new(2, 1);
        let mut label = LabelCacheHead::empty(all_channels(2), true);
        append_token(&mut label, &mut kv, &[1.0, 2.0], &[3.0, 4.0]).unwrap();
        let err = append_token(&mut label, &mut kv, &[1.0, 2.0], &[3.0, 4.0]).unwrap_err();
        assert!(matches!(err, DsError::CapacityExceeded { capacity: 1 }));
        // The failed append must not have desynchronized the pair.
        assert_eq!(kv.len(), label.len());
    }

    #[test]
    fn byte_footprint_closed_form() {
        let mut rng = Rng::new(5);
        for &(s, r) in &[(10usize, 3usize), (64, 8), (7, 1), (128, 5)] {
            let d_h = r.max(4);
            let channels = ChannelSet::from_indices(
                (0..r).collect(),
                CalibrationMode::Random,
                0,
                0,
            )
            .unwrap();
            let k: Vec<f32> = (0..s * d_h).map(|_| rng.normal_f32()).collect();
            let cache = LabelCacheHead::build(&k, d_h, &channels, true).unwrap();
            assert_eq!(cache.byte_footprint(4), s as u64 * (r.div_ceil(2) as u64 + 4));
            assert_eq!(cache.byte_footprint(2), s as u64 * (r.div_ceil(2) as u64 + 2));
        }
    }

    #[test]
    fn save_round_trips_through_dst1() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("label.dst1");
        let mut rng = Rng::new(21);
        let d_h = 8;
        let k: Vec<f32> = (0..5 * d_h).map(|_| rng.normal_f32()).collect();
        let channels =
            ChannelSet::from_indices(vec![1, 4, 6], CalibrationMode::QOutlier, 3, 1).unwrap();
        let cache = LabelCacheHead::build(&k, d_h, &channels, true).unwrap();
        cache.save(&path).unwrap();

        let file = dst1::load(&path).unwrap();
        let codes = file.get("codes").unwrap();
        assert_eq!(codes.shape(), &[5, 3]);
        let scales = file.get("scales").unwrap().f32_slice().unwrap().to_vec();
        let stored = codes.i4_codes().unwrap();
        for t in 0..5 {
            assert_eq!(scales[t], cache.scale(t));
            for pos in 0..3 {
                assert_eq!(stored[t * 3 + pos] as f32 * scales[t], cache.value(t, pos));
            }
        }
        let chans = file.get("channels").unwrap().i32_slice().unwrap().to_vec();
        assert_eq!(chans, vec![1, 4, 6]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn quantization_error_within_half_scale(
            row in proptest::collection::vec(-100.0f32..100.0, 1..24)
        ) {
            let (codes, scale) = quantize_row_4bit(&row).unwrap();
            for (c, orig) in codes.iter().zip(&row) {
                let err = (*c as f32 * scale - orig).abs();
                prop_assert!(err <= scale / 2.0 + 1e-7);
            }
        }
    }
}
