//! Minimal decoder-only transformer (MHA or GQA) used to generate
//! realistic multi-layer Q/K/V streams for calibration, sparse decode,
//! offload, and similarity experiments.
//!
//! Architecture: pre-norm residual blocks with RMS normalization, rotary
//! position embedding on queries and keys (split-half pairing), a two-matrix
//! SiLU MLP, and untied output projection. Prefill runs the full causal
//! pass and records every layer's input hidden state; decode appends one
//! token per step and dispatches attention per head to the full or sparse
//! kernel.
//!
//! Sparse decode selects from the tokens cached before the step and always
//! includes the step's own token in the attention support (its K/V rows are
//! produced locally and cost no cache read). The offload pipeline plans
//! prefetches against exactly the same candidate set, so the two paths
//! select identical tokens given identical queries.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{
    approx_scores, argtopk, full_attention, gather_attend, AttentionInput, SparsityConfig,
};
use crate::calibration::ChannelMap;
use crate::dst1;
use crate::error::{DsError, Result};
use crate::label_cache::{KvCacheHead, LabelCacheHead};
use crate::math::{matvec, pow64, rms_norm, silu, sincos64};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::traffic::TrafficLedger;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads_q: usize,
    pub n_heads_kv: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// KV cache capacity per head.
    pub max_seq: usize,
}

impl ModelConfig {
    /// Desk-scale default: 4 layers, d_model 256, 8 query heads (MHA).
    pub fn desk_default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 256,
            n_heads_q: 8,
            n_heads_kv: 8,
            d_ff: 512,
            vocab_size: 512,
            max_seq: 4096,
        }
    }

    pub fn d_h(&self) -> usize {
        self.d_model / self.n_heads_q
    }

    /// Query heads per KV head.
    pub fn group_size(&self) -> usize {
        self.n_heads_q / self.n_heads_kv
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DsError::InvalidConfig(msg));
        if self.n_layers == 0
            || self.d_model == 0
            || self.n_heads_q == 0
            || self.n_heads_kv == 0
            || self.d_ff == 0
            || self.vocab_size == 0
            || self.max_seq == 0
        {
            return bad("all dimensions must be positive".into());
        }
        if self.d_model % self.n_heads_q != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads_q {}",
                self.d_model, self.n_heads_q
            ));
        }
        if self.n_heads_q % self.n_heads_kv != 0 {
            return bad(format!(
                "n_heads_q {} not divisible by n_heads_kv {}",
                self.n_heads_q, self.n_heads_kv
            ));
        }
        if self.d_h() % 2 != 0 {
            return bad(format!("head dim {} must be even for rotary pairing", self.d_h()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub w_q: Vec<f32>,    // [d_model, n_heads_q * d_h]
    pub w_k: Vec<f32>,    // [d_model, n_heads_kv * d_h]
    pub w_v: Vec<f32>,    // [d_model, n_heads_kv * d_h]
    pub w_o: Vec<f32>,    // [n_heads_q * d_h, d_model]
    pub w_up: Vec<f32>,   // [d_model, d_ff]
    pub w_down: Vec<f32>, // [d_ff, d_model]
    pub attn_norm: Vec<f32>,
    pub mlp_norm: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct ModelWeights {
    cfg: ModelConfig,
    pub embed: Vec<f32>, // [vocab, d_model]
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub w_out: Vec<f32>, // [d_model, vocab]
}

impl ModelWeights {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }
}

/// Multiplies the chosen per-head output channels of the query and key
/// projections, creating controlled outlier channels that calibration
/// should recover. Applied to every head. Rotary embedding mixes channel j
/// with channel j + d_h/2, so plant pair-closed sets (both partners) when
/// exact recovery matters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub entries: Vec<(usize, f32)>,
}

impl PlantSpec {
    /// Parse "idx:factor,idx:factor,...". A bare index gets factor 10.
    pub fn parse(s: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for part in s.split(',').filter(|p| !p.is_empty()) {
            let (idx_str, factor) = match part.split_once(':') {
                Some((i, f)) => (
                    i,
                    f.trim().parse::<f32>().map_err(|_| {
                        DsError::InvalidConfig(format!("bad plant factor in {part:?}"))
                    })?,
                ),
                None => (part, 10.0),
            };
            let idx = idx_str.trim().parse::<usize>().map_err(|_| {
                DsError::InvalidConfig(format!("bad plant index in {part:?}"))
            })?;
            entries.push((idx, factor));
        }
        Ok(PlantSpec { entries })
    }
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f32) -> Vec<f32> {
    (0..rows * cols).map(|_| rng.normal_f32() * std).collect()
}

fn scale_column(w: &mut [f32], out_dim: usize, col: usize, factor: f32) {
    let rows = w.len() / out_dim;
    for i in 0..rows {
        w[i * out_dim + col] *= factor;
    }
}

/// Scaled-normal initialization; deterministic in the rng stream.
pub fn init_weights(
    cfg: &ModelConfig,
    rng: &mut Rng,
    plant: Option<&PlantSpec>,
) -> Result<ModelWeights> {
    cfg.validate()?;
    let d = cfg.d_model;
    let d_h = cfg.d_h();
    let proj_std = 1.0 / (d as f32).sqrt();
    let down_std = 1.0 / (cfg.d_ff as f32).sqrt();

    let embed = random_matrix(rng, cfg.vocab_size, d, 1.0);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        let mut w_q = random_matrix(rng, d, cfg.n_heads_q * d_h, proj_std);
        let mut w_k = random_matrix(rng, d, cfg.n_heads_kv * d_h, proj_std);
        let w_v = random_matrix(rng, d, cfg.n_heads_kv * d_h, proj_std);
        let w_o = random_matrix(rng, cfg.n_heads_q * d_h, d, proj_std);
        let w_up = random_matrix(rng, d, cfg.d_ff, proj_std);
        let w_down = random_matrix(rng, cfg.d_ff, d, down_std);

        if let Some(plant) = plant {
            for &(idx, factor) in &plant.entries {
                if idx >= d_h {
                    return Err(DsError::ChannelOutOfRange { channel: idx, d_h });
                }
                for h in 0..cfg.n_heads_q {
                    scale_column(&mut w_q, cfg.n_heads_q * d_h, h * d_h + idx, factor);
                }
                for h in 0..cfg.n_heads_kv {
                    scale_column(&mut w_k, cfg.n_heads_kv * d_h, h * d_h + idx, factor);
                }
            }
        }

        layers.push(LayerWeights {
            w_q,
            w_k,
            w_v,
            w_o,
            w_up,
            w_down,
            attn_norm: vec![1.0; d],
            mlp_norm: vec![1.0; d],
        });
    }
    let final_norm = vec![1.0; d];
    let w_out = random_matrix(rng, d, cfg.vocab_size, proj_std);
    Ok(ModelWeights { cfg: *cfg, embed, layers, final_norm, w_out })
}

/// Rotary position embedding, split-half pairing: channel j rotates with
/// channel j + d_h/2 by angle pos * 10000^(-2j/d_h).
pub fn rope_in_place(x: &mut [f32], pos: usize) {
    let d = x.len();
    let half = d / 2;
    for j in 0..half {
        let theta = pow64(10000.0, -2.0 * j as f64 / d as f64);
        let (sin, cos) = sincos64(pos as f64 * theta);
        let (sin, cos) = (sin as f32, cos as f32);
        let a = x[j];
        let b = x[j + half];
        x[j] = a * cos - b * sin;
        x[j + half] = a * sin + b * cos;
    }
}

/// The layer's query path applied to an input hidden state: pre-norm,
/// projection, rotary embedding at `pos`. Returns all query heads
/// concatenated. Feeding it the layer's true input yields the true query
/// bit-for-bit; the offload pipeline feeds it the previous layer's input
/// instead.
pub fn query_from_input(w: &ModelWeights, layer: usize, h: &[f32], pos: usize) -> Result<Vec<f32>> {
    let cfg = &w.cfg;
    if layer >= cfg.n_layers {
        return Err(DsError::LayerOutOfRange { layer, n_layers: cfg.n_layers });
    }
    if h.len() != cfg.d_model {
        return Err(DsError::ShapeMismatch(format!(
            "hidden state has length {}, expected {}",
            h.len(),
            cfg.d_model
        )));
    }
    let d_h = cfg.d_h();
    let lw = &w.layers[layer];
    let mut x = vec![0.0f32; cfg.d_model];
    rms_norm(h, &lw.attn_norm, &mut x);
    let mut q = vec![0.0f32; cfg.n_heads_q * d_h];
    matvec(&x, &lw.w_q, cfg.n_heads_q * d_h, &mut q);
    for head in q.chunks_mut(d_h) {
        rope_in_place(head, pos);
    }
    Ok(q)
}

/// Key and value paths for one input hidden state (keys roped at `pos`).
pub fn kv_from_input(w: &ModelWeights, layer: usize, h: &[f32], pos: usize) -> (Vec<f32>, Vec<f32>) {
    let cfg = &w.cfg;
    let d_h = cfg.d_h();
    let lw = &w.layers[layer];
    let mut x = vec![0.0f32; cfg.d_model];
    rms_norm(h, &lw.attn_norm, &mut x);
    let mut k = vec![0.0f32; cfg.n_heads_kv * d_h];
    let mut v = vec![0.0f32; cfg.n_heads_kv * d_h];
    matvec(&x, &lw.w_k, cfg.n_heads_kv * d_h, &mut k);
    matvec(&x, &lw.w_v, cfg.n_heads_kv * d_h, &mut v);
    for head in k.chunks_mut(d_h) {
        rope_in_place(head, pos);
    }
    (k, v)
}

/// Attention output projection plus residual, then the MLP block.
pub fn finish_layer(w: &ModelWeights, layer: usize, attn_out: &[f32], h: &mut [f32]) {
    let cfg = &w.cfg;
    let lw = &w.layers[layer];
    let mut proj = vec![0.0f32; cfg.d_model];
    matvec(attn_out, &lw.w_o, cfg.d_model, &mut proj);
    for j in 0..cfg.d_model {
        h[j] += proj[j];
    }
    let mut x = vec![0.0f32; cfg.d_model];
    rms_norm(h, &lw.mlp_norm, &mut x);
    let mut up = vec![0.0f32; cfg.d_ff];
    matvec(&x, &lw.w_up, cfg.d_ff, &mut up);
    for u in up.iter_mut() {
        *u = silu(*u);
    }
    let mut down = vec![0.0f32; cfg.d_model];
    matvec(&up, &lw.w_down, cfg.d_model, &mut down);
    for j in 0..cfg.d_model {
        h[j] += down[j];
    }
}

/// Final norm and output projection.
pub fn logits_from_hidden(w: &ModelWeights, h: &[f32]) -> Vec<f32> {
    let cfg = &w.cfg;
    let mut x = vec![0.0f32; cfg.d_model];
    rms_norm(h, &w.final_norm, &mut x);
    let mut logits = vec![0.0f32; cfg.vocab_size];
    matvec(&x, &w.w_out, cfg.vocab_size, &mut logits);
    logits
}

/// Greedy sampling: index of the largest logit, ties to the lower index.
pub fn argmax_logit(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    for i in 1..logits.len() {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Per-layer KV caches, optional label caches, and the recorded input
/// hidden state of every layer (one d_model row per token).
#[derive(Debug, Clone)]
pub struct ModelCaches {
    pub kv: Vec<Vec<KvCacheHead>>, // [layer][kv_head]
    pub labels: Option<Vec<Vec<LabelCacheHead>>>,
    pub hiddens: Vec<Vec<f32>>, // [layer] -> [t * d_model ..]
    len: usize,
}

impl ModelCaches {
    fn new(cfg: &ModelConfig) -> Self {
        ModelCaches {
            kv: (0..cfg.n_layers)
                .map(|_| {
                    (0..cfg.n_heads_kv)
                        .map(|_| KvCacheHead::new(cfg.d_h(), cfg.max_seq))
                        .collect()
                })
                .collect(),
            labels: None,
            hiddens: vec![Vec::new(); cfg.n_layers],
            len: 0,
        }
    }

    /// Tokens currently cached.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Build label caches from the current key caches. Each (layer, KV
    /// head) must have a channel set in the map.
    pub fn attach_labels(&mut self, map: &ChannelMap, quantized: bool) -> Result<()> {
        let mut labels = Vec::with_capacity(self.kv.len());
        for (l, heads) in self.kv.iter().enumerate() {
            let mut row = Vec::with_capacity(heads.len());
            for (h, head) in heads.iter().enumerate() {
                let set = map.get(&(l, h)).ok_or_else(|| {
                    DsError::InvalidConfig(format!(
                        "channel map has no entry for layer {l} head {h}"
                    ))
                })?;
                row.push(LabelCacheHead::build(head.k_matrix(), head.d_h(), set, quantized)?);
            }
            labels.push(row);
        }
        self.labels = Some(labels);
        Ok(())
    }
}

/// Attention dispatch for decode steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMode {
    Full,
    DoubleSparsity,
}

/// Per-layer diagnostics captured by the traced decode path.
#[derive(Debug, Clone, Default)]
pub struct LayerTrace {
    /// Roped query per query head.
    pub queries: Vec<Vec<f32>>,
    /// Roped new key row per KV head.
    pub new_keys: Vec<Vec<f32>>,
    /// Selected context tokens per query head (empty in full mode).
    pub selections: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Default)]
pub struct DecodeTrace {
    pub layers: Vec<LayerTrace>,
}

/// Full causal forward pass over a prompt. Populates the KV caches,
/// records each layer's input hidden state, and returns the last
/// position's logits.
pub fn prefill(w: &ModelWeights, tokens: &[u32]) -> Result<(ModelCaches, Vec<f32>)> {
    let cfg = &w.cfg;
    if tokens.is_empty() {
        return Err(DsError::EmptyDataset);
    }
    if tokens.len() > cfg.max_seq {
        return Err(DsError::CapacityExceeded { capacity: cfg.max_seq });
    }
    let d = cfg.d_model;
    let d_h = cfg.d_h();
    let group = cfg.group_size();
    let mut caches = ModelCaches::new(cfg);

    let mut hidden: Vec<f32> = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        if t as usize >= cfg.vocab_size {
            return Err(DsError::VocabOutOfRange { token: t, vocab: cfg.vocab_size });
        }
        hidden.extend_from_slice(&w.embed[t as usize * d..(t as usize + 1) * d]);
    }

    for l in 0..cfg.n_layers {
        caches.hiddens[l] = hidden.clone();

        // Project and cache every position first.
        let q_stride = cfg.n_heads_q * d_h;
        let mut queries: Vec<f32> = Vec::with_capacity(tokens.len() * q_stride);
        for pos in 0..tokens.len() {
            let h = &hidden[pos * d..(pos + 1) * d];
            queries.extend_from_slice(&query_from_input(w, l, h, pos)?);
            let (k, v) = kv_from_input(w, l, h, pos);
            for kvh in 0..cfg.n_heads_kv {
                caches.kv[l][kvh]
                    .append(&k[kvh * d_h..(kvh + 1) * d_h], &v[kvh * d_h..(kvh + 1) * d_h])?;
            }
        }

        // Causal attention per position over its inclusive prefix.
        for pos in 0..tokens.len() {
            let mut attn_out = vec![0.0f32; q_stride];
            for qh in 0..cfg.n_heads_q {
                let kvh = qh / group;
                let head_cache = &caches.kv[l][kvh];
                let q = &queries[pos * q_stride + qh * d_h..pos * q_stride + (qh + 1) * d_h];
                let k = &head_cache.k_matrix()[..(pos + 1) * d_h];
                let v = &head_cache.v_matrix()[..(pos + 1) * d_h];
                let input = AttentionInput::new(q, k, v, d_h)?;
                attn_out[qh * d_h..(qh + 1) * d_h].copy_from_slice(&full_attention(&input));
            }
            finish_layer(w, l, &attn_out, &mut hidden[pos * d..(pos + 1) * d]);
        }
    }

    caches.len = tokens.len();
    let last = &hidden[(tokens.len() - 1) * d..];
    Ok((caches, logits_from_hidden(w, last)))
}

/// One autoregressive step; returns the logits and per-layer diagnostics.
///
/// In sparse mode, stage one scores the S tokens cached before this step
/// through the label cache, the top k = beta * S of them are gathered, and
/// the step's own token joins the support (its rows were just produced).
/// The ledger is charged per query head: the full-KV scan in full mode,
/// the label scan plus gather in sparse mode.
pub fn decode_step_traced(
    w: &ModelWeights,
    caches: &mut ModelCaches,
    token: u32,
    mode: AttnMode,
    sparsity: Option<&SparsityConfig>,
    ledger: &mut TrafficLedger,
) -> Result<(Vec<f32>, DecodeTrace)> {
    let cfg = &w.cfg;
    if caches.is_empty() {
        return Err(DsError::InvalidConfig(
            "decode requires a prefilled cache".into(),
        ));
    }
    if token as usize >= cfg.vocab_size {
        return Err(DsError::VocabOutOfRange { token, vocab: cfg.vocab_size });
    }
    if mode == AttnMode::DoubleSparsity {
        if caches.labels.is_none() {
            return Err(DsError::InvalidConfig(
                "sparse decode requires attached label caches".into(),
            ));
        }
        if sparsity.is_none() {
            return Err(DsError::InvalidConfig(
                "sparse decode requires a sparsity config".into(),
            ));
        }
    }

    let d = cfg.d_model;
    let d_h = cfg.d_h();
    let group = cfg.group_size();
    let pos = caches.len;
    let mut h = w.embed[token as usize * d..(token as usize + 1) * d].to_vec();
    let mut trace = DecodeTrace::default();

    for l in 0..cfg.n_layers {
        caches.hiddens[l].extend_from_slice(&h);

        let q_all = query_from_input(w, l, &h, pos)?;
        let (k_all, v_all) = kv_from_input(w, l, &h, pos);
        let mut layer_trace = LayerTrace {
            queries: (0..cfg.n_heads_q)
                .map(|qh| q_all[qh * d_h..(qh + 1) * d_h].to_vec())
                .collect(),
            new_keys: (0..cfg.n_heads_kv)
                .map(|kvh| k_all[kvh * d_h..(kvh + 1) * d_h].to_vec())
                .collect(),
            selections: Vec::new(),
        };

        let s_ctx = caches.kv[l][0].len();

        // Stage one runs against the pre-step caches.
        let mut selections: Vec<Vec<usize>> = Vec::new();
        if mode == AttnMode::DoubleSparsity {
            let sp = sparsity.unwrap();
            let labels = caches.labels.as_ref().unwrap();
            let k_sel = sp.top_k(s_ctx);
            for qh in 0..cfg.n_heads_q {
                let kvh = qh / group;
                let label = &labels[l][kvh];
                let scores =
                    approx_scores(&layer_trace.queries[qh], label.channels(), label)?;
                selections.push(argtopk(&scores, k_sel)?);
                ledger.charge_ds_decode(s_ctx, d_h, label.rank(), k_sel);
            }
        }

        // Append the new token to the KV caches and label caches.
        for kvh in 0..cfg.n_heads_kv {
            caches.kv[l][kvh].append(
                &k_all[kvh * d_h..(kvh + 1) * d_h],
                &v_all[kvh * d_h..(kvh + 1) * d_h],
            )?;
        }
        if let Some(labels) = caches.labels.as_mut() {
            for kvh in 0..cfg.n_heads_kv {
                labels[l][kvh].append_row(&k_all[kvh * d_h..(kvh + 1) * d_h])?;
            }
        }

        // Attention per query head.
        let q_stride = cfg.n_heads_q * d_h;
        let mut attn_out = vec![0.0f32; q_stride];
        for qh in 0..cfg.n_heads_q {
            let kvh = qh / group;
            let head_cache = &caches.kv[l][kvh];
            let q = &layer_trace.queries[qh];
            let input =
                AttentionInput::new(q, head_cache.k_matrix(), head_cache.v_matrix(), d_h)?;
            let y = match mode {
                AttnMode::Full => {
                    ledger.charge_full_attention(s_ctx + 1, d_h);
                    full_attention(&input)
                }
                AttnMode::DoubleSparsity => {
                    // Selected context rows plus the step's own row.
                    let mut support = selections[qh].clone();
                    support.push(s_ctx);
                    gather_attend(&input, &support)?
                }
            };
            attn_out[qh * d_h..(qh + 1) * d_h].copy_from_slice(&y);
        }
        layer_trace.selections = selections;
        trace.layers.push(layer_trace);

        finish_layer(w, l, &attn_out, &mut h);
    }

    caches.len += 1;
    Ok((logits_from_hidden(w, &h), trace))
}

/// [`decode_step_traced`] without the diagnostics.
pub fn decode_step(
    w: &ModelWeights,
    caches: &mut ModelCaches,
    token: u32,
    mode: AttnMode,
    sparsity: Option<&SparsityConfig>,
    ledger: &mut TrafficLedger,
) -> Result<Vec<f32>> {
    decode_step_traced(w, caches, token, mode, sparsity, ledger).map(|(logits, _)| logits)
}

/// Mean cosine similarity between each pair of consecutive layers' input
/// hidden states, averaged over tokens. Zero-norm rows contribute 0 and
/// are counted in the second return value.
pub fn layer_cosine_similarity(caches: &ModelCaches, d_model: usize) -> Result<(Vec<f64>, usize)> {
    if caches.hiddens.len() < 2 {
        return Err(DsError::InvalidConfig(
            "similarity needs at least two layers".into(),
        ));
    }
    let tokens = caches.len;
    let mut values = Vec::with_capacity(caches.hiddens.len() - 1);
    let mut zero_rows = 0usize;
    for pair in caches.hiddens.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let mut acc = 0.0f64;
        for t in 0..tokens {
            let (c, zero) = crate::math::cosine(
                &a[t * d_model..(t + 1) * d_model],
                &b[t * d_model..(t + 1) * d_model],
            );
            if zero {
                zero_rows += 1;
            }
            acc += c;
        }
        values.push(acc / tokens as f64);
    }
    Ok((values, zero_rows))
}

/// Serialize weights to DST1 with a JSON config sidecar at `<path>.json`.
pub fn save_model<P: AsRef<Path>>(path: P, w: &ModelWeights) -> Result<()> {
    let cfg = &w.cfg;
    let d = cfg.d_model;
    let d_h = cfg.d_h();
    let mut tensors: Vec<(String, Tensor)> = vec![
        (
            "embed".into(),
            Tensor::from_f32(vec![cfg.vocab_size, d], w.embed.clone())?,
        ),
        ("final_norm".into(), Tensor::from_f32(vec![d], w.final_norm.clone())?),
        (
            "w_out".into(),
            Tensor::from_f32(vec![d, cfg.vocab_size], w.w_out.clone())?,
        ),
    ];
    for (l, lw) in w.layers.iter().enumerate() {
        let qd = cfg.n_heads_q * d_h;
        let kd = cfg.n_heads_kv * d_h;
        tensors.push((format!("layer{l}.w_q"), Tensor::from_f32(vec![d, qd], lw.w_q.clone())?));
        tensors.push((format!("layer{l}.w_k"), Tensor::from_f32(vec![d, kd], lw.w_k.clone())?));
        tensors.push((format!("layer{l}.w_v"), Tensor::from_f32(vec![d, kd], lw.w_v.clone())?));
        tensors.push((format!("layer{l}.w_o"), Tensor::from_f32(vec![qd, d], lw.w_o.clone())?));
        tensors.push((
            format!("layer{l}.w_up"),
            Tensor::from_f32(vec![d, cfg.d_ff], lw.w_up.clone())?,
        ));
        tensors.push((
            format!("layer{l}.w_down"),
            Tensor::from_f32(vec![cfg.d_ff, d], lw.w_down.clone())?,
        ));
        tensors.push((
            format!("layer{l}.attn_norm"),
            Tensor::from_f32(vec![d], lw.attn_norm.clone())?,
        ));
        tensors.push((
            format!("layer{l}.mlp_norm"),
            Tensor::from_f32(vec![d], lw.mlp_norm.clone())?,
        ));
    }
    let refs: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    dst1::save(&path, &refs)?;
    let sidecar = path.as_ref().with_extension("dst1.json");
    let json = serde_json::to_string_pretty(cfg)
        .map_err(|e| DsError::Format(format!("config serialization failed: {e}")))?;
    std::fs::write(sidecar, json + "\n")?;
    Ok(())
}

/// Load weights written by [`save_model`]; the sidecar is required.
pub fn load_model<P: AsRef<Path>>(path: P) -> Result<ModelWeights> {
    let sidecar = path.as_ref().with_extension("dst1.json");
    let cfg_json = std::fs::read_to_string(&sidecar)?;
    let cfg: ModelConfig = serde_json::from_str(&cfg_json)
        .map_err(|e| DsError::Format(format!("bad config sidecar: {e}")))?;
    cfg.validate()?;

    let file = dst1::load(&path)?;
    let need = |name: &str| -> Result<Vec<f32>> {
        Ok(file
            .get(name)
            .ok_or_else(|| DsError::Format(format!("missing tensor {name:?}")))?
            .f32_slice()?
            .to_vec())
    };
    let embed = need("embed")?;
    let final_norm = need("final_norm")?;
    let w_out = need("w_out")?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        layers.push(LayerWeights {
            w_q: need(&format!("layer{l}.w_q"))?,
            w_k: need(&format!("layer{l}.w_k"))?,
            w_v: need(&format!("layer{l}.w_v"))?,
            w_o: need(&format!("layer{l}.w_o"))?,
            w_up: need(&format!("layer{l}.w_up"))?,
            w_down: need(&format!("layer{l}.w_down"))?,
            attn_norm: need(&format!("layer{l}.attn_norm"))?,
            mlp_norm: need(&format!("layer{l}.mlp_norm"))?,
        });
    }
    let w = ModelWeights { cfg, embed, layers, final_norm, w_out };
    let d = cfg.d_model;
    if w.embed.len() != cfg.vocab_size * d || w.w_out.len() != d * cfg.vocab_size {
        return Err(DsError::ShapeMismatch("model tensors do not match config".into()));
    }
    Ok(w)
}
