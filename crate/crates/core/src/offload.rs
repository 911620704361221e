//! Offloaded decoding: the full KV cache lives host-side, the device keeps
//! only the label caches and a two-slot prefetch buffer.
//!
//! While layer l computes, the pipeline predicts layer l+1's query by
//! pushing layer l's input hidden state through layer l+1's query
//! projection (consecutive layers' inputs are highly similar), scores it
//! against layer l+1's label cache, and prefetches the selected KV rows
//! into the free buffer slot. Layer 0 has no predecessor, so its plan uses
//! the true layer-0 query available at step start.
//!
//! The pipeline is expressed as a two-agent handoff: a compute agent (the
//! transformer math) and a prefetch agent (owner of the host store, label
//! caches, and both buffer slots). Slot status transitions are the only
//! synchronization points. The concurrent realization runs the prefetch
//! agent on its own thread fed by an in-order message channel; because
//! every value is computed by exactly one owner in a fixed order, its
//! output is bit-identical to the sequential schedule, and a differential
//! mode asserts exactly that.

use std::sync::mpsc::{Receiver, Sender};

use serde::Serialize;

use crate::attention::{approx_scores, argtopk, SparsityConfig, TopkResult};
use crate::calibration::ChannelMap;
use crate::error::{DsError, Result};
use crate::label_cache::{KvCacheHead, LabelCacheHead};
use crate::math::{dot, softmax_in_place};
use crate::model::{
    self, kv_from_input, query_from_input, ModelCaches, ModelWeights,
};
use crate::traffic::TrafficLedger;

/// Host-resident KV store: every (layer, KV head) cache plus a counter of
/// rows fetched to the device. Device code reads rows only through
/// [`execute_prefetch`], which charges the host-to-device channel.
#[derive(Debug)]
pub struct HostKvStore {
    heads: Vec<Vec<KvCacheHead>>, // [layer][kv_head]
    gather_rows: u64,
}

impl HostKvStore {
    pub fn new(heads: Vec<Vec<KvCacheHead>>) -> Self {
        HostKvStore { heads, gather_rows: 0 }
    }

    /// Tokens currently stored (uniform across layers and heads).
    pub fn len(&self) -> usize {
        self.heads[0][0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_layers(&self) -> usize {
        self.heads.len()
    }

    pub fn d_h(&self) -> usize {
        self.heads[0][0].d_h()
    }

    /// Rows fetched to the device so far (one count per token per head,
    /// covering that token's K and V rows).
    pub fn gather_rows(&self) -> u64 {
        self.gather_rows
    }

    /// Host-side KV bytes under the transfer charge model.
    pub fn kv_bytes(&self, elem_bytes: u64) -> u64 {
        let mut total = 0u64;
        for layer in &self.heads {
            for head in layer {
                total += 2 * head.len() as u64 * head.d_h() as u64 * elem_bytes;
            }
        }
        total
    }

    fn append(&mut self, layer: usize, k_all: &[f32], v_all: &[f32]) -> Result<()> {
        let d_h = self.d_h();
        for (kvh, head) in self.heads[layer].iter_mut().enumerate() {
            head.append(&k_all[kvh * d_h..(kvh + 1) * d_h], &v_all[kvh * d_h..(kvh + 1) * d_h])?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotStatus {
    Empty,
    Prefetching,
    Ready,
    Consumed,
}

/// One prefetch buffer slot: gathered K/V rows per query head for one layer.
#[derive(Debug)]
pub struct BufferSlot {
    pub layer: Option<usize>,
    pub status: SlotStatus,
    pub selections: Vec<Vec<usize>>,
    pub k_rows: Vec<Vec<f32>>,
    pub v_rows: Vec<Vec<f32>>,
    /// Charge-model bytes held while this slot is resident.
    pub charged_bytes: u64,
}

impl BufferSlot {
    pub fn empty() -> Self {
        BufferSlot {
            layer: None,
            status: SlotStatus::Empty,
            selections: Vec::new(),
            k_rows: Vec::new(),
            v_rows: Vec::new(),
            charged_bytes: 0,
        }
    }
}

/// Token selection for one upcoming layer, per query head.
#[derive(Debug, Clone)]
pub struct PrefetchPlan {
    pub layer: usize,
    pub selections: Vec<TopkResult>,
}

/// Predict the next layer's per-head queries from the current layer's
/// input hidden state. This runs the next layer's own query path, so given
/// the true input it reproduces the true query bit-for-bit.
pub fn approx_next_query(
    w: &ModelWeights,
    h_current: &[f32],
    next_layer: usize,
    pos: usize,
) -> Result<Vec<Vec<f32>>> {
    let d_h = w.config().d_h();
    let q = query_from_input(w, next_layer, h_current, pos)?;
    Ok(q.chunks(d_h).map(|c| c.to_vec()).collect())
}

/// Stage-one selection for an upcoming layer: approximate scores and top-k
/// per query head, exactly as the sparse decode would compute them.
pub fn plan_prefetch(
    queries: &[Vec<f32>],
    labels: &[LabelCacheHead],
    cfg: &SparsityConfig,
    layer: usize,
) -> Result<PrefetchPlan> {
    if labels.is_empty() || queries.is_empty() || queries.len() % labels.len() != 0 {
        return Err(DsError::ShapeMismatch(
            "query heads must group evenly onto label heads".into(),
        ));
    }
    let group = queries.len() / labels.len();
    let s = labels[0].len();
    let k = cfg.top_k(s);
    let mut selections = Vec::with_capacity(queries.len());
    for (qh, q) in queries.iter().enumerate() {
        let label = &labels[qh / group];
        let scores = approx_scores(q, label.channels(), label)?;
        let indices = argtopk(&scores, k)?;
        selections.push(TopkResult { indices, approx_scores: scores });
    }
    Ok(PrefetchPlan { layer, selections })
}

/// Gather the planned rows from the host store into a buffer slot and
/// charge the host-to-device channel: heads * 2 * k * d_h * elem bytes.
pub fn execute_prefetch(
    host: &mut HostKvStore,
    plan: &PrefetchPlan,
    slot: &mut BufferSlot,
    ledger: &mut TrafficLedger,
) -> Result<()> {
    if !matches!(slot.status, SlotStatus::Empty | SlotStatus::Consumed) {
        return Err(DsError::SlotBusy);
    }
    slot.status = SlotStatus::Prefetching;

    let heads_q = plan.selections.len();
    let heads_kv = host.heads[plan.layer].len();
    let group = heads_q / heads_kv;
    let d_h = host.d_h();
    let k = plan.selections[0].indices.len();

    let mut k_rows = Vec::with_capacity(heads_q);
    let mut v_rows = Vec::with_capacity(heads_q);
    for (qh, sel) in plan.selections.iter().enumerate() {
        let head = &host.heads[plan.layer][qh / group];
        let mut kg = Vec::with_capacity(k * d_h);
        let mut vg = Vec::with_capacity(k * d_h);
        for &t in &sel.indices {
            if t >= head.len() {
                return Err(DsError::IndexOutOfRange { index: t, s: head.len() });
            }
            kg.extend_from_slice(head.k_row(t));
            vg.extend_from_slice(head.v_row(t));
        }
        k_rows.push(kg);
        v_rows.push(vg);
    }
    host.gather_rows += (heads_q * k) as u64;
    ledger.charge_host_to_device(heads_q, k, d_h);

    slot.layer = Some(plan.layer);
    slot.selections = plan.selections.iter().map(|s| s.indices.clone()).collect();
    slot.k_rows = k_rows;
    slot.v_rows = v_rows;
    slot.charged_bytes =
        heads_q as u64 * 2 * k as u64 * d_h as u64 * ledger.policy().kv_elem_bytes;
    slot.status = SlotStatus::Ready;
    Ok(())
}

/// Everything the prefetch agent owns.
struct DeviceState {
    host: HostKvStore,
    labels: Vec<Vec<LabelCacheHead>>,
    slots: [BufferSlot; 2],
    ledger: TrafficLedger,
    /// Selections that filled each layer's slot this step (for overlap
    /// diagnostics after the slot content has been taken).
    executed: Vec<Vec<Vec<usize>>>,
    jaccard_sum: Vec<f64>,
    jaccard_n: Vec<u64>,
    resident_bytes: u64,
    step_high_water: u64,
    high_water: u64,
    prefetch_count: u64,
    k_max: usize,
}

fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    // Both sorted ascending.
    let mut i = 0;
    let mut j = 0;
    let mut inter = 0usize;
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        return 1.0;
    }
    inter as f64 / union as f64
}

impl DeviceState {
    fn prefetch(
        &mut self,
        cfg: &SparsityConfig,
        layer: usize,
        queries: &[Vec<f32>],
    ) -> Result<()> {
        let plan = plan_prefetch(queries, &self.labels[layer], cfg, layer)?;
        let s = self.labels[layer][0].len();
        let r = self.labels[layer][0].rank();
        for _ in 0..queries.len() {
            self.ledger.charge_label_scan(s, r);
        }
        let slot = &mut self.slots[layer % 2];
        execute_prefetch(&mut self.host, &plan, slot, &mut self.ledger)?;
        self.resident_bytes += slot.charged_bytes;
        self.step_high_water = self.step_high_water.max(self.resident_bytes);
        self.high_water = self.high_water.max(self.resident_bytes);
        self.prefetch_count += 1;
        self.k_max = self.k_max.max(plan.selections[0].indices.len());
        self.executed[layer] = plan.selections.into_iter().map(|s| s.indices).collect();
        Ok(())
    }

    fn take_slot(&mut self, layer: usize) -> Result<SlotContent> {
        let slot = &mut self.slots[layer % 2];
        if slot.status != SlotStatus::Ready || slot.layer != Some(layer) {
            return Err(DsError::BufferNotReady { layer });
        }
        Ok(SlotContent {
            selections: std::mem::take(&mut slot.selections),
            k_rows: std::mem::take(&mut slot.k_rows),
            v_rows: std::mem::take(&mut slot.v_rows),
        })
    }

    /// Compare what the pipeline prefetched for `layer` with what the true
    /// query would have selected through the same label pathway.
    fn exact_selection(
        &mut self,
        cfg: &SparsityConfig,
        layer: usize,
        queries: &[Vec<f32>],
    ) -> Result<()> {
        let labels = &self.labels[layer];
        let group = queries.len() / labels.len();
        let s = labels[0].len();
        let k = cfg.top_k(s);
        for (qh, q) in queries.iter().enumerate() {
            let label = &labels[qh / group];
            let scores = approx_scores(q, label.channels(), label)?;
            let exact = argtopk(&scores, k)?;
            self.jaccard_sum[layer] += jaccard(&self.executed[layer][qh], &exact);
            self.jaccard_n[layer] += 1;
        }
        Ok(())
    }

    fn append(&mut self, layer: usize, k_all: &[f32], v_all: &[f32]) -> Result<()> {
        self.host.append(layer, k_all, v_all)?;
        let d_h = self.host.d_h();
        for (kvh, label) in self.labels[layer].iter_mut().enumerate() {
            label.append_row(&k_all[kvh * d_h..(kvh + 1) * d_h])?;
        }
        Ok(())
    }

    fn consumed(&mut self, layer: usize) -> Result<()> {
        let slot = &mut self.slots[layer % 2];
        if slot.layer != Some(layer) {
            return Err(DsError::BufferNotReady { layer });
        }
        slot.status = SlotStatus::Consumed;
        self.resident_bytes -= slot.charged_bytes;
        slot.charged_bytes = 0;
        Ok(())
    }
}

/// Gathered rows handed from the prefetch agent to the compute agent.
struct SlotContent {
    selections: Vec<Vec<usize>>,
    k_rows: Vec<Vec<f32>>,
    v_rows: Vec<Vec<f32>>,
}

enum ToAgent {
    Prefetch { layer: usize, queries: Vec<Vec<f32>> },
    TakeSlot { layer: usize },
    ExactSelection { layer: usize, queries: Vec<Vec<f32>> },
    Append { layer: usize, k_all: Vec<f32>, v_all: Vec<f32> },
    Consumed { layer: usize },
}

/// The compute agent's view of the device. The inline implementation calls
/// the state directly (sequential schedule); the channel implementation
/// talks to the agent thread (concurrent schedule). Message order is
/// identical in both, so observable behavior is too.
trait DevicePort {
    fn prefetch(&mut self, layer: usize, queries: Vec<Vec<f32>>) -> Result<()>;
    fn take_slot(&mut self, layer: usize) -> Result<SlotContent>;
    fn exact_selection(&mut self, layer: usize, queries: Vec<Vec<f32>>) -> Result<()>;
    fn append(&mut self, layer: usize, k_all: Vec<f32>, v_all: Vec<f32>) -> Result<()>;
    fn consumed(&mut self, layer: usize) -> Result<()>;
}

struct InlinePort<'a> {
    state: &'a mut DeviceState,
    cfg: SparsityConfig,
}

impl DevicePort for InlinePort<'_> {
    fn prefetch(&mut self, layer: usize, queries: Vec<Vec<f32>>) -> Result<()> {
        self.state.prefetch(&self.cfg, layer, &queries)
    }
    fn take_slot(&mut self, layer: usize) -> Result<SlotContent> {
        self.state.take_slot(layer)
    }
    fn exact_selection(&mut self, layer: usize, queries: Vec<Vec<f32>>) -> Result<()> {
        self.state.exact_selection(&self.cfg, layer, &queries)
    }
    fn append(&mut self, layer: usize, k_all: Vec<f32>, v_all: Vec<f32>) -> Result<()> {
        self.state.append(layer, &k_all, &v_all)
    }
    fn consumed(&mut self, layer: usize) -> Result<()> {
        self.state.consumed(layer)
    }
}

struct ChannelPort {
    tx: Sender<ToAgent>,
    rx: Receiver<Result<SlotContent>>,
}

impl ChannelPort {
    fn send(&mut self, msg: ToAgent) -> Result<()> {
        self.tx.send(msg).map_err(|_| DsError::InvalidConfig("prefetch agent terminated".into()))
    }
}

impl DevicePort for ChannelPort {
    fn prefetch(&mut self, layer: usize, queries: Vec<Vec<f32>>) -> Result<()> {
        self.send(ToAgent::Prefetch { layer, queries })
    }
    fn take_slot(&mut self, layer: usize) -> Result<SlotContent> {
        self.send(ToAgent::TakeSlot { layer })?;
        self.rx
            .recv()
            .map_err(|_| DsError::InvalidConfig("prefetch agent terminated".into()))?
    }
    fn exact_selection(&mut self, layer: usize, queries: Vec<Vec<f32>>) -> Result<()> {
        self.send(ToAgent::ExactSelection { layer, queries })
    }
    fn append(&mut self, layer: usize, k_all: Vec<f32>, v_all: Vec<f32>) -> Result<()> {
        self.send(ToAgent::Append { layer, k_all, v_all })
    }
    fn consumed(&mut self, layer: usize) -> Result<()> {
        self.send(ToAgent::Consumed { layer })
    }
}

fn run_agent(
    mut state: DeviceState,
    cfg: SparsityConfig,
    rx: Receiver<ToAgent>,
    tx: Sender<Result<SlotContent>>,
) -> (DeviceState, Result<()>) {
    while let Ok(msg) = rx.recv() {
        let outcome = match msg {
            ToAgent::Prefetch { layer, queries } => state.prefetch(&cfg, layer, &queries),
            ToAgent::TakeSlot { layer } => {
                let content = state.take_slot(layer);
                let failed = content.is_err();
                // The compute agent is blocked on this reply either way.
                let _ = tx.send(content);
                if failed {
                    return (state, Err(DsError::BufferNotReady { layer }));
                }
                Ok(())
            }
            ToAgent::ExactSelection { layer, queries } => {
                state.exact_selection(&cfg, layer, &queries)
            }
            ToAgent::Append { layer, k_all, v_all } => state.append(layer, &k_all, &v_all),
            ToAgent::Consumed { layer } => state.consumed(layer),
        };
        if let Err(e) = outcome {
            // Dropping tx unblocks a compute agent waiting on a slot.
            drop(tx);
            return (state, Err(e));
        }
    }
    (state, Ok(()))
}

/// Exact attention over the gathered rows plus the step's own K/V row.
/// The self row sits last, which keeps the support in ascending token
/// order — the same arithmetic order as the non-offload sparse path.
fn attend_gathered(
    q: &[f32],
    k_gathered: &[f32],
    v_gathered: &[f32],
    self_k: &[f32],
    self_v: &[f32],
    d_h: usize,
) -> Vec<f32> {
    let k = k_gathered.len() / d_h;
    let scale = 1.0 / (d_h as f32).sqrt();
    let mut scores = Vec::with_capacity(k + 1);
    for i in 0..k {
        scores.push(dot(q, &k_gathered[i * d_h..(i + 1) * d_h]) * scale);
    }
    scores.push(dot(q, self_k) * scale);
    softmax_in_place(&mut scores);
    let mut y = vec![0.0f32; d_h];
    for i in 0..k {
        let row = &v_gathered[i * d_h..(i + 1) * d_h];
        for j in 0..d_h {
            y[j] += scores[i] * row[j];
        }
    }
    for j in 0..d_h {
        y[j] += scores[k] * self_v[j];
    }
    y
}

fn run_step<P: DevicePort>(
    w: &ModelWeights,
    force_exact_query: bool,
    token: u32,
    pos: usize,
    port: &mut P,
) -> Result<Vec<f32>> {
    let cfg = w.config();
    if token as usize >= cfg.vocab_size {
        return Err(DsError::VocabOutOfRange { token, vocab: cfg.vocab_size });
    }
    let d = cfg.d_model;
    let d_h = cfg.d_h();
    let group = cfg.group_size();
    let mut h = w.embed[token as usize * d..(token as usize + 1) * d].to_vec();

    // Layer 0 has no predecessor: prime its slot from the true layer-0
    // query, available immediately at step start.
    port.prefetch(0, approx_next_query(w, &h, 0, pos)?)?;

    for l in 0..cfg.n_layers {
        let content = port.take_slot(l)?;

        // Plan the next layer from this layer's input so the transfer can
        // overlap with this layer's compute.
        if !force_exact_query && l + 1 < cfg.n_layers {
            port.prefetch(l + 1, approx_next_query(w, &h, l + 1, pos)?)?;
        }

        let q_all = query_from_input(w, l, &h, pos)?;
        let (k_all, v_all) = kv_from_input(w, l, &h, pos);
        let queries: Vec<Vec<f32>> = q_all.chunks(d_h).map(|c| c.to_vec()).collect();
        port.exact_selection(l, queries.clone())?;
        port.append(l, k_all.clone(), v_all.clone())?;

        let mut attn_out = vec![0.0f32; cfg.n_heads_q * d_h];
        for qh in 0..cfg.n_heads_q {
            let kvh = qh / group;
            let y = attend_gathered(
                &queries[qh],
                &content.k_rows[qh],
                &content.v_rows[qh],
                &k_all[kvh * d_h..(kvh + 1) * d_h],
                &v_all[kvh * d_h..(kvh + 1) * d_h],
                d_h,
            );
            attn_out[qh * d_h..(qh + 1) * d_h].copy_from_slice(&y);
        }
        port.consumed(l)?;

        model::finish_layer(w, l, &attn_out, &mut h);

        // Without overlap, the exact-query option plans from this layer's
        // output — the true input of the next layer.
        if force_exact_query && l + 1 < cfg.n_layers {
            port.prefetch(l + 1, approx_next_query(w, &h, l + 1, pos)?)?;
        }
    }

    Ok(model::logits_from_hidden(w, &h))
}

/// Cumulative pipeline statistics.
#[derive(Debug, Clone, Serialize)]
pub struct OffloadStats {
    pub steps: u64,
    pub per_layer_mean_jaccard: Vec<f64>,
    pub device_high_water_bytes: u64,
    pub per_step_high_water_bytes: Vec<u64>,
    /// 2 slots * heads * 2 * k_max * d_h * elem bytes.
    pub device_slot_bound_bytes: u64,
    pub gather_rows: u64,
    pub prefetch_count: u64,
    pub host_kv_bytes: u64,
    pub label_bytes: u64,
}

/// Drives offloaded decode steps against host-resident KV caches.
pub struct OffloadEngine<'w> {
    weights: &'w ModelWeights,
    cfg: SparsityConfig,
    force_exact_query: bool,
    device: Option<DeviceState>,
    scale_bytes: u64,
    steps: u64,
    per_step_high_water: Vec<u64>,
    len: usize,
}

impl<'w> OffloadEngine<'w> {
    /// Move a prefilled cache set into the offload layout: KV host-side,
    /// labels (built from `map`) device-side.
    pub fn new(
        weights: &'w ModelWeights,
        mut caches: ModelCaches,
        map: &ChannelMap,
        cfg: SparsityConfig,
        quantized: bool,
        force_exact_query: bool,
    ) -> Result<Self> {
        if caches.is_empty() {
            return Err(DsError::InvalidConfig("offload requires a prefilled cache".into()));
        }
        caches.attach_labels(map, quantized)?;
        let labels = caches.labels.take().unwrap();
        let len = caches.len();
        let mcfg = weights.config();
        let n_layers = mcfg.n_layers;
        let host = HostKvStore::new(std::mem::take(&mut caches.kv));
        let ledger = TrafficLedger::new();
        let scale_bytes = ledger.policy().scale_bytes;
        Ok(OffloadEngine {
            weights,
            cfg,
            force_exact_query,
            device: Some(DeviceState {
                host,
                labels,
                slots: [BufferSlot::empty(), BufferSlot::empty()],
                ledger,
                executed: vec![Vec::new(); n_layers],
                jaccard_sum: vec![0.0; n_layers],
                jaccard_n: vec![0; n_layers],
                resident_bytes: 0,
                step_high_water: 0,
                high_water: 0,
                prefetch_count: 0,
                k_max: 0,
            }),
            scale_bytes,
            steps: 0,
            per_step_high_water: Vec::new(),
            len,
        })
    }

    /// Tokens currently cached host-side.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// One decode step. `concurrent` runs the prefetch agent on its own
    /// thread; the sequential schedule is the differential reference.
    pub fn decode_step(
        &mut self,
        token: u32,
        concurrent: bool,
        ledger: &mut TrafficLedger,
    ) -> Result<Vec<f32>> {
        let pos = self.len;
        let mut state = self.device.take().expect("device state present");
        state.step_high_water = 0;

        let outcome = if concurrent {
            let cfg = self.cfg;
            let weights = self.weights;
            let force = self.force_exact_query;
            std::thread::scope(|scope| {
                let (to_agent_tx, to_agent_rx) = std::sync::mpsc::channel();
                let (content_tx, content_rx) = std::sync::mpsc::channel();
                let agent =
                    scope.spawn(move || run_agent(state, cfg, to_agent_rx, content_tx));
                let mut port = ChannelPort { tx: to_agent_tx, rx: content_rx };
                let logits = run_step(weights, force, token, pos, &mut port);
                drop(port);
                let (state_back, agent_result) = agent.join().expect("agent panicked");
                // The agent's error explains a dropped channel better than
                // the compute side's view of it.
                let logits = match agent_result {
                    Err(e) => Err(e),
                    Ok(()) => logits,
                };
                (state_back, logits)
            })
        } else {
            let mut port = InlinePort { state: &mut state, cfg: self.cfg };
            let logits = run_step(self.weights, self.force_exact_query, token, pos, &mut port);
            (state, logits)
        };

        let (state, logits) = outcome;
        self.per_step_high_water.push(state.step_high_water);
        self.device = Some(state);
        let logits = logits?;
        ledger.merge(&self.device.as_ref().unwrap().ledger);
        self.device.as_mut().unwrap().ledger.reset();
        self.len += 1;
        self.steps += 1;
        Ok(logits)
    }

    /// Selections the pipeline used for each layer in the most recent step.
    pub fn last_selections(&self) -> Vec<Vec<Vec<usize>>> {
        self.device.as_ref().expect("device state present").executed.clone()
    }

    pub fn stats(&self) -> OffloadStats {
        let state = self.device.as_ref().expect("device state present");
        let mcfg = self.weights.config();
        let elem = 2u64;
        let label_bytes: u64 = state
            .labels
            .iter()
            .flatten()
            .map(|l| l.byte_footprint(self.scale_bytes))
            .sum();
        OffloadStats {
            steps: self.steps,
            per_layer_mean_jaccard: state
                .jaccard_sum
                .iter()
                .zip(&state.jaccard_n)
                .map(|(s, &n)| if n == 0 { 1.0 } else { s / n as f64 })
                .collect(),
            device_high_water_bytes: state.high_water,
            per_step_high_water_bytes: self.per_step_high_water.clone(),
            device_slot_bound_bytes: 2
                * mcfg.n_heads_q as u64
                * 2
                * state.k_max as u64
                * mcfg.d_h() as u64
                * elem,
            gather_rows: state.host.gather_rows(),
            prefetch_count: state.prefetch_count,
            host_kv_bytes: state.host.kv_bytes(elem),
            label_bytes,
        }
    }
}
