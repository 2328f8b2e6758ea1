//! Self-supervised link prediction over all hop scales and event-level verdicts.
//!
//! Training walks the train stream in batches of roughly `batch_size` edges. For every
//! observed edge it samples corrupted destinations, scores both with a shared link head
//! on `[z_src ‖ z_dst ‖ e]`, and minimizes binary cross-entropy. Embeddings read the
//! memory as it stood before the batch; the batch's messages are folded into memory
//! afterwards. Detection scores every edge that ends at a test event and flags the
//! event when any hop's probability drops below the threshold.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{LogLevel, SemanticVector};
use crate::error::{Error, Result};
use crate::graph::{CooccurrenceTable, EventKind, FeatureContext, GraphEvent, HopSet, LEVEL_FEATURES, SCALAR_FEATURES};
use crate::nn::{bce_with_logit, sigmoid, AdamConfig, Grads, LinkHead, ParamStore};
use crate::tgn::{EmbedCache, MemoryState, Message, NeighborEntry, TgnConfig, TgnModel, UpdateRecord};

/// Which edge-feature blocks the model may see; a disabled block is zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureMask {
    pub ss: bool,
    pub cf: bool,
    pub ti: bool,
    pub ll: bool,
}

impl Default for FeatureMask {
    fn default() -> Self {
        FeatureMask {
            ss: true,
            cf: true,
            ti: true,
            ll: true,
        }
    }
}

impl FeatureMask {
    pub fn apply(&self, features: &mut [f64]) {
        if !self.ss {
            features[0] = 0.0;
        }
        if !self.cf {
            features[1] = 0.0;
        }
        if !self.ti {
            features[2] = 0.0;
        }
        if !self.ll {
            features[SCALAR_FEATURES..SCALAR_FEATURES + LEVEL_FEATURES].fill(0.0);
        }
    }
}

/// Learning-rate schedule over the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate towards zero across all epochs.
    Cosine,
}

/// Interval assigned to a corrupted edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeInterval {
    /// Reuse the observed edge's interval.
    Matched,
    /// Time from the source occurrence to the corrupted destination's latest occurrence.
    History,
    /// Each corrupted edge uses the history interval with probability `history_share`.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hops: Vec<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub negatives: usize,
    pub negative_interval: NegativeInterval,
    pub history_share: f64,
    pub threshold: f64,
    pub seed: u64,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    /// Initialize memory rows with semantic vectors; zero vectors otherwise.
    pub semantic_init: bool,
    /// Back-propagate into the memory updater through the latest memory update.
    pub memory_grad: bool,
    /// Leave events labeled anomalous out of the training loss when labels exist.
    pub clean_training: bool,
    pub features: FeatureMask,
    pub head_hidden: usize,
    /// Start the link head's output layer at zero (every pair scores 0.5).
    pub zero_head: bool,
    pub tgn: TgnConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hops: vec![0, 1],
            batch_size: 200,
            epochs: 5,
            negatives: 1,
            negative_interval: NegativeInterval::Mixed,
            history_share: 0.3,
            threshold: 0.5,
            seed: 0,
            learning_rate: 0.01,
            lr_schedule: LrSchedule::Cosine,
            semantic_init: true,
            memory_grad: false,
            clean_training: true,
            features: FeatureMask::default(),
            head_hidden: TgnConfig::default().dim,
            zero_head: false,
            tgn: TgnConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<HopSet> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.negatives == 0 {
            return Err(Error::Config("negatives per positive must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.history_share) {
            return Err(Error::Config("history share must lie in [0, 1]".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        HopSet::new(self.hops.iter().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Normal,
    Anomaly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub seq_index: usize,
    pub timestamp: f64,
    pub template_id: usize,
    /// `(hop, probability)` in ascending hop order.
    pub probabilities: Vec<(usize, f64)>,
    pub decision: Decision,
    pub trigger_hop: Option<usize>,
}

/// Applies the decision rule: anomaly iff some `p_H < threshold`. The trigger is the
/// hop with the lowest probability (smallest hop on ties).
pub fn decide(probabilities: &[(usize, f64)], threshold: f64) -> (Decision, Option<usize>) {
    let lowest = probabilities
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    match lowest {
        Some((hop, p)) if p < threshold => (Decision::Anomaly, Some(hop)),
        _ => (Decision::Normal, None),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub positive_accuracy: f64,
    pub negative_accuracy: f64,
    pub batches: usize,
}

/// Node attributes for the whole template universe (train and test templates).
#[derive(Debug, Clone, Copy)]
pub struct NodeTable<'a> {
    pub embeddings: &'a [SemanticVector],
    pub levels: &'a [LogLevel],
    pub table: &'a CooccurrenceTable,
}

/// A positive or corrupted edge awaiting a score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateEdge {
    pub src: usize,
    pub dst: usize,
    pub timestamp: f64,
    pub hop: usize,
}

/// Draws `k` corrupted destinations per positive, uniform over `0..universe` minus the
/// true destination. Returns nothing when the universe has fewer than two nodes.
pub fn sample_negatives<R: Rng>(positives: &[CandidateEdge], universe: usize, k: usize, rng: &mut R) -> Vec<CandidateEdge> {
    if universe < 2 {
        log::warn!("node universe of size {universe}; skipping negative sampling");
        return Vec::new();
    }
    let mut out = Vec::with_capacity(positives.len() * k);
    for p in positives {
        for _ in 0..k {
            let mut d = rng.random_range(0..universe - 1);
            if d >= p.dst {
                d += 1;
            }
            out.push(CandidateEdge { dst: d, ..*p });
        }
    }
    out
}

/// Contiguous runs of events sharing a destination position.
fn groups(events: &[GraphEvent]) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=events.len() {
        if i == events.len() || events[i].seq_index != events[start].seq_index {
            if start < i {
                out.push(start..i);
            }
            start = i;
        }
    }
    out
}

/// Batches of whole groups holding at least `batch_size` edges (the last may hold fewer).
fn batches(events: &[GraphEvent], batch_size: usize) -> Vec<Vec<std::ops::Range<usize>>> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    let mut edges = 0;
    for g in groups(events) {
        edges += events[g.clone()].iter().filter(|e| e.is_edge()).count();
        current.push(g);
        if edges >= batch_size {
            out.push(std::mem::take(&mut current));
            edges = 0;
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

fn check_stream(events: &[GraphEvent]) -> Result<()> {
    for w in events.windows(2) {
        if crate::graph::event_order(&w[0], &w[1]) == std::cmp::Ordering::Greater {
            return Err(Error::contract(format!(
                "event stream is not in order at seq_index {}",
                w[1].seq_index
            )));
        }
    }
    Ok(())
}

struct EmbedSlot {
    z: Vec<f64>,
    cache: EmbedCache,
    dz: Vec<f64>,
}

/// Per-column standardization of edge feature vectors, fitted on the training edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureScaler {
    pub fn identity(len: usize) -> Self {
        FeatureScaler {
            mean: vec![0.0; len],
            scale: vec![1.0; len],
        }
    }

    /// Columns with no spread keep unit scale.
    pub fn fit<'a>(len: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; len];
        let mut sq = vec![0.0; len];
        for row in rows {
            n += 1;
            for (j, x) in row.iter().enumerate().take(len) {
                sum[j] += x;
                sq[j] += x * x;
            }
        }
        if n == 0 {
            return Self::identity(len);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let sd = (q / n as f64 - m * m).max(0.0).sqrt();
                if sd > 1e-12 { sd } else { 1.0 }
            })
            .collect();
        FeatureScaler { mean, scale }
    }

    pub fn apply(&self, v: &mut [f64]) {
        for ((x, m), s) in v.iter_mut().zip(&self.mean).zip(&self.scale) {
            *x = (*x - m) / s;
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    scaler: FeatureScaler,
}

/// One scored example of a training batch.
struct Scored {
    src_slot: usize,
    dst_slot: usize,
    head_cache: crate::nn::LinkHeadCache,
    label: f64,
    logit: f64,
}

/// Trained (or trainable) parameters plus the configuration that shaped them.
#[derive(Debug, Clone)]
pub struct Detector {
    pub config: TrainConfig,
    pub hops: HopSet,
    pub store: ParamStore,
    pub tgn: TgnModel,
    pub head: LinkHead,
    pub scaler: FeatureScaler,
}

impl Detector {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let hops = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let edge_dim = hops.feature_len();
        let tgn = TgnModel::new(&mut store, config.tgn, edge_dim, &mut rng)?;
        let head = LinkHead::new(&mut store, "link", 2 * config.tgn.dim + edge_dim, config.head_hidden, &mut rng)?;
        if config.zero_head {
            head.zero_output(&mut store);
        }
        Ok(Detector {
            config,
            hops,
            store,
            tgn,
            head,
            scaler: FeatureScaler::identity(edge_dim),
        })
    }

    pub fn edge_dim(&self) -> usize {
        self.hops.feature_len()
    }

    /// Optimizer settings for a step at `progress` in `[0, 1)` of the run.
    fn adam(&self, progress: f64) -> AdamConfig {
        let scale = match self.config.lr_schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
        };
        AdamConfig {
            lr: self.config.learning_rate * scale,
            ..AdamConfig::default()
        }
    }

    /// Memory row for a node entering the graph.
    pub fn initial_vector(&self, v: &SemanticVector) -> Result<Vec<f64>> {
        if v.dim() != self.config.tgn.dim {
            return Err(Error::contract(format!(
                "semantic vectors have dimension {}, model expects {}",
                v.dim(),
                self.config.tgn.dim
            )));
        }
        Ok(if self.config.semantic_init {
            v.as_slice().to_vec()
        } else {
            vec![0.0; v.dim()]
        })
    }

    /// Memory holding the first `known` templates, all last updated at time 0.
    pub fn initial_memory(&self, nodes: &NodeTable<'_>, known: usize) -> Result<MemoryState> {
        let mut m = MemoryState::new(self.config.tgn.dim, self.config.tgn.neighbors);
        for id in 0..known {
            let v = nodes.embeddings.get(id).ok_or_else(|| Error::MissingEmbedding {
                id,
                text: String::new(),
            })?;
            self.insert_node(&mut m, v, 0.0)?;
        }
        Ok(m)
    }

    /// `sigmoid(f([z_i ‖ z_j ‖ e]))`.
    pub fn predict_link(&self, z_i: &[f64], z_j: &[f64], features: &[f64]) -> Result<f64> {
        let input = [z_i, z_j, features].concat();
        Ok(sigmoid(self.head.forward(&self.store, &input)?.0))
    }

    fn masked(&self, e: &GraphEvent) -> Result<(Vec<f64>, f64)> {
        let (mut v, dt) = self.masked_raw(e)?;
        self.scaler.apply(&mut v);
        Ok((v, dt))
    }

    fn masked_raw(&self, e: &GraphEvent) -> Result<(Vec<f64>, f64)> {
        let f = e
            .features
            .as_ref()
            .ok_or_else(|| Error::contract("edge event without features"))?;
        if f.hop_onehot.len() != self.hops.len() {
            return Err(Error::contract(format!(
                "edge features carry {} hop channels, model has {}",
                f.hop_onehot.len(),
                self.hops.len()
            )));
        }
        let mut v = f.to_vec();
        self.config.features.apply(&mut v);
        Ok((v, f.ti_norm.exp_m1()))
    }

    /// Features of a corrupted edge. With `history`, its interval runs from the source
    /// occurrence to the corrupted destination's latest occurrence.
    fn negative_features(
        &self,
        ctx: &FeatureContext<'_>,
        memory: &MemoryState,
        neg: &CandidateEdge,
        dt_pos: f64,
        history: bool,
    ) -> Result<Vec<f64>> {
        let t_src = neg.timestamp - dt_pos;
        let dt = match memory.last_seen(neg.dst)? {
            Some(seen) if history => (t_src - seen).abs(),
            _ => dt_pos,
        };
        let mut v = ctx.features(neg.src, neg.dst, neg.hop, dt)?.to_vec();
        self.config.features.apply(&mut v);
        self.scaler.apply(&mut v);
        Ok(v)
    }

    fn insert_node(&self, memory: &mut MemoryState, v: &SemanticVector, now: f64) -> Result<usize> {
        let init = self.initial_vector(v)?;
        memory.add_node(&init, now)
    }

    fn add_nodes(&self, nodes: &NodeTable<'_>, memory: &mut MemoryState, group: &[GraphEvent]) -> Result<()> {
        for e in group.iter().filter(|e| e.kind == EventKind::NodeAdd) {
            if e.src < memory.len() {
                continue;
            }
            if e.src != memory.len() {
                return Err(Error::contract(format!(
                    "node {} added out of order (memory holds {})",
                    e.src,
                    memory.len()
                )));
            }
            let v = nodes.embeddings.get(e.src).ok_or_else(|| Error::MissingEmbedding {
                id: e.src,
                text: String::new(),
            })?;
            self.insert_node(memory, v, e.timestamp)?;
        }
        Ok(())
    }

    /// Records a scored group in the neighbor buffers and queues its messages.
    fn absorb_group(
        &self,
        memory: &mut MemoryState,
        group: &[GraphEvent],
        pending: &mut Vec<(usize, Message)>,
        order: &mut usize,
    ) -> Result<()> {
        for e in group.iter().filter(|e| e.is_edge()) {
            let (f, _) = self.masked(e)?;
            let (to_dst, to_src) =
                self.tgn
                    .compute_messages(&self.store, memory, e.src, e.dst, e.timestamp, e.seq_index, *order, &f)?;
            *order += 1;
            pending.push((e.dst, to_dst));
            pending.push((e.src, to_src));
            memory.push_neighbor(
                e.dst,
                NeighborEntry {
                    node: e.src,
                    timestamp: e.timestamp,
                    seq_index: e.seq_index,
                    features: f,
                },
            )?;
        }
        if let Some(e) = group.iter().find(|e| e.is_edge()) {
            memory.mark_seen(e.dst, e.timestamp)?;
        }
        Ok(())
    }

    fn flush(&self, memory: &mut MemoryState, pending: &mut Vec<(usize, Message)>) -> Result<Vec<UpdateRecord>> {
        self.tgn.apply_messages(&self.store, memory, std::mem::take(pending))
    }

    /// One pass over the train stream. `memory` must already hold the known nodes.
    /// Edges ending at a position in `excluded` are not used as training examples but
    /// still update memory.
    pub fn train_epoch(
        &mut self,
        events: &[GraphEvent],
        excluded: &BTreeSet<usize>,
        memory: &mut MemoryState,
        nodes: &NodeTable<'_>,
        epoch: usize,
    ) -> Result<EpochMetrics> {
        check_stream(events)?;
        let ctx = FeatureContext {
            embeddings: nodes.embeddings,
            levels: nodes.levels,
            table: nodes.table,
            hops: &self.hops,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (0x9e37_79b9 + epoch as u64));
        let mut pending = Vec::new();
        let mut order = 0;
        let (mut loss_sum, mut n_examples) = (0.0, 0usize);
        let (mut pos_ok, mut pos_n, mut neg_ok, mut neg_n) = (0usize, 0usize, 0usize, 0usize);
        let all_batches = batches(events, self.config.batch_size);
        for (bi, batch) in all_batches.iter().enumerate() {
            let records = self.flush(memory, &mut pending)?;
            let mut slots: Vec<EmbedSlot> = Vec::new();
            let mut slot_of: HashMap<(usize, usize), usize> = HashMap::new();
            let mut scored: Vec<Scored> = Vec::new();
            for g in batch {
                let group = &events[g.clone()];
                self.add_nodes(nodes, memory, group)?;
                for e in group.iter().filter(|e| e.is_edge() && !excluded.contains(&e.seq_index)) {
                    let (f, dt) = self.masked(e)?;
                    let pos = CandidateEdge {
                        src: e.src,
                        dst: e.dst,
                        timestamp: e.timestamp,
                        hop: e.hop,
                    };
                    let negs = sample_negatives(&[pos], memory.len(), self.config.negatives, &mut rng);
                    let mut examples = vec![(pos, f, 1.0)];
                    for n in negs {
                        let history = match self.config.negative_interval {
                            NegativeInterval::Matched => false,
                            NegativeInterval::History => true,
                            NegativeInterval::Mixed => rng.random_bool(self.config.history_share),
                        };
                        let nf = self.negative_features(&ctx, memory, &n, dt, history)?;
                        examples.push((n, nf, 0.0));
                    }
                    for (cand, feats, label) in examples {
                        let mut slot = |node: usize| -> Result<usize> {
                            if let Some(&s) = slot_of.get(&(node, e.seq_index)) {
                                return Ok(s);
                            }
                            let (z, cache) = self.tgn.embed_with_cache(&self.store, memory, node, e.timestamp)?;
                            let dim = z.len();
                            slots.push(EmbedSlot { z, cache, dz: vec![0.0; dim] });
                            slot_of.insert((node, e.seq_index), slots.len() - 1);
                            Ok(slots.len() - 1)
                        };
                        let s = slot(cand.src)?;
                        let d = slot(cand.dst)?;
                        let input = [slots[s].z.as_slice(), slots[d].z.as_slice(), feats.as_slice()].concat();
                        let (logit, head_cache) = self.head.forward(&self.store, &input)?;
                        scored.push(Scored {
                            src_slot: s,
                            dst_slot: d,
                            head_cache,
                            label,
                            logit,
                        });
                    }
                }
                self.absorb_group(memory, group, &mut pending, &mut order)?;
            }
            if scored.is_empty() {
                continue;
            }

            let mut grads = self.store.zero_grads();
            let n = scored.len() as f64;
            let mut batch_loss = 0.0;
            let dim = self.config.tgn.dim;
            for s in &scored {
                let (loss, dlogit) = bce_with_logit(s.logit, s.label);
                batch_loss += loss;
                if s.label == 1.0 {
                    pos_n += 1;
                    pos_ok += usize::from(s.logit >= 0.0);
                } else {
                    neg_n += 1;
                    neg_ok += usize::from(s.logit < 0.0);
                }
                let dinput = self.head.backward(&self.store, &mut grads, &s.head_cache, dlogit / n)?;
                for (a, b) in slots[s.src_slot].dz.iter_mut().zip(&dinput[..dim]) {
                    *a += b;
                }
                for (a, b) in slots[s.dst_slot].dz.iter_mut().zip(&dinput[dim..2 * dim]) {
                    *a += b;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss in epoch {epoch}, batch {bi} ({} examples)",
                    scored.len()
                )));
            }
            loss_sum += batch_loss;
            n_examples += scored.len();

            let mut memory_grads: HashMap<usize, Vec<f64>> = HashMap::new();
            for slot in &slots {
                for (node, ds) in self.tgn.embed_backward(&self.store, &mut grads, &slot.cache, &slot.dz)? {
                    if self.config.memory_grad {
                        let acc = memory_grads.entry(node).or_insert_with(|| vec![0.0; dim]);
                        for (a, b) in acc.iter_mut().zip(&ds) {
                            *a += b;
                        }
                    }
                }
            }
            if self.config.memory_grad {
                self.backprop_updates(&mut grads, &records, &memory_grads)?;
            }
            let progress = (epoch * all_batches.len() + bi) as f64 / (self.config.epochs.max(1) * all_batches.len()) as f64;
            self.store.adam_step(&grads, &self.adam(progress)).map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("{msg} (epoch {epoch}, batch {bi})")),
                other => other,
            })?;
        }
        self.flush(memory, &mut pending)?;
        let ratio = |ok: usize, n: usize| if n == 0 { 0.0 } else { ok as f64 / n as f64 };
        Ok(EpochMetrics {
            epoch,
            mean_loss: if n_examples == 0 { 0.0 } else { loss_sum / n_examples as f64 },
            positive_accuracy: ratio(pos_ok, pos_n),
            negative_accuracy: ratio(neg_ok, neg_n),
            batches: all_batches.len(),
        })
    }

    fn backprop_updates(&self, grads: &mut Grads, records: &[UpdateRecord], memory_grads: &HashMap<usize, Vec<f64>>) -> Result<()> {
        for r in records {
            if let Some(ds) = memory_grads.get(&r.node) {
                self.tgn.gru.backward(&self.store, grads, &r.cache, ds)?;
            }
        }
        Ok(())
    }

    /// Runs all epochs; memory is reset to its initial rows before each epoch. Returns
    /// the memory at the end of the last epoch.
    pub fn train(
        &mut self,
        events: &[GraphEvent],
        excluded: &BTreeSet<usize>,
        nodes: &NodeTable<'_>,
        known: usize,
    ) -> Result<(MemoryState, Vec<EpochMetrics>)> {
        let rows = events
            .iter()
            .filter(|e| e.is_edge())
            .map(|e| self.masked_raw(e).map(|(v, _)| v))
            .collect::<Result<Vec<_>>>()?;
        self.scaler = FeatureScaler::fit(self.edge_dim(), rows.iter().map(Vec::as_slice));
        let mut metrics = Vec::with_capacity(self.config.epochs);
        let mut memory = self.initial_memory(nodes, known)?;
        for epoch in 0..self.config.epochs {
            memory = self.initial_memory(nodes, known)?;
            let m = self.train_epoch(events, excluded, &mut memory, nodes, epoch)?;
            log::info!(
                "epoch {epoch}: loss {:.4}, positive acc {:.3}, negative acc {:.3}",
                m.mean_loss,
                m.positive_accuracy,
                m.negative_accuracy
            );
            metrics.push(m);
        }
        Ok((memory, metrics))
    }

    /// Scores every edge ending at each event of the stream and keeps updating memory.
    pub fn detect(&self, events: &[GraphEvent], memory: &mut MemoryState, nodes: &NodeTable<'_>) -> Result<Vec<Verdict>> {
        check_stream(events)?;
        let mut verdicts = Vec::new();
        let mut pending = Vec::new();
        let mut order = 0;
        for batch in batches(events, self.config.batch_size) {
            self.flush(memory, &mut pending)?;
            for g in batch {
                let group = &events[g];
                self.add_nodes(nodes, memory, group)?;
                let mut embedded: HashMap<usize, Vec<f64>> = HashMap::new();
                let mut probabilities = Vec::new();
                for e in group.iter().filter(|e| e.is_edge()) {
                    let (f, _) = self.masked(e)?;
                    for node in [e.src, e.dst] {
                        if !embedded.contains_key(&node) {
                            let z = self.tgn.embed_node(&self.store, memory, node, e.timestamp)?;
                            embedded.insert(node, z);
                        }
                    }
                    let p = self.predict_link(&embedded[&e.src], &embedded[&e.dst], &f)?;
                    probabilities.push((e.hop, p));
                }
                if let Some(first) = group.iter().find(|e| e.is_edge()) {
                    probabilities.sort_by_key(|&(h, _)| h);
                    let (decision, trigger_hop) = decide(&probabilities, self.config.threshold);
                    verdicts.push(Verdict {
                        seq_index: first.seq_index,
                        timestamp: first.timestamp,
                        template_id: first.dst,
                        probabilities,
                        decision,
                        trigger_hop,
                    });
                }
                self.absorb_group(memory, group, &mut pending, &mut order)?;
            }
        }
        self.flush(memory, &mut pending)?;
        Ok(verdicts)
    }

    /// Parameters, optimizer state, configuration and feature scaling in one file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&CheckpointMeta {
            config: self.config.clone(),
            scaler: self.scaler.clone(),
        })?;
        self.store.save(path, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = ParamStore::load(path)?;
        let CheckpointMeta { config, scaler } = serde_json::from_str(&meta)?;
        let mut det = Detector::new(config)?;
        if scaler.mean.len() != det.edge_dim() || scaler.scale.len() != det.edge_dim() {
            return Err(Error::format("feature scaling does not match the edge width"));
        }
        det.scaler = scaler;
        if det.store.len() != store.len() {
            return Err(Error::format(format!(
                "checkpoint holds {} tensors, configuration expects {}",
                store.len(),
                det.store.len()
            )));
        }
        for id in det.store.ids() {
            let other = store.find(det.store.name(id)).ok_or_else(|| {
                Error::format(format!("checkpoint lacks parameter {}", det.store.name(id)))
            })?;
            if store.get(other).shape() != det.store.get(id).shape() || other != id {
                return Err(Error::format(format!(
                    "parameter {} does not match the configured model",
                    det.store.name(id)
                )));
            }
        }
        det.store = store;
        Ok(det)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashedEmbedder;
    use crate::graph::{build_events, Occurrence};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs: 5,
            seed: 3,
            learning_rate: 0.01,
            head_hidden: 8,
            tgn: TgnConfig {
                dim: 8,
                time_dim: 4,
                neighbors: 4,
                ..TgnConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    struct Fixture {
        embeddings: Vec<SemanticVector>,
        levels: Vec<LogLevel>,
        table: CooccurrenceTable,
        events: Vec<GraphEvent>,
    }

    fn fixture(ids: &[usize], hops: &HopSet, n_templates: usize) -> Fixture {
        let h = HashedEmbedder::new(8, 2).unwrap();
        let embeddings = (0..n_templates).map(|i| h.embed_text(&format!("event kind {i}"))).collect();
        let levels = vec![LogLevel::Info; n_templates];
        let table = CooccurrenceTable::build(ids, hops);
        let seq: Vec<Occurrence> = ids
            .iter()
            .enumerate()
            .map(|(k, &template_id)| Occurrence { template_id, timestamp: k as f64 })
            .collect();
        let mut f = Fixture { embeddings, levels, table, events: Vec::new() };
        let ctx = FeatureContext { embeddings: &f.embeddings, levels: &f.levels, table: &f.table, hops };
        f.events = build_events(&seq, &ctx, 0).unwrap();
        f
    }

    #[test]
    fn decision_rule() {
        assert_eq!(decide(&[(0, 0.9), (1, 0.7)], 0.5), (Decision::Normal, None));
        assert_eq!(decide(&[(0, 0.9), (1, 0.2)], 0.5), (Decision::Anomaly, Some(1)));
        assert_eq!(decide(&[(0, 0.5)], 0.5), (Decision::Normal, None));
    }

    #[test]
    fn negatives_exclude_destination() {
        let pos: Vec<CandidateEdge> = (0..32)
            .map(|i| CandidateEdge { src: i % 5, dst: i % 7, timestamp: i as f64, hop: 1 })
            .collect();
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let na = sample_negatives(&pos, 7, 1, &mut a);
        assert_eq!(na.len(), 32);
        assert!(na.iter().zip(&pos).all(|(n, p)| n.dst != p.dst && n.src == p.src && n.dst < 7));
        assert_eq!(na, sample_negatives(&pos, 7, 1, &mut b));
        assert!(sample_negatives(&pos, 1, 1, &mut a).is_empty());
        assert_eq!(sample_negatives(&pos, 7, 3, &mut a).len(), 96);
    }

    #[test]
    fn zero_head_first_loss_is_ln2() {
        let hops = HopSet::new([0, 1]).unwrap();
        let ids: Vec<usize> = (0..6).map(|k| k % 2).collect();
        let f = fixture(&ids, &hops, 2);
        let nodes = NodeTable { embeddings: &f.embeddings, levels: &f.levels, table: &f.table };
        let mut det = Detector::new(TrainConfig { zero_head: true, batch_size: 1000, ..tiny_config() }).unwrap();
        let mut memory = det.initial_memory(&nodes, 2).unwrap();
        let m = det.train_epoch(&f.events, &BTreeSet::new(), &mut memory, &nodes, 0).unwrap();
        assert!((m.mean_loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn alternating_stream_separates_positives() {
        let hops = HopSet::new([0, 1]).unwrap();
        let ids: Vec<usize> = (0..200).map(|k| k % 2).collect();
        let f = fixture(&ids, &hops, 2);
        let nodes = NodeTable { embeddings: &f.embeddings, levels: &f.levels, table: &f.table };
        let mut det = Detector::new(tiny_config()).unwrap();
        let (_, metrics) = det.train(&f.events, &BTreeSet::new(), &nodes, 2).unwrap();
        let last = metrics.last().unwrap();
        assert!(last.positive_accuracy > 0.9 && last.negative_accuracy > 0.9, "{last:?}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let det = Detector::new(tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        det.save(&path).unwrap();
        let back = Detector::load(&path).unwrap();
        assert_eq!(back.store, det.store);
        assert_eq!(back.config, det.config);
        assert_eq!(back.scaler, det.scaler);
    }

    #[test]
    fn scaler_standardizes_columns() {
        let rows = [vec![1.0, 5.0, 0.0], vec![3.0, 5.0, 0.0]];
        let s = FeatureScaler::fit(3, rows.iter().map(Vec::as_slice));
        assert_eq!(s.mean, vec![2.0, 5.0, 0.0]);
        assert_eq!(s.scale, vec![1.0, 1.0, 1.0]);
        let mut v = vec![3.0, 5.0, 2.0];
        s.apply(&mut v);
        assert_eq!(v, vec![1.0, 0.0, 2.0]);
        assert_eq!(FeatureScaler::fit(2, std::iter::empty()), FeatureScaler::identity(2));
    }

    #[test]
    fn cosine_schedule_decays_to_zero() {
        let det = Detector::new(tiny_config()).unwrap();
        assert_eq!(det.adam(0.0).lr, 0.01);
        assert!((det.adam(0.5).lr - 0.005).abs() < 1e-15);
        assert!(det.adam(0.999).lr < 1e-6);
        let flat = Detector::new(TrainConfig { lr_schedule: LrSchedule::Constant, ..tiny_config() }).unwrap();
        assert_eq!(flat.adam(0.9).lr, 0.01);
    }
}
