//! Temporal graph network: growable node memory, identity messages, message
//! aggregation, GRU memory updates and node embeddings.
//!
//! Memory rows start from the templates' semantic vectors. Every edge produces one
//! message for each endpoint; pending messages of a node are reduced to one (the most
//! recent by default) and folded into its state by a GRU. Embeddings read the memory
//! directly, scale it by a learned function of the staleness, or attend over the
//! node's most recent incoming neighbors.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::SemanticVector;
use crate::error::{Error, Result};
use crate::nn::{
    read_exact, read_u32, AttentionCache, Grads, Gru, GruCache, Neighbor, ParamId, ParamStore, TemporalAttention,
    Tensor2, TimeEncoder,
};

const SNAPSHOT_MAGIC: &[u8; 8] = b"LTGNMEM1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    MostRecent,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    Identity,
    TimeProjection,
    Tga,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TgnConfig {
    /// Memory and embedding width; equals the semantic vector dimension.
    pub dim: usize,
    pub time_dim: usize,
    pub heads: usize,
    /// Capacity of each node's neighbor ring buffer.
    pub neighbors: usize,
    pub aggregator: Aggregator,
    pub embedding: EmbeddingMode,
    /// Add each node's initial vector to its memory row before embedding.
    pub node_features: bool,
}

impl Default for TgnConfig {
    fn default() -> Self {
        TgnConfig {
            dim: crate::embed::DEFAULT_DIM,
            time_dim: 16,
            heads: 2,
            neighbors: 10,
            aggregator: Aggregator::MostRecent,
            embedding: EmbeddingMode::Tga,
            node_features: true,
        }
    }
}

/// One stored incoming interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborEntry {
    pub node: usize,
    pub timestamp: f64,
    pub seq_index: usize,
    pub features: Vec<f64>,
}

/// Per-node memory rows, last update times and neighbor buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    dim: usize,
    capacity: usize,
    states: Vec<Vec<f64>>,
    /// Static per-node vectors, fixed at insertion.
    features: Vec<Vec<f64>>,
    last_update: Vec<f64>,
    /// Time of the node's latest occurrence as an edge destination.
    last_seen: Vec<Option<f64>>,
    neighbors: Vec<VecDeque<NeighborEntry>>,
}

impl MemoryState {
    pub fn new(dim: usize, capacity: usize) -> Self {
        MemoryState {
            dim,
            capacity,
            states: Vec::new(),
            features: Vec::new(),
            last_update: Vec::new(),
            last_seen: Vec::new(),
            neighbors: Vec::new(),
        }
    }

    /// One row per template, `s_i(0) = v_i`, last update 0, empty buffers.
    pub fn init(embeddings: &[SemanticVector], dim: usize, capacity: usize) -> Result<Self> {
        let mut m = MemoryState::new(dim, capacity);
        for v in embeddings {
            m.add_node(v.as_slice(), 0.0)?;
        }
        Ok(m)
    }

    /// Appends a row initialized to `vector`, which also becomes the node's static
    /// feature vector; returns the new node id.
    pub fn add_node(&mut self, vector: &[f64], now: f64) -> Result<usize> {
        self.add_node_with_feature(vector, vector, now)
    }

    /// Appends a node whose memory row and static vector differ.
    pub fn add_node_with_feature(&mut self, state: &[f64], feature: &[f64], now: f64) -> Result<usize> {
        for v in [state, feature] {
            if v.len() != self.dim {
                return Err(Error::contract(format!(
                    "node vector has dimension {}, memory has {}",
                    v.len(),
                    self.dim
                )));
            }
        }
        self.states.push(state.to_vec());
        self.features.push(feature.to_vec());
        self.last_update.push(now);
        self.last_seen.push(None);
        self.neighbors.push(VecDeque::with_capacity(self.capacity));
        Ok(self.states.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn check(&self, node: usize) -> Result<()> {
        if node >= self.len() {
            return Err(Error::contract(format!(
                "node {node} is not in memory ({} nodes)",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn state(&self, node: usize) -> Result<&[f64]> {
        self.check(node)?;
        Ok(&self.states[node])
    }

    pub fn feature(&self, node: usize) -> Result<&[f64]> {
        self.check(node)?;
        Ok(&self.features[node])
    }

    pub fn set_state(&mut self, node: usize, state: Vec<f64>) -> Result<()> {
        self.check(node)?;
        if state.len() != self.dim {
            return Err(Error::contract("memory state has the wrong width"));
        }
        self.states[node] = state;
        Ok(())
    }

    pub fn last_update(&self, node: usize) -> Result<f64> {
        self.check(node)?;
        Ok(self.last_update[node])
    }

    pub fn last_seen(&self, node: usize) -> Result<Option<f64>> {
        self.check(node)?;
        Ok(self.last_seen[node])
    }

    pub fn mark_seen(&mut self, node: usize, t: f64) -> Result<()> {
        self.check(node)?;
        self.last_seen[node] = Some(t);
        Ok(())
    }

    pub fn neighbors(&self, node: usize) -> Result<&VecDeque<NeighborEntry>> {
        self.check(node)?;
        Ok(&self.neighbors[node])
    }

    /// Records an incoming edge `src -> dst`, evicting the oldest beyond capacity.
    pub fn push_neighbor(&mut self, dst: usize, entry: NeighborEntry) -> Result<()> {
        self.check(dst)?;
        self.check(entry.node)?;
        if self.capacity == 0 {
            return Ok(());
        }
        let buf = &mut self.neighbors[dst];
        if buf.back().is_some_and(|last| last.timestamp > entry.timestamp) {
            return Err(Error::contract("neighbor entries must arrive in time order"));
        }
        if buf.len() == self.capacity {
            buf.pop_front();
        }
        buf.push_back(entry);
        Ok(())
    }

    /// Binary snapshot; `f64` values are stored bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(SNAPSHOT_MAGIC)?;
        for v in [self.len(), self.dim, self.capacity] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        let f = |w: &mut BufWriter<File>, x: f64| w.write_all(&x.to_le_bytes());
        for i in 0..self.len() {
            for &x in self.states[i].iter().chain(&self.features[i]) {
                f(&mut w, x)?;
            }
            f(&mut w, self.last_update[i])?;
            match self.last_seen[i] {
                Some(t) => {
                    w.write_all(&[1])?;
                    f(&mut w, t)?;
                }
                None => w.write_all(&[0])?,
            }
            w.write_all(&(self.neighbors[i].len() as u32).to_le_bytes())?;
            for e in &self.neighbors[i] {
                w.write_all(&(e.node as u32).to_le_bytes())?;
                f(&mut w, e.timestamp)?;
                w.write_all(&(e.seq_index as u64).to_le_bytes())?;
                w.write_all(&(e.features.len() as u32).to_le_bytes())?;
                for &x in &e.features {
                    f(&mut w, x)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::file(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::format("not a memory snapshot (bad magic)"));
        }
        let n = read_u32(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        let capacity = read_u32(&mut r)? as usize;
        let read_f64 = |r: &mut BufReader<File>| -> Result<f64> {
            let mut b = [0u8; 8];
            read_exact(r, &mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let mut m = MemoryState::new(dim, capacity);
        for _ in 0..n {
            let state = (0..dim).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            let feature = (0..dim).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            let last_update = read_f64(&mut r)?;
            let mut flag = [0u8; 1];
            read_exact(&mut r, &mut flag)?;
            let last_seen = match flag[0] {
                0 => None,
                1 => Some(read_f64(&mut r)?),
                _ => return Err(Error::format("bad last-seen flag in memory snapshot")),
            };
            let count = read_u32(&mut r)? as usize;
            if count > capacity {
                return Err(Error::format("neighbor buffer exceeds capacity"));
            }
            let mut buf = VecDeque::with_capacity(capacity);
            for _ in 0..count {
                let node = read_u32(&mut r)? as usize;
                let timestamp = read_f64(&mut r)?;
                let mut s = [0u8; 8];
                read_exact(&mut r, &mut s)?;
                let len = read_u32(&mut r)? as usize;
                let features = (0..len).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
                buf.push_back(NeighborEntry {
                    node,
                    timestamp,
                    seq_index: u64::from_le_bytes(s) as usize,
                    features,
                });
            }
            m.states.push(state);
            m.features.push(feature);
            m.last_update.push(last_update);
            m.last_seen.push(last_seen);
            m.neighbors.push(buf);
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::format("trailing bytes after memory snapshot"));
        }
        if m.neighbors.iter().flatten().any(|e| e.node >= n) {
            return Err(Error::format("neighbor entry references an unknown node"));
        }
        Ok(m)
    }
}

/// A message for one node.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub payload: Vec<f64>,
    pub timestamp: f64,
    pub seq_index: usize,
    /// Position in the stream, used as the final tie-breaker.
    pub order: usize,
}

/// Reduces the pending messages of one node to a single message.
pub fn aggregate_messages(pending: &[Message], mode: Aggregator) -> Result<Message> {
    let first = pending
        .first()
        .ok_or_else(|| Error::contract("cannot aggregate an empty message list"))?;
    match mode {
        Aggregator::MostRecent => Ok(pending
            .iter()
            .max_by(|a, b| {
                a.timestamp
                    .total_cmp(&b.timestamp)
                    .then(a.seq_index.cmp(&b.seq_index))
                    .then(a.order.cmp(&b.order))
            })
            .expect("non-empty")
            .clone()),
        Aggregator::Mean => {
            let len = first.payload.len();
            if pending.iter().any(|m| m.payload.len() != len) {
                return Err(Error::contract("messages of different lengths"));
            }
            let mut payload = vec![0.0; len];
            for m in pending {
                for (a, x) in payload.iter_mut().zip(&m.payload) {
                    *a += x;
                }
            }
            let n = pending.len() as f64;
            payload.iter_mut().for_each(|a| *a /= n);
            let latest = pending
                .iter()
                .max_by(|a, b| {
                    a.timestamp
                        .total_cmp(&b.timestamp)
                        .then(a.seq_index.cmp(&b.seq_index))
                        .then(a.order.cmp(&b.order))
                })
                .expect("non-empty");
            Ok(Message {
                payload,
                timestamp: latest.timestamp,
                seq_index: latest.seq_index,
                order: latest.order,
            })
        }
    }
}

/// Record of one applied memory update, kept when gradients must flow through it.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateRecord {
    pub node: usize,
    pub cache: GruCache,
}

/// What [`TgnModel::embed_backward`] needs to propagate gradients.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbedCache {
    Identity { node: usize },
    TimeProjection { node: usize, state: Vec<f64>, dt: f64 },
    Tga { node: usize, neighbor_nodes: Vec<usize>, attention: AttentionCache },
}

/// Parameters of the memory updater and embedding module.
#[derive(Debug, Clone, PartialEq)]
pub struct TgnModel {
    pub config: TgnConfig,
    pub edge_dim: usize,
    pub time: TimeEncoder,
    pub gru: Gru,
    pub attention: Option<TemporalAttention>,
    pub projection: Option<ParamId>,
}

impl TgnModel {
    pub fn new<R: Rng>(store: &mut ParamStore, config: TgnConfig, edge_dim: usize, rng: &mut R) -> Result<Self> {
        if config.dim == 0 {
            return Err(Error::Config("memory dimension must be positive".into()));
        }
        let time = TimeEncoder::new(store, "time", config.time_dim)?;
        let gru = Gru::new(store, "memory.gru", Self::payload_len_for(&config, edge_dim), config.dim, rng)?;
        let attention = match config.embedding {
            EmbeddingMode::Tga => Some(TemporalAttention::new(
                store,
                "embedding.tga",
                config.dim,
                edge_dim,
                config.time_dim,
                config.heads,
                rng,
            )?),
            _ => None,
        };
        let projection = match config.embedding {
            EmbeddingMode::TimeProjection => Some(store.add("embedding.time_projection", Tensor2::zeros(1, config.dim))?),
            _ => None,
        };
        Ok(TgnModel {
            config,
            edge_dim,
            time,
            gru,
            attention,
            projection,
        })
    }

    fn payload_len_for(config: &TgnConfig, edge_dim: usize) -> usize {
        2 * config.dim + config.time_dim + edge_dim
    }

    pub fn payload_len(&self) -> usize {
        Self::payload_len_for(&self.config, self.edge_dim)
    }

    /// `[s_self ‖ s_other ‖ te(t - last_update_self) ‖ features]`.
    pub fn message_payload(
        &self,
        store: &ParamStore,
        memory: &MemoryState,
        own: usize,
        other: usize,
        t: f64,
        features: &[f64],
    ) -> Result<Vec<f64>> {
        if features.len() != self.edge_dim {
            return Err(Error::contract(format!(
                "edge features have length {}, model expects {}",
                features.len(),
                self.edge_dim
            )));
        }
        let mut p = Vec::with_capacity(self.payload_len());
        p.extend_from_slice(memory.state(own)?);
        p.extend_from_slice(memory.state(other)?);
        p.extend(self.time.forward(store, t - memory.last_update(own)?));
        p.extend_from_slice(features);
        Ok(p)
    }

    /// Messages `(for dst, for src)` of an edge.
    #[allow(clippy::too_many_arguments)]
    pub fn compute_messages(
        &self,
        store: &ParamStore,
        memory: &MemoryState,
        src: usize,
        dst: usize,
        t: f64,
        seq_index: usize,
        order: usize,
        features: &[f64],
    ) -> Result<(Message, Message)> {
        let to_dst = Message {
            payload: self.message_payload(store, memory, dst, src, t, features)?,
            timestamp: t,
            seq_index,
            order,
        };
        let to_src = Message {
            payload: self.message_payload(store, memory, src, dst, t, features)?,
            timestamp: t,
            seq_index,
            order,
        };
        Ok((to_dst, to_src))
    }

    /// Folds an aggregated message into a node's state.
    pub fn update_memory(&self, store: &ParamStore, memory: &mut MemoryState, node: usize, msg: &Message) -> Result<GruCache> {
        let (state, cache) = self.gru.forward(store, &msg.payload, memory.state(node)?)?;
        memory.states[node] = state;
        memory.last_update[node] = memory.last_update[node].max(msg.timestamp);
        Ok(cache)
    }

    /// Aggregates pending messages per node and applies the updates in node order.
    pub fn apply_messages(
        &self,
        store: &ParamStore,
        memory: &mut MemoryState,
        pending: Vec<(usize, Message)>,
    ) -> Result<Vec<UpdateRecord>> {
        let mut by_node: BTreeMap<usize, Vec<Message>> = BTreeMap::new();
        for (node, msg) in pending {
            by_node.entry(node).or_default().push(msg);
        }
        let mut records = Vec::with_capacity(by_node.len());
        for (node, msgs) in by_node {
            let msg = aggregate_messages(&msgs, self.config.aggregator)?;
            let cache = self.update_memory(store, memory, node, &msg)?;
            records.push(UpdateRecord { node, cache });
        }
        Ok(records)
    }

    pub fn embed_node(&self, store: &ParamStore, memory: &MemoryState, node: usize, t: f64) -> Result<Vec<f64>> {
        self.embed_with_cache(store, memory, node, t).map(|(z, _)| z)
    }

    /// Embedding input of a node: its memory row, plus its static vector when
    /// node features are enabled.
    fn node_input(&self, memory: &MemoryState, node: usize) -> Result<Vec<f64>> {
        let state = memory.state(node)?;
        if !self.config.node_features {
            return Ok(state.to_vec());
        }
        Ok(state.iter().zip(&memory.features[node]).map(|(s, v)| s + v).collect())
    }

    pub fn embed_with_cache(&self, store: &ParamStore, memory: &MemoryState, node: usize, t: f64) -> Result<(Vec<f64>, EmbedCache)> {
        let state = self.node_input(memory, node)?;
        let state = state.as_slice();
        match self.config.embedding {
            EmbeddingMode::Identity => Ok((state.to_vec(), EmbedCache::Identity { node })),
            EmbeddingMode::TimeProjection => {
                let w = store.get(self.projection.expect("time projection parameter")).as_slice();
                let dt = t - memory.last_update(node)?;
                let z = state.iter().zip(w).map(|(s, w)| (1.0 + dt * w) * s).collect();
                Ok((z, EmbedCache::TimeProjection { node, state: state.to_vec(), dt }))
            }
            EmbeddingMode::Tga => {
                let att = self.attention.as_ref().expect("attention parameters");
                let buf = memory.neighbors(node)?;
                let inputs = buf
                    .iter()
                    .map(|e| self.node_input(memory, e.node))
                    .collect::<Result<Vec<_>>>()?;
                let neighbors: Vec<Neighbor<'_>> = buf
                    .iter()
                    .zip(&inputs)
                    .map(|(e, h)| Neighbor {
                        state: h,
                        features: &e.features,
                        dt: (t - e.timestamp).max(0.0),
                    })
                    .collect();
                let (z, cache) = att.forward(store, &self.time, state, &neighbors)?;
                Ok((
                    z,
                    EmbedCache::Tga {
                        node,
                        neighbor_nodes: buf.iter().map(|e| e.node).collect(),
                        attention: cache,
                    },
                ))
            }
        }
    }

    /// Accumulates parameter gradients and returns gradients with respect to the
    /// memory rows that were read, as `(node, dstate)` pairs.
    pub fn embed_backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        cache: &EmbedCache,
        dz: &[f64],
    ) -> Result<Vec<(usize, Vec<f64>)>> {
        match cache {
            EmbedCache::Identity { node } => Ok(vec![(*node, dz.to_vec())]),
            EmbedCache::TimeProjection { node, state, dt } => {
                let pid = self.projection.expect("time projection parameter");
                let w = store.get(pid).as_slice().to_vec();
                let g = grads.get_mut(pid).as_mut_slice();
                let mut ds = Vec::with_capacity(dz.len());
                for i in 0..dz.len() {
                    g[i] += dz[i] * state[i] * dt;
                    ds.push(dz[i] * (1.0 + dt * w[i]));
                }
                Ok(vec![(*node, ds)])
            }
            EmbedCache::Tga {
                node,
                neighbor_nodes,
                attention,
            } => {
                let att = self.attention.as_ref().expect("attention parameters");
                let g = att.backward(store, grads, &self.time, attention, dz)?;
                let mut out = vec![(*node, g.state)];
                out.extend(neighbor_nodes.iter().copied().zip(g.neighbor_states));
                Ok(out)
            }
        }
    }
}
