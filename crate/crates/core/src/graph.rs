//! Multi-scale continuous-time dynamic graph construction.
//!
//! Every template occurrence `e_k` at time `t_k` produces, for each hop scale
//! `H >= 1`, an edge `e_{k-H} -> e_k` stamped with `t_k`, and for `H = 0` a self-loop
//! `e_k -> e_k`. Edges carry semantic similarity, co-occurrence frequency, the
//! log-damped time interval, the destination's level one-hot and a one-hot of the hop
//! scale. The first occurrence of a template also emits a node-add event.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::embed::{one_hot_level, LogLevel, SemanticVector};
use crate::error::{Error, Result};

/// Number of scalar features ahead of the one-hot blocks (ss, cf, ti).
pub const SCALAR_FEATURES: usize = 3;
pub const LEVEL_FEATURES: usize = 5;

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "cosine of vectors with dimensions {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = crate::embed::l2_norm(a);
    let nb = crate::embed::l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::contract("cosine of a zero vector"));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn time_interval(t_i: f64, t_j: f64) -> f64 {
    (t_i - t_j).abs()
}

pub fn normalize_ti(dt: f64) -> f64 {
    dt.ln_1p()
}

/// Sorted, duplicate-free set of hop scales.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopSet(Vec<usize>);

impl HopSet {
    pub fn new(hops: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut v: Vec<usize> = hops.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        if v.is_empty() {
            return Err(Error::Config("hop set must not be empty".into()));
        }
        Ok(HopSet(v))
    }

    /// Parses a comma separated list such as `0,1`.
    pub fn parse(text: &str) -> Result<Self> {
        let hops = text
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad hop scale {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        HopSet::new(hops)
    }

    pub fn hops(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> usize {
        *self.0.last().expect("non-empty")
    }

    pub fn index_of(&self, hop: usize) -> Option<usize> {
        self.0.binary_search(&hop).ok()
    }

    pub fn contains(&self, hop: usize) -> bool {
        self.index_of(hop).is_some()
    }

    pub fn feature_len(&self) -> usize {
        SCALAR_FEATURES + LEVEL_FEATURES + self.len()
    }
}

impl std::fmt::Display for HopSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeFeatures {
    pub ss: f64,
    pub cf: f64,
    pub ti_norm: f64,
    pub ll_dst: [f64; LEVEL_FEATURES],
    pub hop_onehot: Vec<f64>,
}

impl EdgeFeatures {
    pub fn len(&self) -> usize {
        SCALAR_FEATURES + LEVEL_FEATURES + self.hop_onehot.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flat layout `[ss, cf, ti, ll(5), hop(|H|)]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend([self.ss, self.cf, self.ti_norm]);
        v.extend_from_slice(&self.ll_dst);
        v.extend_from_slice(&self.hop_onehot);
        v
    }

    pub fn from_slice(values: &[f64], n_hops: usize) -> Result<Self> {
        if values.len() != SCALAR_FEATURES + LEVEL_FEATURES + n_hops {
            return Err(Error::format(format!(
                "edge feature vector has length {}, expected {}",
                values.len(),
                SCALAR_FEATURES + LEVEL_FEATURES + n_hops
            )));
        }
        let mut ll = [0.0; LEVEL_FEATURES];
        ll.copy_from_slice(&values[3..8]);
        Ok(EdgeFeatures {
            ss: values[0],
            cf: values[1],
            ti_norm: values[2],
            ll_dst: ll,
            hop_onehot: values[8..].to_vec(),
        })
    }
}

/// Directed adjacency counts per hop scale, taken from the training sequence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CooccurrenceTable {
    counts: HashMap<usize, HashMap<(usize, usize), u64>>,
    totals: HashMap<usize, u64>,
}

impl CooccurrenceTable {
    /// Counts `(ids[k-H], ids[k])` for every `k >= H`; self-pairs at `H = 0`.
    pub fn build(template_ids: &[usize], hops: &HopSet) -> Self {
        let mut table = CooccurrenceTable::default();
        for &h in hops.hops() {
            let pairs = table.counts.entry(h).or_default();
            let mut total = 0;
            for k in h..template_ids.len() {
                *pairs.entry((template_ids[k - h], template_ids[k])).or_insert(0) += 1;
                total += 1;
            }
            table.totals.insert(h, total);
        }
        table
    }

    pub fn count(&self, src: usize, dst: usize, hop: usize) -> u64 {
        self.counts
            .get(&hop)
            .and_then(|m| m.get(&(src, dst)))
            .copied()
            .unwrap_or(0)
    }

    pub fn total(&self, hop: usize) -> u64 {
        self.totals.get(&hop).copied().unwrap_or(0)
    }

    pub fn frequency(&self, src: usize, dst: usize, hop: usize) -> f64 {
        let total = self.total(hop);
        if total == 0 {
            log::warn!("co-occurrence table has no observations at hop {hop}");
            return 0.0;
        }
        self.count(src, dst, hop) as f64 / total as f64
    }

    pub fn hops(&self) -> Vec<usize> {
        let mut h: Vec<usize> = self.totals.keys().copied().collect();
        h.sort_unstable();
        h
    }

    /// Rows `(hop, src, dst, count)` sorted for stable output.
    pub fn rows(&self) -> Vec<(usize, usize, usize, u64)> {
        let mut rows: Vec<_> = self
            .counts
            .iter()
            .flat_map(|(&h, m)| m.iter().map(move |(&(s, d), &c)| (h, s, d, c)))
            .collect();
        rows.sort_unstable();
        rows
    }

    /// Writes `hop,src,dst,count`; a scale with no pairs still gets a `src = dst = -1` row
    /// so its zero total survives.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "hop,src,dst,count")?;
        for h in self.hops() {
            if self.counts.get(&h).is_none_or(HashMap::is_empty) {
                writeln!(w, "{h},-1,-1,0")?;
            }
        }
        for (h, s, d, c) in self.rows() {
            writeln!(w, "{h},{s},{d},{c}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::file(path, e))?;
        let mut r = csv::Reader::from_reader(file);
        let mut table = CooccurrenceTable::default();
        for row in r.records() {
            let row = row?;
            let bad = || Error::format(format!("bad co-occurrence row {row:?}"));
            if row.len() != 4 {
                return Err(bad());
            }
            let h: usize = row[0].parse().map_err(|_| bad())?;
            let c: u64 = row[3].parse().map_err(|_| bad())?;
            table.counts.entry(h).or_default();
            *table.totals.entry(h).or_insert(0) += c;
            if &row[1] == "-1" {
                continue;
            }
            let s = row[1].parse().map_err(|_| bad())?;
            let d = row[2].parse().map_err(|_| bad())?;
            table.counts.get_mut(&h).expect("inserted").insert((s, d), c);
        }
        Ok(table)
    }
}

/// Node attributes needed to compute edge features: semantic vectors and levels by id.
#[derive(Debug, Clone)]
pub struct FeatureContext<'a> {
    pub embeddings: &'a [SemanticVector],
    pub levels: &'a [LogLevel],
    pub table: &'a CooccurrenceTable,
    pub hops: &'a HopSet,
}

impl FeatureContext<'_> {
    pub fn features(&self, src: usize, dst: usize, hop: usize, dt: f64) -> Result<EdgeFeatures> {
        let vector = |id: usize| {
            self.embeddings
                .get(id)
                .ok_or_else(|| Error::contract(format!("no semantic vector for node {id}")))
        };
        let level = self
            .levels
            .get(dst)
            .ok_or_else(|| Error::contract(format!("no level for node {dst}")))?;
        let hop_index = self
            .hops
            .index_of(hop)
            .ok_or_else(|| Error::contract(format!("hop {hop} not in hop set {}", self.hops)))?;
        let mut hop_onehot = vec![0.0; self.hops.len()];
        hop_onehot[hop_index] = 1.0;
        Ok(EdgeFeatures {
            ss: cosine_similarity(vector(src)?.as_slice(), vector(dst)?.as_slice())?,
            cf: self.table.frequency(src, dst, hop),
            ti_norm: normalize_ti(dt),
            ll_dst: one_hot_level(*level),
            hop_onehot,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    NodeAdd,
    Edge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphEvent {
    pub kind: EventKind,
    pub src: usize,
    pub dst: usize,
    pub timestamp: f64,
    pub hop: usize,
    /// Empty for node-add events.
    pub features: Option<EdgeFeatures>,
    pub seq_index: usize,
}

impl GraphEvent {
    pub fn is_edge(&self) -> bool {
        self.kind == EventKind::Edge
    }
}

/// Stream order: time, then destination position, node-adds first, then hop ascending.
pub fn event_order(a: &GraphEvent, b: &GraphEvent) -> Ordering {
    a.timestamp
        .total_cmp(&b.timestamp)
        .then(a.seq_index.cmp(&b.seq_index))
        .then((a.kind == EventKind::Edge).cmp(&(b.kind == EventKind::Edge)))
        .then(a.hop.cmp(&b.hop))
}

/// One template occurrence of the chronological sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occurrence {
    pub template_id: usize,
    pub timestamp: f64,
}

/// Builds the merged event stream over the whole sequence.
///
/// Nodes with ids below `known_nodes` already exist in memory (their
/// first occurrence emits no node-add event).
pub fn build_events(
    sequence: &[Occurrence],
    ctx: &FeatureContext<'_>,
    known_nodes: usize,
) -> Result<Vec<GraphEvent>> {
    for w in sequence.windows(2) {
        if w[1].timestamp < w[0].timestamp {
            return Err(Error::contract("sequence is not chronological"));
        }
    }
    let mut events = Vec::new();
    let mut seen = vec![false; ctx.embeddings.len().max(known_nodes)];
    seen.iter_mut().take(known_nodes).for_each(|s| *s = true);
    for (k, occ) in sequence.iter().enumerate() {
        let id = occ.template_id;
        if id >= seen.len() {
            seen.resize(id + 1, false);
        }
        if !seen[id] {
            seen[id] = true;
            events.push(GraphEvent {
                kind: EventKind::NodeAdd,
                src: id,
                dst: id,
                timestamp: occ.timestamp,
                hop: 0,
                features: None,
                seq_index: k,
            });
        }
        for &h in ctx.hops.hops() {
            if k < h {
                continue;
            }
            let src = sequence[k - h];
            let dt = time_interval(src.timestamp, occ.timestamp);
            events.push(GraphEvent {
                kind: EventKind::Edge,
                src: src.template_id,
                dst: id,
                timestamp: occ.timestamp,
                hop: h,
                features: Some(ctx.features(src.template_id, id, h, dt)?),
                seq_index: k,
            });
        }
    }
    // Generation order already satisfies the merge order; the stable sort guards it.
    events.sort_by(event_order);
    Ok(events)
}

/// Splits a stream at a sequence position: events whose destination index is below
/// `boundary` go to the first part.
pub fn split_events(events: Vec<GraphEvent>, boundary: usize) -> (Vec<GraphEvent>, Vec<GraphEvent>) {
    events.into_iter().partition(|e| e.seq_index < boundary)
}

/// Writes the event stream as CSV; feature columns are `f0..f{n-1}`.
pub fn write_events(path: &Path, events: &[GraphEvent], hops: &HopSet) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "kind,src,dst,timestamp,hop,seq_index")?;
    for i in 0..hops.feature_len() {
        write!(w, ",f{i}")?;
    }
    writeln!(w)?;
    for e in events {
        let kind = match e.kind {
            EventKind::NodeAdd => "node",
            EventKind::Edge => "edge",
        };
        write!(w, "{kind},{},{},{:?},{},{}", e.src, e.dst, e.timestamp, e.hop, e.seq_index)?;
        match &e.features {
            Some(f) => {
                for v in f.to_vec() {
                    write!(w, ",{v:?}")?;
                }
            }
            None => {
                for _ in 0..hops.feature_len() {
                    write!(w, ",")?;
                }
            }
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_events(path: &Path, hops: &HopSet) -> Result<Vec<GraphEvent>> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    let n_features = hops.feature_len();
    if header.split(',').count() != 6 + n_features {
        return Err(Error::format(format!(
            "event file header has {} columns, hop set {hops} needs {}",
            header.split(',').count(),
            6 + n_features
        )));
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let bad = || Error::format(format!("{}: bad event row {}", path.display(), lineno + 2));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 + n_features {
            return Err(bad());
        }
        let kind = match cols[0] {
            "node" => EventKind::NodeAdd,
            "edge" => EventKind::Edge,
            _ => return Err(bad()),
        };
        let features = match kind {
            EventKind::NodeAdd => None,
            EventKind::Edge => {
                let values = cols[6..]
                    .iter()
                    .map(|v| v.parse::<f64>().map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()?;
                Some(EdgeFeatures::from_slice(&values, hops.len())?)
            }
        };
        out.push(GraphEvent {
            kind,
            src: cols[1].parse().map_err(|_| bad())?,
            dst: cols[2].parse().map_err(|_| bad())?,
            timestamp: cols[3].parse().map_err(|_| bad())?,
            hop: cols[4].parse().map_err(|_| bad())?,
            seq_index: cols[5].parse().map_err(|_| bad())?,
            features,
        });
    }
    Ok(out)
}
