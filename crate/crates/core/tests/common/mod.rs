#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use logtgn::detector::{Detector, NodeTable, TrainConfig, Verdict};
use logtgn::embed::{HashedEmbedder, LogLevel, SemanticVector};
use logtgn::graph::{
    build_events, split_events, CooccurrenceTable, EventKind, FeatureContext, GraphEvent, HopSet, Occurrence,
};
use logtgn::nn::{Grads, Gru, Linear, LinkHead, Neighbor, ParamId, ParamStore, TemporalAttention, TimeEncoder};
use logtgn::tgn::TgnConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const ORACLE_TOLERANCE: f64 = 1e-9;

/// Relative error with a small floor so that gradients that are both ~0 compare equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Worst relative error between `grads` and central differences of `loss` over every
/// scalar of `params`, and between `input_grads` and differences over `inputs`.
fn worst_error(
    store: &ParamStore,
    params: &[ParamId],
    grads: &Grads,
    inputs: &[Vec<f64>],
    input_grads: &[Vec<f64>],
    loss: &dyn Fn(&ParamStore, &[Vec<f64>]) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for &id in params {
        for k in 0..store.get(id).len() {
            let mut plus = store.clone();
            plus.get_mut(id).as_mut_slice()[k] += FD_STEP;
            let mut minus = store.clone();
            minus.get_mut(id).as_mut_slice()[k] -= FD_STEP;
            let numeric = (loss(&plus, inputs) - loss(&minus, inputs)) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grads.get(id).as_slice()[k], numeric));
        }
    }
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i][k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i][k] -= FD_STEP;
            let numeric = (loss(store, &plus) - loss(store, &minus)) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(input_grads[i][k], numeric));
        }
    }
    worst
}

fn weighted(c: &[f64], y: &[f64]) -> f64 {
    c.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn linear_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_in, n_out) = (rng.random_range(1..7), rng.random_range(1..6));
    let mut store = ParamStore::new();
    let layer = Linear::new(&mut store, "lin", n_in, n_out, &mut rng).unwrap();
    store.get_mut(layer.bias).as_mut_slice().iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    let x = random_vec(&mut rng, n_in);
    let c = random_vec(&mut rng, n_out);
    let mut grads = store.zero_grads();
    let dx = layer.backward(&store, &mut grads, &x, &c).unwrap();
    let loss = |s: &ParamStore, inp: &[Vec<f64>]| weighted(&c, &layer.forward(s, &inp[0]).unwrap());
    worst_error(&store, &[layer.weight, layer.bias], &grads, &[x], &[dx], &loss)
}

pub fn gru_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_in, n_h) = (rng.random_range(1..6), rng.random_range(1..6));
    let mut store = ParamStore::new();
    let gru = Gru::new(&mut store, "gru", n_in, n_h, &mut rng).unwrap();
    for id in [gru.b_input, gru.b_hidden] {
        store.get_mut(id).as_mut_slice().iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
    let x = random_vec(&mut rng, n_in);
    let h = random_vec(&mut rng, n_h);
    let c = random_vec(&mut rng, n_h);
    let (_, cache) = gru.forward(&store, &x, &h).unwrap();
    let mut grads = store.zero_grads();
    let (dx, dh) = gru.backward(&store, &mut grads, &cache, &c).unwrap();
    let loss = |s: &ParamStore, inp: &[Vec<f64>]| weighted(&c, &gru.forward(s, &inp[0], &inp[1]).unwrap().0);
    let params = [gru.w_input, gru.w_hidden, gru.b_input, gru.b_hidden];
    worst_error(&store, &params, &grads, &[x, h], &[dx, dh], &loss)
}

pub fn time_encoder_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.random_range(1..9);
    let mut store = ParamStore::new();
    let te = TimeEncoder::new(&mut store, "time", dim).unwrap();
    let randomized = random_vec(&mut rng, 2 * dim);
    store.get_mut(te.w).as_mut_slice().copy_from_slice(&randomized[..dim]);
    store.get_mut(te.b).as_mut_slice().copy_from_slice(&randomized[dim..]);
    let dt = rng.random_range(0.0..5.0);
    let c = random_vec(&mut rng, dim);
    let mut grads = store.zero_grads();
    te.backward(&store, &mut grads, dt, &c);
    let loss = |s: &ParamStore, _: &[Vec<f64>]| weighted(&c, &te.forward(s, dt));
    worst_error(&store, &[te.w, te.b], &grads, &[], &[], &loss)
}

pub fn link_head_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_in, hidden) = (rng.random_range(2..9), rng.random_range(1..7));
    let mut store = ParamStore::new();
    let head = LinkHead::new(&mut store, "head", n_in, hidden, &mut rng).unwrap();
    let x = random_vec(&mut rng, n_in);
    let c = rng.random_range(-1.0..1.0);
    let (_, cache) = head.forward(&store, &x).unwrap();
    let mut grads = store.zero_grads();
    let dx = head.backward(&store, &mut grads, &cache, c).unwrap();
    let loss = |s: &ParamStore, inp: &[Vec<f64>]| c * head.forward(s, &inp[0]).unwrap().0;
    let params = [head.hidden.weight, head.hidden.bias, head.out.weight, head.out.bias];
    worst_error(&store, &params, &grads, &[x], &[dx], &loss)
}

pub fn attention_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = rng.random_range(1..3);
    let d = heads * rng.random_range(1..4);
    let (d_edge, d_time, n_nb) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(0..4));
    let mut store = ParamStore::new();
    let te = TimeEncoder::new(&mut store, "time", d_time).unwrap();
    let att = TemporalAttention::new(&mut store, "att", d, d_edge, d_time, heads, &mut rng).unwrap();
    let state = random_vec(&mut rng, d);
    let nb_states: Vec<Vec<f64>> = (0..n_nb).map(|_| random_vec(&mut rng, d)).collect();
    let nb_feats: Vec<Vec<f64>> = (0..n_nb).map(|_| random_vec(&mut rng, d_edge)).collect();
    let dts: Vec<f64> = (0..n_nb).map(|_| rng.random_range(0.0..3.0)).collect();
    let c = random_vec(&mut rng, d);

    let run = |s: &ParamStore, inp: &[Vec<f64>]| {
        let neighbors: Vec<Neighbor<'_>> = (0..n_nb)
            .map(|j| Neighbor { state: &inp[1 + j], features: &nb_feats[j], dt: dts[j] })
            .collect();
        att.forward(s, &te, &inp[0], &neighbors).unwrap()
    };
    let mut inputs = vec![state];
    inputs.extend(nb_states);
    let (_, cache) = run(&store, &inputs);
    let mut grads = store.zero_grads();
    let g = att.backward(&store, &mut grads, &te, &cache, &c).unwrap();
    let mut input_grads = vec![g.state];
    input_grads.extend(g.neighbor_states);
    let loss = |s: &ParamStore, inp: &[Vec<f64>]| weighted(&c, &run(s, inp).0);
    let params: Vec<ParamId> = store.ids().collect();
    worst_error(&store, &params, &grads, &inputs, &input_grads, &loss)
}

/// Worst error per layer over `seeds`.
pub fn gradient_suite(seeds: std::ops::Range<u64>) -> Vec<(&'static str, f64)> {
    let checks: [(&'static str, fn(u64) -> f64); 5] = [
        ("linear", linear_gradient_error),
        ("gru", gru_gradient_error),
        ("attention", attention_gradient_error),
        ("time encoding", time_encoder_gradient_error),
        ("link head", link_head_gradient_error),
    ];
    checks
        .iter()
        .map(|(name, f)| (*name, seeds.clone().map(f).fold(0.0, f64::max)))
        .collect()
}

/// A random template sequence with embeddings, levels and strictly chronological times.
pub struct RandomSequence {
    pub ids: Vec<usize>,
    pub times: Vec<f64>,
    pub embeddings: Vec<SemanticVector>,
    pub levels: Vec<LogLevel>,
    pub hops: HopSet,
}

const LEVELS: [LogLevel; 5] = [LogLevel::Debug, LogLevel::Info, LogLevel::Warn, LogLevel::Error, LogLevel::Fatal];

pub fn random_sequence(seed: u64, max_len: usize, max_hop: usize) -> RandomSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_templates = rng.random_range(1..8);
    let n = rng.random_range(0..=max_len);
    let ids = (0..n).map(|_| rng.random_range(0..n_templates)).collect();
    let mut t = rng.random_range(0.0..1e6);
    let times = (0..n)
        .map(|_| {
            // Occasional ties exercise equal timestamps.
            if rng.random_bool(0.8) {
                t += rng.random_range(0.0..50.0);
            }
            t
        })
        .collect();
    let h = HashedEmbedder::new(16, seed).unwrap();
    let embeddings = (0..n_templates).map(|i| h.embed_text(&format!("tmpl {i} word{}", i * 7))).collect();
    let levels = (0..n_templates).map(|_| LEVELS[rng.random_range(0..5)]).collect();
    let mut hop_list: Vec<usize> = (0..=max_hop).filter(|_| rng.random_bool(0.6)).collect();
    if hop_list.is_empty() {
        hop_list.push(rng.random_range(0..=max_hop));
    }
    RandomSequence { ids, times, embeddings, levels, hops: HopSet::new(hop_list).unwrap() }
}

impl RandomSequence {
    pub fn occurrences(&self) -> Vec<Occurrence> {
        self.ids
            .iter()
            .zip(&self.times)
            .map(|(&template_id, &timestamp)| Occurrence { template_id, timestamp })
            .collect()
    }

    pub fn events(&self) -> (CooccurrenceTable, Vec<GraphEvent>) {
        let table = CooccurrenceTable::build(&self.ids, &self.hops);
        let ctx = FeatureContext { embeddings: &self.embeddings, levels: &self.levels, table: &table, hops: &self.hops };
        let events = build_events(&self.occurrences(), &ctx, 0).unwrap();
        (table, events)
    }
}

/// Largest deviation between built edge features and a from-scratch recomputation.
pub fn oracle_deviation(seq: &RandomSequence) -> f64 {
    let (_, events) = seq.events();
    let n = seq.ids.len();
    let mut worst: f64 = 0.0;
    for e in events.iter().filter(|e| e.kind == EventKind::Edge) {
        let f = e.features.as_ref().unwrap();
        let k = e.seq_index;
        let h = e.hop;
        let (a, b) = (seq.embeddings[e.src].as_slice(), seq.embeddings[e.dst].as_slice());
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for i in 0..a.len() {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        let ss = dot / (na.sqrt() * nb.sqrt());
        let mut pairs = 0u64;
        let mut total = 0u64;
        for j in h..n {
            total += 1;
            if seq.ids[j - h] == e.src && seq.ids[j] == e.dst {
                pairs += 1;
            }
        }
        let cf = if total == 0 { 0.0 } else { pairs as f64 / total as f64 };
        let ti = (1.0 + (seq.times[k] - seq.times[k - h]).abs()).ln();
        let level = LEVELS.iter().position(|l| *l == seq.levels[e.dst]).unwrap();
        let mut ll = [0.0; 5];
        ll[level] = 1.0;
        let mut hop_onehot = vec![0.0; seq.hops.len()];
        hop_onehot[seq.hops.hops().iter().position(|&x| x == h).unwrap()] = 1.0;
        worst = worst
            .max((f.ss - ss).abs())
            .max((f.cf - cf).abs())
            .max((f.ti_norm - ti).abs());
        if f.ll_dst != ll || f.hop_onehot != hop_onehot {
            return f64::INFINITY;
        }
    }
    worst
}

/// Checks edge counts per scale, edge timestamps and stream order; returns the first
/// violation found.
pub fn graph_law_violation(seq: &RandomSequence) -> Option<String> {
    let (_, events) = seq.events();
    let n = seq.ids.len();
    for &h in seq.hops.hops() {
        let count = events.iter().filter(|e| e.is_edge() && e.hop == h).count();
        if count != n.saturating_sub(h) {
            return Some(format!("hop {h}: {count} edges for {n} events"));
        }
    }
    for e in events.iter().filter(|e| e.is_edge()) {
        if e.timestamp != seq.times[e.seq_index] {
            return Some(format!("edge into {} stamped {}", e.seq_index, e.timestamp));
        }
        if e.src != seq.ids[e.seq_index - e.hop] || e.dst != seq.ids[e.seq_index] {
            return Some(format!("edge into {} has wrong endpoints", e.seq_index));
        }
    }
    if events.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
        return Some("stream decreases in time".into());
    }
    None
}

pub fn small_train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 20,
        epochs: 2,
        seed: 5,
        head_hidden: 8,
        tgn: TgnConfig { dim: 8, time_dim: 4, neighbors: 4, ..TgnConfig::default() },
        ..TrainConfig::default()
    }
}

pub struct UnseenOutcome {
    pub memory_before: usize,
    pub memory_after: usize,
    pub test_events: usize,
    pub verdicts: Vec<Verdict>,
}

/// Trains on templates `0..5`, then detects on a stream that also uses `5..10`.
pub fn unseen_templates_run(seed: u64) -> UnseenOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_train = 120;
    let mut ids: Vec<usize> = (0..n_train).map(|k| k % 5).collect();
    ids.extend((0..80).map(|_| rng.random_range(0..5)));
    for (k, fresh) in (5..10).enumerate() {
        ids[n_train + 3 + 7 * k] = fresh;
    }
    let hops = HopSet::new([0, 1]).unwrap();
    let h = HashedEmbedder::new(8, 1).unwrap();
    let embeddings: Vec<SemanticVector> = (0..10).map(|i| h.embed_text(&format!("service {i} ready"))).collect();
    let levels = vec![LogLevel::Info; 10];
    let table = CooccurrenceTable::build(&ids[..n_train], &hops);
    let occ: Vec<Occurrence> = ids
        .iter()
        .enumerate()
        .map(|(k, &template_id)| Occurrence { template_id, timestamp: k as f64 * 1.5 })
        .collect();
    let ctx = FeatureContext { embeddings: &embeddings, levels: &levels, table: &table, hops: &hops };
    let events = build_events(&occ, &ctx, 5).unwrap();
    let (train, test) = split_events(events, n_train);
    let nodes = NodeTable { embeddings: &embeddings, levels: &levels, table: &table };
    let mut det = Detector::new(small_train_config()).unwrap();
    let (mut memory, _) = det.train(&train, &BTreeSet::new(), &nodes, 5).unwrap();
    let memory_before = memory.len();
    let verdicts = det.detect(&test, &mut memory, &nodes).unwrap();
    UnseenOutcome { memory_before, memory_after: memory.len(), test_events: ids.len() - n_train, verdicts }
}

/// Normal-to-normal transition counts read back from a generated log, keyed by the
/// first content word of each line.
pub fn transition_counts(lines: &[String]) -> HashMap<(String, String), u64> {
    let mut counts = HashMap::new();
    let parsed: Vec<(bool, String)> = lines
        .iter()
        .map(|l| {
            let mut parts = l.split_whitespace();
            let normal = parts.next() == Some("-");
            // label, timestamp, node, level, then content
            let word = parts.nth(3).unwrap_or_default().to_string();
            (normal, word)
        })
        .collect();
    for w in parsed.windows(2) {
        if w[0].0 && w[1].0 {
            *counts.entry((w[0].1.clone(), w[1].1.clone())).or_insert(0) += 1;
        }
    }
    counts
}

/// A quick full-pipeline configuration over a small synthetic corpus.
pub fn small_run_config(seed: u64) -> logtgn::harness::RunConfig {
    let mut cfg = logtgn::harness::RunConfig { seed, ..Default::default() };
    cfg.synth.n_events = 4000;
    cfg.synth.n_templates = 12;
    cfg.synth.burst_templates = 6;
    cfg.train.epochs = 2;
    cfg
}

/// Runs the pipeline twice in fresh directories and reports whether verdicts and
/// checkpoints are byte-identical.
pub fn determinism_holds(cfg: &logtgn::harness::RunConfig) -> bool {
    use logtgn::harness::{run_pipeline, RunDir};
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (da, db) = (RunDir::new(a.path()), RunDir::new(b.path()));
    let ra = run_pipeline(cfg, &da).unwrap();
    let rb = run_pipeline(cfg, &db).unwrap();
    let same = |p: std::path::PathBuf, q: std::path::PathBuf| std::fs::read(p).unwrap() == std::fs::read(q).unwrap();
    ra.report == rb.report
        && same(da.verdicts(), db.verdicts())
        && same(da.checkpoint(), db.checkpoint())
        && same(da.memory(), db.memory())
}
