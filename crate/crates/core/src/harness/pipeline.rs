//! File-backed stages. Each stage reads the artifacts of the previous ones from the
//! run directory, so any stage can be rerun on its own.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detector::{Decision, Detector, EpochMetrics, NodeTable, Verdict};
use crate::embed::{load_embeddings, EmbeddingProvider, HashedEmbedder, LogLevel, SemanticVector};
use crate::error::{Error, Result};
use crate::graph::{
    build_events, read_events, split_events, write_events, CooccurrenceTable, FeatureContext, HopSet,
    Occurrence,
};
use crate::parser::{
    export_templates, read_structured, read_templates, write_structured, Label, ParserState, StructuredEvent,
    Template,
};
use crate::tgn::MemoryState;

use super::config::{ProviderKind, RunConfig};
use super::ingest::{ingest_dataset, sort_chronologically};
use super::metrics::{evaluate_pairs, MetricReport};

/// Artifact locations inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn synthetic_log(&self) -> PathBuf {
        self.file("synthetic.log")
    }
    pub fn templates(&self) -> PathBuf {
        self.file("templates.csv")
    }
    pub fn structured(&self) -> PathBuf {
        self.file("structured.csv")
    }
    pub fn manifest(&self) -> PathBuf {
        self.file("manifest.json")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.file("embeddings.bin")
    }
    pub fn cooccurrence(&self) -> PathBuf {
        self.file("cooc.csv")
    }
    pub fn graph_info(&self) -> PathBuf {
        self.file("graph.json")
    }
    pub fn train_events(&self) -> PathBuf {
        self.file("train_events.csv")
    }
    pub fn test_events(&self) -> PathBuf {
        self.file("test_events.csv")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.file("checkpoint.bin")
    }
    pub fn memory(&self) -> PathBuf {
        self.file("memory.bin")
    }
    pub fn training_log(&self) -> PathBuf {
        self.file("training.json")
    }
    pub fn verdicts(&self) -> PathBuf {
        self.file("verdicts.csv")
    }
    pub fn report_json(&self) -> PathBuf {
        self.file("report.json")
    }
    pub fn report_txt(&self) -> PathBuf {
        self.file("report.txt")
    }
}

/// Written by the parse stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub input: PathBuf,
    pub records: usize,
    pub rejected: usize,
    /// Sequence position of the first test event.
    pub split_index: usize,
    /// Templates first seen in the training part; their ids are `0..n_train_templates`.
    pub n_train_templates: usize,
    pub n_templates: usize,
}

/// Written by the build stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphInfo {
    pub hops: Vec<usize>,
    pub train_events: usize,
    pub test_events: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochMetrics>,
    pub seconds: f64,
    pub train_events: usize,
    pub parameters: usize,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes a synthetic corpus into the run directory and returns its path.
pub fn synthesize(cfg: &RunConfig, dir: &RunDir) -> Result<PathBuf> {
    fs::create_dir_all(&dir.root).map_err(|e| Error::file(&dir.root, e))?;
    let corpus = cfg.synth.generate(cfg.seed)?;
    let path = dir.synthetic_log();
    corpus.write(&path)?;
    log::info!(
        "synthesized {} lines ({} anomalous) into {}",
        corpus.lines.len(),
        corpus.anomaly_count(),
        path.display()
    );
    Ok(path)
}

/// Ingests, sorts, splits and mines templates over the whole stream.
pub fn parse_stage(cfg: &RunConfig, dir: &RunDir, input: &Path) -> Result<Manifest> {
    fs::create_dir_all(&dir.root).map_err(|e| Error::file(&dir.root, e))?;
    let format = cfg.format()?;
    let mut ingested = ingest_dataset(input, &format, cfg.data.head_limit)?;
    sort_chronologically(&mut ingested.records);
    let records = &ingested.records;
    let split_index = (cfg.data.split_ratio * records.len() as f64).floor() as usize;
    let mut state = ParserState::new(cfg.parser)?;
    let mut structured = Vec::with_capacity(records.len());
    let mut n_train_templates = 0;
    for (index, record) in records.iter().enumerate() {
        if index == split_index {
            n_train_templates = state.len();
        }
        let outcome = state.parse_record(record);
        structured.push(StructuredEvent {
            index,
            timestamp: record.timestamp,
            template_id: outcome.template_id,
            label: record.label,
        });
    }
    if split_index == records.len() {
        n_train_templates = state.len();
    }
    export_templates(&state, &dir.templates())?;
    write_structured(&dir.structured(), &structured)?;
    let manifest = Manifest {
        input: input.to_path_buf(),
        records: records.len(),
        rejected: ingested.rejected,
        split_index,
        n_train_templates,
        n_templates: state.len(),
    };
    write_json(&dir.manifest(), &manifest)?;
    log::info!(
        "parsed {} records into {} templates ({} in training), {} rejected",
        manifest.records,
        manifest.n_templates,
        manifest.n_train_templates,
        manifest.rejected
    );
    Ok(manifest)
}

fn provider(cfg: &RunConfig) -> Result<EmbeddingProvider> {
    let fallback = HashedEmbedder::new(cfg.embedding.dim, cfg.embedding.hash_seed)?;
    Ok(match cfg.embedding.provider {
        ProviderKind::Hashed => EmbeddingProvider::Hashed(fallback),
        ProviderKind::External => {
            let path = cfg
                .embedding
                .path
                .as_ref()
                .ok_or_else(|| Error::Config("external embeddings need embedding.path".into()))?;
            EmbeddingProvider::External {
                table: load_embeddings(path, cfg.embedding.dim, cfg.seed)?,
                fallback,
            }
        }
    })
}

/// Embeds every template and stores the vectors keyed by template text. Returns the
/// number of templates that fell back to hashing.
pub fn embed_stage(cfg: &RunConfig, dir: &RunDir) -> Result<usize> {
    let templates = read_templates(&dir.templates())?;
    let provider = provider(cfg)?;
    let mut misses = 0;
    let mut vectors = Vec::with_capacity(templates.len());
    for t in &templates {
        let (v, miss) = provider.embed_template(t);
        misses += usize::from(miss);
        vectors.push((t.text(), v));
    }
    crate::embed::save_embeddings(
        &dir.embeddings(),
        cfg.embedding.dim,
        vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice())),
    )?;
    Ok(misses)
}

/// Semantic vectors, levels and co-occurrence counts for every node id.
#[derive(Debug, Clone)]
pub struct NodeData {
    pub templates: Vec<Template>,
    pub vectors: Vec<SemanticVector>,
    pub levels: Vec<LogLevel>,
    pub table: CooccurrenceTable,
}

impl NodeData {
    pub fn nodes(&self) -> NodeTable<'_> {
        NodeTable {
            embeddings: &self.vectors,
            levels: &self.levels,
            table: &self.table,
        }
    }
}

fn vectors_by_id(cfg: &RunConfig, dir: &RunDir, templates: &[Template]) -> Result<Vec<SemanticVector>> {
    let table = load_embeddings(&dir.embeddings(), cfg.embedding.dim, cfg.seed)?;
    templates
        .iter()
        .map(|t| {
            let text = t.text();
            table
                .get(&text)
                .cloned()
                .ok_or(Error::MissingEmbedding { id: t.id, text })
        })
        .collect()
}

fn load_nodes(cfg: &RunConfig, dir: &RunDir, table: CooccurrenceTable) -> Result<NodeData> {
    let templates = read_templates(&dir.templates())?;
    let vectors = vectors_by_id(cfg, dir, &templates)?;
    let levels = templates.iter().map(|t| t.level).collect();
    Ok(NodeData {
        templates,
        vectors,
        levels,
        table,
    })
}

/// Co-occurrence over the training sequence, then the full event stream split at the
/// train/test boundary.
pub fn build_stage(cfg: &RunConfig, dir: &RunDir) -> Result<GraphInfo> {
    let manifest: Manifest = read_json(&dir.manifest())?;
    let structured = read_structured(&dir.structured())?;
    let hops = HopSet::new(cfg.train.hops.iter().copied())?;
    let train_ids: Vec<usize> = structured[..manifest.split_index]
        .iter()
        .map(|e| e.template_id)
        .collect();
    let table = CooccurrenceTable::build(&train_ids, &hops);
    table.save(&dir.cooccurrence())?;
    let data = load_nodes(cfg, dir, table)?;
    let ctx = FeatureContext {
        embeddings: &data.vectors,
        levels: &data.levels,
        table: &data.table,
        hops: &hops,
    };
    let sequence: Vec<Occurrence> = structured
        .iter()
        .map(|e| Occurrence {
            template_id: e.template_id,
            timestamp: e.timestamp,
        })
        .collect();
    let events = build_events(&sequence, &ctx, 0)?;
    let (train, test) = split_events(events, manifest.split_index);
    write_events(&dir.train_events(), &train, &hops)?;
    write_events(&dir.test_events(), &test, &hops)?;
    let info = GraphInfo {
        hops: hops.hops().to_vec(),
        train_events: train.len(),
        test_events: test.len(),
    };
    write_json(&dir.graph_info(), &info)?;
    Ok(info)
}

fn graph_hops(dir: &RunDir, expected: &HopSet) -> Result<()> {
    let info: GraphInfo = read_json(&dir.graph_info())?;
    if info.hops != expected.hops() {
        return Err(Error::Config(format!(
            "events were built for hops {:?} but the model uses {expected}",
            info.hops
        )));
    }
    Ok(())
}

/// Trains from scratch and stores the checkpoint and the post-training memory.
pub fn train_stage(cfg: &RunConfig, dir: &RunDir) -> Result<TrainingLog> {
    let manifest: Manifest = read_json(&dir.manifest())?;
    let mut detector = Detector::new(cfg.train_config())?;
    graph_hops(dir, &detector.hops)?;
    let events = read_events(&dir.train_events(), &detector.hops)?;
    let data = load_nodes(cfg, dir, CooccurrenceTable::load(&dir.cooccurrence())?)?;
    let excluded: BTreeSet<usize> = if cfg.train.clean_training {
        read_structured(&dir.structured())?
            .iter()
            .take(manifest.split_index)
            .filter(|e| e.label == Some(Label::Anomaly))
            .map(|e| e.index)
            .collect()
    } else {
        BTreeSet::new()
    };
    let started = Instant::now();
    let (memory, epochs) = detector.train(&events, &excluded, &data.nodes(), manifest.n_train_templates)?;
    let log = TrainingLog {
        epochs,
        seconds: started.elapsed().as_secs_f64(),
        train_events: events.len(),
        parameters: detector.store.ids().map(|id| detector.store.get(id).as_slice().len()).sum(),
    };
    detector.save(&dir.checkpoint())?;
    memory.save(&dir.memory())?;
    write_json(&dir.training_log(), &log)?;
    Ok(log)
}

/// A verdict with the ground truth of its event, when known.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVerdict {
    pub verdict: Verdict,
    pub label: Option<Label>,
}

/// Scores the test stream starting from the stored post-training memory. The stored
/// memory file is left untouched.
pub fn detect_stage(cfg: &RunConfig, dir: &RunDir, threshold: Option<f64>) -> Result<Vec<LabeledVerdict>> {
    let mut detector = Detector::load(&dir.checkpoint())?;
    if let Some(t) = threshold {
        detector.config.threshold = t;
        detector.config.validate()?;
    }
    graph_hops(dir, &detector.hops)?;
    let events = read_events(&dir.test_events(), &detector.hops)?;
    let data = load_nodes(cfg, dir, CooccurrenceTable::load(&dir.cooccurrence())?)?;
    let structured = read_structured(&dir.structured())?;
    let mut memory = MemoryState::load(&dir.memory())?;
    let verdicts = detector.detect(&events, &mut memory, &data.nodes())?;
    let labeled: Vec<LabeledVerdict> = verdicts
        .into_iter()
        .map(|v| {
            let label = structured.get(v.seq_index).and_then(|s| s.label);
            LabeledVerdict { verdict: v, label }
        })
        .collect();
    write_verdicts(&dir.verdicts(), &detector.hops, &labeled)?;
    Ok(labeled)
}

pub fn write_verdicts(path: &Path, hops: &HopSet, verdicts: &[LabeledVerdict]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let mut header = vec!["seq_index".to_string(), "timestamp".into(), "template_id".into()];
    header.extend(hops.hops().iter().map(|h| format!("p_h{h}")));
    header.extend(["decision".into(), "trigger_hop".into(), "label".into()]);
    w.write_record(&header)?;
    for lv in verdicts {
        let v = &lv.verdict;
        let mut row = vec![v.seq_index.to_string(), format!("{:?}", v.timestamp), v.template_id.to_string()];
        for &h in hops.hops() {
            let p = v.probabilities.iter().find(|(hop, _)| *hop == h).map(|(_, p)| *p);
            row.push(p.map(|p| format!("{p:?}")).unwrap_or_default());
        }
        row.push(
            match v.decision {
                Decision::Normal => "normal",
                Decision::Anomaly => "anomaly",
            }
            .into(),
        );
        row.push(v.trigger_hop.map(|h| h.to_string()).unwrap_or_default());
        row.push(lv.label.map(|l| l.as_str().to_string()).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_verdicts(path: &Path) -> Result<Vec<LabeledVerdict>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let header = r.headers()?.clone();
    let hops: Vec<usize> = header
        .iter()
        .filter_map(|c| c.strip_prefix("p_h").and_then(|h| h.parse().ok()))
        .collect();
    let n = header.len();
    if n != 6 + hops.len() {
        return Err(Error::format(format!("{}: unexpected verdict header", path.display())));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = || Error::format(format!("{}: bad verdict row {}", path.display(), i + 2));
        let mut probabilities = Vec::new();
        for (k, &h) in hops.iter().enumerate() {
            let cell = &rec[3 + k];
            if !cell.is_empty() {
                probabilities.push((h, cell.parse().map_err(|_| bad())?));
            }
        }
        let decision = match &rec[n - 3] {
            "normal" => Decision::Normal,
            "anomaly" => Decision::Anomaly,
            _ => return Err(bad()),
        };
        let trigger_hop = match &rec[n - 2] {
            "" => None,
            h => Some(h.parse().map_err(|_| bad())?),
        };
        let label = match &rec[n - 1] {
            "" => None,
            l => Some(Label::parse(l)?),
        };
        out.push(LabeledVerdict {
            verdict: Verdict {
                seq_index: rec[0].parse().map_err(|_| bad())?,
                timestamp: rec[1].parse().map_err(|_| bad())?,
                template_id: rec[2].parse().map_err(|_| bad())?,
                probabilities,
                decision,
                trigger_hop,
            },
            label,
        });
    }
    Ok(out)
}

/// Scores labeled verdicts and writes the JSON and text reports.
pub fn eval_stage(dir: &RunDir) -> Result<MetricReport> {
    let verdicts = read_verdicts(&dir.verdicts())?;
    let pairs = verdicts
        .iter()
        .map(|lv| {
            lv.label
                .map(|l| (lv.verdict.decision, l))
                .ok_or_else(|| Error::contract(format!("event {} has no label", lv.verdict.seq_index)))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate_pairs(pairs);
    write_json(&dir.report_json(), &report)?;
    fs::write(dir.report_txt(), format!("{report}\n")).map_err(|e| Error::file(dir.report_txt(), e))?;
    Ok(report)
}

/// Everything a full run produced.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub manifest: Manifest,
    pub graph: GraphInfo,
    pub training: TrainingLog,
    pub report: MetricReport,
    pub seconds: f64,
}

/// Runs every stage. Without `data.input` a synthetic corpus is generated first.
pub fn run_pipeline(cfg: &RunConfig, dir: &RunDir) -> Result<PipelineOutcome> {
    let started = Instant::now();
    let input = match &cfg.data.input {
        Some(p) => p.clone(),
        None => synthesize(cfg, dir)?,
    };
    let manifest = parse_stage(cfg, dir, &input)?;
    let misses = embed_stage(cfg, dir)?;
    if misses > 0 {
        log::warn!("{misses} templates used the hashed fallback embedding");
    }
    let graph = build_stage(cfg, dir)?;
    let training = train_stage(cfg, dir)?;
    detect_stage(cfg, dir, None)?;
    let report = eval_stage(dir)?;
    Ok(PipelineOutcome {
        manifest,
        graph,
        training,
        report,
        seconds: started.elapsed().as_secs_f64(),
    })
}
