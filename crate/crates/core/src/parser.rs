//! Log line tokenization and template mining with a fixed-depth prefix tree.
//!
//! Lines are split into columns according to a [`FormatSpec`], variable-looking
//! substrings of the message (integers, hex literals, IPv4 addresses, paths with
//! digits) are masked with `<*>`, and the masked token list is routed through a tree
//! keyed by token count and the first `depth - 2` tokens. Each leaf holds the
//! templates of that route; a line joins the most similar template when the
//! similarity reaches the threshold, otherwise it starts a new one.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::embed::{infer_log_level, LogLevel};
use crate::error::{Error, Result};

pub const WILDCARD: &str = "<*>";

/// Ground-truth label of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomaly,
}

impl Label {
    /// Alert-tag convention of the public supercomputer logs: `-` marks a non-alert line.
    pub fn from_alert_column(value: &str) -> Label {
        if value == "-" {
            Label::Normal
        } else {
            Label::Anomaly
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Anomaly => "anomaly",
        }
    }

    pub fn parse(value: &str) -> Result<Label> {
        match value {
            "normal" => Ok(Label::Normal),
            "anomaly" => Ok(Label::Anomaly),
            other => Err(Error::format(format!("unknown label {other:?}"))),
        }
    }
}

/// Column layout of a log file, written loghub style: `<Label> <Timestamp> ... <Content>`.
///
/// Columns are whitespace separated and `Content` must be last; it takes the rest of
/// the line. `Label`, `Timestamp` and `Level` are interpreted, all other columns are
/// skipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatSpec {
    columns: Vec<String>,
}

impl FormatSpec {
    pub const BGL: &'static str =
        "<Label> <Timestamp> <Date> <Node> <Time> <NodeRepeat> <Type> <Component> <Level> <Content>";
    pub const SYNTHETIC: &'static str = "<Label> <Timestamp> <Node> <Level> <Content>";

    pub fn parse(layout: &str) -> Result<FormatSpec> {
        let columns = layout
            .split_whitespace()
            .map(|c| {
                c.strip_prefix('<')
                    .and_then(|c| c.strip_suffix('>'))
                    .filter(|c| !c.is_empty())
                    .map(str::to_string)
                    .ok_or_else(|| Error::Config(format!("bad column {c:?} in log format")))
            })
            .collect::<Result<Vec<_>>>()?;
        match columns.iter().position(|c| c == "Content") {
            Some(i) if i + 1 == columns.len() => {}
            _ => return Err(Error::Config("log format must end with <Content>".into())),
        }
        if !columns.iter().any(|c| c == "Timestamp") {
            return Err(Error::Config("log format needs a <Timestamp> column".into()));
        }
        Ok(FormatSpec { columns })
    }

    pub fn bgl() -> FormatSpec {
        FormatSpec::parse(Self::BGL).expect("builtin layout")
    }

    pub fn synthetic() -> FormatSpec {
        FormatSpec::parse(Self::SYNTHETIC).expect("builtin layout")
    }

    /// Resolves the named presets `bgl` / `synthetic`, otherwise parses a layout.
    pub fn named(name: &str) -> Result<FormatSpec> {
        match name {
            "bgl" => Ok(Self::bgl()),
            "synthetic" => Ok(Self::synthetic()),
            layout => Self::parse(layout),
        }
    }

    pub fn has_label(&self) -> bool {
        self.columns.iter().any(|c| c == "Label")
    }
}

/// One accepted input line.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub label: Option<Label>,
    /// Seconds since the epoch.
    pub timestamp: f64,
    pub level: Option<String>,
    /// Message tokens after masking.
    pub content: Vec<String>,
    /// Message tokens before masking, aligned with `content`.
    pub raw_content: Vec<String>,
}

/// Why a line was rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LineError {
    Empty,
    MissingColumns { expected: usize, found: usize },
    BadTimestamp(String),
    EmptyContent,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LineError::Empty => write!(f, "empty line"),
            LineError::MissingColumns { expected, found } => {
                write!(f, "expected {expected} columns, found {found}")
            }
            LineError::BadTimestamp(t) => write!(f, "unparseable timestamp {t:?}"),
            LineError::EmptyContent => write!(f, "empty message content"),
        }
    }
}

static IPV4: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b\d{1,3}(?:\.\d{1,3}){3}(?::\d+)?\b").unwrap());
static HEX: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b0[xX][0-9a-fA-F]+\b").unwrap());
static PATH: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?:/[\w.\-]+)+/?").unwrap());
static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b\d+(?:\.\d+)?\b").unwrap());

/// Replaces variable-looking substrings with the wildcard marker.
pub fn mask_content(content: &str) -> String {
    let s = IPV4.replace_all(content, WILDCARD);
    let s = HEX.replace_all(&s, WILDCARD);
    let s = PATH.replace_all(&s, |caps: &regex::Captures<'_>| {
        let m = &caps[0];
        if m.chars().any(|c| c.is_ascii_digit()) {
            WILDCARD.to_string()
        } else {
            m.to_string()
        }
    });
    NUMBER.replace_all(&s, WILDCARD).into_owned()
}

/// Splits a raw line into a [`LogRecord`].
pub fn tokenize(raw_line: &str, format: &FormatSpec) -> std::result::Result<LogRecord, LineError> {
    let line = raw_line.trim();
    if line.is_empty() {
        return Err(LineError::Empty);
    }
    let n_fixed = format.columns.len() - 1;
    let mut rest = line;
    let mut fields = Vec::with_capacity(n_fixed);
    for _ in 0..n_fixed {
        let trimmed = rest.trim_start();
        let end = trimmed.find(char::is_whitespace).unwrap_or(trimmed.len());
        if end == 0 {
            break;
        }
        fields.push(&trimmed[..end]);
        rest = &trimmed[end..];
    }
    if fields.len() < n_fixed {
        return Err(LineError::MissingColumns {
            expected: n_fixed + 1,
            found: fields.len(),
        });
    }

    let mut label = None;
    let mut timestamp = None;
    let mut level = None;
    for (name, value) in format.columns.iter().zip(&fields) {
        match name.as_str() {
            "Label" => label = Some(Label::from_alert_column(value)),
            "Timestamp" => {
                let t: f64 = value
                    .parse()
                    .map_err(|_| LineError::BadTimestamp(value.to_string()))?;
                if !t.is_finite() || t < 0.0 {
                    return Err(LineError::BadTimestamp(value.to_string()));
                }
                timestamp = Some(t);
            }
            "Level" => level = Some(value.to_string()),
            _ => {}
        }
    }

    let raw_content: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
    if raw_content.is_empty() {
        return Err(LineError::EmptyContent);
    }
    let content: Vec<String> = raw_content.iter().map(|t| mask_content(t)).collect();
    Ok(LogRecord {
        label,
        timestamp: timestamp.expect("format has a timestamp column"),
        level,
        content,
        raw_content,
    })
}

/// A mined constant pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub id: usize,
    pub tokens: Vec<String>,
    pub occurrences: u64,
    pub level: LogLevel,
}

impl Template {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Fraction of positions where the tokens agree; a wildcard on either side agrees
/// with anything.
pub fn template_similarity(tokens_a: &[String], tokens_b: &[String]) -> Result<f64> {
    if tokens_a.len() != tokens_b.len() {
        return Err(Error::contract(format!(
            "similarity needs equal token counts ({} vs {})",
            tokens_a.len(),
            tokens_b.len()
        )));
    }
    if tokens_a.is_empty() {
        return Ok(1.0);
    }
    let matches = tokens_a
        .iter()
        .zip(tokens_b)
        .filter(|(a, b)| a == b || *a == WILDCARD || *b == WILDCARD)
        .count();
    Ok(matches as f64 / tokens_a.len() as f64)
}

fn exact_matches(template: &[String], tokens: &[String]) -> usize {
    template.iter().zip(tokens).filter(|(a, b)| a == b).count()
}

/// Hyperparameters of the prefix-tree parser.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParserConfig {
    pub depth: usize,
    pub similarity_threshold: f64,
    pub max_children: usize,
}

impl Default for ParserConfig {
    fn default() -> Self {
        ParserConfig {
            depth: 4,
            similarity_threshold: 0.5,
            max_children: 100,
        }
    }
}

impl ParserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 3 {
            return Err(Error::Config("parser depth must be at least 3".into()));
        }
        if !(self.similarity_threshold > 0.0 && self.similarity_threshold < 1.0) {
            return Err(Error::Config("similarity threshold must lie in (0, 1)".into()));
        }
        if self.max_children == 0 {
            return Err(Error::Config("max children must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Default, Clone)]
struct TreeNode {
    children: HashMap<String, TreeNode>,
    templates: Vec<usize>,
}

/// Result of assigning a record to a template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseOutcome {
    pub template_id: usize,
    pub parameters: Vec<String>,
}

/// Mutable template store plus routing tree. Ids are dense in first-seen order.
#[derive(Debug, Clone)]
pub struct ParserState {
    config: ParserConfig,
    templates: Vec<Template>,
    /// Highest explicit level seen on records of each template, if any.
    explicit_levels: Vec<Option<LogLevel>>,
    roots: HashMap<usize, TreeNode>,
}

impl ParserState {
    pub fn new(config: ParserConfig) -> Result<Self> {
        config.validate()?;
        Ok(ParserState {
            config,
            templates: Vec::new(),
            explicit_levels: Vec::new(),
            roots: HashMap::new(),
        })
    }

    pub fn config(&self) -> &ParserConfig {
        &self.config
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    fn route_key(token: &str) -> &str {
        if token.chars().any(|c| c.is_ascii_digit()) {
            WILDCARD
        } else {
            token
        }
    }

    fn leaf_mut(&mut self, tokens: &[String]) -> &mut TreeNode {
        let max_children = self.config.max_children;
        let mut node = self.roots.entry(tokens.len()).or_default();
        for token in tokens.iter().take(self.config.depth - 2) {
            let key = Self::route_key(token);
            let key = if node.children.contains_key(key) || node.children.len() < max_children {
                key
            } else {
                WILDCARD
            };
            node = node.children.entry(key.to_string()).or_default();
        }
        node
    }

    fn leaf(&self, tokens: &[String]) -> Option<&TreeNode> {
        let mut node = self.roots.get(&tokens.len())?;
        for token in tokens.iter().take(self.config.depth - 2) {
            let key = Self::route_key(token);
            node = node
                .children
                .get(key)
                .or_else(|| node.children.get(WILDCARD))?;
        }
        Some(node)
    }

    /// Best template of a leaf: highest similarity, then most exact matches, then lowest id.
    fn best_match(&self, candidates: &[usize], tokens: &[String]) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64, usize)> = None;
        for &id in candidates {
            let t = &self.templates[id].tokens;
            let sim = template_similarity(t, tokens).expect("leaf templates share token count");
            let exact = exact_matches(t, tokens);
            let better = match best {
                None => true,
                Some((_, bs, be)) => sim > bs || (sim == bs && exact > be),
            };
            if better {
                best = Some((id, sim, exact));
            }
        }
        best.map(|(id, sim, _)| (id, sim))
    }

    /// Read-only lookup of the template a token list would be assigned to, if any.
    pub fn lookup(&self, tokens: &[String]) -> Option<usize> {
        let leaf = self.leaf(tokens)?;
        self.best_match(&leaf.templates, tokens)
            .filter(|&(_, sim)| sim >= self.config.similarity_threshold)
            .map(|(id, _)| id)
    }

    /// Assigns a record to a template, creating or generalizing templates as needed.
    pub fn parse_record(&mut self, record: &LogRecord) -> ParseOutcome {
        let explicit = record.level.as_deref().and_then(LogLevel::from_column);
        let outcome = self.parse_tokens(&record.content, Some(&record.raw_content));
        let slot = &mut self.explicit_levels[outcome.template_id];
        if let Some(level) = explicit {
            *slot = Some(slot.map_or(level, |l| l.max(level)));
        }
        self.refresh_level(outcome.template_id);
        outcome
    }

    /// Parses a bare token list (already masked).
    pub fn parse_tokens(&mut self, tokens: &[String], raw: Option<&[String]>) -> ParseOutcome {
        assert!(!tokens.is_empty(), "records carry at least one token");
        let threshold = self.config.similarity_threshold;
        let candidates = self.leaf_mut(tokens).templates.clone();
        let id = match self.best_match(&candidates, tokens) {
            Some((id, sim)) if sim >= threshold => {
                let merged: Vec<String> = self.templates[id]
                    .tokens
                    .iter()
                    .zip(tokens)
                    .map(|(t, x)| if t == x { t.clone() } else { WILDCARD.to_string() })
                    .collect();
                // Generalizing must not collide with a sibling; the line then fits the
                // sibling exactly and goes there instead.
                let twin = candidates
                    .iter()
                    .copied()
                    .find(|&other| other != id && self.templates[other].tokens == merged);
                let target = twin.unwrap_or(id);
                if twin.is_none() {
                    self.templates[id].tokens = merged;
                }
                self.templates[target].occurrences += 1;
                target
            }
            _ => {
                let id = self.templates.len();
                self.templates.push(Template {
                    id,
                    tokens: tokens.to_vec(),
                    occurrences: 1,
                    level: LogLevel::Info,
                });
                self.explicit_levels.push(None);
                self.leaf_mut(tokens).templates.push(id);
                id
            }
        };
        self.refresh_level(id);
        let source = raw.filter(|r| r.len() == tokens.len()).unwrap_or(tokens);
        let parameters = self.templates[id]
            .tokens
            .iter()
            .zip(source)
            .filter(|(t, _)| t.contains(WILDCARD))
            .map(|(_, x)| x.clone())
            .collect();
        ParseOutcome {
            template_id: id,
            parameters,
        }
    }

    fn refresh_level(&mut self, id: usize) {
        let level = self.explicit_levels[id].unwrap_or_else(|| infer_log_level(&self.templates[id].text()));
        self.templates[id].level = level;
    }

    /// Masks and parses a free-text message, as if it were the content column of a line.
    pub fn parse_text(&mut self, message: &str) -> ParseOutcome {
        let raw: Vec<String> = message.split_whitespace().map(str::to_string).collect();
        let masked: Vec<String> = raw.iter().map(|t| mask_content(t)).collect();
        self.parse_tokens(&masked, Some(&raw))
    }

    /// Rebuilds a store from templates in id order (used when re-importing an export).
    pub fn from_templates(config: ParserConfig, templates: Vec<Template>) -> Result<Self> {
        let mut state = ParserState::new(config)?;
        for (expected, t) in templates.iter().enumerate() {
            if t.id != expected {
                return Err(Error::format(format!(
                    "template ids must be contiguous from 0; found {} at row {expected}",
                    t.id
                )));
            }
            if t.tokens.is_empty() {
                return Err(Error::format(format!("template {} has no tokens", t.id)));
            }
            state.leaf_mut(&t.tokens).templates.push(t.id);
        }
        state.explicit_levels = templates.iter().map(|t| Some(t.level)).collect();
        state.templates = templates;
        Ok(state)
    }
}

/// Writes `EventId,EventTemplate,Occurrences,LogLevel`, one row per template in id order.
pub fn export_templates(state: &ParserState, path: &Path) -> Result<usize> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["EventId", "EventTemplate", "Occurrences", "LogLevel"])?;
    for t in state.templates() {
        w.write_record([
            t.id.to_string(),
            t.text(),
            t.occurrences.to_string(),
            t.level.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(state.len())
}

/// Reads a templates CSV written by [`export_templates`].
pub fn read_templates(path: &Path) -> Result<Vec<Template>> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        if row.len() != 4 {
            return Err(Error::format(format!("templates row has {} columns", row.len())));
        }
        let id = row[0]
            .parse()
            .map_err(|_| Error::format(format!("bad EventId {:?}", &row[0])))?;
        let occurrences = row[2]
            .parse()
            .map_err(|_| Error::format(format!("bad Occurrences {:?}", &row[2])))?;
        out.push(Template {
            id,
            tokens: row[1].split_whitespace().map(str::to_string).collect(),
            occurrences,
            level: row[3].parse()?,
        });
    }
    Ok(out)
}

pub fn import_templates(path: &Path, config: ParserConfig) -> Result<ParserState> {
    ParserState::from_templates(config, read_templates(path)?)
}

/// One row of the structured event file: the parsed, chronologically ordered stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredEvent {
    pub index: usize,
    pub timestamp: f64,
    pub template_id: usize,
    pub label: Option<Label>,
}

pub fn write_structured(path: &Path, events: &[StructuredEvent]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "index,timestamp,template_id,label")?;
    for e in events {
        writeln!(
            w,
            "{},{},{},{}",
            e.index,
            e.timestamp,
            e.template_id,
            e.label.map_or("", Label::as_str)
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_structured(path: &Path) -> Result<Vec<StructuredEvent>> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let field = |i: usize| row.get(i).ok_or_else(|| Error::format("short structured row"));
        let bad = |what: &str| Error::format(format!("bad {what} in structured event file"));
        let label = match field(3)? {
            "" => None,
            l => Some(Label::parse(l)?),
        };
        out.push(StructuredEvent {
            index: field(0)?.parse().map_err(|_| bad("index"))?,
            timestamp: field(1)?.parse().map_err(|_| bad("timestamp"))?,
            template_id: field(2)?.parse().map_err(|_| bad("template_id"))?,
            label,
        });
    }
    Ok(out)
}
