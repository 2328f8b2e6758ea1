//! Semantic vectors and log levels for templates.
//!
//! The built-in provider is a signed feature-hashing embedder: every literal word of
//! a template lands on one coordinate with a hashed sign, and the sum is normalized.
//! Templates that share words therefore get similar vectors. Vectors computed offline
//! by a language model can be loaded from the binary table format below and are
//! projected to the configured dimension when needed.
//!
//! Table layout (little endian):
//!
//! ```text
//! magic  b"SEMV"
//! count  u32
//! dim    u32
//! count x { key_len u32, key utf-8 bytes, dim x f32 }
//! ```

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parser::{Template, WILDCARD};

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_HASH_SEED: u64 = 0x5eed_1e55;

const MAGIC: &[u8; 4] = b"SEMV";
const NORM_TOLERANCE: f64 = 1e-6;

/// Severity of a template, ordered `Debug < Info < Warn < Error < Fatal`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LogLevel {
    Debug,
    Info,
    Warn,
    Error,
    Fatal,
}

impl LogLevel {
    pub const ALL: [LogLevel; 5] = [
        LogLevel::Debug,
        LogLevel::Info,
        LogLevel::Warn,
        LogLevel::Error,
        LogLevel::Fatal,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LogLevel::Debug => "DEBUG",
            LogLevel::Info => "INFO",
            LogLevel::Warn => "WARN",
            LogLevel::Error => "ERROR",
            LogLevel::Fatal => "FATAL",
        }
    }

    /// Maps a level column value from a raw log (`WARNING`, `SEVERE`, `FAILURE`, ...)
    /// onto the five-level scale. Unknown spellings give `None`.
    pub fn from_column(value: &str) -> Option<LogLevel> {
        match value.to_ascii_uppercase().as_str() {
            "TRACE" | "DEBUG" | "FINE" | "FINER" | "FINEST" => Some(LogLevel::Debug),
            "INFO" | "NOTICE" => Some(LogLevel::Info),
            "WARN" | "WARNING" => Some(LogLevel::Warn),
            "ERROR" | "ERR" | "SEVERE" => Some(LogLevel::Error),
            "FATAL" | "FAILURE" | "CRITICAL" | "CRIT" | "ALERT" | "EMERG" | "PANIC" => {
                Some(LogLevel::Fatal)
            }
            _ => None,
        }
    }
}

impl fmt::Display for LogLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LogLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LogLevel::ALL
            .into_iter()
            .find(|level| level.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::format(format!("unknown log level {s:?}")))
    }
}

/// Keyword rules in priority order; the first group with a hit decides.
const LEVEL_RULES: [(LogLevel, &[&str]); 4] = [
    (LogLevel::Fatal, &["critical", "fatal"]),
    (LogLevel::Error, &["error", "fail"]),
    (LogLevel::Warn, &["warn", "deprecated"]),
    (LogLevel::Debug, &["debug", "trace"]),
];

/// Assigns a level to a template from its text using case-insensitive keyword rules.
pub fn infer_log_level(template_text: &str) -> LogLevel {
    let lower = template_text.to_lowercase();
    LEVEL_RULES
        .iter()
        .find(|(_, words)| words.iter().any(|w| lower.contains(w)))
        .map(|(level, _)| *level)
        .unwrap_or(LogLevel::Info)
}

/// One-hot encoding in the fixed order `[DEBUG, INFO, WARN, ERROR, FATAL]`.
pub fn one_hot_level(level: LogLevel) -> [f64; 5] {
    let mut out = [0.0; 5];
    out[level.index()] = 1.0;
    out
}

/// A unit-norm vector describing one template.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticVector(Vec<f64>);

impl SemanticVector {
    /// Normalizes `values` to unit length. Fails on empty, zero or non-finite input.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("semantic vector must have at least one dimension"));
        }
        let norm = l2_norm(&values);
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::contract("semantic vector has zero or non-finite norm"));
        }
        Ok(SemanticVector(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Wraps values that are already unit length.
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::contract(format!(
                "semantic vector norm {norm} is not 1"
            )));
        }
        Ok(SemanticVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub(crate) fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Signed feature-hashing embedder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedEmbedder {
    dim: usize,
    seed: u64,
}

impl HashedEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(HashedEmbedder { dim, seed })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Lowercased alphanumeric words of the literal (non-wildcard) parts of a template.
    pub fn words(text: &str) -> Vec<String> {
        text.split_whitespace()
            .flat_map(|tok| {
                tok.replace(WILDCARD, " ")
                    .split(|c: char| !c.is_alphanumeric())
                    .filter(|w| !w.is_empty())
                    .map(str::to_lowercase)
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    fn add_word(&self, acc: &mut [f64], word: &str) {
        let position = fnv1a(self.seed, word.as_bytes()) % self.dim as u64;
        let sign = if fnv1a(self.seed ^ 0xa5a5_a5a5_a5a5_a5a5, word.as_bytes()) & 1 == 0 {
            1.0
        } else {
            -1.0
        };
        acc[position as usize] += sign;
    }

    pub fn embed_text(&self, text: &str) -> SemanticVector {
        let mut acc = vec![0.0; self.dim];
        for word in Self::words(text) {
            self.add_word(&mut acc, &word);
        }
        if acc.iter().all(|&v| v == 0.0) {
            // Only wildcards, or signs that cancelled: hash the whole text instead.
            self.add_word(&mut acc, text);
        }
        SemanticVector::normalized(acc).expect("hashed vector has a nonzero coordinate")
    }

    pub fn embed(&self, template: &Template) -> SemanticVector {
        self.embed_text(&template.text())
    }
}

/// Where template vectors come from.
#[derive(Debug, Clone)]
pub enum EmbeddingProvider {
    Hashed(HashedEmbedder),
    /// Precomputed vectors keyed by template text; misses fall back to hashing.
    External {
        table: HashMap<String, SemanticVector>,
        fallback: HashedEmbedder,
    },
}

impl EmbeddingProvider {
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::Hashed(h) => h.dim(),
            EmbeddingProvider::External { fallback, .. } => fallback.dim(),
        }
    }

    /// Returns the vector and whether the external table missed.
    pub fn embed_template(&self, template: &Template) -> (SemanticVector, bool) {
        match self {
            EmbeddingProvider::Hashed(h) => (h.embed(template), false),
            EmbeddingProvider::External { table, fallback } => {
                let text = template.text();
                match table.get(&text) {
                    Some(v) => (v.clone(), false),
                    None => {
                        log::warn!(
                            "no external vector for template {} ({text:?}); using hashed embedding",
                            template.id
                        );
                        (fallback.embed(template), true)
                    }
                }
            }
        }
    }
}

/// Writes vectors in the binary table format. Keys are written in the given order.
pub fn save_embeddings<'a, I>(path: &Path, dim: usize, entries: I) -> Result<usize>
where
    I: IntoIterator<Item = (&'a str, &'a [f64])>,
{
    let mut body = Vec::new();
    let mut count: u32 = 0;
    for (key, values) in entries {
        if values.len() != dim {
            return Err(Error::contract(format!(
                "vector for {key:?} has dimension {} but table dimension is {dim}",
                values.len()
            )));
        }
        let key_len = u32::try_from(key.len())
            .map_err(|_| Error::contract("embedding key longer than u32::MAX bytes"))?;
        body.extend_from_slice(&key_len.to_le_bytes());
        body.extend_from_slice(key.as_bytes());
        for &v in values {
            body.extend_from_slice(&(v as f32).to_le_bytes());
        }
        count += 1;
    }
    let file = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(MAGIC)?;
    out.write_all(&count.to_le_bytes())?;
    out.write_all(&(dim as u32).to_le_bytes())?;
    out.write_all(&body)?;
    out.flush()?;
    Ok(count as usize)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| Error::format("embedding table is truncated"))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Raw vectors as stored, before normalization or projection.
pub fn read_embedding_table(path: &Path) -> Result<(usize, Vec<(String, Vec<f64>)>)> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::format("embedding table has bad magic"));
    }
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if dim == 0 && count > 0 {
        return Err(Error::format("embedding table declares dimension 0"));
    }
    let mut entries = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let key_len = r.u32()? as usize;
        let key = std::str::from_utf8(r.take(key_len)?)
            .map_err(|_| Error::format("embedding key is not valid UTF-8"))?
            .to_string();
        let values = (0..dim)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        entries.push((key, values));
    }
    if r.pos != bytes.len() {
        return Err(Error::format("trailing bytes after embedding table"));
    }
    Ok((dim, entries))
}

/// Loads a vector table, renormalizing every entry and projecting it to `dim`
/// with a fixed orthogonal map derived from `seed` when the stored dimension differs.
pub fn load_embeddings(path: &Path, dim: usize, seed: u64) -> Result<HashMap<String, SemanticVector>> {
    let (stored_dim, entries) = read_embedding_table(path)?;
    let projection = (stored_dim != dim && !entries.is_empty())
        .then(|| OrthogonalProjection::new(stored_dim, dim, seed));
    entries
        .into_iter()
        .map(|(key, values)| {
            let values = match &projection {
                Some(p) => p.apply(&values),
                None => values,
            };
            let v = SemanticVector::normalized(values)
                .map_err(|_| Error::format(format!("vector for {key:?} has zero norm")))?;
            Ok((key, v))
        })
        .collect()
}

/// A `from x to` matrix with orthonormal columns (or rows, when `to > from`).
#[derive(Debug, Clone)]
pub struct OrthogonalProjection {
    from: usize,
    to: usize,
    matrix: Vec<f64>,
}

impl OrthogonalProjection {
    pub fn new(from: usize, to: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0e1b_ed00);
        let (tall, short) = (from.max(to), from.min(to));
        // Gram-Schmidt on `short` random Gaussian columns of length `tall`.
        let mut columns: Vec<Vec<f64>> = Vec::with_capacity(short);
        while columns.len() < short {
            let mut c: Vec<f64> = (0..tall).map(|_| StandardNormal.sample(&mut rng)).collect();
            for prev in &columns {
                let dot: f64 = c.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (x, p) in c.iter_mut().zip(prev) {
                    *x -= dot * p;
                }
            }
            let norm = l2_norm(&c);
            if norm > 1e-8 {
                c.iter_mut().for_each(|x| *x /= norm);
                columns.push(c);
            }
        }
        let mut matrix = vec![0.0; from * to];
        for (j, col) in columns.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                if from >= to {
                    matrix[i * to + j] = v;
                } else {
                    matrix[j * to + i] = v;
                }
            }
        }
        OrthogonalProjection { from, to, matrix }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.from);
        let mut out = vec![0.0; self.to];
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.matrix[i * self.to..(i + 1) * self.to];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &SemanticVector, b: &SemanticVector) -> f64 {
        a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn level_rules_follow_priority() {
        assert_eq!(infer_log_level("data TLB error interrupt"), LogLevel::Error);
        assert_eq!(infer_log_level("instruction cache parity"), LogLevel::Info);
        assert_eq!(infer_log_level("fatal kernel failure"), LogLevel::Fatal);
        assert_eq!(infer_log_level("Deprecated option <*>"), LogLevel::Warn);
        assert_eq!(infer_log_level("TRACE enter <*>"), LogLevel::Debug);
        assert_eq!(infer_log_level("CRITICAL warn"), LogLevel::Fatal);
    }

    #[test]
    fn level_inference_ignores_case() {
        for text in ["disk FAILURE", "Disk Failure", "disk failure"] {
            assert_eq!(infer_log_level(text), LogLevel::Error);
        }
    }

    #[test]
    fn one_hot_order() {
        assert_eq!(one_hot_level(LogLevel::Debug), [1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(one_hot_level(LogLevel::Error), [0.0, 0.0, 0.0, 1.0, 0.0]);
        for level in LogLevel::ALL {
            assert_eq!(one_hot_level(level).iter().sum::<f64>(), 1.0);
        }
        let distinct: std::collections::HashSet<_> = LogLevel::ALL
            .iter()
            .map(|&l| one_hot_level(l).map(|v| v as u8))
            .collect();
        assert_eq!(distinct.len(), 5);
    }

    #[test]
    fn level_parse_roundtrip() {
        for level in LogLevel::ALL {
            assert_eq!(level.as_str().parse::<LogLevel>().unwrap(), level);
        }
        assert!("LOUD".parse::<LogLevel>().is_err());
        assert_eq!(LogLevel::from_column("WARNING"), Some(LogLevel::Warn));
        assert_eq!(LogLevel::from_column("SEVERE"), Some(LogLevel::Error));
        assert_eq!(LogLevel::from_column("FAILURE"), Some(LogLevel::Fatal));
        assert_eq!(LogLevel::from_column("RAS"), None);
    }

    #[test]
    fn hashed_embedding_is_deterministic_and_unit() {
        let h = HashedEmbedder::new(DEFAULT_DIM, DEFAULT_HASH_SEED).unwrap();
        let a = h.embed_text("CE sym <*>, at <*>, mask <*>");
        let b = h.embed_text("CE sym <*>, at <*>, mask <*>");
        assert_eq!(a, b);
        assert!((l2_norm(a.as_slice()) - 1.0).abs() < 1e-6);
        let only_wildcards = h.embed_text("<*> <*>");
        assert!((l2_norm(only_wildcards.as_slice()) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hashed_embedding_tracks_word_overlap() {
        // Frozen with the default seed and dimension: three shared words out of
        // three each ("disk", "error", plus one distinct) versus no shared words.
        let h = HashedEmbedder::new(DEFAULT_DIM, DEFAULT_HASH_SEED).unwrap();
        let on = h.embed_text("disk error on <*>");
        let at = h.embed_text("disk error at <*>");
        let login = h.embed_text("user login <*>");
        let near = cos(&on, &at);
        let far = cos(&on, &login);
        assert!((near - 2.0 / 3.0).abs() < 1e-12, "near = {near}");
        assert!(far.abs() < 1e-12, "far = {far}");
        assert!(near > far);
    }

    #[test]
    fn table_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.bin");
        save_embeddings(&path, 3, std::iter::empty()).unwrap();
        assert!(load_embeddings(&path, 3, 1).unwrap().is_empty());

        let a = [0.6, 0.8, 0.0];
        let b = [0.0, 0.0, 1.0];
        save_embeddings(&path, 3, [("alpha <*>", &a[..]), ("beta", &b[..])]).unwrap();
        let loaded = load_embeddings(&path, 3, 1).unwrap();
        assert_eq!(loaded.len(), 2);
        for (k, v) in [("alpha <*>", a), ("beta", b)] {
            let got = loaded[k].as_slice();
            for (x, y) in got.iter().zip(v) {
                assert!((x - y).abs() < 1e-6);
            }
        }

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 2);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_embeddings(&path, 3, 1), Err(Error::Format(_))));
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_embeddings(&path, 3, 1), Err(Error::Format(_))));
    }

    #[test]
    fn projection_keeps_cosine_order() {
        // A reference direction and five vectors at decreasing cosine to it.
        let from = 768;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut gauss = || -> Vec<f64> { (0..from).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let unit = |v: Vec<f64>| SemanticVector::normalized(v).unwrap().into_inner();
        let reference = unit(gauss());
        let targets: [f64; 5] = [0.95, 0.75, 0.55, 0.35, 0.15];
        let samples: Vec<Vec<f64>> = targets
            .iter()
            .map(|&c| {
                let noise = gauss();
                let dot: f64 = noise.iter().zip(&reference).map(|(a, b)| a * b).sum();
                let ortho = unit(noise.iter().zip(&reference).map(|(n, r)| n - dot * r).collect());
                let s = (1.0 - c * c).sqrt();
                reference.iter().zip(&ortho).map(|(r, o)| c * r + s * o).collect()
            })
            .collect();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wide.bin");
        let mut entries: Vec<(String, Vec<f64>)> = vec![("ref".into(), reference.clone())];
        for (i, s) in samples.iter().enumerate() {
            entries.push((format!("s{i}"), s.clone()));
        }
        save_embeddings(&path, from, entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))).unwrap();
        let loaded = load_embeddings(&path, 64, 7).unwrap();
        let r = &loaded["ref"];
        assert_eq!(r.dim(), 64);
        let cosines: Vec<f64> = (0..5).map(|i| cos(r, &loaded[&format!("s{i}")])).collect();
        for v in loaded.values() {
            assert!((l2_norm(v.as_slice()) - 1.0).abs() < 1e-6);
        }
        for w in cosines.windows(2) {
            assert!(w[0] > w[1], "cosine order broken: {cosines:?}");
        }
    }

    #[test]
    fn projection_is_orthonormal() {
        for (from, to) in [(10, 4), (4, 10)] {
            let p = OrthogonalProjection::new(from, to, 11);
            let short = from.min(to);
            let tall = from.max(to);
            for a in 0..short {
                for b in 0..short {
                    let dot: f64 = (0..tall)
                        .map(|i| {
                            let (x, y) = if from >= to {
                                (p.matrix[i * to + a], p.matrix[i * to + b])
                            } else {
                                (p.matrix[a * to + i], p.matrix[b * to + i])
                            };
                            x * y
                        })
                        .sum();
                    let expect = if a == b { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() < 1e-9);
                }
            }
        }
    }
}
