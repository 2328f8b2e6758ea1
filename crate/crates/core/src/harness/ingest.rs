use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};
use crate::parser::{tokenize, FormatSpec, LineError, LogRecord};

/// Accepted records plus bookkeeping about rejected lines.
#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub records: Vec<LogRecord>,
    pub rejected: usize,
    /// `(line number, reason)` for the first rejected lines.
    pub diagnostics: Vec<(usize, LineError)>,
}

const MAX_DIAGNOSTICS: usize = 100;

/// Reads a log file line by line. With `head_limit`, stops after that many accepted
/// records. Blank lines are skipped silently; other bad lines are counted.
pub fn ingest_dataset(path: &Path, format: &FormatSpec, head_limit: Option<usize>) -> Result<Ingested> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut out = Ingested::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        if head_limit.is_some_and(|k| out.records.len() >= k) {
            break;
        }
        let line = line.map_err(|e| Error::file(path, e))?;
        match tokenize(&line, format) {
            Ok(r) => out.records.push(r),
            Err(LineError::Empty) => {}
            Err(e) => {
                out.rejected += 1;
                if out.diagnostics.len() < MAX_DIAGNOSTICS {
                    log::debug!("{}:{}: {e}", path.display(), i + 1);
                    out.diagnostics.push((i + 1, e));
                }
            }
        }
    }
    if out.rejected > 0 {
        log::warn!("{}: skipped {} malformed lines", path.display(), out.rejected);
    }
    Ok(out)
}

/// First `floor(ratio * n)` records train, the rest test. Expects chronological input.
pub fn chronological_split<T>(records: &[T], ratio: f64) -> Result<(&[T], &[T])> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config("split ratio must lie in (0, 1)".into()));
    }
    let cut = (ratio * records.len() as f64).floor() as usize;
    Ok(records.split_at(cut))
}

/// Stable sort by timestamp so that ties keep file order.
pub fn sort_chronologically(records: &mut [LogRecord]) {
    records.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
}
