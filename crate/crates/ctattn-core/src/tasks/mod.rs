//! The two synthetic experiments: 2-d spiral interpolation/extrapolation and
//! marked temporal point process prediction, with JSON-lines dataset files.

pub mod mtpp;
pub mod spiral;

use crate::error::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

/// Write one JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::invalid(format!("create {}: {e}", path.display())))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line =
            serde_json::to_string(r).map_err(|e| Error::invalid(format!("encode record: {e}")))?;
        writeln!(out, "{line}").map_err(|e| Error::invalid(format!("write: {e}")))?;
    }
    out.flush()
        .map_err(|e| Error::invalid(format!("flush: {e}")))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::invalid(format!("open {}: {e}", path.display())))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::invalid(format!("read line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::invalid(format!("parse line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}
