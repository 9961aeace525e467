//! Captioned corpus: records, JSONL I/O, and the scan index.
//!
//! A corpus is a JSONL file with one record per line:
//!
//! ```text
//! {"id":"r0001","caption":"a song sparrow perched on a branch","features":[0.1,‑0.2,...]}
//! {"id":"r0002","caption":"street view of an old tram","image_path":"imgs/tram_17.png"}
//! ```
//!
//! `features` (a pre-extracted embedding) and `image_path` are both optional
//! and mutually independent; retrieval only needs them for ranking methods
//! that look at the image side. [`CorpusIndex`] keeps the records plus their
//! lowercased captions so synonym matching never re-lowercases per query.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SwatError};

/// One captioned record of the auxiliary corpus.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub id: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
}

/// Borrowed view of the image side of a record.
#[derive(Debug, Clone, Copy)]
pub enum ImagePayload<'a> {
    /// Pre-extracted feature vector.
    Features(&'a [f64]),
    /// Path to an image file (resolved lazily by whoever consumes it).
    Path(&'a str),
}

impl CaptionRecord {
    /// Image payload, preferring pre-extracted features over a path.
    pub fn image_payload(&self) -> Option<ImagePayload<'_>> {
        if let Some(f) = &self.features {
            Some(ImagePayload::Features(f))
        } else {
            self.image_path.as_deref().map(ImagePayload::Path)
        }
    }
}

/// Read a JSONL corpus. Malformed lines abort with the 1-based line number.
pub fn read_corpus_jsonl(path: &Path) -> Result<Vec<CaptionRecord>> {
    let file = File::open(path).map_err(|e| SwatError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| SwatError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CaptionRecord = serde_json::from_str(&line).map_err(|e| SwatError::Parse {
            path: path.to_path_buf(),
            line: Some(i + 1),
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Write records as JSONL (one compact JSON object per line).
pub fn write_corpus_jsonl(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| SwatError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).map_err(|e| SwatError::Parse {
            path: path.to_path_buf(),
            line: None,
            message: e.to_string(),
        })?;
        writeln!(w, "{}", line).map_err(|e| SwatError::io(path, e))?;
    }
    w.flush().map_err(|e| SwatError::io(path, e))
}

/// Immutable scan index over a corpus: records in file order plus lowercased
/// captions. Raw images are never touched here.
#[derive(Debug, Clone)]
pub struct CorpusIndex {
    records: Vec<CaptionRecord>,
    lowercased: Vec<String>,
    by_id: HashMap<String, usize>,
}

impl CorpusIndex {
    /// Build the index; duplicate record ids are rejected by name.
    pub fn build(records: Vec<CaptionRecord>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(records.len());
        let mut lowercased = Vec::with_capacity(records.len());
        for (pos, record) in records.iter().enumerate() {
            if by_id.insert(record.id.clone(), pos).is_some() {
                return Err(SwatError::DuplicateRecordId { id: record.id.clone() });
            }
            lowercased.push(record.caption.to_lowercase());
        }
        Ok(CorpusIndex { records, lowercased, by_id })
    }

    /// Build straight from a JSONL file.
    pub fn from_jsonl(path: &Path) -> Result<Self> {
        Self::build(read_corpus_jsonl(path)?)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[CaptionRecord] {
        &self.records
    }

    pub fn record(&self, pos: usize) -> &CaptionRecord {
        &self.records[pos]
    }

    /// Lowercased caption for the record at `pos`.
    pub fn lowercased(&self, pos: usize) -> &str {
        &self.lowercased[pos]
    }

    pub fn position_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn by_id(&self, id: &str) -> Option<&CaptionRecord> {
        self.position_of(id).map(|pos| &self.records[pos])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, caption: &str) -> CaptionRecord {
        CaptionRecord { id: id.into(), caption: caption.into(), image_path: None, features: None }
    }

    #[test]
    fn duplicate_ids_are_rejected_by_name() {
        let err = CorpusIndex::build(vec![rec("a", "x"), rec("a", "y")]).unwrap_err();
        match err {
            SwatError::DuplicateRecordId { id } => assert_eq!(id, "a"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn jsonl_roundtrip_preserves_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let records = vec![
            CaptionRecord {
                id: "r1".into(),
                caption: "A Song Sparrow".into(),
                image_path: None,
                features: Some(vec![0.5, -1.25]),
            },
            CaptionRecord {
                id: "r2".into(),
                caption: "an old tram".into(),
                image_path: Some("imgs/tram.png".into()),
                features: None,
            },
        ];
        write_corpus_jsonl(&path, &records).unwrap();
        let back = read_corpus_jsonl(&path).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(&path, "{\"id\":\"a\",\"caption\":\"ok\"}\nnot json\n").unwrap();
        let err = read_corpus_jsonl(&path).unwrap_err();
        match err {
            SwatError::Parse { line, .. } => assert_eq!(line, Some(2)),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn captions_are_lowercased_once() {
        let index = CorpusIndex::build(vec![rec("a", "Song SPARROW")]).unwrap();
        assert_eq!(index.lowercased(0), "song sparrow");
        assert_eq!(index.by_id("a").unwrap().caption, "Song SPARROW");
    }
}
