//! Concept vocabulary: names, synonyms, and prompt templates.
//!
//! The on-disk format is a JSON object keyed by concept name:
//!
//! ```text
//! {
//!   "song sparrow": {
//!     "synonyms": ["song sparrow", "melospiza melodia"],
//!     "prompts": ["a photo of a song sparrow", "a song sparrow in the wild"]
//!   },
//!   ...
//! }
//! ```
//!
//! Concepts are ordered lexicographically by name after loading, and that
//! order defines the class indices used everywhere downstream (labels,
//! classifier rows, report columns). Synonym and prompt lists keep their
//! array order; synonym order matters because a record matching several
//! synonyms of one concept is reported under the first one.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SwatError};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConceptEntry {
    pub synonyms: Vec<String>,
    pub prompts: Vec<String>,
}

/// Ordered set of concepts; the position of a concept is its class index.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptVocabulary {
    names: Vec<String>,
    entries: Vec<ConceptEntry>,
}

impl ConceptVocabulary {
    /// Build from (name, entry) pairs; names are sorted, validated, and
    /// deduplicated-by-error (a repeated name is a caller bug, not data).
    pub fn new(pairs: Vec<(String, ConceptEntry)>) -> Result<Self> {
        let mut sorted = pairs;
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        let mut names = Vec::with_capacity(sorted.len());
        let mut entries = Vec::with_capacity(sorted.len());
        for (name, entry) in sorted {
            if names.last() == Some(&name) {
                return Err(SwatError::Vocabulary {
                    message: format!("duplicate concept {:?}", name),
                });
            }
            if name.trim().is_empty() {
                return Err(SwatError::Vocabulary { message: "empty concept name".into() });
            }
            if entry.synonyms.is_empty() {
                return Err(SwatError::Vocabulary {
                    message: format!("concept {:?} has no synonyms", name),
                });
            }
            if entry.prompts.is_empty() {
                return Err(SwatError::Vocabulary {
                    message: format!("concept {:?} has no prompts", name),
                });
            }
            if entry.synonyms.iter().any(|s| s.trim().is_empty()) {
                return Err(SwatError::Vocabulary {
                    message: format!("concept {:?} has an empty synonym", name),
                });
            }
            names.push(name);
            entries.push(entry);
        }
        if names.is_empty() {
            return Err(SwatError::Vocabulary { message: "vocabulary has no concepts".into() });
        }
        Ok(ConceptVocabulary { names, entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SwatError::io(path, e))?;
        // BTreeMap gives a canonical (lexicographic) concept order regardless
        // of key order in the file.
        let map: BTreeMap<String, ConceptEntry> =
            serde_json::from_str(&text).map_err(|e| SwatError::Parse {
                path: path.to_path_buf(),
                line: None,
                message: e.to_string(),
            })?;
        Self::new(map.into_iter().collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: BTreeMap<&str, &ConceptEntry> =
            self.names.iter().map(String::as_str).zip(self.entries.iter()).collect();
        let text = serde_json::to_string_pretty(&map).expect("vocabulary serializes");
        fs::write(path, text).map_err(|e| SwatError::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn entry(&self, index: usize) -> &ConceptEntry {
        &self.entries[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &str, &ConceptEntry)> {
        self.names
            .iter()
            .zip(self.entries.iter())
            .enumerate()
            .map(|(i, (n, e))| (i, n.as_str(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(synonyms: &[&str], prompts: &[&str]) -> ConceptEntry {
        ConceptEntry {
            synonyms: synonyms.iter().map(|s| s.to_string()).collect(),
            prompts: prompts.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn concepts_are_ordered_lexicographically() {
        let vocab = ConceptVocabulary::new(vec![
            ("tram".into(), entry(&["tram"], &["a tram"])),
            ("sparrow".into(), entry(&["sparrow"], &["a sparrow"])),
        ])
        .unwrap();
        assert_eq!(vocab.names(), ["sparrow", "tram"]);
        assert_eq!(vocab.index_of("tram"), Some(1));
        assert_eq!(vocab.index_of("finch"), None);
    }

    #[test]
    fn missing_prompts_or_synonyms_fail() {
        assert!(ConceptVocabulary::new(vec![("a".into(), entry(&[], &["p"]))]).is_err());
        assert!(ConceptVocabulary::new(vec![("a".into(), entry(&["s"], &[]))]).is_err());
        assert!(ConceptVocabulary::new(vec![]).is_err());
    }

    #[test]
    fn json_roundtrip_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        let vocab = ConceptVocabulary::new(vec![
            ("b".into(), entry(&["b", "bee"], &["a photo of b"])),
            ("a".into(), entry(&["a"], &["a photo of a"])),
        ])
        .unwrap();
        vocab.save(&path).unwrap();
        let back = ConceptVocabulary::load(&path).unwrap();
        assert_eq!(back, vocab);
    }
}
