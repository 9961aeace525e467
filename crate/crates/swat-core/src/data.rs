//! Training data assembly: labeled examples, K-shot sampling, the
//! common/rare split, and pool mixing.
//!
//! An [`ExampleSet`] is a list of labeled examples plus the concept-name
//! table that defines its class indices. Few-shot splits are drawn without
//! replacement per concept, reproducibly from a seed, and can be persisted
//! as JSON (seed, shots, ids per concept). [`mix_pools`] concatenates the
//! retrieved pool with a few-shot split — no resampling, so the natural
//! few-shot fraction is whatever the sizes dictate.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusIndex;
use crate::error::{Result, SwatError};
use crate::retrieval::RetrievedPool;
use crate::rng;
use crate::vocab::ConceptVocabulary;

/// Dense image in CHW layout, values conventionally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(SwatError::DimensionMismatch {
                context: "image tensor data".into(),
                expected: channels * height * width,
                got: data.len(),
            });
        }
        Ok(ImageTensor { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ImageTensor { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }
}

/// Model input: a pre-extracted feature vector or a raw image.
#[derive(Debug, Clone, PartialEq)]
pub enum ExampleInput {
    Features(Vec<f64>),
    Image(ImageTensor),
}

impl ExampleInput {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ExampleInput::Features(_) => "features",
            ExampleInput::Image(_) => "image",
        }
    }
}

/// Where an example came from; training diagnostics and strict augmentation
/// variants care about the difference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    FewShot,
    Retrieved,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub id: String,
    pub input: ExampleInput,
    pub label: usize,
    pub source: Source,
}

/// Labeled examples plus the concept-name table defining class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleSet {
    concept_names: Vec<String>,
    examples: Vec<LabeledExample>,
}

impl ExampleSet {
    pub fn new(concept_names: Vec<String>, examples: Vec<LabeledExample>) -> Result<Self> {
        let c = concept_names.len();
        if c == 0 {
            return Err(SwatError::EmptyData { context: "example set needs >= 1 concept".into() });
        }
        for e in &examples {
            if e.label >= c {
                return Err(SwatError::invalid(
                    "label",
                    format!("example {:?} has label {} but there are {} concepts", e.id, e.label, c),
                ));
            }
        }
        Ok(ExampleSet { concept_names, examples })
    }

    pub fn num_classes(&self) -> usize {
        self.concept_names.len()
    }

    pub fn concept_names(&self) -> &[String] {
        &self.concept_names
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn per_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes()];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }

    /// Fraction of examples carrying the FEWSHOT source flag.
    pub fn fewshot_fraction(&self) -> f64 {
        if self.examples.is_empty() {
            return 0.0;
        }
        let fs = self.examples.iter().filter(|e| e.source == Source::FewShot).count();
        fs as f64 / self.examples.len() as f64
    }
}

/// One-hot label row.
pub fn one_hot(label: usize, num_classes: usize) -> Vec<f64> {
    let mut y = vec![0.0; num_classes];
    y[label] = 1.0;
    y
}

/// A K-shot split: exactly `shots` examples per concept, source = FEWSHOT.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotSplit {
    pub seed: u64,
    pub shots: usize,
    pub examples: ExampleSet,
}

impl FewShotSplit {
    /// Ids grouped by concept, vocabulary order.
    pub fn ids_by_concept(&self) -> Vec<Vec<String>> {
        let mut out = vec![Vec::new(); self.examples.num_classes()];
        for e in self.examples.examples() {
            out[e.label].push(e.id.clone());
        }
        out
    }

    /// Persist as JSON: `{seed, shots, concepts: {name: [ids...]}}`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut concepts = BTreeMap::new();
        for (name, ids) in self.examples.concept_names().iter().zip(self.ids_by_concept()) {
            concepts.insert(name.clone(), ids);
        }
        let doc = FewShotSplitFile { seed: self.seed, shots: self.shots, concepts };
        let text = serde_json::to_string_pretty(&doc).expect("split serializes");
        std::fs::write(path, text).map_err(|e| SwatError::io(path, e))
    }

    /// Rebuild a persisted split by looking the ids up in `pool`.
    pub fn load(path: &Path, pool: &ExampleSet) -> Result<FewShotSplit> {
        let text = std::fs::read_to_string(path).map_err(|e| SwatError::io(path, e))?;
        let doc: FewShotSplitFile = serde_json::from_str(&text).map_err(|e| SwatError::Parse {
            path: path.to_path_buf(),
            line: None,
            message: e.to_string(),
        })?;
        let by_id: HashMap<&str, &LabeledExample> =
            pool.examples().iter().map(|e| (e.id.as_str(), e)).collect();
        let mut examples = Vec::new();
        for (ci, name) in pool.concept_names().iter().enumerate() {
            let ids = doc.concepts.get(name).ok_or_else(|| SwatError::PoolMismatch {
                message: format!("persisted split has no concept {:?}", name),
            })?;
            if ids.len() != doc.shots {
                return Err(SwatError::PoolMismatch {
                    message: format!(
                        "concept {:?} lists {} ids, split says shots={}",
                        name,
                        ids.len(),
                        doc.shots
                    ),
                });
            }
            for id in ids {
                let e = by_id.get(id.as_str()).ok_or_else(|| SwatError::PoolMismatch {
                    message: format!("split id {:?} not found in pool", id),
                })?;
                if e.label != ci {
                    return Err(SwatError::PoolMismatch {
                        message: format!(
                            "split id {:?} is labeled {} in the pool, expected {}",
                            id, e.label, ci
                        ),
                    });
                }
                let mut e = (*e).clone();
                e.source = Source::FewShot;
                examples.push(e);
            }
        }
        Ok(FewShotSplit {
            seed: doc.seed,
            shots: doc.shots,
            examples: ExampleSet::new(pool.concept_names().to_vec(), examples)?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct FewShotSplitFile {
    seed: u64,
    shots: usize,
    concepts: BTreeMap<String, Vec<String>>,
}

/// Draw `shots` examples per concept from `pool`, without replacement,
/// reproducibly from `seed`. Concepts with fewer than `shots` examples fail
/// by name.
pub fn sample_few_shot(pool: &ExampleSet, shots: usize, seed: u64) -> Result<FewShotSplit> {
    if shots == 0 {
        return Err(SwatError::invalid("shots", "K-shot sampling needs K >= 1"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); pool.num_classes()];
    for (i, e) in pool.examples().iter().enumerate() {
        by_class[e.label].push(i);
    }
    let mut examples = Vec::with_capacity(shots * pool.num_classes());
    for (ci, indices) in by_class.iter().enumerate() {
        if indices.len() < shots {
            return Err(SwatError::NotEnoughExamples {
                concept: pool.concept_names()[ci].clone(),
                requested: shots,
                available: indices.len(),
            });
        }
        let mut r = rng::seeded(seed, "fewshot", ci as u64);
        let mut chosen = rand::seq::index::sample(&mut r, indices.len(), shots).into_vec();
        chosen.sort_unstable();
        for k in chosen {
            let mut e = pool.examples()[indices[k]].clone();
            e.source = Source::FewShot;
            examples.push(e);
        }
    }
    Ok(FewShotSplit {
        seed,
        shots,
        examples: ExampleSet::new(pool.concept_names().to_vec(), examples)?,
    })
}

/// Concept indices split into common and rare by retrieved count: the
/// `ceil(0.10 * C)` concepts with the smallest counts are rare, ties broken
/// by ascending concept index. Both lists are sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommonRareSplit {
    pub common: Vec<usize>,
    pub rare: Vec<usize>,
}

impl CommonRareSplit {
    pub fn is_rare(&self, concept: usize) -> bool {
        self.rare.binary_search(&concept).is_ok()
    }
}

pub fn split_common_rare(retrieved_counts: &[usize]) -> Result<CommonRareSplit> {
    let c = retrieved_counts.len();
    if c == 0 {
        return Err(SwatError::EmptyData { context: "common/rare split of zero concepts".into() });
    }
    let num_rare = c.div_ceil(10); // ceil(0.10 * C)
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by_key(|&i| (retrieved_counts[i], i));
    let mut rare: Vec<usize> = order[..num_rare].to_vec();
    let mut common: Vec<usize> = order[num_rare..].to_vec();
    rare.sort_unstable();
    common.sort_unstable();
    Ok(CommonRareSplit { common, rare })
}

/// Concatenate the retrieved pool and the few-shot set (retrieved first).
/// No resampling or reweighting: the few-shot fraction stays natural.
/// Source flags are preserved as-is. Fails if the concept tables differ.
pub fn mix_pools(retrieved: &ExampleSet, fewshot: &ExampleSet) -> Result<ExampleSet> {
    if retrieved.concept_names() != fewshot.concept_names() {
        return Err(SwatError::PoolMismatch {
            message: format!(
                "retrieved pool has {} concepts, few-shot set has {} (or names differ)",
                retrieved.num_classes(),
                fewshot.num_classes()
            ),
        });
    }
    let mut examples = Vec::with_capacity(retrieved.len() + fewshot.len());
    examples.extend_from_slice(retrieved.examples());
    examples.extend_from_slice(fewshot.examples());
    ExampleSet::new(retrieved.concept_names().to_vec(), examples)
}

/// Materialize a retrieved candidate pool into labeled training examples
/// using the records' feature payloads. Records that carry only an
/// `image_path` are rejected here; image corpora go through the folder
/// loader instead.
pub fn pool_to_examples(
    index: &CorpusIndex,
    vocab: &ConceptVocabulary,
    pool: &RetrievedPool,
) -> Result<ExampleSet> {
    if pool.per_concept.len() != vocab.len() {
        return Err(SwatError::PoolMismatch {
            message: format!(
                "pool covers {} concepts, vocabulary has {}",
                pool.per_concept.len(),
                vocab.len()
            ),
        });
    }
    let mut examples = Vec::with_capacity(pool.total());
    for (ci, list) in pool.per_concept.iter().enumerate() {
        for cand in list {
            let record = index.by_id(&cand.record_id).ok_or_else(|| SwatError::EmptyData {
                context: format!("candidate record {:?} not in corpus", cand.record_id),
            })?;
            let features = record.features.as_ref().ok_or_else(|| SwatError::EmptyData {
                context: format!(
                    "record {:?} has no feature payload; cannot materialize for training",
                    record.id
                ),
            })?;
            examples.push(LabeledExample {
                id: record.id.clone(),
                input: ExampleInput::Features(features.clone()),
                label: ci,
                source: Source::Retrieved,
            });
        }
    }
    ExampleSet::new(vocab.names().to_vec(), examples)
}

#[derive(Serialize, Deserialize)]
struct ExampleRow {
    id: String,
    label: usize,
    source: Source,
    features: Vec<f64>,
}

/// Write a feature-mode example set as JSONL rows
/// `{id, label, source, features}`. Image-mode sets are rejected.
pub fn write_examples_jsonl(path: &Path, set: &ExampleSet) -> Result<()> {
    let file = File::create(path).map_err(|e| SwatError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in set.examples() {
        let features = match &e.input {
            ExampleInput::Features(f) => f.clone(),
            ExampleInput::Image(_) => {
                return Err(SwatError::InputKind {
                    expected: "features".into(),
                    got: "image".into(),
                })
            }
        };
        let row = ExampleRow {
            id: e.id.clone(),
            label: e.label,
            source: e.source,
            features,
        };
        let line = serde_json::to_string(&row).expect("row serializes");
        writeln!(w, "{}", line).map_err(|e| SwatError::io(path, e))?;
    }
    w.flush().map_err(|e| SwatError::io(path, e))
}

/// Read a feature-mode example set written by [`write_examples_jsonl`].
/// The concept table comes from the caller (usually a vocabulary file).
pub fn read_examples_jsonl(path: &Path, concept_names: Vec<String>) -> Result<ExampleSet> {
    let file = File::open(path).map_err(|e| SwatError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| SwatError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ExampleRow = serde_json::from_str(&line).map_err(|e| SwatError::Parse {
            path: path.to_path_buf(),
            line: Some(i + 1),
            message: e.to_string(),
        })?;
        examples.push(LabeledExample {
            id: row.id,
            input: ExampleInput::Features(row.features),
            label: row.label,
            source: row.source,
        });
    }
    ExampleSet::new(concept_names, examples)
}

/// Load a directory-of-folders image dataset: every subdirectory of `root`
/// is one concept (sorted lexicographically, defining class indices), every
/// `.png`/`.jpg`/`.jpeg` file inside is one example. Pixels become CHW
/// floats in [0, 1].
pub fn load_image_folders(root: &Path, source: Source) -> Result<ExampleSet> {
    let mut class_dirs: Vec<std::path::PathBuf> = std::fs::read_dir(root)
        .map_err(|e| SwatError::io(root, e))?
        .filter_map(|entry| entry.ok().map(|d| d.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(SwatError::EmptyData {
            context: format!("no class subdirectories under {}", root.display()),
        });
    }
    let mut concept_names = Vec::with_capacity(class_dirs.len());
    let mut examples = Vec::new();
    for (ci, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| SwatError::EmptyData {
                context: format!("unreadable class directory name under {}", root.display()),
            })?
            .to_string();
        let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| SwatError::io(dir, e))?
            .filter_map(|entry| entry.ok().map(|d| d.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(SwatError::EmptyData {
                context: format!("class directory {} has no images", dir.display()),
            });
        }
        for file in files {
            let tensor = load_image(&file)?;
            examples.push(LabeledExample {
                id: file.strip_prefix(root).unwrap_or(&file).display().to_string(),
                input: ExampleInput::Image(tensor),
                label: ci,
                source,
            });
        }
        concept_names.push(name);
    }
    ExampleSet::new(concept_names, examples)
}

/// Decode one image file into a CHW float tensor in [0, 1].
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| SwatError::Parse {
            path: path.to_path_buf(),
            line: None,
            message: format!("image decode failed: {}", e),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, pixel) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = pixel.0[c] as f64 / 255.0;
        }
    }
    ImageTensor::new(3, h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feature_pool(per_class: usize, classes: usize) -> ExampleSet {
        let names = (0..classes).map(|c| format!("class_{:02}", c)).collect();
        let examples = (0..classes)
            .flat_map(|c| {
                (0..per_class).map(move |i| LabeledExample {
                    id: format!("c{}_{}", c, i),
                    input: ExampleInput::Features(vec![c as f64, i as f64]),
                    label: c,
                    source: Source::Retrieved,
                })
            })
            .collect();
        ExampleSet::new(names, examples).unwrap()
    }

    #[test]
    fn few_shot_split_is_exact_and_reproducible() {
        let pool = feature_pool(10, 4);
        let a = sample_few_shot(&pool, 3, 7).unwrap();
        let b = sample_few_shot(&pool, 3, 7).unwrap();
        let c = sample_few_shot(&pool, 3, 8).unwrap();
        assert_eq!(a.examples.per_class_counts(), vec![3, 3, 3, 3]);
        assert!(a.examples.examples().iter().all(|e| e.source == Source::FewShot));
        assert_eq!(a.ids_by_concept(), b.ids_by_concept(), "same seed, same ids");
        assert_ne!(a.ids_by_concept(), c.ids_by_concept(), "different seed, different ids");
    }

    #[test]
    fn few_shot_shortage_names_the_concept() {
        let pool = feature_pool(2, 3);
        let err = sample_few_shot(&pool, 5, 0).unwrap_err();
        match err {
            SwatError::NotEnoughExamples { concept, requested, available } => {
                assert_eq!(concept, "class_00");
                assert_eq!((requested, available), (5, 2));
            }
            other => panic!("unexpected error: {other}"),
        }
        assert!(sample_few_shot(&pool, 0, 0).is_err(), "K = 0 is rejected");
    }

    #[test]
    fn split_roundtrips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.json");
        let pool = feature_pool(6, 3);
        let split = sample_few_shot(&pool, 2, 99).unwrap();
        split.save(&path).unwrap();
        let back = FewShotSplit::load(&path, &pool).unwrap();
        assert_eq!(back, split);
    }

    #[test]
    fn common_rare_follows_counts_with_index_ties() {
        // C = 10 -> 1 rare concept; counts tie at the minimum between
        // indices 4 and 7 -> index 4 wins (ascending index).
        let counts = [9, 8, 7, 6, 1, 5, 4, 1, 3, 2];
        let split = split_common_rare(&counts).unwrap();
        assert_eq!(split.rare, vec![4]);
        assert_eq!(split.common.len(), 9);
        assert!(split.is_rare(4));
        assert!(!split.is_rare(7));

        // C = 200 with strictly decreasing counts -> rare = last 20 indices.
        let counts: Vec<usize> = (0..200).map(|i| 1000 - i).collect();
        let split = split_common_rare(&counts).unwrap();
        assert_eq!(split.rare, (180..200).collect::<Vec<_>>());
    }

    #[test]
    fn mixing_preserves_examples_and_natural_ratio() {
        let retrieved = feature_pool(97, 10); // 970 retrieved
        let fs_pool = feature_pool(10, 10);
        let fewshot = sample_few_shot(&fs_pool, 3, 0).unwrap(); // 30 few-shot
        let mixed = mix_pools(&retrieved, &fewshot.examples).unwrap();
        assert_eq!(mixed.len(), 1000);
        assert!((mixed.fewshot_fraction() - 0.03).abs() < 1e-12, "3% natural ratio");
        // Label multiset = sum of the parts.
        let mut want = retrieved.per_class_counts();
        for (w, c) in want.iter_mut().zip(fewshot.examples.per_class_counts()) {
            *w += c;
        }
        assert_eq!(mixed.per_class_counts(), want);
    }

    #[test]
    fn mixing_rejects_vocabulary_mismatch() {
        let retrieved = feature_pool(5, 3);
        let fewshot = sample_few_shot(&feature_pool(5, 4), 2, 0).unwrap();
        assert!(matches!(
            mix_pools(&retrieved, &fewshot.examples).unwrap_err(),
            SwatError::PoolMismatch { .. }
        ));
    }

    #[test]
    fn examples_jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("examples.jsonl");
        let set = feature_pool(3, 2);
        write_examples_jsonl(&path, &set).unwrap();
        let back = read_examples_jsonl(&path, set.concept_names().to_vec()).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn image_tensor_checks_its_shape() {
        assert!(ImageTensor::new(3, 2, 2, vec![0.0; 12]).is_ok());
        assert!(ImageTensor::new(3, 2, 2, vec![0.0; 11]).is_err());
    }
}
