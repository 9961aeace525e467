//! String-matching retrieval of auxiliary training data.
//!
//! The pipeline is: [`string_match`] finds, per concept, every corpus record
//! whose lowercased caption contains one of the concept's synonyms at word
//! boundaries; [`rank`] scores the hits with one of five methods; an optional
//! [`filter_by_image_similarity`] drops visually off-topic candidates; and
//! [`select_top_k`] keeps the per-concept head of the ranking.
//!
//! Matching rules (all case-insensitive):
//! * a synonym must not be a proper infix of a longer alphanumeric token —
//!   "sparrow" does not match "sparrowhawk";
//! * phrase synonyms ("song sparrow") match as literal substrings, with the
//!   boundary check applied at both ends;
//! * one record may match several concepts (it is listed under each), but
//!   within a concept it appears once, reported under the first matching
//!   synonym in vocabulary order.
//!
//! Ranking is deterministic: equal scores are broken by ascending record id,
//! and the `Random` method draws scores from a seeded stream.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusIndex;
use crate::embed::{cosine, prompt_mean_embedding, TextImageEmbedder};
use crate::error::{Result, SwatError};
use crate::rng;
use crate::vocab::ConceptVocabulary;

/// How ranked candidate scores are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMethod {
    /// Concept prompt embedding (mean over prompts) vs. candidate caption.
    T2T,
    /// Max over the concept's few-shot image embeddings vs. candidate image.
    I2I,
    /// Max over the concept's few-shot image embeddings vs. candidate caption.
    I2TImageCaption,
    /// Concept prompt embedding vs. candidate image.
    I2TConceptImage,
    /// Seeded uniform scores (ablation baseline).
    Random,
}

impl RankMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "t2t" => Ok(RankMethod::T2T),
            "i2i" => Ok(RankMethod::I2I),
            "i2t-cap" | "i2t_image_caption" => Ok(RankMethod::I2TImageCaption),
            "i2t-img" | "i2t_concept_image" => Ok(RankMethod::I2TConceptImage),
            "random" => Ok(RankMethod::Random),
            other => Err(SwatError::invalid(
                "rank-method",
                format!("unknown method {:?} (expected t2t, i2i, i2t-cap, i2t-img, random)", other),
            )),
        }
    }
}

/// One record matched for one concept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchHit {
    /// Position of the record in the corpus index.
    pub record_pos: usize,
    /// Index of the reported synonym in the concept's synonym list.
    pub synonym_index: usize,
}

/// Hits per concept, in vocabulary order; hits follow corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptMatches {
    pub per_concept: Vec<Vec<MatchHit>>,
}

/// A ranked retrieval candidate, ready for the output JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCandidate {
    pub concept: String,
    pub record_id: String,
    pub score: f64,
    pub rank: usize,
    pub matched_synonym: String,
}

/// Candidates per concept, each list sorted by descending score (rank 1..N).
#[derive(Debug, Clone, PartialEq)]
pub struct RankedCandidates {
    pub per_concept: Vec<Vec<RetrievalCandidate>>,
}

/// The per-concept top-k selection of a ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedPool {
    pub per_concept: Vec<Vec<RetrievalCandidate>>,
}

impl RetrievedPool {
    /// Per-concept candidate counts, vocabulary order.
    pub fn counts(&self) -> Vec<usize> {
        self.per_concept.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.per_concept.iter().map(Vec::len).sum()
    }
}

/// True iff `text[start..end]` is not glued to an adjacent alphanumeric
/// character (i.e. the match is not a proper infix of a longer token).
fn at_word_boundary(text: &str, start: usize, end: usize) -> bool {
    let before_ok = start == 0
        || text[..start].chars().next_back().map(|c| !c.is_alphanumeric()).unwrap_or(true);
    let after_ok =
        end == text.len() || text[end..].chars().next().map(|c| !c.is_alphanumeric()).unwrap_or(true);
    before_ok && after_ok
}

/// Find every (concept, record) pair where a synonym occurs at word
/// boundaries in the lowercased caption.
pub fn string_match(index: &CorpusIndex, vocab: &ConceptVocabulary) -> ConceptMatches {
    // One multi-pattern automaton over all synonyms of all concepts.
    let mut patterns: Vec<String> = Vec::new();
    let mut owners: Vec<(usize, usize)> = Vec::new(); // pattern -> (concept, synonym index)
    for (ci, _, entry) in vocab.iter() {
        for (si, syn) in entry.synonyms.iter().enumerate() {
            patterns.push(syn.to_lowercase());
            owners.push((ci, si));
        }
    }
    let ac = aho_corasick::AhoCorasick::new(&patterns)
        .expect("synonym patterns are valid (non-empty, bounded)");

    let mut per_concept: Vec<Vec<MatchHit>> = vec![Vec::new(); vocab.len()];
    for pos in 0..index.len() {
        let text = index.lowercased(pos);
        // Lowest matching synonym index per concept for this record.
        let mut best: BTreeMap<usize, usize> = BTreeMap::new();
        for m in ac.find_overlapping_iter(text) {
            if !at_word_boundary(text, m.start(), m.end()) {
                continue;
            }
            let (ci, si) = owners[m.pattern().as_usize()];
            best.entry(ci).and_modify(|b| *b = (*b).min(si)).or_insert(si);
        }
        for (ci, si) in best {
            per_concept[ci].push(MatchHit { record_pos: pos, synonym_index: si });
        }
    }
    ConceptMatches { per_concept }
}

/// Few-shot image payloads per concept (vocabulary order); only the
/// image-based ranking methods look at this.
pub type FewShotImages<'a> = Vec<Vec<crate::corpus::ImagePayload<'a>>>;

fn embed_image_checked(
    embedder: &dyn TextImageEmbedder,
    payload: &crate::corpus::ImagePayload<'_>,
    context: &str,
) -> Result<Vec<f64>> {
    let v = embedder.embed_image(payload)?;
    if v.len() != embedder.dim() {
        return Err(SwatError::DimensionMismatch {
            context: context.into(),
            expected: embedder.dim(),
            got: v.len(),
        });
    }
    Ok(v)
}

/// Record image payload or a named error (ranking methods that look at the
/// candidate image require one).
fn record_image<'a>(
    index: &'a CorpusIndex,
    pos: usize,
) -> Result<crate::corpus::ImagePayload<'a>> {
    index.record(pos).image_payload().ok_or_else(|| SwatError::EmptyData {
        context: format!(
            "record {:?} has neither features nor image_path (required by this ranking method)",
            index.record(pos).id
        ),
    })
}

/// Score and sort the matches of every concept.
///
/// Scores: see [`RankMethod`]. Sorting is descending by score with ties
/// broken by ascending record id; ranks are 1-based. `fewshot` may be empty
/// for methods that do not use it; methods that do fail on concepts with an
/// empty few-shot list.
pub fn rank(
    index: &CorpusIndex,
    vocab: &ConceptVocabulary,
    matches: &ConceptMatches,
    method: RankMethod,
    embedder: &dyn TextImageEmbedder,
    fewshot: &FewShotImages<'_>,
    seed: u64,
) -> Result<RankedCandidates> {
    if matches.per_concept.len() != vocab.len() {
        return Err(SwatError::PoolMismatch {
            message: format!(
                "matches cover {} concepts, vocabulary has {}",
                matches.per_concept.len(),
                vocab.len()
            ),
        });
    }
    // Caption embeddings are shared across concepts; compute lazily, once.
    let mut caption_cache: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut caption_embedding = |pos: usize| -> Result<Vec<f64>> {
        if let Some(v) = caption_cache.get(&pos) {
            return Ok(v.clone());
        }
        let v = embedder.embed_text(index.lowercased(pos))?;
        if v.len() != embedder.dim() {
            return Err(SwatError::DimensionMismatch {
                context: "caption embedding".into(),
                expected: embedder.dim(),
                got: v.len(),
            });
        }
        caption_cache.insert(pos, v.clone());
        Ok(v)
    };

    let mut per_concept = Vec::with_capacity(vocab.len());
    for (ci, name, entry) in vocab.iter() {
        let hits = &matches.per_concept[ci];

        // Per-concept context shared by all hits.
        let prompt_emb = match method {
            RankMethod::T2T | RankMethod::I2TConceptImage => {
                Some(prompt_mean_embedding(embedder, &entry.prompts)?)
            }
            _ => None,
        };
        let fewshot_embs: Option<Vec<Vec<f64>>> = match method {
            RankMethod::I2I | RankMethod::I2TImageCaption => {
                let images = fewshot.get(ci).map(Vec::as_slice).unwrap_or(&[]);
                if images.is_empty() {
                    return Err(SwatError::EmptyData {
                        context: format!(
                            "ranking method {:?} needs few-shot images, concept {:?} has none",
                            method, name
                        ),
                    });
                }
                Some(
                    images
                        .iter()
                        .map(|p| embed_image_checked(embedder, p, "few-shot image embedding"))
                        .collect::<Result<_>>()?,
                )
            }
            _ => None,
        };
        let mut random = rng::seeded(seed, "random-rank", ci as u64);

        let mut candidates = Vec::with_capacity(hits.len());
        for hit in hits {
            let score = match method {
                RankMethod::T2T => {
                    cosine(prompt_emb.as_ref().unwrap(), &caption_embedding(hit.record_pos)?)
                }
                RankMethod::I2I => {
                    let img = record_image(index, hit.record_pos)?;
                    let emb = embed_image_checked(embedder, &img, "candidate image embedding")?;
                    fewshot_embs
                        .as_ref()
                        .unwrap()
                        .iter()
                        .map(|f| cosine(f, &emb))
                        .fold(f64::NEG_INFINITY, f64::max)
                }
                RankMethod::I2TImageCaption => {
                    let cap = caption_embedding(hit.record_pos)?;
                    fewshot_embs
                        .as_ref()
                        .unwrap()
                        .iter()
                        .map(|f| cosine(f, &cap))
                        .fold(f64::NEG_INFINITY, f64::max)
                }
                RankMethod::I2TConceptImage => {
                    let img = record_image(index, hit.record_pos)?;
                    let emb = embed_image_checked(embedder, &img, "candidate image embedding")?;
                    cosine(prompt_emb.as_ref().unwrap(), &emb)
                }
                RankMethod::Random => random.random::<f64>(),
            };
            candidates.push(RetrievalCandidate {
                concept: name.to_string(),
                record_id: index.record(hit.record_pos).id.clone(),
                score,
                rank: 0,
                matched_synonym: entry.synonyms[hit.synonym_index].clone(),
            });
        }
        sort_and_rank(&mut candidates);
        per_concept.push(candidates);
    }
    Ok(RankedCandidates { per_concept })
}

/// Descending score, ties by ascending record id, then 1-based ranks.
fn sort_and_rank(candidates: &mut [RetrievalCandidate]) {
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.record_id.cmp(&b.record_id))
    });
    for (i, c) in candidates.iter_mut().enumerate() {
        c.rank = i + 1;
    }
}

/// Drop candidates whose image-to-concept-text cosine is below `threshold`
/// (relative order preserved, ranks reassigned). `threshold` of -1.0 keeps
/// everything; values outside [-1, 1] are rejected.
pub fn filter_by_image_similarity(
    index: &CorpusIndex,
    vocab: &ConceptVocabulary,
    embedder: &dyn TextImageEmbedder,
    candidates: &RankedCandidates,
    threshold: f64,
) -> Result<RankedCandidates> {
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(SwatError::invalid(
            "t2i-threshold",
            format!("{} is outside [-1, 1]", threshold),
        ));
    }
    let mut per_concept = Vec::with_capacity(candidates.per_concept.len());
    for (ci, list) in candidates.per_concept.iter().enumerate() {
        let prompt_emb = if list.is_empty() {
            None
        } else {
            Some(prompt_mean_embedding(embedder, &vocab.entry(ci).prompts)?)
        };
        let mut kept = Vec::with_capacity(list.len());
        for c in list {
            let pos = index.position_of(&c.record_id).ok_or_else(|| SwatError::EmptyData {
                context: format!("candidate record {:?} not in corpus", c.record_id),
            })?;
            let img = record_image(index, pos)?;
            let emb = embed_image_checked(embedder, &img, "candidate image embedding")?;
            if cosine(prompt_emb.as_ref().unwrap(), &emb) >= threshold {
                kept.push(c.clone());
            }
        }
        for (i, c) in kept.iter_mut().enumerate() {
            c.rank = i + 1;
        }
        per_concept.push(kept);
    }
    Ok(RankedCandidates { per_concept })
}

/// Keep the top `min(k, available)` candidates of every concept. `k = 0` is
/// rejected. Idempotent: re-selecting with the same `k` changes nothing.
pub fn select_top_k(candidates: &RankedCandidates, k: usize) -> Result<RetrievedPool> {
    if k == 0 {
        return Err(SwatError::invalid("k", "top-k selection needs k >= 1"));
    }
    let per_concept = candidates
        .per_concept
        .iter()
        .map(|list| list.iter().take(k).cloned().collect())
        .collect();
    Ok(RetrievedPool { per_concept })
}

/// Class-count diagnostics of a retrieved pool, for the imbalance report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalStats {
    /// Per-concept candidate counts, vocabulary order.
    pub counts: Vec<usize>,
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    /// Gini coefficient of the counts: 0 = perfectly balanced.
    pub gini: f64,
    /// Counts sorted descending (the "imbalance curve").
    pub sorted_desc: Vec<usize>,
}

/// Gini coefficient of non-negative counts: sum of absolute pairwise
/// differences over `2 n^2 mean`. All-equal counts give 0; `{100,0,0,0}`
/// gives 0.75. Degenerate inputs (empty, all-zero) give 0.
pub fn gini(counts: &[usize]) -> f64 {
    let n = counts.len();
    let total: u128 = counts.iter().map(|&c| c as u128).sum();
    if n == 0 || total == 0 {
        return 0.0;
    }
    let mut abs_diff_sum: u128 = 0;
    for (i, &a) in counts.iter().enumerate() {
        for &b in &counts[i + 1..] {
            abs_diff_sum += (a as i128 - b as i128).unsigned_abs();
        }
    }
    // Ordered pairs count each unordered pair twice.
    (2 * abs_diff_sum) as f64 / (2 * n as u128 * total) as f64
}

pub fn imbalance_stats(pool: &RetrievedPool) -> RetrievalStats {
    let counts = pool.counts();
    let mut sorted_desc = counts.clone();
    sorted_desc.sort_unstable_by(|a, b| b.cmp(a));
    let (min, max) = (
        counts.iter().copied().min().unwrap_or(0),
        counts.iter().copied().max().unwrap_or(0),
    );
    let mean = if counts.is_empty() {
        0.0
    } else {
        counts.iter().sum::<usize>() as f64 / counts.len() as f64
    };
    RetrievalStats { gini: gini(&counts), counts, min, max, mean, sorted_desc }
}

/// Write ranked/selected candidates as JSONL, concept by concept.
pub fn write_candidates_jsonl(path: &Path, per_concept: &[Vec<RetrievalCandidate>]) -> Result<()> {
    let file = File::create(path).map_err(|e| SwatError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for list in per_concept {
        for c in list {
            let line = serde_json::to_string(c).expect("candidate serializes");
            writeln!(w, "{}", line).map_err(|e| SwatError::io(path, e))?;
        }
    }
    w.flush().map_err(|e| SwatError::io(path, e))
}

pub fn write_stats_json(path: &Path, stats: &RetrievalStats) -> Result<()> {
    let text = serde_json::to_string_pretty(stats).expect("stats serialize");
    std::fs::write(path, text).map_err(|e| SwatError::io(path, e))
}
