//! Synthetic recognition tasks with a controllable domain gap and class
//! imbalance.
//!
//! Each concept is an isotropic Gaussian in feature space. Few-shot and test
//! examples come from `N(mu_c, sigma^2 I)`; "retrieved" examples come from
//! `N(mu_c + delta, sigma^2 I)` where `delta` is one fixed random direction
//! per task scaled to `domain_shift * sigma` (a global, linearly detectable
//! shift — the desk-scale analogue of a web-data style gap). Retrieved
//! per-concept counts follow a Zipf profile `count_c ∝ rank^(-zipf_s)` capped
//! at `retrieval_size`, and an optional fraction of retrieved labels is
//! corrupted to a uniformly random other class.
//!
//! Generation is bit-reproducible from `seed`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::CaptionRecord;
use crate::data::{ExampleInput, ExampleSet, LabeledExample, Source};
use crate::error::{Result, SwatError};
use crate::rng::{self, ChaCha8Rng};
use crate::vocab::{ConceptEntry, ConceptVocabulary};

/// Knobs of the synthetic task family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    /// Number of concepts C.
    pub num_classes: usize,
    /// Feature dimension D.
    pub feature_dim: usize,
    /// Few-shot examples per concept (K) drawn from the train pool.
    pub shots: usize,
    /// Train-pool examples generated per concept (must be >= shots).
    pub train_per_class: usize,
    /// Test examples per concept.
    pub test_per_class: usize,
    /// Cap on retrieved examples per concept (the most frequent concept
    /// gets exactly this many).
    pub retrieval_size: usize,
    /// Zipf exponent of the retrieved count profile; 0 = balanced.
    pub zipf_s: f64,
    /// Mean offset of the retrieved domain, in units of sigma.
    pub domain_shift: f64,
    /// Fraction of retrieved labels corrupted to a random other class.
    pub noise_rate: f64,
    /// Distance of each class mean from the origin, in units of sigma.
    pub class_separation: f64,
    /// Within-class standard deviation.
    pub sigma: f64,
    /// Root seed; every stream below derives from it.
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            num_classes: 50,
            feature_dim: 64,
            shots: 16,
            train_per_class: 64,
            test_per_class: 40,
            retrieval_size: 100,
            zipf_s: 1.0,
            domain_shift: 2.0,
            noise_rate: 0.0,
            class_separation: 2.0,
            sigma: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(SwatError::invalid("num_classes", "need >= 1 concept"));
        }
        if self.feature_dim == 0 {
            return Err(SwatError::invalid("feature_dim", "need >= 1 dimension"));
        }
        if self.train_per_class < self.shots {
            return Err(SwatError::invalid(
                "train_per_class",
                format!("{} is smaller than shots = {}", self.train_per_class, self.shots),
            ));
        }
        if self.test_per_class == 0 {
            return Err(SwatError::invalid("test_per_class", "need >= 1 test example per concept"));
        }
        if self.retrieval_size == 0 {
            return Err(SwatError::invalid("retrieval_size", "need >= 1"));
        }
        if self.sigma <= 0.0 {
            return Err(SwatError::invalid("sigma", "must be positive"));
        }
        if self.zipf_s < 0.0 {
            return Err(SwatError::invalid("zipf_s", "must be >= 0"));
        }
        if self.domain_shift < 0.0 {
            return Err(SwatError::invalid("domain_shift", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(SwatError::invalid("noise_rate", "must be in [0, 1]"));
        }
        if self.class_separation <= 0.0 {
            return Err(SwatError::invalid("class_separation", "must be positive"));
        }
        Ok(())
    }
}

/// A fully materialized synthetic task.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    pub vocab: ConceptVocabulary,
    /// Pool the few-shot split is sampled from (in-domain).
    pub train_pool: ExampleSet,
    /// Imbalanced, domain-shifted auxiliary pool.
    pub retrieved: ExampleSet,
    /// In-domain test set.
    pub test: ExampleSet,
    /// Retrieved examples per concept, counted by stored (possibly noisy) label.
    pub retrieved_counts: Vec<usize>,
    /// True class means (diagnostics only).
    pub means: Vec<Vec<f64>>,
    /// The global domain-shift vector added to retrieved features.
    pub shift: Vec<f64>,
}

fn unit_gaussian_direction(r: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    crate::embed::normalize_in_place(&mut v);
    v
}

/// Retrieved count profile: `min(cap, round(cap * rank^(-s)))` where the
/// concept at index `i` has rank `i + 1`. Non-increasing by construction.
pub fn zipf_counts(num_classes: usize, cap: usize, s: f64) -> Vec<usize> {
    (0..num_classes)
        .map(|i| {
            let raw = cap as f64 * ((i + 1) as f64).powf(-s);
            (raw.round() as usize).min(cap)
        })
        .collect()
}

fn concept_name(index: usize) -> String {
    format!("class_{:04}", index)
}

/// The class-mean geometry of `spec` (shared by task and pretrain split).
fn class_means(spec: &SyntheticTaskSpec) -> Vec<Vec<f64>> {
    let mut mean_rng = rng::seeded(spec.seed, "class-means", 0);
    (0..spec.num_classes)
        .map(|_| {
            let mut v = unit_gaussian_direction(&mut mean_rng, spec.feature_dim);
            for x in v.iter_mut() {
                *x *= spec.class_separation * spec.sigma;
            }
            v
        })
        .collect()
}

/// The auxiliary-domain mean offset of `spec` (shared by task and pretrain
/// split).
fn shift_vector(spec: &SyntheticTaskSpec) -> Vec<f64> {
    let mut shift_rng = rng::seeded(spec.seed, "domain-shift", 0);
    let mut shift = unit_gaussian_direction(&mut shift_rng, spec.feature_dim);
    for x in shift.iter_mut() {
        *x *= spec.domain_shift * spec.sigma;
    }
    shift
}

/// Generate the task: vocabulary, train pool, retrieved pool, test set.
pub fn generate_synthetic_task(spec: &SyntheticTaskSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let c = spec.num_classes;
    let d = spec.feature_dim;

    let vocab = ConceptVocabulary::new(
        (0..c)
            .map(|i| {
                let name = concept_name(i);
                (
                    name.clone(),
                    ConceptEntry {
                        synonyms: vec![name.clone()],
                        prompts: vec![format!("a photo of {}", name)],
                    },
                )
            })
            .collect(),
    )?;
    let names: Vec<String> = vocab.names().to_vec();

    let means = class_means(spec);
    let shift = shift_vector(spec);

    let sample_around = |center: &[f64], offset: Option<&[f64]>, r: &mut ChaCha8Rng| -> Vec<f64> {
        (0..d)
            .map(|j| {
                let base = center[j] + offset.map(|o| o[j]).unwrap_or(0.0);
                base + spec.sigma * r.sample::<f64, _>(StandardNormal)
            })
            .collect()
    };

    let mut train = Vec::with_capacity(c * spec.train_per_class);
    let mut test = Vec::with_capacity(c * spec.test_per_class);
    for ci in 0..c {
        let mut tr = rng::seeded(spec.seed, "train-pool", ci as u64);
        for i in 0..spec.train_per_class {
            train.push(LabeledExample {
                id: format!("train_c{:04}_{:04}", ci, i),
                input: ExampleInput::Features(sample_around(&means[ci], None, &mut tr)),
                label: ci,
                source: Source::FewShot,
            });
        }
        let mut te = rng::seeded(spec.seed, "test-set", ci as u64);
        for i in 0..spec.test_per_class {
            test.push(LabeledExample {
                id: format!("test_c{:04}_{:04}", ci, i),
                input: ExampleInput::Features(sample_around(&means[ci], None, &mut te)),
                label: ci,
                source: Source::FewShot,
            });
        }
    }

    let design_counts = zipf_counts(c, spec.retrieval_size, spec.zipf_s);
    let mut noise_rng = rng::seeded(spec.seed, "label-noise", 0);
    let mut retrieved = Vec::with_capacity(design_counts.iter().sum());
    for ci in 0..c {
        let mut rr = rng::seeded(spec.seed, "retrieved", ci as u64);
        for i in 0..design_counts[ci] {
            let features = sample_around(&means[ci], Some(&shift), &mut rr);
            // Optional label corruption: uniformly random *other* class.
            let label = if c > 1 && spec.noise_rate > 0.0 && noise_rng.random::<f64>() < spec.noise_rate
            {
                let mut wrong = noise_rng.random_range(0..c - 1);
                if wrong >= ci {
                    wrong += 1;
                }
                wrong
            } else {
                ci
            };
            retrieved.push(LabeledExample {
                id: format!("retr_c{:04}_{:04}", ci, i),
                input: ExampleInput::Features(features),
                label,
                source: Source::Retrieved,
            });
        }
    }

    let retrieved = ExampleSet::new(names.clone(), retrieved)?;
    let retrieved_counts = retrieved.per_class_counts();
    Ok(SyntheticTask {
        spec: spec.clone(),
        vocab,
        train_pool: ExampleSet::new(names.clone(), train)?,
        retrieved,
        test: ExampleSet::new(names, test)?,
        retrieved_counts,
        means,
        shift,
    })
}

/// A pretraining split for the task family of `spec`: the SAME concepts and
/// geometry (identical class means and auxiliary-domain offset), with fresh
/// example draws in the auxiliary domain, disjoint from every task example.
///
/// This mirrors a web-scale pretraining corpus: it covers the task's
/// concepts, lives in the same domain the retrieved pool is drawn from, and
/// shares no examples with the task. Aligning an encoder with the text tower
/// on this split yields a meaningful zero-shot model for the task.
pub fn generate_pretrain_set(spec: &SyntheticTaskSpec, per_class: usize) -> Result<ExampleSet> {
    spec.validate()?;
    if per_class == 0 {
        return Err(SwatError::invalid("pretrain", "need >= 1 example per class"));
    }
    let d = spec.feature_dim;
    let means = class_means(spec);
    let shift = shift_vector(spec);
    let names: Vec<String> = (0..spec.num_classes).map(concept_name).collect();
    let mut examples = Vec::with_capacity(spec.num_classes * per_class);
    for ci in 0..spec.num_classes {
        let mut r = rng::seeded(spec.seed, "pretrain-data", ci as u64);
        for i in 0..per_class {
            let features: Vec<f64> = (0..d)
                .map(|j| means[ci][j] + shift[j] + spec.sigma * r.sample::<f64, _>(StandardNormal))
                .collect();
            examples.push(LabeledExample {
                id: format!("pre_c{:04}_{:04}", ci, i),
                input: ExampleInput::Features(features),
                label: ci,
                source: Source::Retrieved,
            });
        }
    }
    ExampleSet::new(names, examples)
}

/// Caption templates for the synthetic corpus; `{}` is the concept name.
const CAPTION_TEMPLATES: [&str; 4] = [
    "a photo of {} outdoors",
    "close-up studio shot of {}",
    "someone looking at {} indoors",
    "the {} in natural light",
];

/// Filler captions that mention no concept.
const DISTRACTOR_TEMPLATES: [&str; 3] = [
    "scenic landscape with mountains item {}",
    "abstract texture pattern number {}",
    "street crowd at dusk frame {}",
];

/// A deterministic caption corpus mirroring the task's retrieved pool: every
/// retrieved example becomes one record whose caption mentions its (possibly
/// noise-corrupted) concept name, carrying the example's features as the
/// image payload, plus `distractors` records that mention no concept.
/// String-matching retrieval over this corpus reconstructs the retrieved
/// pool, so the full pipeline (corpus -> match -> rank -> train) runs
/// end-to-end on generated data.
pub fn synthetic_caption_corpus(task: &SyntheticTask, distractors: usize) -> Vec<CaptionRecord> {
    let names = task.retrieved.concept_names();
    let mut records = Vec::with_capacity(task.retrieved.len() + distractors);
    for (i, e) in task.retrieved.examples().iter().enumerate() {
        let template = CAPTION_TEMPLATES[i % CAPTION_TEMPLATES.len()];
        let features = match &e.input {
            ExampleInput::Features(f) => f.clone(),
            ExampleInput::Image(_) => continue,
        };
        records.push(CaptionRecord {
            id: format!("cap_{}", e.id),
            caption: template.replace("{}", &names[e.label]),
            image_path: None,
            features: Some(features),
        });
    }
    for i in 0..distractors {
        let template = DISTRACTOR_TEMPLATES[i % DISTRACTOR_TEMPLATES.len()];
        records.push(CaptionRecord {
            id: format!("dis_{:06}", i),
            caption: template.replace("{}", &i.to_string()),
            image_path: None,
            features: None,
        });
    }
    records
}
