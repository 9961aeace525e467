//! Experiment orchestration: prepare a task per seed, train with one of six
//! methods, evaluate, aggregate over seeds, and sweep over ablation axes.
//!
//! Every output directory is self-describing: the resolved config, per-seed
//! training logs, checkpoints, and reports land next to the aggregate JSON,
//! so a run can be reproduced bit-identically from its artifacts.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::augment::MsdaMethod;
use crate::config::ExperimentConfig;
use crate::corpus::{write_corpus_jsonl, CorpusIndex, ImagePayload};
use crate::data::{
    mix_pools, read_examples_jsonl, sample_few_shot, split_common_rare, write_examples_jsonl,
    ExampleInput, ExampleSet, LabeledExample, Source,
};
use crate::embed::{HashEmbedder, TextImageEmbedder};
use crate::error::{Result, SwatError};
use crate::eval::{
    curve_study, domain_gap_probe, evaluate, mean_std, write_curve_csv, CurveStudy, EvalReport,
};
use crate::model::{init_head_from_text, Encoder, MlpEncoder, Model, StageTag};
use crate::plot::{write_line_svg, PlotSpec, Series};
use crate::retrieval::{
    filter_by_image_similarity, imbalance_stats, rank, select_top_k, string_match,
    write_candidates_jsonl, write_stats_json, RetrievedPool,
};
use crate::rng;
use crate::synth::{
    generate_pretrain_set, generate_synthetic_task, synthetic_caption_corpus, SyntheticTaskSpec,
};
use crate::train::{
    fsft, pretrain_encoder, stage1_finetune, stage2_finetune_all, stage2_retrain_classifier,
    train_linear_probe, EpochMonitor, TrainingLog, MLP_HIDDEN,
};
use crate::vocab::{ConceptEntry, ConceptVocabulary};

/// Seed of the shared deterministic text embedder (the stand-in "text tower").
/// Fixed so head initialization and retrieval ranking agree across runs.
pub const TEXT_EMBED_SEED: u64 = 0x7e87;

/// Examples per class in the synthetic pretraining split.
pub const PRETRAIN_PER_CLASS: usize = 32;

/// Embedding dimension of the image-mode encoder and its text head.
pub const IMAGE_EMBED_DIM: usize = 64;

/// Which training pipeline to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// No training: the text-initialized head on the pretrained encoder.
    ZeroshotHead,
    /// Classifier-only training on the frozen pretrained encoder.
    LinearProbe,
    /// Few-shot finetuning without retrieved data.
    Fsft,
    /// Stage-1 on the mixed pool, then stage-2 classifier retraining.
    Swat,
    /// Stage-1 on the mixed pool, then stage-2 full finetuning.
    SwatPlus,
    /// Stage-1 on the mixed pool only (the ablation column).
    Stage1Only,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zeroshot_head" | "zeroshot-head" => Ok(Method::ZeroshotHead),
            "linear_probe" | "linear-probe" => Ok(Method::LinearProbe),
            "fsft" => Ok(Method::Fsft),
            "swat" => Ok(Method::Swat),
            "swat_plus" | "swat-plus" => Ok(Method::SwatPlus),
            "stage1_only" | "stage1-only" | "stage1" => Ok(Method::Stage1Only),
            other => Err(SwatError::invalid(
                "method",
                format!(
                    "unknown method {:?} (expected zeroshot_head, linear_probe, fsft, swat, \
                     swat_plus, stage1_only)",
                    other
                ),
            )),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::ZeroshotHead => "zeroshot_head",
            Method::LinearProbe => "linear_probe",
            Method::Fsft => "fsft",
            Method::Swat => "swat",
            Method::SwatPlus => "swat_plus",
            Method::Stage1Only => "stage1_only",
        }
    }
}

/// Everything one seeded run needs: data, pool diagnostics, and a pretrained
/// model with a text-initialized head.
#[derive(Debug)]
pub struct PreparedSeed {
    pub vocab: ConceptVocabulary,
    pub fewshot: ExampleSet,
    /// Retrieved auxiliary pool; may contain zero examples.
    pub retrieved: ExampleSet,
    pub test: ExampleSet,
    /// Per-concept retrieved counts (basis of the common/rare split).
    pub retrieved_counts: Vec<usize>,
    pub model: Model,
}

/// Data half of one seeded run: pools, vocabulary, and diagnostics, without
/// the model. Consumers that never train (standalone retrieval, the domain
/// probe, checkpoint evaluation) stop here; [`prepare_seed`] attaches the
/// pretrained model on top.
#[derive(Debug)]
pub struct PreparedTask {
    pub vocab: ConceptVocabulary,
    /// Full training pool the few-shot sample was drawn from.
    pub train_pool: ExampleSet,
    pub fewshot: ExampleSet,
    /// Retrieved auxiliary pool; may contain zero examples.
    pub retrieved: ExampleSet,
    pub test: ExampleSet,
    /// Per-concept retrieved counts (basis of the common/rare split).
    pub retrieved_counts: Vec<usize>,
    /// Dedicated pretraining split (synthetic tasks only); file-backed tasks
    /// pretrain on the retrieved pool instead.
    pub pretrain: Option<ExampleSet>,
    /// Width shared by the text tower and the encoder output.
    pub embed_dim: usize,
}

impl PreparedTask {
    /// The auxiliary pool the encoder pretrains on.
    pub fn pretrain_pool(&self) -> &ExampleSet {
        self.pretrain.as_ref().unwrap_or(&self.retrieved)
    }
}

fn empty_pool(names: &[String]) -> Result<ExampleSet> {
    ExampleSet::new(names.to_vec(), Vec::new())
}

/// Outcome of the corpus pipeline with its intermediates still visible:
/// the index (for materializing examples) and the selected candidate pool
/// (for imbalance diagnostics).
struct CorpusRetrieval {
    index: CorpusIndex,
    /// Matching vocabulary after applying any `retrieval.vocab_path` override.
    vocab: ConceptVocabulary,
    pool: RetrievedPool,
}

/// Match, rank, filter, and select top-k from the configured caption corpus.
fn corpus_retrieval(
    cfg: &ExperimentConfig,
    task_vocab: &ConceptVocabulary,
    fewshot: &ExampleSet,
    feature_dim: usize,
    run_seed: u64,
) -> Result<CorpusRetrieval> {
    let block = cfg.retrieval.as_ref().expect("caller checked retrieval block presence");
    let index = CorpusIndex::from_jsonl(&block.corpus_path)?;
    let vocab = match &block.vocab_path {
        Some(p) => ConceptVocabulary::load(p)?,
        None => task_vocab.clone(),
    };
    let embedder = HashEmbedder::new(feature_dim, TEXT_EMBED_SEED);
    let matches = string_match(&index, &vocab);
    let mut fewshot_images: Vec<Vec<ImagePayload<'_>>> = vec![Vec::new(); vocab.len()];
    for e in fewshot.examples() {
        if let ExampleInput::Features(f) = &e.input {
            // Guarded: a vocabulary override may have fewer concepts than
            // the task labels index into.
            if let Some(slot) = fewshot_images.get_mut(e.label) {
                slot.push(ImagePayload::Features(f));
            }
        }
    }
    let ranked = rank(
        &index,
        &vocab,
        &matches,
        block.rank_method()?,
        &embedder,
        &fewshot_images,
        rng::subseed(run_seed, "retrieval", 0),
    )?;
    let ranked = match block.image_sim_threshold {
        Some(t) => filter_by_image_similarity(&index, &vocab, &embedder, &ranked, t)?,
        None => ranked,
    };
    let pool = select_top_k(&ranked, block.k)?;
    Ok(CorpusRetrieval { index, vocab, pool })
}

/// Build the retrieved pool from a caption corpus per the retrieval block.
fn retrieve_from_corpus(
    cfg: &ExperimentConfig,
    vocab: &ConceptVocabulary,
    fewshot: &ExampleSet,
    feature_dim: usize,
    run_seed: u64,
) -> Result<(ExampleSet, Vec<usize>)> {
    let r = corpus_retrieval(cfg, vocab, fewshot, feature_dim, run_seed)?;
    let counts = r.pool.counts();
    let examples = crate::data::pool_to_examples(&r.index, &r.vocab, &r.pool)?;
    Ok((examples, counts))
}

/// Vocabulary for folder-named classes: the folder name is the only synonym
/// and the prompt is "a photo of <name>".
fn vocab_from_names(names: &[String]) -> Result<ConceptVocabulary> {
    ConceptVocabulary::new(
        names
            .iter()
            .map(|n| {
                (
                    n.clone(),
                    ConceptEntry {
                        synonyms: vec![n.clone()],
                        prompts: vec![format!("a photo of {}", n)],
                    },
                )
            })
            .collect(),
    )
}

/// Pretrain the encoder (text-tower alignment) when auxiliary data is
/// available; otherwise fall back to seeded random initialization of the
/// right architecture with the embedder's output dimension.
fn prepare_encoder(
    aux: &ExampleSet,
    sample: &ExampleInput,
    vocab: &ConceptVocabulary,
    embedder: &dyn TextImageEmbedder,
    run_seed: u64,
) -> Result<Encoder> {
    let seed = rng::subseed(run_seed, "pretrain", 0);
    if !aux.is_empty() {
        let (encoder, _log) = pretrain_encoder(aux, vocab, embedder, seed)?;
        return Ok(encoder);
    }
    let out_dim = embedder.dim();
    let mut r = rng::seeded(seed, "pretrain-init", 0);
    Ok(match sample {
        ExampleInput::Features(f) => {
            Encoder::Mlp(MlpEncoder::new(f.len(), MLP_HIDDEN, out_dim, &mut r))
        }
        ExampleInput::Image(t) => {
            Encoder::Conv(crate::model::ConvEncoder::new(t.channels, out_dim, &mut r))
        }
    })
}

/// Materialize the data of one run seed.
///
/// Synthetic tasks are regenerated per seed (`subseed(run_seed, "task",
/// spec.seed)`), so seed-to-seed variation covers the data draw as well as
/// training randomness. File-backed tasks keep their data fixed; the run seed
/// varies the few-shot sample and training.
pub fn prepare_task(cfg: &ExperimentConfig, run_seed: u64) -> Result<PreparedTask> {
    let fewshot_seed = rng::subseed(run_seed, "fewshot", 0);

    if let Some(spec) = &cfg.task.synthetic {
        let mut eff = spec.clone();
        eff.seed = rng::subseed(run_seed, "task", spec.seed);
        let task = generate_synthetic_task(&eff)?;
        let fewshot = sample_few_shot(&task.train_pool, eff.shots, fewshot_seed)?.examples;
        let pretrain = generate_pretrain_set(&eff, PRETRAIN_PER_CLASS)?;
        return Ok(PreparedTask {
            vocab: task.vocab,
            train_pool: task.train_pool,
            fewshot,
            retrieved: task.retrieved,
            test: task.test,
            retrieved_counts: task.retrieved_counts,
            pretrain: Some(pretrain),
            embed_dim: eff.feature_dim,
        });
    }

    if let Some(files) = &cfg.task.features {
        let vocab = ConceptVocabulary::load(&files.vocab_path)?;
        let names = vocab.names().to_vec();
        let train_pool = read_examples_jsonl(&files.train_path, names.clone())?;
        let test = read_examples_jsonl(&files.test_path, names.clone())?;
        if train_pool.is_empty() {
            return Err(SwatError::EmptyData { context: "train pool".into() });
        }
        let feature_dim = match &train_pool.examples()[0].input {
            ExampleInput::Features(f) => f.len(),
            ExampleInput::Image(_) => unreachable!("jsonl loader yields features"),
        };
        let fewshot = sample_few_shot(&train_pool, files.shots, fewshot_seed)?.examples;
        let (retrieved, retrieved_counts) = match (&files.retrieved_path, &cfg.retrieval) {
            (Some(path), _) => {
                let pool = read_examples_jsonl(path, names.clone())?;
                let counts = pool.per_class_counts();
                (pool, counts)
            }
            (None, Some(_)) => retrieve_from_corpus(cfg, &vocab, &fewshot, feature_dim, run_seed)?,
            (None, None) => (empty_pool(&names)?, vec![0; names.len()]),
        };
        return Ok(PreparedTask {
            vocab,
            train_pool,
            fewshot,
            retrieved,
            test,
            retrieved_counts,
            pretrain: None,
            embed_dim: feature_dim,
        });
    }

    let folders = cfg
        .task
        .image_folders
        .as_ref()
        .ok_or_else(|| SwatError::config("task: no task block configured"))?;
    let train_pool = crate::data::load_image_folders(&folders.train_dir, Source::FewShot)?;
    let test = crate::data::load_image_folders(&folders.test_dir, Source::FewShot)?;
    if train_pool.concept_names() != test.concept_names() {
        return Err(SwatError::PoolMismatch {
            message: "train and test folders disagree on class subdirectories".into(),
        });
    }
    let names = train_pool.concept_names().to_vec();
    let vocab = match &folders.vocab_path {
        Some(p) => {
            let v = ConceptVocabulary::load(p)?;
            if v.names() != names.as_slice() {
                return Err(SwatError::Vocabulary {
                    message: "vocabulary concepts do not match class subdirectories".into(),
                });
            }
            v
        }
        None => vocab_from_names(&names)?,
    };
    let fewshot = sample_few_shot(&train_pool, folders.shots, fewshot_seed)?.examples;
    let (retrieved, retrieved_counts) = match &folders.retrieved_dir {
        Some(dir) => {
            let pool = crate::data::load_image_folders(dir, Source::Retrieved)?;
            if pool.concept_names() != names.as_slice() {
                return Err(SwatError::PoolMismatch {
                    message: "retrieved folders disagree with train class subdirectories".into(),
                });
            }
            let counts = pool.per_class_counts();
            (pool, counts)
        }
        None => (empty_pool(&names)?, vec![0; names.len()]),
    };
    Ok(PreparedTask {
        vocab,
        train_pool,
        fewshot,
        retrieved,
        test,
        retrieved_counts,
        pretrain: None,
        embed_dim: IMAGE_EMBED_DIM,
    })
}

/// Materialize data and a pretrained model for one run seed: the data from
/// [`prepare_task`], an encoder aligned to the text tower on the auxiliary
/// pool, and a text-initialized head.
pub fn prepare_seed(cfg: &ExperimentConfig, run_seed: u64) -> Result<PreparedSeed> {
    let task = prepare_task(cfg, run_seed)?;
    let embedder = HashEmbedder::new(task.embed_dim, TEXT_EMBED_SEED);
    let encoder = prepare_encoder(
        task.pretrain_pool(),
        &task.train_pool.examples()[0].input,
        &task.vocab,
        &embedder,
        run_seed,
    )?;
    let head = init_head_from_text(&task.vocab, &embedder, cfg.train.temperature_init)?;
    Ok(PreparedSeed {
        model: Model::new(encoder, head, StageTag::Pretrained)?,
        vocab: task.vocab,
        fewshot: task.fewshot,
        retrieved: task.retrieved,
        test: task.test,
        retrieved_counts: task.retrieved_counts,
    })
}

/// Raise the few-shot fraction of a mixed pool to at least `target` by
/// duplicating few-shot examples round-robin (deterministic, minimal count).
/// A pool already at or above the target is returned unchanged.
pub fn oversample_fewshot(mixed: &ExampleSet, target: f64) -> Result<ExampleSet> {
    if !target.is_finite() || !(0.0 < target && target < 1.0) {
        return Err(SwatError::invalid("fewshot_ratio", "must be in (0, 1)"));
    }
    let fewshot: Vec<&LabeledExample> =
        mixed.examples().iter().filter(|e| e.source == Source::FewShot).collect();
    let f = fewshot.len();
    let r = mixed.len() - f;
    if f == 0 {
        return Err(SwatError::EmptyData {
            context: "cannot raise the few-shot fraction of a pool without few-shot examples"
                .into(),
        });
    }
    // Smallest `extra` with (f + extra) / (f + extra + r) >= target.
    let extra = ((target * (f + r) as f64 - f as f64) / (1.0 - target)).ceil().max(0.0) as usize;
    if extra == 0 {
        return Ok(mixed.clone());
    }
    let mut examples = mixed.examples().to_vec();
    examples.reserve(extra);
    for i in 0..extra {
        let src = fewshot[i % f];
        examples.push(LabeledExample {
            id: format!("{}#dup{}", src.id, i / f + 1),
            ..src.clone()
        });
    }
    ExampleSet::new(mixed.concept_names().to_vec(), examples)
}

/// The stage-1 training pool: retrieved + few-shot, optionally oversampled to
/// the configured few-shot fraction.
fn build_stage1_pool(cfg: &ExperimentConfig, prepared: &PreparedSeed) -> Result<ExampleSet> {
    let mixed = mix_pools(&prepared.retrieved, &prepared.fewshot)?;
    match cfg.fewshot_ratio {
        Some(target) => oversample_fewshot(&mixed, target),
        None => Ok(mixed),
    }
}

/// Artifacts of one seeded run.
#[derive(Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub report: EvalReport,
    pub logs: Vec<TrainingLog>,
    pub checkpoint: PathBuf,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| SwatError::config(format!("serialization: {}", e)))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| SwatError::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| SwatError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| SwatError::Parse {
        path: path.to_path_buf(),
        line: None,
        message: e.to_string(),
    })
}

/// Sorted-descending retrieved-count curve (the imbalance profile plot).
fn write_counts_profile(dir: &Path, counts: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("retrieved_counts.csv"))
        .map_err(|e| SwatError::io(dir, std::io::Error::other(e.to_string())))?;
    let emit_err = |e: csv::Error| SwatError::io(dir, std::io::Error::other(e.to_string()));
    w.write_record(["concept_index", "count"]).map_err(emit_err)?;
    for (i, c) in counts.iter().enumerate() {
        w.write_record([i.to_string(), c.to_string()]).map_err(emit_err)?;
    }
    w.flush().map_err(|e| SwatError::io(dir, e))?;

    let mut sorted: Vec<usize> = counts.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let points: Vec<(f64, f64)> =
        sorted.iter().enumerate().map(|(i, &c)| ((i + 1) as f64, c as f64)).collect();
    write_line_svg(
        &dir.join("retrieved_profile.svg"),
        &PlotSpec {
            title: "retrieved examples per concept (sorted)",
            x_label: "concept rank",
            y_label: "count",
        },
        &[Series::new("retrieved", points)],
    )
}

/// Run one method for one seed, writing report/logs/checkpoint into `dir`.
pub fn run_one_seed(
    cfg: &ExperimentConfig,
    method: Method,
    seed: u64,
    dir: &Path,
) -> Result<SeedRun> {
    std::fs::create_dir_all(dir).map_err(|e| SwatError::io(dir, e))?;
    let prepared = prepare_seed(cfg, seed)?;
    let split = split_common_rare(&prepared.retrieved_counts)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;

    let test = &prepared.test;
    let method_name = method.as_str();
    let mut monitor_fn = |m: &Model, _epoch: usize| -> Result<f64> {
        Ok(evaluate(m, test, &split, method_name, seed)?.overall)
    };
    // Fresh short-lived reborrow per training stage (a single Option cannot
    // be handed to two stages).
    fn mon<'a>(
        enabled: bool,
        f: &'a mut dyn FnMut(&Model, usize) -> Result<f64>,
    ) -> Option<EpochMonitor<'a>> {
        enabled.then_some(f)
    }
    let enabled = cfg.eval.monitor;

    let mut logs = Vec::new();
    let model = match method {
        Method::ZeroshotHead => prepared.model,
        Method::LinearProbe => {
            let (m, log) = train_linear_probe(
                prepared.model,
                &prepared.fewshot,
                &train_cfg,
                mon(enabled, &mut monitor_fn),
            )?;
            logs.push(log);
            m
        }
        Method::Fsft => {
            let (m, log) =
                fsft(prepared.model, &prepared.fewshot, &train_cfg, mon(enabled, &mut monitor_fn))?;
            logs.push(log);
            m
        }
        Method::Stage1Only => {
            let pool = build_stage1_pool(cfg, &prepared)?;
            let (m, log) = stage1_finetune(
                prepared.model,
                &pool,
                &train_cfg,
                mon(enabled, &mut monitor_fn),
            )?;
            logs.push(log);
            m
        }
        Method::Swat | Method::SwatPlus => {
            let pool = build_stage1_pool(cfg, &prepared)?;
            let (m, log1) = stage1_finetune(
                prepared.model,
                &pool,
                &train_cfg,
                mon(enabled, &mut monitor_fn),
            )?;
            let (m, log2) = match method {
                Method::Swat => stage2_retrain_classifier(
                    m,
                    &prepared.fewshot,
                    &train_cfg,
                    mon(enabled, &mut monitor_fn),
                )?,
                _ => stage2_finetune_all(
                    m,
                    &prepared.fewshot,
                    &train_cfg,
                    mon(enabled, &mut monitor_fn),
                )?,
            };
            logs.push(log1);
            logs.push(log2);
            m
        }
    };

    let report = evaluate(&model, test, &split, method_name, seed)?;
    report.save_json(&dir.join("report.json"))?;

    let checkpoint = dir.join("checkpoint.bin");
    model.save(&checkpoint, &cfg.hash()?)?;
    for log in logs.iter_mut() {
        log.checkpoint = Some(checkpoint.display().to_string());
        write_json(&dir.join(format!("train_{}.json", log.stage)), log)?;
    }
    write_counts_profile(dir, &prepared.retrieved_counts)?;

    Ok(SeedRun { seed, report, logs, checkpoint })
}

/// Mean and standard deviation of one metric across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn agg(values: &[f64]) -> MeanStd {
    let (mean, std) = mean_std(values);
    MeanStd { mean, std }
}

/// One seed's headline numbers inside the aggregate report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub overall: f64,
    pub common: f64,
    pub rare: f64,
    /// Per-seed report path, relative to the aggregate's directory.
    pub report: String,
}

/// Cross-seed summary of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub schema_version: u32,
    pub method: String,
    pub seeds: Vec<u64>,
    pub overall: MeanStd,
    pub common: MeanStd,
    pub rare: MeanStd,
    pub per_seed: Vec<SeedSummary>,
}

impl AggregateReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Run the full pipeline once per configured seed and aggregate the metrics.
/// `out_dir` receives the resolved config, one `seed_<s>/` directory per
/// seed, and `aggregate.json`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    method: Method,
    out_dir: &Path,
) -> Result<AggregateReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| SwatError::io(out_dir, e))?;
    cfg.write_resolved(out_dir)?;

    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let dir = out_dir.join(format!("seed_{}", seed));
        runs.push(run_one_seed(cfg, method, seed, &dir)?);
    }

    let overall: Vec<f64> = runs.iter().map(|r| r.report.overall).collect();
    let common: Vec<f64> = runs.iter().map(|r| r.report.common).collect();
    let rare: Vec<f64> = runs.iter().map(|r| r.report.rare).collect();
    let aggregate = AggregateReport {
        schema_version: 1,
        method: method.as_str().into(),
        seeds: cfg.seeds.clone(),
        overall: agg(&overall),
        common: agg(&common),
        rare: agg(&rare),
        per_seed: runs
            .iter()
            .map(|r| SeedSummary {
                seed: r.seed,
                overall: r.report.overall,
                common: r.report.common,
                rare: r.report.rare,
                report: format!("seed_{}/report.json", r.seed),
            })
            .collect(),
    };
    aggregate.save_json(&out_dir.join("aggregate.json"))?;
    Ok(aggregate)
}

/// Stage-2 accuracy-vs-epochs study. Stage-1 runs once per seed and is shared
/// by every grid point; each point retrains the classifier fresh from that
/// stage-1 model with the given epoch count. Emits CSV + SVG into `out_dir`.
pub fn stage2_epoch_curve(cfg: &ExperimentConfig, out_dir: &Path) -> Result<CurveStudy> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| SwatError::io(out_dir, e))?;
    cfg.write_resolved(out_dir)?;

    let mut stage1_cache: HashMap<u64, (Model, ExampleSet, ExampleSet, Vec<usize>)> =
        HashMap::new();
    let study = curve_study(
        |epochs, seed| {
            if !stage1_cache.contains_key(&seed) {
                let prepared = prepare_seed(cfg, seed)?;
                let pool = build_stage1_pool(cfg, &prepared)?;
                let mut train_cfg = cfg.train.clone();
                train_cfg.seed = seed;
                let (m, _log) = stage1_finetune(prepared.model, &pool, &train_cfg, None)?;
                stage1_cache.insert(
                    seed,
                    (m, prepared.fewshot, prepared.test, prepared.retrieved_counts),
                );
            }
            let (stage1_model, fewshot, test, counts) = &stage1_cache[&seed];
            let mut train_cfg = cfg.train.clone();
            train_cfg.seed = seed;
            train_cfg.epochs_stage2 = epochs;
            let (m, _log) =
                stage2_retrain_classifier(stage1_model.clone(), fewshot, &train_cfg, None)?;
            Ok(evaluate(&m, test, &split_common_rare(counts)?, "swat", seed)?.overall)
        },
        &cfg.eval.curve_epochs,
        &cfg.seeds,
    )?;

    write_curve_csv(&out_dir.join("curve.csv"), &study)?;
    let points: Vec<(f64, f64)> =
        study.points.iter().map(|p| (p.epochs as f64, p.mean)).collect();
    let err: Vec<f64> = study.points.iter().map(|p| p.std).collect();
    write_line_svg(
        &out_dir.join("accuracy_vs_epoch.svg"),
        &PlotSpec {
            title: "stage-2 test accuracy vs retraining epochs",
            x_label: "stage-2 epochs",
            y_label: "accuracy (%)",
        },
        &[Series::with_err("mean over seeds", points, err)],
    )?;
    write_json(&out_dir.join("curve.json"), &study)?;
    Ok(study)
}

/// Ablation axis of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    RetrievalK,
    FewshotRatio,
    Stage1Epochs,
    MsdaMethod,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "retrieval_k" | "retrieval-k" => Ok(SweepAxis::RetrievalK),
            "fewshot_ratio" | "fewshot-ratio" => Ok(SweepAxis::FewshotRatio),
            "stage1_epochs" | "stage1-epochs" => Ok(SweepAxis::Stage1Epochs),
            "msda_method" | "msda-method" => Ok(SweepAxis::MsdaMethod),
            other => Err(SwatError::invalid(
                "axis",
                format!(
                    "unknown sweep axis {:?} (expected retrieval_k, fewshot_ratio, \
                     stage1_epochs, msda_method)",
                    other
                ),
            )),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::RetrievalK => "retrieval_k",
            SweepAxis::FewshotRatio => "fewshot_ratio",
            SweepAxis::Stage1Epochs => "stage1_epochs",
            SweepAxis::MsdaMethod => "msda_method",
        }
    }

    fn is_numeric(&self) -> bool {
        !matches!(self, SweepAxis::MsdaMethod)
    }

    /// Apply one axis value to a config copy.
    fn apply(&self, cfg: &mut ExperimentConfig, value: &str) -> Result<()> {
        let bad = |what: &str| {
            SwatError::invalid(
                "sweep value",
                format!("{:?} is not a valid {} for axis {}", value, what, self.as_str()),
            )
        };
        match self {
            SweepAxis::RetrievalK => {
                let k: usize = value.parse().map_err(|_| bad("count"))?;
                if k == 0 {
                    return Err(bad("count (must be >= 1)"));
                }
                if let Some(spec) = cfg.task.synthetic.as_mut() {
                    spec.retrieval_size = k;
                }
                if let Some(r) = cfg.retrieval.as_mut() {
                    r.k = k;
                }
            }
            SweepAxis::FewshotRatio => {
                let ratio: f64 = value.parse().map_err(|_| bad("fraction"))?;
                if !ratio.is_finite() || !(0.0 < ratio && ratio < 1.0) {
                    return Err(bad("fraction (must be in (0, 1))"));
                }
                cfg.fewshot_ratio = Some(ratio);
            }
            SweepAxis::Stage1Epochs => {
                let epochs: usize = value.parse().map_err(|_| bad("epoch count"))?;
                if epochs == 0 {
                    return Err(bad("epoch count (must be >= 1)"));
                }
                cfg.train.epochs_stage1 = epochs;
            }
            SweepAxis::MsdaMethod => {
                cfg.train.msda.method = MsdaMethod::parse(value)?;
            }
        }
        Ok(())
    }
}

/// One sweep cell: the axis value and its aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub value: String,
    pub aggregate: AggregateReport,
}

/// All cells of one sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub axis: String,
    pub method: String,
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

fn write_sweep_csv(path: &Path, axis: SweepAxis, cells: &[SweepCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| SwatError::io(path, std::io::Error::other(e.to_string())))?;
    let emit_err = |e: csv::Error| SwatError::io(path, std::io::Error::other(e.to_string()));
    w.write_record([
        axis.as_str(),
        "overall_mean",
        "overall_std",
        "common_mean",
        "common_std",
        "rare_mean",
        "rare_std",
    ])
    .map_err(emit_err)?;
    for cell in cells {
        let a = &cell.aggregate;
        w.write_record([
            cell.value.clone(),
            a.overall.mean.to_string(),
            a.overall.std.to_string(),
            a.common.mean.to_string(),
            a.common.std.to_string(),
            a.rare.mean.to_string(),
            a.rare.std.to_string(),
        ])
        .map_err(emit_err)?;
    }
    w.flush().map_err(|e| SwatError::io(path, e))
}

/// One row per cell with the delta to the previous cell, plus a trend line
/// (are the deltas non-increasing, i.e. diminishing returns?).
fn write_monotonicity_report(
    path: &Path,
    axis: SweepAxis,
    method: Method,
    cells: &[SweepCell],
) -> Result<()> {
    let mut lines = vec![format!("axis={} method={}", axis.as_str(), method.as_str())];
    let mut deltas = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        let mean = cell.aggregate.overall.mean;
        let delta = if i == 0 {
            "n/a".to_string()
        } else {
            let d = mean - cells[i - 1].aggregate.overall.mean;
            deltas.push(d);
            format!("{:+.2}", d)
        };
        lines.push(format!("value={} overall_mean={:.2} delta={}", cell.value, mean, delta));
    }
    let diminishing = deltas.windows(2).all(|w| w[1] <= w[0]);
    lines.push(format!(
        "trend: deltas non-increasing (diminishing returns): {}",
        if diminishing { "yes" } else { "no" }
    ));
    lines.push(String::new());
    std::fs::write(path, lines.join("\n")).map_err(|e| SwatError::io(path, e))
}

/// Run one experiment per axis value; each cell owns the subdirectory
/// `<axis>=<value>/`. Emits `sweep.json`, `sweep.csv`, a monotonicity report,
/// and (for numeric axes) `sweep.svg`.
pub fn sweep(
    cfg: &ExperimentConfig,
    method: Method,
    axis: SweepAxis,
    values: &[String],
    out_dir: &Path,
) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(SwatError::EmptyData { context: "sweep values".into() });
    }
    std::fs::create_dir_all(out_dir).map_err(|e| SwatError::io(out_dir, e))?;

    let mut cells = Vec::with_capacity(values.len());
    for value in values {
        let mut cell_cfg = cfg.clone();
        axis.apply(&mut cell_cfg, value)?;
        let dir = out_dir.join(format!("{}={}", axis.as_str(), value));
        let aggregate = run_experiment(&cell_cfg, method, &dir)?;
        cells.push(SweepCell { value: value.clone(), aggregate });
    }

    write_sweep_csv(&out_dir.join("sweep.csv"), axis, &cells)?;
    write_monotonicity_report(&out_dir.join("monotonicity.txt"), axis, method, &cells)?;
    if axis.is_numeric() {
        let points: Vec<(f64, f64)> = cells
            .iter()
            .map(|c| {
                let x: f64 = c.value.parse().expect("numeric axis values parse");
                (x, c.aggregate.overall.mean)
            })
            .collect();
        let err: Vec<f64> = cells.iter().map(|c| c.aggregate.overall.std).collect();
        write_line_svg(
            &out_dir.join("sweep.svg"),
            &PlotSpec {
                title: "overall accuracy vs sweep value",
                x_label: axis.as_str(),
                y_label: "accuracy (%)",
            },
            &[Series::with_err(method.as_str(), points, err)],
        )?;
    }

    let report = SweepReport {
        schema_version: 1,
        axis: axis.as_str().into(),
        method: method.as_str().into(),
        cells,
    };
    report.save_json(&out_dir.join("sweep.json"))?;
    Ok(report)
}

/// Artifact manifest and summary of a standalone retrieval run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRun {
    pub schema_version: u32,
    pub seed: u64,
    /// Per-concept selected counts, vocabulary order.
    pub counts: Vec<usize>,
    pub total: usize,
    /// Gini coefficient of the counts: 0 = perfectly balanced.
    pub gini: f64,
    pub candidates: PathBuf,
    pub stats: PathBuf,
    pub examples: PathBuf,
    pub profile_svg: PathBuf,
}

impl RetrievalRun {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Run the retrieval pipeline (match, rank, filter, top-k) against the
/// configured corpus and write its artifacts into `out_dir`: the selected
/// candidates (JSONL), imbalance statistics (JSON), the materialized
/// auxiliary examples (JSONL), and the sorted count profile (CSV + SVG).
pub fn run_retrieval(
    cfg: &ExperimentConfig,
    run_seed: u64,
    out_dir: &Path,
) -> Result<RetrievalRun> {
    cfg.validate()?;
    if cfg.retrieval.is_none() {
        return Err(SwatError::config("retrieval: a [retrieval] block is required"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| SwatError::io(out_dir, e))?;
    let task = prepare_task(cfg, run_seed)?;
    let r = corpus_retrieval(cfg, &task.vocab, &task.fewshot, task.embed_dim, run_seed)?;

    let stats = imbalance_stats(&r.pool);
    let candidates = out_dir.join("candidates.jsonl");
    write_candidates_jsonl(&candidates, &r.pool.per_concept)?;
    let stats_path = out_dir.join("retrieval_stats.json");
    write_stats_json(&stats_path, &stats)?;
    let examples_path = out_dir.join("retrieved.jsonl");
    write_examples_jsonl(&examples_path, &crate::data::pool_to_examples(&r.index, &r.vocab, &r.pool)?)?;
    write_counts_profile(out_dir, &stats.counts)?;

    let run = RetrievalRun {
        schema_version: 1,
        seed: run_seed,
        total: stats.counts.iter().sum(),
        gini: stats.gini,
        counts: stats.counts,
        candidates,
        stats: stats_path,
        examples: examples_path,
        profile_svg: out_dir.join("retrieved_profile.svg"),
    };
    run.save_json(&out_dir.join("retrieval_run.json"))?;
    Ok(run)
}

/// File manifest of a generated synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthGenFiles {
    pub schema_version: u32,
    pub vocab: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
    pub retrieved: PathBuf,
    pub corpus: PathBuf,
    /// Per-concept retrieved counts, vocabulary order.
    pub retrieved_counts: Vec<usize>,
}

impl SynthGenFiles {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Generate a synthetic task and write it out as a self-contained file-backed
/// task: train/test/retrieved example JSONL, the vocabulary, and a caption
/// corpus whose captions name each retrieved example's concept (plus
/// `distractors` caption-only records that mention no concept), so the
/// retrieval pipeline reconstructs the retrieved pool from text alone.
pub fn generate_task_files(
    spec: &SyntheticTaskSpec,
    distractors: usize,
    out_dir: &Path,
) -> Result<SynthGenFiles> {
    std::fs::create_dir_all(out_dir).map_err(|e| SwatError::io(out_dir, e))?;
    let task = generate_synthetic_task(spec)?;

    let files = SynthGenFiles {
        schema_version: 1,
        vocab: out_dir.join("vocab.json"),
        train: out_dir.join("train.jsonl"),
        test: out_dir.join("test.jsonl"),
        retrieved: out_dir.join("retrieved.jsonl"),
        corpus: out_dir.join("corpus.jsonl"),
        retrieved_counts: task.retrieved_counts.clone(),
    };
    task.vocab.save(&files.vocab)?;
    write_examples_jsonl(&files.train, &task.train_pool)?;
    write_examples_jsonl(&files.test, &task.test)?;
    write_examples_jsonl(&files.retrieved, &task.retrieved)?;
    write_corpus_jsonl(&files.corpus, &synthetic_caption_corpus(&task, distractors))?;
    files.save_json(&out_dir.join("task_files.json"))?;
    Ok(files)
}

/// Result of the source-distinguishability probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeGapReport {
    pub schema_version: u32,
    pub seed: u64,
    /// Held-out accuracy (percent) of a linear classifier separating the
    /// training domain from the retrieved domain. Near 50 means the sources
    /// are indistinguishable; high values certify a domain gap.
    pub accuracy: f64,
    /// Examples per source after class-stratified balancing.
    pub per_source: usize,
    /// `features` (raw inputs) or `encoder` (pretrained image embeddings).
    pub feature_space: String,
}

impl ProbeGapReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Feature vectors of the kept examples: raw inputs for feature tasks,
/// encoder embeddings for image tasks.
fn probe_features(
    set: &ExampleSet,
    keep: &[usize],
    encoder: Option<&Encoder>,
) -> Result<Vec<Vec<f64>>> {
    match encoder {
        None => keep
            .iter()
            .map(|&i| match &set.examples()[i].input {
                ExampleInput::Features(f) => Ok(f.clone()),
                ExampleInput::Image(_) => Err(SwatError::config(
                    "probe: image inputs require encoder embeddings",
                )),
            })
            .collect(),
        Some(enc) => {
            let inputs: Vec<&ExampleInput> =
                keep.iter().map(|&i| &set.examples()[i].input).collect();
            let out = enc.forward(&inputs)?;
            Ok(out.outer_iter().map(|row| row.to_vec()).collect())
        }
    }
}

/// Deterministically pick `n` of the given example indices (ascending order).
fn sample_group(group: &[usize], n: usize, seed: u64, stream: u64) -> Vec<usize> {
    if group.len() <= n {
        return group.to_vec();
    }
    let mut r = rng::seeded(seed, "probe-balance", stream);
    let mut idx = rand::seq::index::sample(&mut r, group.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| group[i]).collect()
}

/// Class-stratified balanced index subsets of two sets: every class
/// contributes equally many examples from both sides (classes missing on
/// either side contribute nothing), so neither source size nor class mix can
/// stand in for a domain signal.
fn stratified_keep(
    a: &ExampleSet,
    b: &ExampleSet,
    num_classes: usize,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let by_class = |s: &ExampleSet| {
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
        for (i, e) in s.examples().iter().enumerate() {
            groups[e.label].push(i);
        }
        groups
    };
    let (groups_a, groups_b) = (by_class(a), by_class(b));
    let (mut keep_a, mut keep_b) = (Vec::new(), Vec::new());
    for c in 0..num_classes {
        let n = groups_a[c].len().min(groups_b[c].len());
        if n == 0 {
            continue;
        }
        let stream = (c as u64) << 1;
        keep_a.extend(sample_group(&groups_a[c], n, seed, stream));
        keep_b.extend(sample_group(&groups_b[c], n, seed, stream | 1));
    }
    keep_a.sort_unstable();
    keep_b.sort_unstable();
    (keep_a, keep_b)
}

/// Train a linear probe to tell the task's training domain apart from the
/// retrieved domain and report held-out accuracy in percent.
///
/// The two sources are balanced class by class (each class contributes the
/// same number of examples from both sides), so neither a majority-vote
/// shortcut nor a class-mix difference can lift accuracy above chance when
/// the underlying distributions are identical. Feature tasks are probed in
/// input space; image tasks are probed in the pretrained encoder's embedding
/// space.
pub fn run_probe_gap(cfg: &ExperimentConfig, run_seed: u64) -> Result<ProbeGapReport> {
    cfg.validate()?;
    let task = prepare_task(cfg, run_seed)?;
    if task.retrieved.is_empty() {
        return Err(SwatError::EmptyData { context: "domain probe retrieved pool".into() });
    }
    let needs_encoder = task
        .train_pool
        .examples()
        .first()
        .is_some_and(|e| matches!(e.input, ExampleInput::Image(_)));
    let encoder = if needs_encoder {
        let embedder = HashEmbedder::new(task.embed_dim, TEXT_EMBED_SEED);
        Some(prepare_encoder(
            task.pretrain_pool(),
            &task.train_pool.examples()[0].input,
            &task.vocab,
            &embedder,
            run_seed,
        )?)
    } else {
        None
    };
    let (keep_a, keep_b) =
        stratified_keep(&task.train_pool, &task.retrieved, task.vocab.len(), run_seed);
    let a = probe_features(&task.train_pool, &keep_a, encoder.as_ref())?;
    let b = probe_features(&task.retrieved, &keep_b, encoder.as_ref())?;
    let per_source = a.len();

    let mut probe_cfg = cfg.probe.clone();
    probe_cfg.seed = rng::subseed(run_seed, "probe", cfg.probe.seed);
    let accuracy = domain_gap_probe(&a, &b, &probe_cfg)?;
    Ok(ProbeGapReport {
        schema_version: 1,
        seed: run_seed,
        accuracy,
        per_source,
        feature_space: if needs_encoder { "encoder" } else { "features" }.into(),
    })
}

/// Evaluate a saved checkpoint on the configured task's test set.
pub fn run_eval_checkpoint(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    run_seed: u64,
) -> Result<EvalReport> {
    cfg.validate()?;
    let task = prepare_task(cfg, run_seed)?;
    let (model, _config_hash) = Model::load(checkpoint)?;
    if model.num_classes() != task.vocab.len() {
        return Err(SwatError::DimensionMismatch {
            context: "checkpoint classes vs task concepts".into(),
            expected: task.vocab.len(),
            got: model.num_classes(),
        });
    }
    let split = split_common_rare(&task.retrieved_counts)?;
    evaluate(&model, &task.test, &split, "eval", run_seed)
}
