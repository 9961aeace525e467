//! Two-stage training: end-to-end finetuning on mixed retrieved + few-shot
//! data, then classifier-only retraining on the few-shot split.
//!
//! One fixed hyperparameter recipe drives every run (no validation set, no
//! early stopping): AdamW with decoupled weight decay, per-group learning
//! rates (encoder / classifier / temperature), linear warmup followed by
//! cosine decay, per-epoch reshuffling, drop-last disabled. Weight decay is
//! not applied to the log-temperature.
//!
//! All stage functions consume the model and hand back the trained one, so a
//! single trainer owns the parameters for the duration of a run. Everything
//! is deterministic given `(seed, config, data)`.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{mix_batch, MsdaConfig, MsdaMethod};
use crate::data::{mix_pools, ExampleInput, ExampleSet, LabeledExample};
use crate::embed::TextImageEmbedder;
use crate::error::{Result, SwatError};
use crate::model::{init_head_from_text, Encoder, Model, StageTag};
use crate::optim::{adamw_step, AdamHyper, AdamState, WarmupCosine};
use crate::rng;
use crate::vocab::ConceptVocabulary;

/// Hidden width of the feature-mode MLP encoder.
pub const MLP_HIDDEN: usize = 256;

/// Encoder learning rate during text-alignment pretraining. From-scratch
/// training needs a much larger step than the finetuning recipe.
pub const PRETRAIN_LR: f64 = 1e-3;

/// Epochs of text-alignment pretraining.
pub const PRETRAIN_EPOCHS: usize = 10;

/// Softmax temperature during pretraining. Softer than the finetuning
/// stages: from-scratch training with very peaked logits is unstable.
pub const PRETRAIN_TEMPERATURE: f64 = 0.07;

/// The shared training recipe. Defaults are the pinned protocol values; they
/// apply to every task without per-task tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_encoder: f64,
    pub lr_head: f64,
    pub lr_temperature: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_iters: u64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// Initial temperature for stage-1 (learnable from there).
    pub temperature_init: f64,
    /// Fixed temperature used throughout stage-2 style training.
    pub temperature_stage2: f64,
    pub msda: MsdaConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_encoder: 1e-6,
            lr_head: 1e-4,
            lr_temperature: 1e-4,
            weight_decay: 1e-2,
            batch_size: 32,
            warmup_iters: 50,
            epochs_stage1: 50,
            epochs_stage2: 10,
            temperature_init: 0.01,
            temperature_stage2: 0.01,
            msda: MsdaConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_head", self.lr_head),
            ("lr_temperature", self.lr_temperature),
            ("weight_decay", self.weight_decay),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(SwatError::invalid(name, "must be finite and >= 0"));
            }
        }
        if self.batch_size == 0 {
            return Err(SwatError::invalid("batch_size", "must be >= 1"));
        }
        if self.epochs_stage1 == 0 {
            return Err(SwatError::invalid("epochs_stage1", "must be >= 1"));
        }
        if self.epochs_stage2 == 0 {
            return Err(SwatError::invalid("epochs_stage2", "must be >= 1"));
        }
        for (name, v) in [
            ("temperature_init", self.temperature_init),
            ("temperature_stage2", self.temperature_stage2),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(SwatError::invalid(name, "must be positive and finite"));
            }
        }
        if self.msda.method != MsdaMethod::None {
            // Reuse the augmentation validation for alpha / prob.
            let mut probe_rng = rng::seeded(0, "cfg-validate", 0);
            mix_batch(&[], 1, &self.msda, &mut probe_rng).map(|_| ()).or_else(|e| match e {
                SwatError::EmptyData { .. } => Ok(()),
                other => Err(other),
            })?;
        }
        Ok(())
    }
}

/// What one training stage did, epoch by epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Which stage produced this log ("stage1", "stage2", ...).
    pub stage: String,
    pub seed: u64,
    pub epochs: usize,
    /// Total optimizer iterations across all epochs.
    pub iterations: u64,
    /// Mean batch loss per completed epoch.
    pub epoch_loss: Vec<f64>,
    /// Per-epoch monitored test accuracy, when a monitor was supplied.
    pub test_accuracy: Option<Vec<f64>>,
    pub wall_seconds: f64,
    /// Path of the saved checkpoint, filled in by callers that persist one.
    pub checkpoint: Option<String>,
}

/// Optional per-epoch hook; returns a test accuracy to record.
pub type EpochMonitor<'a> = &'a mut dyn FnMut(&Model, usize) -> Result<f64>;

/// Numerically stable soft-label cross-entropy, averaged over the batch.
/// Returns the loss and `dL/dlogits`.
pub fn soft_cross_entropy(logits: &Array2<f64>, labels: &[Vec<f64>]) -> Result<(f64, Array2<f64>)> {
    let (b, c) = (logits.nrows(), logits.ncols());
    if labels.len() != b {
        return Err(SwatError::DimensionMismatch {
            context: "labels vs logits rows".into(),
            expected: b,
            got: labels.len(),
        });
    }
    let mut dlogits = Array2::zeros((b, c));
    let mut total = 0.0;
    for i in 0..b {
        if labels[i].len() != c {
            return Err(SwatError::DimensionMismatch {
                context: "label width".into(),
                expected: c,
                got: labels[i].len(),
            });
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let mut loss_i = lse;
        for j in 0..c {
            loss_i -= labels[i][j] * row[j];
            let p = (row[j] - lse).exp();
            dlogits[(i, j)] = (p - labels[i][j]) / b as f64;
        }
        total += loss_i;
    }
    Ok((total / b as f64, dlogits))
}

/// One stage of the pipeline as seen by the shared engine.
struct StagePlan<'a> {
    name: &'static str,
    final_tag: StageTag,
    epochs: usize,
    msda: MsdaConfig,
    lr_encoder: f64,
    lr_head: f64,
    lr_tau: f64,
    data: &'a ExampleSet,
}

fn run_stage(
    mut model: Model,
    cfg: &TrainConfig,
    plan: StagePlan<'_>,
    mut monitor: Option<EpochMonitor<'_>>,
) -> Result<(Model, TrainingLog)> {
    cfg.validate()?;
    if plan.data.is_empty() {
        return Err(SwatError::EmptyData { context: format!("{} training data", plan.name) });
    }
    if plan.data.num_classes() != model.num_classes() {
        return Err(SwatError::DimensionMismatch {
            context: format!("{} classes vs classifier rows", plan.name),
            expected: model.num_classes(),
            got: plan.data.num_classes(),
        });
    }
    let started = Instant::now();
    let n = plan.data.len();
    let num_classes = model.num_classes();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_iters = (batches_per_epoch * plan.epochs) as u64;
    let schedule = WarmupCosine::new(cfg.warmup_iters, total_iters)?;

    let decay = AdamHyper { weight_decay: cfg.weight_decay, ..AdamHyper::default() };
    let no_decay = AdamHyper { weight_decay: 0.0, ..AdamHyper::default() };
    let mut enc_states: Vec<AdamState> =
        model.encoder.tensors().iter().map(|t| AdamState::new(t.len())).collect();
    let mut head_state = AdamState::new(model.head.w.len());
    let mut tau_state = AdamState::new(1);

    let mut epoch_loss = Vec::with_capacity(plan.epochs);
    let mut monitored = monitor.as_ref().map(|_| Vec::with_capacity(plan.epochs));
    let mut step = 0u64;
    for epoch in 0..plan.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let shuffle_tag = format!("{}/shuffle", plan.name);
        order.shuffle(&mut rng::seeded(cfg.seed, &shuffle_tag, epoch as u64));
        let msda_tag = format!("{}/msda", plan.name);
        let mut msda_rng = rng::seeded(cfg.seed, &msda_tag, epoch as u64);

        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&LabeledExample> =
                chunk.iter().map(|&i| &plan.data.examples()[i]).collect();
            let mixed = mix_batch(&batch, num_classes, &plan.msda, &mut msda_rng)?;
            let inputs: Vec<&ExampleInput> = mixed.inputs.iter().collect();

            let (features, enc_cache) = model.encoder.forward_train(&inputs)?;
            let (logits, head_cache) = model.head.logits(&features)?;
            let (loss, dlogits) = soft_cross_entropy(&logits, &mixed.labels)?;
            if !loss.is_finite() {
                return Err(SwatError::NonFiniteLoss {
                    stage: plan.name.into(),
                    epoch,
                    batch: batch_idx,
                });
            }
            loss_sum += loss;

            let head_grads = model.head.backward(&head_cache, &dlogits);
            // A frozen encoder group needs no gradient at all; skipping the
            // backward pass changes nothing except wall-clock.
            let enc_grads = if plan.lr_encoder != 0.0 {
                Some(model.encoder.backward(&enc_cache, &head_grads.dfeatures)?)
            } else {
                None
            };

            let scale = schedule.scale(step);
            let groups = model.param_groups();
            if let Some(grads) = &enc_grads {
                for ((slice, grad), state) in
                    groups.encoder.into_iter().zip(grads).zip(&mut enc_states)
                {
                    adamw_step(slice, grad, state, &decay, plan.lr_encoder * scale);
                }
            }
            adamw_step(groups.head_w, &head_grads.dw, &mut head_state, &decay, plan.lr_head * scale);
            adamw_step(
                groups.log_tau,
                &[head_grads.dlog_tau],
                &mut tau_state,
                &no_decay,
                plan.lr_tau * scale,
            );
            step += 1;
        }
        epoch_loss.push(loss_sum / batches_per_epoch as f64);
        if let (Some(hook), Some(acc)) = (monitor.as_mut(), monitored.as_mut()) {
            acc.push(hook(&model, epoch)?);
        }
    }

    model.stage = plan.final_tag;
    let log = TrainingLog {
        stage: plan.name.into(),
        seed: cfg.seed,
        epochs: plan.epochs,
        iterations: step,
        epoch_loss,
        test_accuracy: monitored,
        wall_seconds: started.elapsed().as_secs_f64(),
        checkpoint: None,
    };
    Ok((model, log))
}

fn require_stage(model: &Model, expected: StageTag) -> Result<()> {
    if model.stage != expected {
        return Err(SwatError::WrongStage {
            expected: expected.as_str().into(),
            found: model.stage.as_str().into(),
        });
    }
    Ok(())
}

/// Stage 1: finetune everything (encoder, classifier, temperature) on the
/// mixed retrieved + few-shot set with the configured mixing augmentation.
pub fn stage1_finetune(
    model: Model,
    mixed_data: &ExampleSet,
    cfg: &TrainConfig,
    monitor: Option<EpochMonitor<'_>>,
) -> Result<(Model, TrainingLog)> {
    require_stage(&model, StageTag::Pretrained)?;
    run_stage(
        model,
        cfg,
        StagePlan {
            name: "stage1",
            final_tag: StageTag::Stage1,
            epochs: cfg.epochs_stage1,
            msda: cfg.msda.clone(),
            lr_encoder: cfg.lr_encoder,
            lr_head: cfg.lr_head,
            lr_tau: cfg.lr_temperature,
            data: mixed_data,
        },
        monitor,
    )
}

/// Stage 2: retrain only the classifier on the (balanced) few-shot data with
/// the encoder frozen and the temperature fixed. The classifier continues
/// from the stage-1 weights; no mixing augmentation is applied.
pub fn stage2_retrain_classifier(
    mut model: Model,
    fewshot: &ExampleSet,
    cfg: &TrainConfig,
    monitor: Option<EpochMonitor<'_>>,
) -> Result<(Model, TrainingLog)> {
    require_stage(&model, StageTag::Stage1)?;
    model.head.log_tau = cfg.temperature_stage2.ln();
    run_stage(
        model,
        cfg,
        StagePlan {
            name: "stage2",
            final_tag: StageTag::Stage2,
            epochs: cfg.epochs_stage2,
            msda: MsdaConfig { method: MsdaMethod::None, ..MsdaConfig::default() },
            lr_encoder: 0.0,
            lr_head: cfg.lr_head,
            lr_tau: 0.0,
            data: fewshot,
        },
        monitor,
    )
}

/// Stage-2 variant that finetunes the encoder together with the classifier
/// (temperature still fixed).
pub fn stage2_finetune_all(
    mut model: Model,
    fewshot: &ExampleSet,
    cfg: &TrainConfig,
    monitor: Option<EpochMonitor<'_>>,
) -> Result<(Model, TrainingLog)> {
    require_stage(&model, StageTag::Stage1)?;
    model.head.log_tau = cfg.temperature_stage2.ln();
    run_stage(
        model,
        cfg,
        StagePlan {
            name: "stage2-full",
            final_tag: StageTag::Stage2,
            epochs: cfg.epochs_stage2,
            msda: MsdaConfig { method: MsdaMethod::None, ..MsdaConfig::default() },
            lr_encoder: cfg.lr_encoder,
            lr_head: cfg.lr_head,
            lr_tau: 0.0,
            data: fewshot,
        },
        monitor,
    )
}

/// Few-shot finetuning: stage-1 mechanics on the few-shot data alone. This
/// is literally `stage1_finetune` over `mix_pools(empty, fewshot)`.
pub fn fsft(
    model: Model,
    fewshot: &ExampleSet,
    cfg: &TrainConfig,
    monitor: Option<EpochMonitor<'_>>,
) -> Result<(Model, TrainingLog)> {
    let empty = ExampleSet::new(fewshot.concept_names().to_vec(), Vec::new())?;
    let data = mix_pools(&empty, fewshot)?;
    stage1_finetune(model, &data, cfg, monitor)
}

/// Linear probe: classifier-only training on few-shot data atop the frozen
/// *pretrained* encoder (stage-2 recipe, run for `epochs_stage1` epochs).
pub fn train_linear_probe(
    mut model: Model,
    fewshot: &ExampleSet,
    cfg: &TrainConfig,
    monitor: Option<EpochMonitor<'_>>,
) -> Result<(Model, TrainingLog)> {
    require_stage(&model, StageTag::Pretrained)?;
    model.head.log_tau = cfg.temperature_stage2.ln();
    run_stage(
        model,
        cfg,
        StagePlan {
            name: "probe",
            final_tag: StageTag::Stage2,
            epochs: cfg.epochs_stage1,
            msda: MsdaConfig { method: MsdaMethod::None, ..MsdaConfig::default() },
            lr_encoder: 0.0,
            lr_head: cfg.lr_head,
            lr_tau: 0.0,
            data: fewshot,
        },
        monitor,
    )
}

/// Output of a full two-stage run.
#[derive(Debug, Clone)]
pub struct SwatOutcome {
    pub model: Model,
    pub stage1: TrainingLog,
    pub stage2: TrainingLog,
}

/// The full pipeline: mix pools, stage-1 finetune, stage-2 classifier
/// retraining.
pub fn run_swat(
    model: Model,
    retrieved: &ExampleSet,
    fewshot: &ExampleSet,
    cfg: &TrainConfig,
) -> Result<SwatOutcome> {
    let mixed = mix_pools(retrieved, fewshot)?;
    let (model, stage1) = stage1_finetune(model, &mixed, cfg, None)?;
    let (model, stage2) = stage2_retrain_classifier(model, fewshot, cfg, None)?;
    Ok(SwatOutcome { model, stage1, stage2 })
}

/// Variant whose second stage finetunes the encoder as well.
pub fn run_swat_plus(
    model: Model,
    retrieved: &ExampleSet,
    fewshot: &ExampleSet,
    cfg: &TrainConfig,
) -> Result<SwatOutcome> {
    let mixed = mix_pools(retrieved, fewshot)?;
    let (model, stage1) = stage1_finetune(model, &mixed, cfg, None)?;
    let (model, stage2) = stage2_finetune_all(model, fewshot, cfg, None)?;
    Ok(SwatOutcome { model, stage2, stage1 })
}

/// Produce "pretrained" encoder weights by aligning the encoder with the
/// frozen text tower: every example is cosine-classified against the text
/// embeddings of the concept prompts, and only the encoder trains (the text
/// head and temperature stay bit-identical). This is contrastive image-text
/// pretraining at desk scale — afterwards a text-initialized head is a
/// meaningful zero-shot classifier, and the small finetuning learning rates
/// operate in their intended regime of refining an aligned model.
///
/// The architecture is chosen from the input kind: MLP for feature vectors,
/// small conv net for images. The encoder output dimension equals the text
/// embedding dimension.
pub fn pretrain_encoder(
    data: &ExampleSet,
    vocab: &ConceptVocabulary,
    embedder: &dyn TextImageEmbedder,
    seed: u64,
) -> Result<(Encoder, TrainingLog)> {
    if data.is_empty() {
        return Err(SwatError::EmptyData { context: "pretraining data".into() });
    }
    if data.concept_names() != vocab.names() {
        return Err(SwatError::PoolMismatch {
            message: format!(
                "pretraining data has {} concepts, vocabulary has {} (or names differ)",
                data.num_classes(),
                vocab.len()
            ),
        });
    }
    let head = init_head_from_text(vocab, embedder, PRETRAIN_TEMPERATURE)?;
    let output_dim = head.dim();
    let mut init_rng = rng::seeded(seed, "pretrain-init", 0);
    let encoder = match &data.examples()[0].input {
        ExampleInput::Features(v) => {
            Encoder::Mlp(crate::model::MlpEncoder::new(v.len(), MLP_HIDDEN, output_dim, &mut init_rng))
        }
        ExampleInput::Image(t) => {
            Encoder::Conv(crate::model::ConvEncoder::new(t.channels, output_dim, &mut init_rng))
        }
    };
    let model = Model::new(encoder, head, StageTag::Pretrained)?;
    let cfg = TrainConfig {
        lr_encoder: PRETRAIN_LR,
        lr_head: 0.0,
        lr_temperature: 0.0,
        epochs_stage1: PRETRAIN_EPOCHS,
        msda: MsdaConfig { method: MsdaMethod::None, ..MsdaConfig::default() },
        seed,
        ..TrainConfig::default()
    };
    let (model, log) = run_stage(
        model,
        &cfg,
        StagePlan {
            name: "pretrain",
            final_tag: StageTag::Pretrained,
            epochs: cfg.epochs_stage1,
            msda: cfg.msda.clone(),
            lr_encoder: cfg.lr_encoder,
            lr_head: cfg.lr_head,
            lr_tau: cfg.lr_temperature,
            data,
        },
        None,
    )?;
    Ok((model.encoder, log))
}
