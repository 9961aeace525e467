//! Mixed-sample data augmentation over batches: CutMix (default), MixUp, and
//! a strict CutMix variant that only pastes few-shot patches into retrieved
//! examples.
//!
//! All mixing produces soft labels whose weights equal the *realized* pixel
//! (or coordinate) fractions: for CutMix the mixing coefficient is recomputed
//! as `lam_hat = 1 - pasted_area / total_area` from exact integer arithmetic
//! after border clipping. MixUp interpolates inputs and labels with the
//! sampled coefficient directly.
//!
//! RNG draw order is frozen (coin, then lambda, then partners, then cut
//! regions / coordinate subsets) so runs are bit-reproducible and test
//! oracles can replay the stream.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::{one_hot, ExampleInput, ImageTensor, LabeledExample, Source};
use crate::error::{Result, SwatError};
use crate::rng::ChaCha8Rng;

/// Which mixing rule to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsdaMethod {
    None,
    Cutmix,
    Mixup,
    CutmixStrict,
}

impl MsdaMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MsdaMethod::None),
            "cutmix" => Ok(MsdaMethod::Cutmix),
            "mixup" => Ok(MsdaMethod::Mixup),
            "cutmix_strict" => Ok(MsdaMethod::CutmixStrict),
            other => Err(SwatError::invalid(
                "msda.method",
                format!("unknown method {:?} (expected none|cutmix|mixup|cutmix_strict)", other),
            )),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MsdaMethod::None => "none",
            MsdaMethod::Cutmix => "cutmix",
            MsdaMethod::Mixup => "mixup",
            MsdaMethod::CutmixStrict => "cutmix_strict",
        }
    }
}

/// Mixing configuration (`msda.*` config keys).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsdaConfig {
    pub method: MsdaMethod,
    /// Beta(alpha, alpha) parameter for the mixing coefficient (1.0 = uniform).
    pub alpha: f64,
    /// Probability that mixing fires.
    pub prob: f64,
    /// `false` (default): one coin/lambda/permutation per batch.
    /// `true`: every example draws its own coin, lambda, partner and region.
    pub per_example: bool,
}

impl Default for MsdaConfig {
    fn default() -> Self {
        MsdaConfig { method: MsdaMethod::Cutmix, alpha: 1.0, prob: 0.5, per_example: false }
    }
}

impl MsdaConfig {
    fn validate(&self) -> Result<()> {
        if self.method != MsdaMethod::None {
            if self.alpha <= 0.0 || !self.alpha.is_finite() {
                return Err(SwatError::invalid("msda.alpha", "must be a positive finite number"));
            }
            if !(0.0..=1.0).contains(&self.prob) {
                return Err(SwatError::invalid("msda.prob", "must be in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Half-open pasted region `[y0, y1) x [x0, x1)` of an image cut.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutRegion {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl CutRegion {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

/// An augmented batch with soft labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub inputs: Vec<ExampleInput>,
    /// Soft labels over `num_classes`; each row sums to 1.
    pub labels: Vec<Vec<f64>>,
    /// Realized per-example mixing coefficient (1.0 where mixing did not fire).
    pub lam: Vec<f64>,
    /// Partner index used for mixing (`i` itself where mixing did not fire).
    pub pair_index: Vec<usize>,
    /// Whether mixing fired for the example.
    pub applied: Vec<bool>,
    /// Pasted image region per example (None for feature inputs / unmixed).
    pub regions: Vec<Option<CutRegion>>,
    /// Copied coordinate subset per example (None for image inputs / unmixed).
    pub feature_coords: Vec<Option<Vec<usize>>>,
}

impl MixedBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn unmixed(batch: &[&LabeledExample], num_classes: usize) -> Self {
        MixedBatch {
            inputs: batch.iter().map(|e| e.input.clone()).collect(),
            labels: batch.iter().map(|e| one_hot(e.label, num_classes)).collect(),
            lam: vec![1.0; batch.len()],
            pair_index: (0..batch.len()).collect(),
            applied: vec![false; batch.len()],
            regions: vec![None; batch.len()],
            feature_coords: vec![None; batch.len()],
        }
    }
}

/// Shape of every input in the batch (all must agree).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BatchShape {
    Features(usize),
    Image { channels: usize, height: usize, width: usize },
}

fn batch_shape(batch: &[&LabeledExample], num_classes: usize) -> Result<BatchShape> {
    let first = batch.first().ok_or(SwatError::EmptyData { context: "mix_batch".into() })?;
    let shape = match &first.input {
        ExampleInput::Features(v) => BatchShape::Features(v.len()),
        ExampleInput::Image(t) => {
            BatchShape::Image { channels: t.channels, height: t.height, width: t.width }
        }
    };
    for e in batch {
        if e.label >= num_classes {
            return Err(SwatError::invalid(
                "batch",
                format!("label {} out of range for {} classes", e.label, num_classes),
            ));
        }
        let this = match &e.input {
            ExampleInput::Features(v) => BatchShape::Features(v.len()),
            ExampleInput::Image(t) => {
                BatchShape::Image { channels: t.channels, height: t.height, width: t.width }
            }
        };
        if this != shape {
            return Err(SwatError::config(format!(
                "mixed batch shapes: example {:?} does not match the first example",
                e.id
            )));
        }
    }
    Ok(shape)
}

/// Sample the cut box: width/height are `W*sqrt(1-lam)` / `H*sqrt(1-lam)`
/// (truncated), the center is uniform over the image, and the box is clipped
/// at the borders.
fn sample_cut_region(height: usize, width: usize, lam: f64, rng: &mut ChaCha8Rng) -> CutRegion {
    let frac = (1.0 - lam).max(0.0).sqrt();
    let cut_h = (height as f64 * frac) as i64;
    let cut_w = (width as f64 * frac) as i64;
    let cy = rng.random_range(0..height) as i64;
    let cx = rng.random_range(0..width) as i64;
    let y0 = (cy - cut_h / 2).max(0);
    let y1 = (cy - cut_h / 2 + cut_h).min(height as i64);
    let x0 = (cx - cut_w / 2).max(0);
    let x1 = (cx - cut_w / 2 + cut_w).min(width as i64);
    CutRegion {
        y0: y0 as usize,
        y1: y1.max(y0) as usize,
        x0: x0 as usize,
        x1: x1.max(x0) as usize,
    }
}

fn paste_region(dst: &mut ImageTensor, src: &ImageTensor, region: &CutRegion) {
    for c in 0..dst.channels {
        for y in region.y0..region.y1 {
            for x in region.x0..region.x1 {
                let i = dst.idx(c, y, x);
                dst.data[i] = src.data[src.idx(c, y, x)];
            }
        }
    }
}

fn mixed_label(label_a: usize, label_b: usize, lam_hat: f64, num_classes: usize) -> Vec<f64> {
    let mut y = vec![0.0; num_classes];
    y[label_a] += lam_hat;
    y[label_b] += 1.0 - lam_hat;
    y
}

/// One CutMix application of example `pi -> i`; returns the realized lam_hat.
fn apply_cutmix_one(
    out: &mut MixedBatch,
    batch: &[&LabeledExample],
    shape: BatchShape,
    i: usize,
    pi: usize,
    lam: f64,
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) {
    match shape {
        BatchShape::Image { height, width, .. } => {
            let region = sample_cut_region(height, width, lam, rng);
            let area = region.area();
            let lam_hat = 1.0 - area as f64 / (height * width) as f64;
            if let (ExampleInput::Image(dst), ExampleInput::Image(src)) =
                (&mut out.inputs[i], &batch[pi].input)
            {
                paste_region(dst, src, &region);
            }
            out.labels[i] = mixed_label(batch[i].label, batch[pi].label, lam_hat, num_classes);
            out.lam[i] = lam_hat;
            out.pair_index[i] = pi;
            out.applied[i] = true;
            out.regions[i] = Some(region);
        }
        BatchShape::Features(dim) => {
            let m = ((1.0 - lam) * dim as f64).round() as usize;
            let m = m.min(dim);
            let mut coords = rand::seq::index::sample(rng, dim, m).into_vec();
            coords.sort_unstable();
            let lam_hat = 1.0 - m as f64 / dim as f64;
            if let (ExampleInput::Features(dst), ExampleInput::Features(src)) =
                (&mut out.inputs[i], &batch[pi].input)
            {
                for &j in &coords {
                    dst[j] = src[j];
                }
            }
            out.labels[i] = mixed_label(batch[i].label, batch[pi].label, lam_hat, num_classes);
            out.lam[i] = lam_hat;
            out.pair_index[i] = pi;
            out.applied[i] = true;
            out.feature_coords[i] = Some(coords);
        }
    }
}

fn apply_mixup_one(
    out: &mut MixedBatch,
    batch: &[&LabeledExample],
    i: usize,
    pi: usize,
    lam: f64,
    num_classes: usize,
) {
    let partner = &batch[pi].input;
    match (&mut out.inputs[i], partner) {
        (ExampleInput::Features(dst), ExampleInput::Features(src)) => {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = lam * *d + (1.0 - lam) * s;
            }
        }
        (ExampleInput::Image(dst), ExampleInput::Image(src)) => {
            for (d, s) in dst.data.iter_mut().zip(&src.data) {
                *d = lam * *d + (1.0 - lam) * s;
            }
        }
        _ => unreachable!("batch shapes validated before mixing"),
    }
    out.labels[i] = mixed_label(batch[i].label, batch[pi].label, lam, num_classes);
    out.lam[i] = lam;
    out.pair_index[i] = pi;
    out.applied[i] = true;
}

fn sample_lambda(alpha: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| SwatError::invalid("msda.alpha", format!("invalid Beta parameter: {}", e)))?;
    Ok(beta.sample(rng))
}

/// Mix one batch according to `cfg`. Source flags are carried by every
/// example (the type makes missing flags impossible); `cutmix_strict` uses
/// them to cut from few-shot examples and paste into retrieved ones only.
///
/// Draw order: coin, lambda, partner(s), then cut regions / coordinate
/// subsets in batch order. Batches smaller than 2 and configurations that
/// cannot fire return the batch unmodified without consuming randomness.
pub fn mix_batch(
    batch: &[&LabeledExample],
    num_classes: usize,
    cfg: &MsdaConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MixedBatch> {
    cfg.validate()?;
    if num_classes == 0 {
        return Err(SwatError::invalid("num_classes", "need >= 1 class"));
    }
    let shape = batch_shape(batch, num_classes)?;
    let mut out = MixedBatch::unmixed(batch, num_classes);
    if batch.len() < 2 || cfg.method == MsdaMethod::None {
        return Ok(out);
    }

    match cfg.method {
        MsdaMethod::None => unreachable!(),
        MsdaMethod::Cutmix | MsdaMethod::Mixup => {
            let is_mixup = cfg.method == MsdaMethod::Mixup;
            if cfg.per_example {
                for i in 0..batch.len() {
                    if rng.random::<f64>() >= cfg.prob {
                        continue;
                    }
                    let lam = sample_lambda(cfg.alpha, rng)?;
                    // Uniform partner among the *other* examples.
                    let mut pi = rng.random_range(0..batch.len() - 1);
                    if pi >= i {
                        pi += 1;
                    }
                    if is_mixup {
                        apply_mixup_one(&mut out, batch, i, pi, lam, num_classes);
                    } else {
                        apply_cutmix_one(&mut out, batch, shape, i, pi, lam, num_classes, rng);
                    }
                }
            } else {
                if rng.random::<f64>() >= cfg.prob {
                    return Ok(out);
                }
                let lam = sample_lambda(cfg.alpha, rng)?;
                let mut perm: Vec<usize> = (0..batch.len()).collect();
                perm.shuffle(rng);
                for i in 0..batch.len() {
                    if is_mixup {
                        apply_mixup_one(&mut out, batch, i, perm[i], lam, num_classes);
                    } else {
                        apply_cutmix_one(&mut out, batch, shape, i, perm[i], lam, num_classes, rng);
                    }
                }
            }
        }
        MsdaMethod::CutmixStrict => {
            let fewshot: Vec<usize> = (0..batch.len())
                .filter(|&i| batch[i].source == Source::FewShot)
                .collect();
            let retrieved: Vec<usize> = (0..batch.len())
                .filter(|&i| batch[i].source == Source::Retrieved)
                .collect();
            if fewshot.is_empty() || retrieved.is_empty() {
                return Ok(out);
            }
            if cfg.per_example {
                for &i in &retrieved {
                    if rng.random::<f64>() >= cfg.prob {
                        continue;
                    }
                    let lam = sample_lambda(cfg.alpha, rng)?;
                    let pi = fewshot[rng.random_range(0..fewshot.len())];
                    apply_cutmix_one(&mut out, batch, shape, i, pi, lam, num_classes, rng);
                }
            } else {
                if rng.random::<f64>() >= cfg.prob {
                    return Ok(out);
                }
                let lam = sample_lambda(cfg.alpha, rng)?;
                let partners: Vec<usize> = retrieved
                    .iter()
                    .map(|_| fewshot[rng.random_range(0..fewshot.len())])
                    .collect();
                for (&i, &pi) in retrieved.iter().zip(&partners) {
                    apply_cutmix_one(&mut out, batch, shape, i, pi, lam, num_classes, rng);
                }
            }
        }
    }
    Ok(out)
}

/// CutMix with the default pairing (random permutation, sources ignored).
pub fn cutmix(
    batch: &[&LabeledExample],
    num_classes: usize,
    alpha: f64,
    prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MixedBatch> {
    mix_batch(
        batch,
        num_classes,
        &MsdaConfig { method: MsdaMethod::Cutmix, alpha, prob, per_example: false },
        rng,
    )
}

/// MixUp: convex input combinations, labels use the sampled coefficient.
pub fn mixup(
    batch: &[&LabeledExample],
    num_classes: usize,
    alpha: f64,
    prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MixedBatch> {
    mix_batch(
        batch,
        num_classes,
        &MsdaConfig { method: MsdaMethod::Mixup, alpha, prob, per_example: false },
        rng,
    )
}

/// CutMix that only cuts from few-shot examples and pastes into retrieved ones.
pub fn cutmix_strict(
    batch: &[&LabeledExample],
    num_classes: usize,
    alpha: f64,
    prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MixedBatch> {
    mix_batch(
        batch,
        num_classes,
        &MsdaConfig { method: MsdaMethod::CutmixStrict, alpha, prob, per_example: false },
        rng,
    )
}
