//! Accuracy reporting (overall / common / rare), a linear two-sample probe
//! that measures how detectable the gap between two data sources is, and
//! accuracy-vs-epoch curve studies.
//!
//! Overall accuracy is micro (correct / total); common and rare accuracies
//! are macro averages of per-class accuracies within each subset, skipping
//! classes that have no test examples. The report records which convention
//! was used via its schema.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CommonRareSplit, ExampleInput, ExampleSet};
use crate::error::{Result, SwatError};
use crate::model::Model;
use crate::rng;

const EVAL_BATCH: usize = 64;

/// Accuracy report for one trained model on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    /// Which pipeline produced the model ("swat", "fsft", ...).
    pub method: String,
    pub seed: u64,
    pub n_test: usize,
    /// Micro accuracy over all test examples, percent.
    pub overall: f64,
    /// Macro mean of per-class accuracies over common classes, percent.
    pub common: f64,
    /// Macro mean of per-class accuracies over rare classes, percent.
    pub rare: f64,
    /// Per-class accuracy, percent; `None` for classes without test examples.
    pub per_class: Vec<Option<f64>>,
    pub per_class_counts: Vec<usize>,
    /// Class indices counted as rare (ascending).
    pub rare_classes: Vec<usize>,
}

impl EvalReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| SwatError::config(format!("report serialization: {}", e)))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| SwatError::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SwatError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| SwatError::Parse {
            path: path.to_path_buf(),
            line: None,
            message: e.to_string(),
        })
    }
}

fn macro_accuracy(
    classes: &[usize],
    correct: &[usize],
    counts: &[usize],
    subset: &str,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut seen = 0usize;
    for &c in classes {
        if counts[c] > 0 {
            sum += 100.0 * correct[c] as f64 / counts[c] as f64;
            seen += 1;
        }
    }
    if seen == 0 {
        return Err(SwatError::EmptyData {
            context: format!("no test examples in any {} class", subset),
        });
    }
    Ok(sum / seen as f64)
}

/// Top-1 accuracy of `model` on `test`, overall and restricted to the common
/// and rare class subsets. `method` and `seed` are recorded verbatim.
pub fn evaluate(
    model: &Model,
    test: &ExampleSet,
    split: &CommonRareSplit,
    method: &str,
    seed: u64,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(SwatError::EmptyData { context: "test set".into() });
    }
    let c = test.num_classes();
    if model.num_classes() != c {
        return Err(SwatError::DimensionMismatch {
            context: "test classes vs classifier rows".into(),
            expected: model.num_classes(),
            got: c,
        });
    }
    if split.common.len() + split.rare.len() != c {
        return Err(SwatError::config(format!(
            "common/rare split covers {} classes but the task has {}",
            split.common.len() + split.rare.len(),
            c
        )));
    }
    let mut correct = vec![0usize; c];
    let mut counts = vec![0usize; c];
    for chunk in test.examples().chunks(EVAL_BATCH) {
        let inputs: Vec<&ExampleInput> = chunk.iter().map(|e| &e.input).collect();
        let preds = model.predict(&inputs)?;
        for (example, pred) in chunk.iter().zip(preds) {
            counts[example.label] += 1;
            if pred == example.label {
                correct[example.label] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    let hits: usize = correct.iter().sum();
    let per_class = (0..c)
        .map(|i| (counts[i] > 0).then(|| 100.0 * correct[i] as f64 / counts[i] as f64))
        .collect();
    Ok(EvalReport {
        schema_version: 1,
        method: method.into(),
        seed,
        n_test: total,
        overall: 100.0 * hits as f64 / total as f64,
        common: macro_accuracy(&split.common, &correct, &counts, "common")?,
        rare: macro_accuracy(&split.rare, &correct, &counts, "rare")?,
        per_class,
        per_class_counts: counts,
        rare_classes: split.rare.clone(),
    })
}

/// Settings for the two-sample linear probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Held-out fraction per source (stratified).
    pub holdout: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 100, lr: 1e-3, holdout: 0.2, seed: 0 }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn probe_split<'a>(
    source: &'a [Vec<f64>],
    name: &str,
    cfg: &ProbeConfig,
    index: u64,
) -> Result<(Vec<&'a [f64]>, Vec<&'a [f64]>)> {
    if source.len() < 20 {
        return Err(SwatError::Probe {
            message: format!("source {} has {} examples, need >= 20", name, source.len()),
        });
    }
    let held = (source.len() as f64 * cfg.holdout).floor() as usize;
    if held < 5 {
        return Err(SwatError::Probe {
            message: format!(
                "source {} would hold out only {} examples, need >= 5",
                name, held
            ),
        });
    }
    let mut order: Vec<usize> = (0..source.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng::seeded(cfg.seed, "probe-split", index));
    let holdout = order[..held].iter().map(|&i| source[i].as_slice()).collect();
    let train = order[held..].iter().map(|&i| source[i].as_slice()).collect();
    Ok((train, holdout))
}

/// Train a linear logistic classifier to tell the two sources apart and
/// report held-out accuracy in percent. Accuracy near 50 means the sources
/// are indistinguishable to a linear probe; high accuracy certifies a gap.
pub fn domain_gap_probe(
    source_a: &[Vec<f64>],
    source_b: &[Vec<f64>],
    cfg: &ProbeConfig,
) -> Result<f64> {
    if !(0.0 < cfg.holdout && cfg.holdout < 1.0) {
        return Err(SwatError::invalid("probe.holdout", "must be in (0, 1)"));
    }
    if cfg.epochs == 0 || cfg.lr <= 0.0 {
        return Err(SwatError::invalid("probe", "epochs >= 1 and lr > 0 required"));
    }
    let dim = source_a
        .first()
        .or_else(|| source_b.first())
        .map(|v| v.len())
        .ok_or(SwatError::EmptyData { context: "probe sources".into() })?;
    for v in source_a.iter().chain(source_b) {
        if v.len() != dim {
            return Err(SwatError::DimensionMismatch {
                context: "probe feature".into(),
                expected: dim,
                got: v.len(),
            });
        }
    }
    let (train_a, held_a) = probe_split(source_a, "a", cfg, 0)?;
    let (train_b, held_b) = probe_split(source_b, "b", cfg, 1)?;

    // Standardize with statistics of the training portion only, so the
    // logistic bias starts near the optimum and coordinates are comparable.
    let n = (train_a.len() + train_b.len()) as f64;
    let mut mean = vec![0.0; dim];
    for x in train_a.iter().chain(&train_b) {
        for j in 0..dim {
            mean[j] += x[j] / n;
        }
    }
    let mut std = vec![0.0; dim];
    for x in train_a.iter().chain(&train_b) {
        for j in 0..dim {
            std[j] += (x[j] - mean[j]) * (x[j] - mean[j]) / n;
        }
    }
    for s in std.iter_mut() {
        *s = s.sqrt().max(1e-12);
    }
    let standardize =
        |x: &[f64]| -> Vec<f64> { (0..dim).map(|j| (x[j] - mean[j]) / std[j]).collect() };

    // Plain full-batch gradient descent on [w, b], binary cross-entropy,
    // labels a=0 / b=1. Vanilla descent (unlike adaptive methods) preserves
    // the relative gradient magnitudes across coordinates, so the learned
    // direction tracks the actual between-source signal.
    let mut params = vec![0.0; dim + 1];
    for _ in 0..cfg.epochs {
        let mut grad = vec![0.0; dim + 1];
        for (x, y) in train_a
            .iter()
            .map(|x| (*x, 0.0))
            .chain(train_b.iter().map(|x| (*x, 1.0)))
        {
            let x = standardize(x);
            let z = params[dim] + x.iter().zip(&params[..dim]).map(|(a, b)| a * b).sum::<f64>();
            let err = (sigmoid(z) - y) / n;
            for j in 0..dim {
                grad[j] += err * x[j];
            }
            grad[dim] += err;
        }
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= cfg.lr * g;
        }
    }

    let mut hits = 0usize;
    for (x, y) in held_a
        .iter()
        .map(|x| (*x, 0usize))
        .chain(held_b.iter().map(|x| (*x, 1usize)))
    {
        let x = standardize(x);
        let z = params[dim] + x.iter().zip(&params[..dim]).map(|(a, b)| a * b).sum::<f64>();
        let pred = usize::from(sigmoid(z) > 0.5);
        if pred == y {
            hits += 1;
        }
    }
    let total = held_a.len() + held_b.len();
    Ok(100.0 * hits as f64 / total as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One grid point of a curve study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epochs: usize,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

/// Accuracy-vs-epoch study: `run(epochs, seed)` must perform a fresh
/// training run and return test accuracy in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveStudy {
    pub seeds: Vec<u64>,
    pub points: Vec<CurvePoint>,
}

pub fn curve_study(
    mut run: impl FnMut(usize, u64) -> Result<f64>,
    epoch_grid: &[usize],
    seeds: &[u64],
) -> Result<CurveStudy> {
    if epoch_grid.is_empty() || seeds.is_empty() {
        return Err(SwatError::EmptyData { context: "curve study grid".into() });
    }
    if epoch_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SwatError::invalid("epoch_grid", "must be strictly ascending"));
    }
    let mut points = Vec::with_capacity(epoch_grid.len());
    for &epochs in epoch_grid {
        let per_seed: Vec<f64> =
            seeds.iter().map(|&s| run(epochs, s)).collect::<Result<_>>()?;
        let (mean, std) = mean_std(&per_seed);
        points.push(CurvePoint { epochs, mean, std, per_seed });
    }
    Ok(CurveStudy { seeds: seeds.to_vec(), points })
}

/// Serialize a curve study as CSV: one row per grid point, one trailing
/// column per seed.
pub fn write_curve_csv(path: &Path, study: &CurveStudy) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| {
        SwatError::io(path, std::io::Error::other(e.to_string()))
    })?;
    let mut header = vec!["epochs".to_string(), "mean".to_string(), "std".to_string()];
    header.extend(study.seeds.iter().map(|s| format!("seed_{}", s)));
    let emit_err = |e: csv::Error| SwatError::io(path, std::io::Error::other(e.to_string()));
    w.write_record(&header).map_err(emit_err)?;
    for p in &study.points {
        let mut row = vec![p.epochs.to_string(), format!("{}", p.mean), format!("{}", p.std)];
        row.extend(p.per_seed.iter().map(|v| format!("{}", v)));
        w.write_record(&row).map_err(emit_err)?;
    }
    w.flush().map_err(|e| SwatError::io(path, e))
}
