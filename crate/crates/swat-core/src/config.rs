//! Experiment configuration: one TOML file describing the task, the data
//! pipeline, and the training recipe.
//!
//! Unknown keys are rejected everywhere (typo guard), every referenced path
//! must exist at load time, and the fully resolved config is echoed into the
//! experiment's output directory so a run can be reproduced from its artifacts
//! alone.
//!
//! Schema (defaults in parentheses):
//!
//! ```toml
//! seeds = [0, 1, 2]            # non-empty list of run seeds
//! output_dir = "runs/demo"     # optional; the CLI --out flag overrides it
//! # fewshot_ratio = 0.5        # optional stage-1 few-shot oversampling target
//!
//! [task.synthetic]             # exactly one task.* block must be present
//! num_classes = 50             # all fields optional, see SyntheticTaskSpec
//!
//! # [task.features]            # feature vectors from JSONL files
//! # train_path = "..."  test_path = "..."  vocab_path = "..."
//! # retrieved_path = "..."     # optional pre-retrieved pool
//! # shots = 16
//!
//! # [task.image_folders]      # directory-of-folders image layout
//! # train_dir = "..."  test_dir = "..."
//! # retrieved_dir = "..."      # optional pre-retrieved pool
//! # vocab_path = "..."         # optional prompts; default "a photo of <dir>"
//! # shots = 16
//!
//! [retrieval]                  # optional; needed to build a pool from a corpus
//! corpus_path = "corpus.jsonl"
//! method = "t2t"               # t2t | i2i | i2t-cap | i2t-img | random
//! k = 100                      # per-concept cap
//! # image_sim_threshold = 0.3  # optional image-to-text filter
//! # vocab_path = "..."         # optional override of the task vocabulary
//!
//! [train]                      # TrainConfig; empty block = pinned defaults
//! # lr_encoder = 1e-6 ...
//!
//! [msda]                       # optional; when present it REPLACES train.msda
//! method = "cutmix"            # none | cutmix | mixup | cutmix_strict
//!
//! [probe]                      # domain-gap probe settings (epochs=100, lr=1e-3, ...)
//!
//! [eval]
//! curve_epochs = [5, 10, 20, 50]  # stage-2 epoch grid for curve studies
//! monitor = false                 # record per-epoch test accuracy (slow)
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::MsdaConfig;
use crate::error::{Result, SwatError};
use crate::eval::ProbeConfig;
use crate::retrieval::RankMethod;
use crate::rng;
use crate::synth::SyntheticTaskSpec;
use crate::train::TrainConfig;

/// File name the resolved config is echoed under inside the output directory.
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

/// Task defined by JSONL feature files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureFilesTask {
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    pub vocab_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieved_path: Option<PathBuf>,
    #[serde(default = "default_shots")]
    pub shots: usize,
}

/// Task defined by class-per-subdirectory image folders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageFoldersTask {
    pub train_dir: PathBuf,
    pub test_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieved_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_path: Option<PathBuf>,
    #[serde(default = "default_shots")]
    pub shots: usize,
}

fn default_shots() -> usize {
    16
}

/// What data the experiment runs on; exactly one variant must be configured.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticTaskSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureFilesTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_folders: Option<ImageFoldersTask>,
}

impl TaskBlock {
    pub fn kind(&self) -> &'static str {
        if self.synthetic.is_some() {
            "synthetic"
        } else if self.features.is_some() {
            "features"
        } else {
            "image_folders"
        }
    }

    fn validate(&self) -> Result<()> {
        let present = [
            self.synthetic.is_some(),
            self.features.is_some(),
            self.image_folders.is_some(),
        ]
        .iter()
        .filter(|p| **p)
        .count();
        if present != 1 {
            return Err(SwatError::config(format!(
                "task: exactly one of task.synthetic / task.features / task.image_folders \
                 must be present, found {}",
                present
            )));
        }
        if let Some(spec) = &self.synthetic {
            spec.validate()?;
        }
        if let Some(f) = &self.features {
            if f.shots == 0 {
                return Err(SwatError::config("task.features.shots: must be >= 1"));
            }
            require_path(&f.train_path, "task.features.train_path")?;
            require_path(&f.test_path, "task.features.test_path")?;
            require_path(&f.vocab_path, "task.features.vocab_path")?;
            if let Some(p) = &f.retrieved_path {
                require_path(p, "task.features.retrieved_path")?;
            }
        }
        if let Some(f) = &self.image_folders {
            if f.shots == 0 {
                return Err(SwatError::config("task.image_folders.shots: must be >= 1"));
            }
            require_path(&f.train_dir, "task.image_folders.train_dir")?;
            require_path(&f.test_dir, "task.image_folders.test_dir")?;
            if let Some(p) = &f.retrieved_dir {
                require_path(p, "task.image_folders.retrieved_dir")?;
            }
            if let Some(p) = &f.vocab_path {
                require_path(p, "task.image_folders.vocab_path")?;
            }
        }
        Ok(())
    }
}

/// Corpus retrieval settings (ignored for synthetic tasks, which generate
/// their own pool).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalBlock {
    pub corpus_path: PathBuf,
    /// One of `t2t`, `i2i`, `i2t-cap`, `i2t-img`, `random`.
    #[serde(default = "default_rank_method")]
    pub method: String,
    /// Per-concept retrieval cap.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Optional text-to-image similarity filter threshold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_sim_threshold: Option<f64>,
    /// Overrides the task vocabulary for matching when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_path: Option<PathBuf>,
}

fn default_rank_method() -> String {
    "t2t".into()
}

fn default_k() -> usize {
    100
}

impl RetrievalBlock {
    pub fn rank_method(&self) -> Result<RankMethod> {
        RankMethod::parse(&self.method)
    }

    fn validate(&self) -> Result<()> {
        require_path(&self.corpus_path, "retrieval.corpus_path")?;
        if let Some(p) = &self.vocab_path {
            require_path(p, "retrieval.vocab_path")?;
        }
        self.rank_method()?;
        if self.k == 0 {
            return Err(SwatError::config("retrieval.k: must be >= 1"));
        }
        if let Some(t) = self.image_sim_threshold {
            if !t.is_finite() || !(-1.0..=1.0).contains(&t) {
                return Err(SwatError::config(
                    "retrieval.image_sim_threshold: must be a finite value in [-1, 1]",
                ));
            }
        }
        Ok(())
    }
}

/// Evaluation extras beyond the per-seed test report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalBlock {
    /// Stage-2 epoch grid for accuracy-vs-epochs curve studies (ascending).
    pub curve_epochs: Vec<usize>,
    /// Record test accuracy after every training epoch (slower).
    pub monitor: bool,
}

impl Default for EvalBlock {
    fn default() -> Self {
        EvalBlock { curve_epochs: vec![5, 10, 20, 50], monitor: false }
    }
}

impl EvalBlock {
    fn validate(&self) -> Result<()> {
        if self.curve_epochs.is_empty() {
            return Err(SwatError::config("eval.curve_epochs: must not be empty"));
        }
        if self.curve_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SwatError::config("eval.curve_epochs: must be strictly ascending"));
        }
        if self.curve_epochs[0] == 0 {
            return Err(SwatError::config("eval.curve_epochs: epochs must be >= 1"));
        }
        Ok(())
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

/// The complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub task: TaskBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalBlock>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Optional sugar block; when present it replaces `train.msda` wholesale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msda: Option<MsdaConfig>,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub eval: EvalBlock,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Optional target few-shot fraction of the stage-1 training pool,
    /// reached by deterministic oversampling of the few-shot examples.
    /// Must be >= the natural fraction to have any effect.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fewshot_ratio: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskBlock { synthetic: Some(SyntheticTaskSpec::default()), ..Default::default() },
            retrieval: None,
            train: TrainConfig::default(),
            msda: None,
            probe: ProbeConfig::default(),
            eval: EvalBlock::default(),
            seeds: default_seeds(),
            output_dir: None,
            fewshot_ratio: None,
        }
    }
}

fn require_path(path: &Path, key: &str) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(SwatError::config(format!("{}: empty path", key)));
    }
    if !path.exists() {
        return Err(SwatError::config(format!("{}: path {:?} does not exist", key, path)));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parse a TOML string, fold the optional `[msda]` block into
    /// `train.msda`, and validate everything.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| SwatError::config(format!("config: {}", e.message())))?;
        if let Some(msda) = cfg.msda.take() {
            cfg.train.msda = msda;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if let Some(r) = &self.retrieval {
            r.validate()?;
        }
        self.train.validate()?;
        self.eval.validate()?;
        if self.seeds.is_empty() {
            return Err(SwatError::config("seeds: must not be empty"));
        }
        if let Some(r) = self.fewshot_ratio {
            if !r.is_finite() || !(0.0 < r && r < 1.0) {
                return Err(SwatError::config("fewshot_ratio: must be in (0, 1)"));
            }
        }
        Ok(())
    }

    /// Serialize the fully resolved config (all defaults filled in, `[msda]`
    /// folded into `train.msda`).
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| SwatError::config(format!("config serialization: {}", e)))
    }

    /// Stable fingerprint of the resolved config, stored in checkpoints so a
    /// saved model can be traced back to the recipe that produced it.
    pub fn hash(&self) -> Result<String> {
        Ok(format!("{:016x}", rng::fnv1a(self.to_toml()?.into_bytes())))
    }

    /// Echo the resolved config into `dir` for provenance; returns the path.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| SwatError::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()?).map_err(|e| SwatError::io(&path, e))?;
        Ok(path)
    }
}

/// Load and validate an experiment config from a TOML file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| SwatError::io(path, e))?;
    ExperimentConfig::from_toml(&text).map_err(|e| match e {
        SwatError::Config { message } => {
            SwatError::config(format!("{}: {}", path.display(), message))
        }
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::MsdaMethod;

    #[test]
    fn minimal_config_resolves_pinned_defaults() {
        let cfg = ExperimentConfig::from_toml("[task.synthetic]\n").unwrap();
        assert_eq!(cfg.task.kind(), "synthetic");
        let t = &cfg.train;
        assert_eq!(t.lr_encoder, 1e-6);
        assert_eq!(t.lr_head, 1e-4);
        assert_eq!(t.lr_temperature, 1e-4);
        assert_eq!(t.weight_decay, 1e-2);
        assert_eq!(t.batch_size, 32);
        assert_eq!(t.warmup_iters, 50);
        assert_eq!(t.epochs_stage1, 50);
        assert_eq!(t.epochs_stage2, 10);
        assert_eq!(t.temperature_stage2, 0.01);
        assert_eq!(t.msda.method, MsdaMethod::Cutmix);
        assert_eq!(t.msda.prob, 0.5);
        assert_eq!(cfg.seeds, vec![0, 1, 2]);
        assert_eq!(cfg.eval.curve_epochs, vec![5, 10, 20, 50]);
        assert_eq!(cfg.probe.epochs, 100);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = ExperimentConfig::from_toml(
            "[task.synthetic]\n[train]\nlr_encodre = 1e-5\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("lr_encodre"), "error was: {}", err);

        let err = ExperimentConfig::from_toml("[task.synthetic]\nnum_clases = 3\n").unwrap_err();
        assert!(err.to_string().contains("num_clases"), "error was: {}", err);
    }

    #[test]
    fn msda_block_replaces_train_msda() {
        let cfg = ExperimentConfig::from_toml(
            "[task.synthetic]\n[msda]\nmethod = \"mixup\"\nalpha = 0.4\n",
        )
        .unwrap();
        assert_eq!(cfg.train.msda.method, MsdaMethod::Mixup);
        assert_eq!(cfg.train.msda.alpha, 0.4);
        assert!(cfg.msda.is_none(), "sugar block must be folded away");
    }

    #[test]
    fn exactly_one_task_kind_is_required() {
        let err = ExperimentConfig::from_toml("seeds = [1]\n").unwrap_err();
        assert!(err.to_string().contains("exactly one"), "error was: {}", err);

        let dir = tempfile::tempdir().unwrap();
        for f in ["train.jsonl", "test.jsonl", "vocab.json"] {
            std::fs::write(dir.path().join(f), "").unwrap();
        }
        let two = format!(
            "[task.synthetic]\n[task.features]\ntrain_path = {:?}\ntest_path = {:?}\nvocab_path = {:?}\n",
            dir.path().join("train.jsonl"),
            dir.path().join("test.jsonl"),
            dir.path().join("vocab.json"),
        );
        let err = ExperimentConfig::from_toml(&two).unwrap_err();
        assert!(err.to_string().contains("exactly one"), "error was: {}", err);
    }

    #[test]
    fn referenced_paths_must_exist() {
        let toml = "[task.features]\ntrain_path = \"/no/such/train.jsonl\"\n\
                    test_path = \"/no/such/test.jsonl\"\nvocab_path = \"/no/such/vocab.json\"\n";
        let err = ExperimentConfig::from_toml(toml).unwrap_err();
        assert!(err.to_string().contains("/no/such/train.jsonl"), "error was: {}", err);
    }

    #[test]
    fn invalid_values_are_rejected() {
        // Top-level keys must precede table headers in TOML, hence the order.
        let err = ExperimentConfig::from_toml("seeds = []\n[task.synthetic]\n").unwrap_err();
        assert!(err.to_string().contains("seeds"), "error was: {}", err);
        assert!(ExperimentConfig::from_toml(
            "[task.synthetic]\n[eval]\ncurve_epochs = [10, 5]\n"
        )
        .is_err());
        assert!(ExperimentConfig::from_toml(
            "[task.synthetic]\n[train]\nbatch_size = 0\n"
        )
        .is_err());
        assert!(ExperimentConfig::from_toml(
            "[task.synthetic]\n[msda]\nmethod = \"cutmix\"\nalpha = -1.0\n"
        )
        .is_err());
        let err = ExperimentConfig::from_toml("fewshot_ratio = 1.5\n[task.synthetic]\n")
            .unwrap_err();
        assert!(err.to_string().contains("fewshot_ratio"), "error was: {}", err);
        assert_eq!(
            ExperimentConfig::from_toml("fewshot_ratio = 0.5\n[task.synthetic]\n")
                .unwrap()
                .fewshot_ratio,
            Some(0.5)
        );
    }

    #[test]
    fn retrieval_block_is_validated() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus.jsonl");
        std::fs::write(&corpus, "").unwrap();

        let good = format!("[task.synthetic]\n[retrieval]\ncorpus_path = {:?}\n", corpus);
        let cfg = ExperimentConfig::from_toml(&good).unwrap();
        let r = cfg.retrieval.as_ref().unwrap();
        assert_eq!(r.k, 100);
        assert_eq!(r.rank_method().unwrap(), RankMethod::T2T);

        let bad_method = format!(
            "[task.synthetic]\n[retrieval]\ncorpus_path = {:?}\nmethod = \"t2x\"\n",
            corpus
        );
        assert!(ExperimentConfig::from_toml(&bad_method).is_err());

        let bad_k =
            format!("[task.synthetic]\n[retrieval]\ncorpus_path = {:?}\nk = 0\n", corpus);
        assert!(ExperimentConfig::from_toml(&bad_k).is_err());

        let bad_thresh = format!(
            "[task.synthetic]\n[retrieval]\ncorpus_path = {:?}\nimage_sim_threshold = 1.5\n",
            corpus
        );
        assert!(ExperimentConfig::from_toml(&bad_thresh).is_err());
    }

    #[test]
    fn resolved_echo_roundtrips_and_hash_tracks_content() {
        let cfg = ExperimentConfig::from_toml(
            "[task.synthetic]\nnum_classes = 10\nshots = 4\n[train]\nbatch_size = 16\n",
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = cfg.write_resolved(dir.path()).unwrap();
        assert_eq!(path.file_name().unwrap(), RESOLVED_CONFIG_FILE);

        let reloaded = load_config(&path).unwrap();
        assert_eq!(reloaded, cfg);
        assert_eq!(reloaded.hash().unwrap(), cfg.hash().unwrap());

        let mut other = cfg.clone();
        other.train.batch_size = 8;
        assert_ne!(other.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn load_config_reports_the_file_path_on_bad_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "not toml at all = = =").unwrap();
        let err = load_config(&path).unwrap_err();
        assert!(err.to_string().contains("exp.toml"), "error was: {}", err);
    }
}
