//! Few-shot recognition with retrieval-augmented training.
//!
//! The crate implements a complete desk-scale pipeline:
//!
//! 1. **Retrieval** — match concept synonyms against a captioned corpus
//!    (word-boundary string matching), rank the hits with a pluggable
//!    text/image embedder, and keep the top-k per concept
//!    ([`retrieval`], [`corpus`], [`vocab`], [`embed`]).
//! 2. **Data assembly** — sample a K-shot split, mix it with the retrieved
//!    pool, and inspect class imbalance ([`data`], [`synth`]).
//! 3. **Augmentation** — CutMix / MixUp style mixed-sample augmentation on
//!    images or feature vectors with exact area-weighted soft labels
//!    ([`augment`]).
//! 4. **Two-stage training** — stage 1 finetunes the encoder and cosine
//!    classifier end to end on the mixed pool; stage 2 retrains the
//!    classifier alone on the balanced few-shot split ([`model`], [`train`],
//!    [`optim`]).
//! 5. **Diagnostics** — accuracy reports split into common/rare concepts, a
//!    linear-probe test for the domain gap between pools, and epoch-grid
//!    curve studies ([`eval`], [`experiment`]).
//!
//! Everything is deterministic given a seed: repeated runs produce
//! bit-identical checkpoints and reports.

pub mod augment;
pub mod config;
pub mod corpus;
pub mod data;
pub mod embed;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod retrieval;
pub mod rng;
pub mod synth;
pub mod train;
pub mod vocab;

pub use error::{Result, SwatError};
