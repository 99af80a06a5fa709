//! Weakly supervised transformer over bags of tile embeddings: slide
//! classification, bulk gene expression prediction and slide search.
//!
//! A slide becomes bags of `k` tile embeddings ([`bagging`]); the model
//! ([`model`]) embeds each bag with a class token, predicts the class from
//! that token and one gene vector per instance, and pools instance genes by
//! top-n averaging. [`train`] fits it with AdamW and plateau decay, [`eval`]
//! reports classification, per-gene correlation with multiple-testing
//! correction, prediction errors, PCA and retrieval MAP@K. [`synth`] builds
//! planted datasets so every stage runs without real slides.
//!
//! Runnable examples, one per capability:
//!
//! | example | shows |
//! |---|---|
//! | `synth_dataset` | planted dataset on disk and the Bayes-oracle accuracy |
//! | `bag_slide` | tissue mask, tiles, spatial k-means, bag sampling, bag files |
//! | `gene_pipeline` | expression ingest, median filter, log transform, case split |
//! | `gradient_check` | finite-difference check of every model gradient |
//! | `train_synthetic` | end-to-end training against the oracle |
//! | `evaluate_report` | checkpoint reload and the evaluation report files |
//! | `slide_search` | MAP@K of class-token embeddings |
//!
//! The `trnasformer` binary wraps the same calls as subcommands; see [`cli`].

pub mod bagging;
pub mod cli;
pub mod error;
pub mod eval;
pub mod genes;
pub mod model;
pub mod numcore;
pub mod seeds;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
