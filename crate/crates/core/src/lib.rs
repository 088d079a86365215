//! Contrastive visual data augmentation pipeline.
//!
//! Stages, each a module:
//!
//! 1. [`dataset`]: corpus manifest, ingestion, deterministic splits.
//! 2. [`pairs`]: multiple-choice probing and confusable-pair flagging.
//! 3. [`features`]: textual and visual (optionally contrastive) feature extraction.
//! 4. [`filter`]: discriminability / generability scoring and top-k selection.
//! 5. [`augment`]: feature-conditioned generation and satisfaction filtering.
//! 6. [`evaluation`]: recognition accuracy and fine-tune dataset export.
//! 7. [`human_eval`]: annotation sessions and Fleiss' kappa.
//!
//! All model access goes through [`gateway::Gateway`].

pub mod augment;
pub mod choice;
pub mod dataset;
pub mod evaluation;
pub mod features;
pub mod filter;
pub mod gateway;
pub mod human_eval;
pub mod pairs;
pub mod records;
pub mod rng;
pub mod templates;
pub mod text;
