//! Preference-pair synthesis for hallucination mitigation.
//!
//! The pipeline turns an unannotated `(image, prompt)` dataset into DPO
//! training pairs using only the target model itself: generate a
//! description, build a co-occurrence graph over the whole corpus,
//! corrupt a position-weighted subset of each response's sentences with
//! template-guided descriptions of absent-but-plausible objects, and
//! pair the original with the corrupted copy. Iterations rerun the
//! whole loop at a curriculum-scheduled injection rate. Evaluation
//! ships with it: CHAIR scores, per-step prompt-dependency (Hellinger)
//! curves, positional hallucination profiles, and co-occurrence rank
//! statistics, plus a desk-scale DPO objective with analytic gradients
//! verified against finite differences.
//!
//! Batch loops (graph building, injection, scoring, metric sweeps) run
//! data-parallel under the `parallel` feature (enabled by default) with
//! order-preserving reductions, so outputs are byte-identical to the
//! sequential fallback.

pub mod backend;
pub mod cooccurrence;
pub mod curriculum;
pub mod dataset;
pub mod dpo;
mod error;
mod exec;
pub mod injector;
pub mod lexicon;
pub mod metrics;
pub mod toy;

pub use error::{Error, Result};
