//! Repairing dialog corpora that disagree with their knowledge base.
//!
//! A task-oriented dialog corpus is collected against a KB that keeps
//! changing; at training time only the latest snapshot survives, so a
//! fraction of the dialogs reference rows that are gone or are contradicted
//! by rows that appeared later. This crate contains everything needed to
//! study and repair that situation at desk scale:
//!
//! * [`data`] — ontology, entities, rows, KBs, dialogs, and the consistency
//!   judge that decides whether a dialog agrees with a KB snapshot.
//! * [`sim`] — an evolving-KB corpus simulator that injects inconsistencies
//!   with known ground truth.
//! * [`supervision`] — distant-supervision labeling of candidate triples.
//! * [`nn`] — a small reverse-mode autodiff tape plus the shared encoder
//!   blocks (hierarchical dialog encoder, relational graph encoder, multi-hop
//!   memory reader), generic over the scalar type.
//! * [`models`] — the masked-entity reward model, the three repair stages
//!   (row insertion / deletion / completion), and a pointer-generator
//!   responder used to measure downstream effect.
//! * [`cascade`] — orchestration of the repair stages plus a rule baseline.
//! * [`metrics`] — the evaluation suite and report rendering.
//! * [`pipeline`] — seeded end-to-end runs with manifests.

pub mod cascade;
pub mod config;
pub mod data;
pub mod manifest;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod scalar;
pub mod sim;
pub mod supervision;

pub use error::CoreError;
pub use scalar::Scalar;

pub mod error;

/// Default scalar for all shipped binaries and pipelines. The numeric core is
/// generic over [`Scalar`]; `f64` keeps the gradient checks and the
/// byte-reproducibility guarantees comfortable on CPU.
pub type Real = f64;

/// Convenience alias for results in this crate.
pub type Result<T, E = CoreError> = std::result::Result<T, E>;
