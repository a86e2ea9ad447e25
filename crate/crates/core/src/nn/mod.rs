//! Trainable building blocks: autodiff tape, parameter store, the shared
//! encoders (hierarchical dialog encoder, relational graph encoder, memory
//! reader), vocabulary, and checkpoint IO.
//!
//! Everything is generic over [`crate::Scalar`]; forward evaluation is
//! read-only on parameters and safe to run concurrently, while updates go
//! through a single-writer optimizer step.

pub mod check;
pub mod checkpoint;
pub mod encoder;
pub mod graph;
pub mod memnet;
pub mod params;
pub mod tape;
pub mod vocab;

pub use check::{gradient_check, GradCheckReport};
pub use encoder::{
    encode_dialog, prepare_dialog, DialogEncoderWeights, DialogEncoding, EncoderConfig,
    PreparedDialog, PreparedToken,
};
pub use graph::{encode_kb, entity_embeddings, KbEncoderWeights, KbGraph};
pub use memnet::{memory_read, MemNetWeights, MemoryRead};
pub use params::{seeded_rng, sub_seed, Adam, Grads, Init, ParamId, ParamSet, Tensor};
pub use tape::{gru_step, score_rows, score_vec, GruWeights, MlpScorer, NodeId, Tape, Value};
pub use vocab::Vocab;
