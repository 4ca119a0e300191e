//! Bottleneck-token text embeddings for a miniature decoder-only transformer.
//!
//! Special tokens are inserted into a sequence and an attention mask forces
//! everything after them to read the preceding text only through those
//! tokens. Training mixes plain next-token prediction with these segmented
//! sequences, then switches to an in-batch contrastive objective; the
//! final-layer states of the special tokens serve as text embeddings, and
//! their key/value cache is enough to decode the compressed text back.

pub mod corpus;
pub mod embedder;
pub mod error;
pub mod evalkit;
pub mod masking;
pub mod model;
pub mod objective;
pub mod reconstruct;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use corpus::{Document, TokenId, Vocab};
pub use embedder::{Embedding, Pooling};
pub use error::{GemError, Result};
pub use masking::{AttentionMask, LossMask, SegmentedSequence, SequenceKind};
pub use model::{init_model, KVCacheSnapshot, ModelConfig, ModelState};
pub use objective::LossBreakdown;
pub use trainer::{TrainConfig, TrainingBatch};
