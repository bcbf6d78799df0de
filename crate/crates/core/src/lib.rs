//! Sub-sentence proposition encoder.
//!
//! The crate covers the whole pipeline: aligning proposition text to token
//! masks over a sentence, labeling positive proposition pairs, training a
//! small masked-pooling transformer with an in-batch supervised contrastive
//! loss, and indexing/querying proposition embeddings.

pub mod alignment;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod index;
pub mod loss;
pub mod numerics;
pub mod pairing;
pub mod retrieval;
pub mod synth;
pub mod tokenizer;
pub mod trainer;

pub use alignment::{AlignConfig, BinaryMask};
pub use corpus::PairRecord;
pub use encoder::{EncoderConfig, EncoderParams, Model, PoolingStrategy, PropositionEmbedding};
pub use error::{Error, ErrorKind, Result};
pub use index::{Level, PropIndex, PropKey};
pub use loss::{LossConfig, Positives};
pub use numerics::Tensor;
pub use tokenizer::{tokenize, TokenizedText, Vocab};
pub use trainer::{Checkpoint, TrainConfig};
