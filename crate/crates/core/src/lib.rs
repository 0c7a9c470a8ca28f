//! Retrieval-augmented captioning with negative entity suppression.
//!
//! The crate is organised bottom-up:
//!
//! - [`embedder`]: deterministic hashing embedder and file-backed embedding tables
//! - [`datastore`]: caption store with exact cosine top-k retrieval
//! - [`entities`]: vocabulary matching and positive/negative entity filtering
//! - [`fusion`]: quality gate, synthetic/text fusion, cross-attention and prefix mapping
//! - [`suppression`]: negative-entity attention scoring and token down-weighting
//! - [`metrics`]: CHAIR, entity recall, hallucination attribution and retrieval diagnostics
//! - [`pipeline`]: training and inference orchestration with a stand-in decoder
//! - [`toy`]: seeded synthetic corpus used by the examples and acceptance tests
//! - [`cli`]: the command implementations behind the `nes` binary

pub mod cli;
pub mod datastore;
pub mod embedder;
pub mod entities;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod pipeline;
pub mod suppression;
pub mod text;
pub mod toy;

pub use datastore::{CaptionRecord, Datastore, Hit, RetrievalResult};
pub use embedder::{Embedding, EmbeddingSource, FileEmbeddings, HashEmbedder, SourceSpec};
pub use entities::{EntitySet, EntitySets, EntityVocabulary};
pub use error::{Error, Result};
pub use fusion::{AttentionWeights, FusionConfig, FusionStrategy, PrefixFeatures};
pub use metrics::{EvalInstance, EvalReport, RetrievalDiagnostics};
pub use pipeline::{GenerationContext, Mode, Pipeline, PipelineConfig, Sources, Stage};
pub use suppression::{Selection, SuppressionConfig, SuppressionReport};
