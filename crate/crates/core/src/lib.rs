//! Multimodal embedding pipeline: corpus ingestion, per-modality
//! preprocessing, pluggable embedders, sharded vector storage, exact and
//! HNSW nearest-neighbour search, and an evaluation harness.

pub mod corpus;
pub mod embedder;
pub mod eval;
pub mod index;
pub mod pathology;
pub mod pipeline;
pub mod rng;
pub mod store;
pub mod synth;
pub mod text;
pub mod vector;
pub mod volume;

pub use corpus::{
    ingest_corpus, summarize_cohort, CohortSummary, Corpus, CorpusError, ModalityKind, PatientRecord, RawAsset,
};
pub use embedder::{EmbedError, Embedder, EmbedderInfo, ExternalEmbedder, Fragment, HashEmbedder};
pub use eval::{knn_classify, project_2d, stratified_split, EvalError, EvalReport, SplitPlan};
pub use index::{ExactIndex, HnswIndex, HnswParams, IndexError, Metric, NeighborHit};
pub use pipeline::{embed_corpus, EmbedSummary, ModalityConfig, PipelineError};
pub use store::{open_store, write_shards, CohortManifest, EmbeddingRecord, Store, StoreError, StoreHeader};
pub use vector::EmbeddingVector;
