//! Latent concept analysis over layer-wise model representations.
//!
//! The crate covers the analysis half of the pipeline:
//!
//! - [`store`]: the `LCAE` binary container for per-layer embedding matrices
//!   and their text token index.
//! - [`ingest`]: tag, word-boundary and sentence-label readers, plus the
//!   sentiment polarity taxonomy builder.
//! - [`aggregate`]: frame-to-word pooling for speech encoders and the
//!   occurrence frequency filter.
//! - [`cluster`]: K-means (k-means++ seeded Lloyd) and exact Ward clustering.
//! - [`align`]: the θ-alignment score between encoded concepts and a taxonomy.
//! - [`labeler`]: zero-shot concept labeling through an OpenAI-compatible
//!   chat completion endpoint.
//! - [`report`]: alignment tables, curve data and concept inspection reports.
//! - [`pipeline`]: run-directory stages driven by [`config::RunConfig`].

pub mod aggregate;
pub mod align;
pub mod cluster;
pub mod config;
pub mod error;
pub mod ingest;
pub mod labeler;
pub mod pipeline;
pub mod report;
pub mod store;

pub use align::{lambda_theta, AlignmentRecord, ConceptDiagnostic, CoverageDenominator};
pub use cluster::{ClusterAssignment, EncodedConcept};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use ingest::{SentenceLabel, Taxonomy, WordBoundary};
pub use store::{EmbeddingMatrix, Level, OccurrenceKey, TokenIndex, TokenOccurrence};
