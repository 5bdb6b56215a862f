//! Misconception diagnosis from tutoring dialogues: hypothesis generation,
//! embedding retrieval over a label catalog, reranking, and ranking metrics.

pub mod corpus;
pub mod embedder;
pub mod llm;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod retrieval;
pub mod stages;

pub use corpus::{DialoguePoint, LabelCatalog, Likelihood, Split, SplitAssignment};
pub use embedder::{Embedder, EmbedderSpec, EmbeddingVector};
pub use metrics::{MetricSummary, RankRecord};
pub use pipeline::{run, run_matrix, Experiment, Method, RunConfig};
pub use report::MatrixReport;
pub use retrieval::{LabelIndex, RankedList};
