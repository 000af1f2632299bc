//! Synthetic benchmark with planted per-format structure.
//!
//! Topic words drive classification and search, era words drive the
//! regression target, and citation communities drive proximity.

mod bench;
mod corpus;
mod pipeline;
mod suite;

pub use bench::{cross_format_matrix, run_benchmark, BenchmarkReport, CrossMatrix, CrossRow, TaskRow, CLUSTER_THRESHOLDS};
pub use corpus::{generate_corpus, Citation, QuerySplit, SearchQuery, SynthCorpus, SynthCorpusConfig, INFLUENTIAL};
pub use pipeline::{embed_suite, evaluate, prepare, pretrain_base, train_variant, SuiteConfig};
pub use suite::{build_tasks, Benchmark, EvalTask, Protocol, RankMetric, RankQuery, SynthSuite};

#[cfg(test)]
mod tests;
