//! Format-specific document embeddings from a shared miniature transformer.

pub mod autodiff;
pub mod embeddings;
pub mod encoder;
pub mod io;
pub mod metrics;
pub mod objectives;
pub mod probes;
pub mod synth;
pub mod tasks;
pub mod trainer;
pub mod types;
