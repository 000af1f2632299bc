use serde::{Deserialize, Serialize};

use super::bench::{cross_format_matrix, run_benchmark, BenchmarkReport};
use super::corpus::{generate_corpus, SynthCorpusConfig};
use super::suite::{build_tasks, SynthSuite};
use crate::embeddings::{embed_documents, EmbeddingSet};
use crate::encoder::{EncoderConfig, EncoderModel, Variant};
use crate::probes::ProbeConfig;
use crate::tasks::{DocIndex, TrainingTask};
use crate::trainer::{train, train_fusion, TrainConfig, TrainError, TrainOutcome};

/// Everything needed to regenerate data, train and evaluate one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub corpus: SynthCorpusConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    /// Epochs of the shared base stage (all tasks, CLS embedding) every variant starts from; 0 skips it.
    pub base_epochs: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            corpus: SynthCorpusConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::desk(),
            probe: ProbeConfig::default(),
            base_epochs: 3,
        }
    }
}

impl SuiteConfig {
    /// Same structure with every seed derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        self.train.seed = seed;
        self.probe.seed = seed;
        self
    }
}

pub fn prepare(cfg: &SuiteConfig) -> Result<SynthSuite, TrainError> {
    let corpus = generate_corpus(&cfg.corpus).map_err(TrainError::Config)?;
    Ok(build_tasks(&corpus, cfg.train.triplets_per_query, cfg.train.task_cap, cfg.corpus.seed))
}

/// A `[CLS]` trunk trained jointly on every training task; the common
/// starting point of every variant, standing in for a pretrained encoder.
pub fn pretrain_base(tasks: &[TrainingTask], docs: &DocIndex, cfg: &SuiteConfig) -> Result<TrainOutcome, TrainError> {
    let trunk = EncoderModel::trunk(cfg.encoder.clone(), cfg.train.seed)?;
    let tcfg = TrainConfig { epochs: cfg.base_epochs, seed: cfg.train.seed.wrapping_add(7), ..cfg.train.clone() };
    train(trunk, tasks, docs, &tcfg)
}

/// Attaches `variant` to a copy of `base` and trains it on every training task.
pub fn train_variant(
    tasks: &[TrainingTask],
    docs: &DocIndex,
    base: &EncoderModel,
    variant: Variant,
    cfg: &SuiteConfig,
) -> Result<TrainOutcome, TrainError> {
    let mut model = base.clone();
    let attach_seed = cfg.train.seed.wrapping_add(11);
    match variant {
        Variant::ClsOnly => {}
        Variant::Fusion => return train_fusion(model, tasks, docs, &cfg.train, attach_seed),
        v => model.attach(v, attach_seed)?,
    }
    train(model, tasks, docs, &cfg.train)
}

/// Embeddings of every corpus document and query under every control code.
pub fn embed_suite(model: &EncoderModel, suite: &SynthSuite, cfg: &SuiteConfig) -> Result<EmbeddingSet, TrainError> {
    Ok(embed_documents(model, &suite.documents, cfg.train.with_metadata)?)
}

/// Benchmark report, optionally with the cross-format matrix.
pub fn evaluate(suite: &SynthSuite, set: &EmbeddingSet, cfg: &SuiteConfig, label: &str, cross: bool) -> BenchmarkReport {
    let mut report = run_benchmark(&suite.bench, set, &cfg.probe, label);
    if cross {
        report.cross = Some(cross_format_matrix(&suite.bench, set, &cfg.probe));
    }
    report
}
