//! A generated suite as a directory of files.

use std::path::{Path, PathBuf};

use super::records::{label_record, qrels_of, sample_from_record, QrelRecord, QueryRecord, SampleRecord};
use super::{read_json, read_jsonl, write_json, write_jsonl, IoError};
use crate::objectives::HeadKind;
use crate::synth::{Benchmark, Protocol, SynthSuite};
use crate::tasks::{DocIndex, Label, Objective, Sample, TaskSpec, TrainingTask};
use crate::types::Document;

pub const DOCUMENTS_FILE: &str = "documents.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const TASKS_FILE: &str = "tasks.jsonl";
pub const BENCHMARK_FILE: &str = "benchmark.json";

/// Corpus documents plus search-query pseudo-documents, and the training tasks that use them.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub documents: Vec<Document>,
    pub index: DocIndex,
    pub training: Vec<TrainingTask>,
}

/// Rows scored by an evaluation protocol, as labels or graded relevance.
fn test_records(p: &Protocol) -> Vec<serde_json::Value> {
    let json = |v: serde_json::Result<serde_json::Value>| v.expect("records serialize");
    let labels =
        |rows: Vec<(&String, Label)>| rows.into_iter().map(|(d, l)| json(serde_json::to_value(label_record(d, &l)))).collect();
    match p {
        Protocol::Classify { test, .. } | Protocol::Cluster { test, .. } => {
            labels(test.iter().map(|(d, c)| (d, Label::Class(*c))).collect())
        }
        Protocol::Multilabel { test, .. } => labels(test.iter().map(|(d, v)| (d, Label::Multi(v.clone()))).collect()),
        Protocol::Regress { test, .. } => labels(test.iter().map(|(d, y)| (d, Label::Scalar(*y))).collect()),
        Protocol::Rank { queries, .. } => qrels_of(queries).into_iter().map(|q| json(serde_json::to_value(q))).collect(),
        Protocol::Reviewers { reviewers, queries } => queries
            .iter()
            .flat_map(|(q, grades)| {
                reviewers.iter().zip(grades).map(|((r, _), &g)| QrelRecord { query_id: q.clone(), doc_id: r.clone(), grade: g })
            })
            .map(|q| json(serde_json::to_value(q)))
            .collect(),
    }
}

/// Writes documents, queries, task specs with their sample files, and the
/// benchmark definition. Returns every file written, in order.
pub fn write_dataset(dir: &Path, suite: &SynthSuite) -> Result<Vec<PathBuf>, IoError> {
    let mut written = Vec::new();
    let mut put = |name: &str| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };
    write_jsonl(&put(DOCUMENTS_FILE), &suite.corpus.docs)?;
    write_jsonl(&put(QUERIES_FILE), suite.corpus.queries.iter().map(|q| QueryRecord { id: q.id.clone(), text: q.text.clone() }))?;
    write_jsonl(&put(TASKS_FILE), suite.training.iter().map(|t| &t.spec))?;
    for t in &suite.training {
        write_jsonl(&put(&t.spec.train_path), t.samples.iter().map(SampleRecord::from))?;
        let test = suite.bench.task(&t.spec.name).map(|e| test_records(&e.protocol)).unwrap_or_default();
        write_jsonl(&put(&t.spec.test_path), test)?;
    }
    write_json(&put(BENCHMARK_FILE), &suite.bench)?;
    Ok(written)
}

/// Head shape implied by a task's samples.
pub fn infer_head(objective: Objective, samples: &[Sample]) -> Result<Option<HeadKind>, String> {
    let labels = || samples.iter().filter_map(|s| if let Sample::Labeled { label, .. } = s { Some(label) } else { None });
    Ok(match objective {
        Objective::Triplet => None,
        Objective::Regression => Some(HeadKind::Regression),
        Objective::Multiclass => {
            let k = labels().filter_map(|l| if let Label::Class(c) = l { Some(c + 1) } else { None }).max();
            Some(HeadKind::Multiclass(k.ok_or("no class labels")?.max(2)))
        }
        Objective::Multilabel => {
            let k = labels().find_map(|l| if let Label::Multi(v) = l { Some(v.len()) } else { None });
            Some(HeadKind::Multilabel(k.ok_or("no multilabel rows")?))
        }
    })
}

/// Path of a file named in the dataset, relative to `dir` unless absolute.
fn within(dir: &Path, name: &str) -> PathBuf {
    let p = Path::new(name);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

/// Documents and training tasks of a dataset directory, with every referenced id checked.
pub fn load_dataset(dir: &Path) -> Result<Dataset, IoError> {
    let mut documents: Vec<Document> = read_jsonl(&dir.join(DOCUMENTS_FILE))?;
    let queries: Vec<QueryRecord> = read_jsonl(&dir.join(QUERIES_FILE))?;
    documents.extend(queries.into_iter().map(|q| Document::query(q.id, q.text)));
    let mut index = DocIndex::new();
    for d in &documents {
        if index.insert(d.id.clone(), d.clone()).is_some() {
            return Err(IoError::format(dir, format!("duplicate document id `{}`", d.id)));
        }
    }
    let tasks_path = dir.join(TASKS_FILE);
    let specs: Vec<TaskSpec> = read_jsonl(&tasks_path)?;
    let mut training = Vec::with_capacity(specs.len());
    for spec in specs {
        spec.validate().map_err(|e| IoError::format(&tasks_path, e))?;
        let path = within(dir, &spec.train_path);
        let records: Vec<SampleRecord> = read_jsonl(&path)?;
        let samples = records
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                sample_from_record(r, spec.objective).map_err(|e| IoError::format(&path, format!("record {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        for s in &samples {
            let ids: Vec<&str> = match s {
                Sample::Labeled { doc, .. } => vec![doc],
                Sample::Triplet { query, pos, neg } => {
                    let mut v = vec![pos.as_str(), neg.as_str()];
                    if let crate::tasks::QueryRef::Doc(q) = query {
                        v.push(q);
                    }
                    v
                }
            };
            if let Some(missing) = ids.into_iter().find(|d| !index.contains_key(*d)) {
                return Err(IoError::format(&path, format!("unknown document `{missing}`")));
            }
        }
        let head = infer_head(spec.objective, &samples).map_err(|e| IoError::format(&path, e))?;
        let task = TrainingTask { spec, head, samples };
        task.validate().map_err(|e| IoError::format(&path, e))?;
        training.push(task);
    }
    Ok(Dataset { documents, index, training })
}

pub fn load_benchmark(dir: &Path) -> Result<Benchmark, IoError> {
    read_json(&dir.join(BENCHMARK_FILE))
}
