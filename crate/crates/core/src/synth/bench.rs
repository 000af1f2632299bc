use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::suite::{Benchmark, EvalTask, Protocol, RankMetric};
use crate::embeddings::{EmbeddingError, EmbeddingMatrix, EmbeddingSet};
use crate::metrics::{
    agglomerative_cluster, average_precision, b3_f1, euclidean_rank, kendall_tau_b, macro_f1, mean_over_queries,
    multilabel_macro_f1, ndcg, rank_by_score, reviewer_score, reviewer_task_score, Candidate, Clustering, RankedList,
};
use crate::probes::{fit_linear_svc, fit_linear_svr, fit_multilabel_svc, kshot_eval, ProbeConfig};
use crate::types::{ControlCode, Format};

/// Cosine-distance merge thresholds tried when tuning the clustering task.
pub const CLUSTER_THRESHOLDS: [f64; 9] = [0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub name: String,
    pub format: Format,
    pub in_train: bool,
    pub metric: String,
    /// Score on a 0–100 scale; `None` when the task failed.
    pub score: Option<f64>,
    /// The metric before scaling (τ may be negative).
    pub raw: Option<f64>,
    pub sub_scores: Vec<f64>,
    /// Queries skipped because the metric is undefined on them.
    pub skipped: usize,
    /// Producers of the document and query embeddings used.
    pub audit: Vec<String>,
    pub error: Option<String>,
}

/// Scores of each sampled task under every control code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossMatrix {
    pub codes: Vec<ControlCode>,
    pub rows: Vec<CrossRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossRow {
    pub format: Format,
    pub task: String,
    /// One score per column code; `None` when evaluation failed.
    pub scores: Vec<Option<f64>>,
    /// The format's own code scores highest in this row.
    pub diagonal_max: bool,
}

impl CrossMatrix {
    pub fn diagonal_wins(&self) -> usize {
        self.rows.iter().filter(|r| r.diagonal_max).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub label: String,
    pub rows: Vec<TaskRow>,
    pub format_averages: BTreeMap<Format, f64>,
    pub in_train_average: Option<f64>,
    pub out_of_train_average: Option<f64>,
    pub overall_average: Option<f64>,
    pub cross: Option<CrossMatrix>,
    pub warnings: Vec<String>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl BenchmarkReport {
    /// Builds a report with aggregates computed from `rows`.
    pub fn from_rows(label: impl Into<String>, rows: Vec<TaskRow>, warnings: Vec<String>) -> Self {
        let mut report = Self {
            label: label.into(),
            rows,
            format_averages: BTreeMap::new(),
            in_train_average: None,
            out_of_train_average: None,
            overall_average: None,
            cross: None,
            warnings,
        };
        report.aggregate();
        report
    }

    /// Recomputes the averages; failed rows do not contribute.
    pub fn aggregate(&mut self) {
        let scored = || self.rows.iter().filter_map(|r| r.score.map(|s| (r, s)));
        self.format_averages = Format::ALL
            .iter()
            .filter_map(|&f| mean(scored().filter(|(r, _)| r.format == f).map(|x| x.1)).map(|m| (f, m)))
            .collect();
        self.in_train_average = mean(scored().filter(|(r, _)| r.in_train).map(|x| x.1));
        self.out_of_train_average = mean(scored().filter(|(r, _)| !r.in_train).map(|x| x.1));
        self.overall_average = mean(scored().map(|x| x.1));
    }

    pub fn row(&self, name: &str) -> Option<&TaskRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

struct Scored {
    raw: f64,
    sub: Vec<f64>,
    skipped: usize,
}

type Lookup<'a> = (&'a EmbeddingMatrix, &'a EmbeddingMatrix);

fn rows_of(m: &EmbeddingMatrix, ids: impl IntoIterator<Item = impl AsRef<str>>) -> Result<Vec<Vec<f64>>, EmbeddingError> {
    ids.into_iter().map(|id| m.get(id.as_ref()).map(<[f64]>::to_vec)).collect()
}

fn evaluate(task: &EvalTask, (docs, queries): Lookup, probe: &ProbeConfig) -> Result<Scored, String> {
    let e = |x: &dyn std::fmt::Display| x.to_string();
    let single = |raw: f64| Scored { raw, sub: Vec::new(), skipped: 0 };
    match &task.protocol {
        Protocol::Classify { classes, train, test, kshot } => {
            let mut x = rows_of(docs, train.iter().map(|r| &r.0)).map_err(|x| e(&x))?;
            let n_train = x.len();
            x.extend(rows_of(docs, test.iter().map(|r| &r.0)).map_err(|x| e(&x))?);
            let y: Vec<usize> = train.iter().chain(test).map(|r| r.1).collect();
            let train_idx: Vec<usize> = (0..n_train).collect();
            let test_idx: Vec<usize> = (n_train..x.len()).collect();
            match kshot {
                Some(settings) => {
                    let r =
                        kshot_eval(&x, &y, *classes, &train_idx, &test_idx, settings, probe.seed, probe).map_err(|x| e(&x))?;
                    Ok(Scored { raw: r.score / 100.0, sub: r.sub_scores, skipped: 0 })
                }
                None => {
                    let svc = fit_linear_svc(&x[..n_train], &y[..n_train], *classes, probe).map_err(|x| e(&x))?;
                    let pred: Vec<usize> = x[n_train..].iter().map(|r| svc.predict(r)).collect();
                    Ok(single(macro_f1(&pred, &y[n_train..], *classes).map_err(|x| e(&x))?))
                }
            }
        }
        Protocol::Multilabel { train, test } => {
            let x = rows_of(docs, train.iter().map(|r| &r.0)).map_err(|x| e(&x))?;
            let y: Vec<Vec<bool>> = train.iter().map(|r| r.1.clone()).collect();
            let svc = fit_multilabel_svc(&x, &y, probe).map_err(|x| e(&x))?;
            let xt = rows_of(docs, test.iter().map(|r| &r.0)).map_err(|x| e(&x))?;
            let pred: Vec<Vec<bool>> = xt.iter().map(|r| svc.predict_multi(r)).collect();
            let gold: Vec<Vec<bool>> = test.iter().map(|r| r.1.clone()).collect();
            Ok(single(multilabel_macro_f1(&pred, &gold).map_err(|x| e(&x))?))
        }
        Protocol::Regress { train, test } => {
            let x = rows_of(docs, train.iter().map(|r| &r.0)).map_err(|x| e(&x))?;
            let y: Vec<f64> = train.iter().map(|r| r.1).collect();
            let svr = fit_linear_svr(&x, &y, probe).map_err(|x| e(&x))?;
            let xt = rows_of(docs, test.iter().map(|r| &r.0)).map_err(|x| e(&x))?;
            let pred: Vec<f64> = xt.iter().map(|r| svr.predict(r)).collect();
            let gold: Vec<f64> = test.iter().map(|r| r.1).collect();
            let tau = kendall_tau_b(&pred, &gold).map_err(|x| e(&x))?;
            // All-tied predictions carry no ranking information.
            Ok(single(tau.unwrap_or(0.0)))
        }
        Protocol::Rank { metric, queries: qs } => {
            let mut lists = Vec::with_capacity(qs.len());
            for q in qs {
                let qv = queries.get(&q.query).map_err(|x| e(&x))?;
                let cands = q
                    .candidates
                    .iter()
                    .map(|(id, g)| docs.get(id).map(|v| Candidate { id, embedding: v, grade: *g }))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|x| e(&x))?;
                lists.push(euclidean_rank(&q.query, qv, &cands).map_err(|x| e(&x))?);
            }
            let m = match metric {
                RankMetric::Map { threshold } => mean_over_queries(&lists, |r| average_precision(r, *threshold)),
                RankMetric::Ndcg => mean_over_queries(&lists, ndcg),
            };
            if m.scored == 0 {
                return Err("no query has a relevant candidate".into());
            }
            Ok(Scored { raw: m.value.unwrap_or(0.0), sub: Vec::new(), skipped: m.skipped })
        }
        Protocol::Cluster { validation, test } => {
            let best = tune_threshold(docs, validation)?;
            let rows = rows_of(docs, test.iter().map(|r| &r.0)).map_err(|x| e(&x))?;
            let labels = agglomerative_cluster(&rows, best).map_err(|x| e(&x))?;
            let pred: Clustering = test.iter().zip(&labels).map(|(r, &l)| (r.0.clone(), l)).collect();
            let gold: Clustering = test.iter().cloned().collect();
            Ok(single(b3_f1(&pred, &gold).map_err(|x| e(&x))?))
        }
        Protocol::Reviewers { reviewers, queries: qs } => {
            let profiles = reviewers
                .iter()
                .map(|(name, papers)| rows_of(docs, papers).map(|p| (name.as_str(), p)))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|x| e(&x))?;
            let mut lists: Vec<RankedList> = Vec::with_capacity(qs.len());
            for (q, grades) in qs {
                let qv = docs.get(q).map_err(|x| e(&x))?;
                let mut scored = Vec::with_capacity(profiles.len());
                for ((name, papers), &g) in profiles.iter().zip(grades) {
                    let refs: Vec<&[f64]> = papers.iter().map(Vec::as_slice).collect();
                    scored.push((*name, reviewer_score(qv, &refs).map_err(|x| e(&x))?, g));
                }
                lists.push(rank_by_score(q, &scored));
            }
            Ok(single(reviewer_task_score(&lists).ok_or("no reviewer queries")?))
        }
    }
}

/// Picks the merge threshold with the best B³ F1 on the validation rows (first wins ties).
fn tune_threshold(docs: &EmbeddingMatrix, validation: &[(String, usize)]) -> Result<f64, String> {
    let rows = rows_of(docs, validation.iter().map(|r| &r.0)).map_err(|e| e.to_string())?;
    let gold: Clustering = validation.iter().cloned().collect();
    let mut best = (f64::NEG_INFINITY, CLUSTER_THRESHOLDS[0]);
    for t in CLUSTER_THRESHOLDS {
        let labels = agglomerative_cluster(&rows, t).map_err(|e| e.to_string())?;
        let pred: Clustering = validation.iter().zip(&labels).map(|(r, &l)| (r.0.clone(), l)).collect();
        let f = b3_f1(&pred, &gold).map_err(|e| e.to_string())?;
        if f > best.0 {
            best = (f, t);
        }
    }
    Ok(best.1)
}

fn score_task(
    task: &EvalTask,
    docs: Option<&EmbeddingMatrix>,
    queries: Option<&EmbeddingMatrix>,
    probe: &ProbeConfig,
) -> TaskRow {
    let mut row = TaskRow {
        name: task.name.clone(),
        format: task.format,
        in_train: task.in_train,
        metric: task.protocol.metric_name().to_string(),
        score: None,
        raw: None,
        sub_scores: Vec::new(),
        skipped: 0,
        audit: Vec::new(),
        error: None,
    };
    if let Some(reason) = &task.degenerate {
        row.error = Some(format!("degenerate task: {reason}"));
        return row;
    }
    let (Some(d), Some(q)) = (docs, queries) else {
        row.error = Some("missing embedding matrix".into());
        return row;
    };
    row.audit.push(format!("docs {}: {}", d.code, d.producer));
    if task.format == Format::Srch {
        row.audit.push(format!("queries {}: {}", q.code, q.producer));
    }
    match evaluate(task, (d, q), probe) {
        Ok(s) => {
            row.raw = Some(s.raw);
            row.score = Some((100.0 * s.raw).clamp(0.0, 100.0));
            row.sub_scores = s.sub;
            row.skipped = s.skipped;
        }
        Err(e) => row.error = Some(e),
    }
    row
}

/// Scores every task of `bench` with its format's embeddings: documents under
/// the format's document code, search queries under the query code.
/// A task whose embeddings are missing records an error and the run continues.
pub fn run_benchmark(bench: &Benchmark, set: &EmbeddingSet, probe: &ProbeConfig, label: &str) -> BenchmarkReport {
    let rows: Vec<TaskRow> = bench
        .tasks
        .par_iter()
        .map(|t| score_task(t, set.get(&t.format.doc_code()), set.get(&t.format.query_code()), probe))
        .collect();
    let mut warnings = bench.warnings.clone();
    for r in &rows {
        if let Some(e) = &r.error {
            warnings.push(format!("{}: {e}", r.name));
        }
    }
    BenchmarkReport::from_rows(label, rows, warnings)
}

/// Scores each format's sampled task under every control code. For search the
/// column code embeds the queries and candidates keep the proximity embedding.
pub fn cross_format_matrix(bench: &Benchmark, set: &EmbeddingSet, probe: &ProbeConfig) -> CrossMatrix {
    let codes = ControlCode::ALL.to_vec();
    let jobs: Vec<(&EvalTask, ControlCode)> =
        Format::ALL.iter().filter_map(|&f| bench.sampled(f)).flat_map(|t| codes.iter().map(move |&c| (t, c))).collect();
    let scores: Vec<Option<f64>> = jobs
        .par_iter()
        .map(|&(t, c)| {
            let (docs, queries) = match t.format {
                Format::Srch => (set.get(&ControlCode::Prx), set.get(&c)),
                _ => (set.get(&c), set.get(&c)),
            };
            score_task(t, docs, queries, probe).score
        })
        .collect();
    let rows = jobs
        .chunks(codes.len())
        .zip(scores.chunks(codes.len()))
        .map(|(j, s)| {
            let task = j[0].0;
            let own = task.format.query_code().index();
            let diagonal_max = s[own].is_some_and(|d| s.iter().enumerate().all(|(i, x)| i == own || x.is_none_or(|x| x <= d)));
            CrossRow { format: task.format, task: task.name.clone(), scores: s.to_vec(), diagonal_max }
        })
        .collect();
    CrossMatrix { codes, rows }
}
