//! Ranking, correlation, clustering and classification metrics.
//!
//! Metrics that are undefined on an input (no relevant candidate, all-tied
//! scores) return `None`; callers skip such queries and count them.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("dimension mismatch: expected {expected}, got {got} for `{id}`")]
    Dimension { id: String, expected: usize, got: usize },
    #[error("invalid metric input: {0}")]
    Input(String),
}

/// Candidates of one query in ranked order with their gold relevance grades.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query: String,
    pub candidates: Vec<String>,
    pub grades: Vec<u32>,
}

#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub id: &'a str,
    pub embedding: &'a [f64],
    pub grade: u32,
}

/// Orders candidates by increasing Euclidean distance to `query`; equal
/// distances fall back to ascending candidate id.
pub fn euclidean_rank(query_id: &str, query: &[f64], candidates: &[Candidate]) -> Result<RankedList, MetricError> {
    let mut scored = Vec::with_capacity(candidates.len());
    for c in candidates {
        if c.embedding.len() != query.len() {
            return Err(MetricError::Dimension { id: c.id.to_string(), expected: query.len(), got: c.embedding.len() });
        }
        let d2: f64 = c.embedding.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
        scored.push((d2, c));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.id.cmp(b.1.id)));
    Ok(RankedList {
        query: query_id.to_string(),
        candidates: scored.iter().map(|(_, c)| c.id.to_string()).collect(),
        grades: scored.iter().map(|(_, c)| c.grade).collect(),
    })
}

/// Mean of precision at the rank of each candidate with grade ≥ `threshold`.
pub fn average_precision(r: &RankedList, threshold: u32) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &g) in r.grades.iter().enumerate() {
        if g >= threshold {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

fn dcg(grades: impl Iterator<Item = u32>) -> f64 {
    grades.enumerate().map(|(i, g)| f64::from(g) / ((i + 2) as f64).log2()).sum()
}

/// nDCG with linear gain and `log2(rank + 1)` discount over the full list.
pub fn ndcg(r: &RankedList) -> Option<f64> {
    let mut ideal = r.grades.clone();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let best = dcg(ideal.into_iter());
    (best > 0.0).then(|| dcg(r.grades.iter().copied()) / best)
}

/// Fraction of the top `k` with grade ≥ `threshold`; short lists still divide by `k`.
pub fn precision_at_k(r: &RankedList, k: usize, threshold: u32) -> f64 {
    assert!(k >= 1, "precision_at_k needs k ≥ 1");
    r.grades.iter().take(k).filter(|&&g| g >= threshold).count() as f64 / k as f64
}

/// Mean of a per-query metric over the queries where it is defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryMean {
    pub value: Option<f64>,
    pub scored: usize,
    pub skipped: usize,
}

pub fn mean_over_queries<'a>(
    lists: impl IntoIterator<Item = &'a RankedList>,
    f: impl Fn(&RankedList) -> Option<f64>,
) -> QueryMean {
    let (mut sum, mut scored, mut skipped) = (0.0, 0, 0);
    for r in lists {
        match f(r) {
            Some(v) => {
                sum += v;
                scored += 1;
            }
            None => skipped += 1,
        }
    }
    QueryMean { value: (scored > 0).then(|| sum / scored as f64), scored, skipped }
}

/// Number of tied pairs in a sorted slice.
fn tied_pairs(sorted: &[f64]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Merge sort that returns the number of inversions (strictly out-of-order pairs).
fn count_inversions(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv = count_inversions(&mut v[..mid], buf) + count_inversions(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            inv += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    inv
}

/// Kendall's τ-b in O(n log n); `None` when either side is constant.
pub fn kendall_tau_b(pred: &[f64], gold: &[f64]) -> Result<Option<f64>, MetricError> {
    if pred.len() != gold.len() {
        return Err(MetricError::Input(format!("{} predictions for {} gold values", pred.len(), gold.len())));
    }
    if pred.iter().chain(gold).any(|x| !x.is_finite()) {
        return Err(MetricError::Input("non-finite score".into()));
    }
    let n = pred.len() as u64;
    if n < 2 {
        return Ok(None);
    }
    let mut idx: Vec<usize> = (0..pred.len()).collect();
    idx.sort_by(|&a, &b| gold[a].total_cmp(&gold[b]).then(pred[a].total_cmp(&pred[b])));
    let g: Vec<f64> = idx.iter().map(|&i| gold[i]).collect();
    let mut p: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
    let gold_ties = tied_pairs(&g);
    let mut joint = 0u64;
    let mut run = 1u64;
    for k in 1..p.len() {
        if g[k] == g[k - 1] && p[k] == p[k - 1] {
            run += 1;
        } else {
            joint += run * (run - 1) / 2;
            run = 1;
        }
    }
    joint += run * (run - 1) / 2;
    let swaps = count_inversions(&mut p, &mut Vec::with_capacity(pred.len()));
    let pred_ties = tied_pairs(&p);
    let n0 = n * (n - 1) / 2;
    if gold_ties == n0 || pred_ties == n0 {
        return Ok(None);
    }
    let num = n0 as f64 - gold_ties as f64 - pred_ties as f64 + joint as f64 - 2.0 * swaps as f64;
    let den = ((n0 - gold_ties) as f64 * (n0 - pred_ties) as f64).sqrt();
    Ok(Some((num / den).clamp(-1.0, 1.0)))
}

/// Element id → cluster id.
pub type Clustering = BTreeMap<String, usize>;

/// B³ F1: element-averaged precision and recall of cluster overlap, harmonically combined.
pub fn b3_f1(pred: &Clustering, gold: &Clustering) -> Result<f64, MetricError> {
    if pred.len() != gold.len() || pred.keys().zip(gold.keys()).any(|(a, b)| a != b) {
        return Err(MetricError::Input("predicted and gold clusterings cover different elements".into()));
    }
    if pred.is_empty() {
        return Err(MetricError::Input("empty clustering".into()));
    }
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut psize: HashMap<usize, f64> = HashMap::new();
    let mut gsize: HashMap<usize, f64> = HashMap::new();
    for (id, &p) in pred {
        let g = gold[id];
        *joint.entry((p, g)).or_default() += 1.0;
        *psize.entry(p).or_default() += 1.0;
        *gsize.entry(g).or_default() += 1.0;
    }
    let n = pred.len() as f64;
    let mut pairs: Vec<_> = joint.into_iter().collect();
    pairs.sort_by_key(|&(k, _)| k);
    let precision: f64 = pairs.iter().map(|&((p, _), c)| c * c / psize[&p]).sum::<f64>() / n;
    let recall: f64 = pairs.iter().map(|&((_, g), c)| c * c / gsize[&g]).sum::<f64>() / n;
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Counts {
    tp: f64,
    fp: f64,
    fn_: f64,
}

impl Counts {
    fn f1(self) -> f64 {
        let denom = 2.0 * self.tp + self.fp + self.fn_;
        if denom == 0.0 {
            0.0
        } else {
            2.0 * self.tp / denom
        }
    }
}

fn counts(pred: impl Iterator<Item = bool>, gold: impl Iterator<Item = bool>) -> Counts {
    let mut c = Counts::default();
    for (p, g) in pred.zip(gold) {
        match (p, g) {
            (true, true) => c.tp += 1.0,
            (true, false) => c.fp += 1.0,
            (false, true) => c.fn_ += 1.0,
            _ => {}
        }
    }
    c
}

/// F1 of the positive class; 0 when there are no predicted or gold positives.
pub fn binary_f1(pred: &[bool], gold: &[bool]) -> Result<f64, MetricError> {
    if pred.len() != gold.len() {
        return Err(MetricError::Input("prediction and gold lengths differ".into()));
    }
    Ok(counts(pred.iter().copied(), gold.iter().copied()).f1())
}

/// Unweighted mean of per-class F1 over the label space `0..classes`.
pub fn macro_f1(pred: &[usize], gold: &[usize], classes: usize) -> Result<f64, MetricError> {
    if pred.len() != gold.len() {
        return Err(MetricError::Input("prediction and gold lengths differ".into()));
    }
    if classes == 0 || pred.iter().chain(gold).any(|&c| c >= classes) {
        return Err(MetricError::Input(format!("labels outside label space of {classes}")));
    }
    let total: f64 = (0..classes).map(|k| counts(pred.iter().map(|&p| p == k), gold.iter().map(|&g| g == k)).f1()).sum();
    Ok(total / classes as f64)
}

/// Macro F1 over labels of a multi-label prediction.
pub fn multilabel_macro_f1(pred: &[Vec<bool>], gold: &[Vec<bool>]) -> Result<f64, MetricError> {
    if pred.len() != gold.len() || pred.is_empty() {
        return Err(MetricError::Input("prediction and gold lengths differ or are empty".into()));
    }
    let k = gold[0].len();
    if k == 0 || pred.iter().chain(gold).any(|r| r.len() != k) {
        return Err(MetricError::Input("inconsistent label space".into()));
    }
    let total: f64 = (0..k).map(|j| counts(pred.iter().map(|r| r[j]), gold.iter().map(|r| r[j])).f1()).sum();
    Ok(total / k as f64)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::Input(format!("cosine of {}-d and {}-d vectors", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(MetricError::Input("zero-norm embedding".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Mean of the three largest cosine similarities between the query and a reviewer's papers.
pub fn reviewer_score(query: &[f64], papers: &[&[f64]]) -> Result<f64, MetricError> {
    if papers.is_empty() {
        return Err(MetricError::Input("reviewer without papers".into()));
    }
    let mut sims = papers.iter().map(|p| cosine(query, p)).collect::<Result<Vec<_>, _>>()?;
    sims.sort_by(|a, b| b.total_cmp(a));
    let top = sims.len().min(3);
    Ok(sims[..top].iter().sum::<f64>() / top as f64)
}

/// Ranks reviewers by decreasing score (ties by ascending id) and attaches their grades.
pub fn rank_by_score(query: &str, scored: &[(&str, f64, u32)]) -> RankedList {
    let mut v: Vec<_> = scored.to_vec();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    RankedList {
        query: query.to_string(),
        candidates: v.iter().map(|x| x.0.to_string()).collect(),
        grades: v.iter().map(|x| x.2).collect(),
    }
}

/// Grade at or above which a reviewer counts as relevant under soft and hard binarization.
pub const SOFT_RELEVANT: u32 = 2;
pub const HARD_RELEVANT: u32 = 3;

/// Mean over queries of P@5 and P@10 under soft and hard relevance, averaged into one number.
pub fn reviewer_task_score(lists: &[RankedList]) -> Option<f64> {
    if lists.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for k in [5, 10] {
        for t in [SOFT_RELEVANT, HARD_RELEVANT] {
            total += lists.iter().map(|r| precision_at_k(r, k, t)).sum::<f64>() / lists.len() as f64;
        }
    }
    Some(total / 4.0)
}

/// Score of one benchmark task on a 0–100 scale; few-shot tasks carry several sub-scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskScore {
    Single(f64),
    Sub(Vec<f64>),
}

impl TaskScore {
    pub fn value(&self) -> f64 {
        match self {
            TaskScore::Single(v) => *v,
            TaskScore::Sub(s) => s.iter().sum::<f64>() / s.len() as f64,
        }
    }
}

/// Unweighted mean of task scores, sub-scored tasks first averaged into one value.
pub fn benchmark_average(tasks: &[TaskScore]) -> Option<f64> {
    (!tasks.is_empty()).then(|| tasks.iter().map(TaskScore::value).sum::<f64>() / tasks.len() as f64)
}

/// Average-linkage agglomerative clustering under cosine distance: repeatedly
/// merges the closest pair of clusters while their distance is below `threshold`.
///
/// Returns a cluster id per input row, numbered by first appearance.
pub fn agglomerative_cluster(rows: &[Vec<f64>], threshold: f64) -> Result<Vec<usize>, MetricError> {
    let n = rows.len();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = 1.0 - cosine(&rows[i], &rows[j])?;
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut size = vec![1usize; n];
    let mut alive: Vec<bool> = vec![true; n];
    let mut owner: Vec<usize> = (0..n).collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            for j in i + 1..n {
                if alive[j] && best.is_none_or(|(d, _, _)| dist[i][j] < d) {
                    best = Some((dist[i][j], i, j));
                }
            }
        }
        let Some((d, i, j)) = best else { break };
        if d >= threshold {
            break;
        }
        let (si, sj) = (size[i] as f64, size[j] as f64);
        for k in 0..n {
            if alive[k] && k != i && k != j {
                let merged = (si * dist[i][k] + sj * dist[j][k]) / (si + sj);
                dist[i][k] = merged;
                dist[k][i] = merged;
            }
        }
        size[i] += size[j];
        alive[j] = false;
        for o in owner.iter_mut() {
            if *o == j {
                *o = i;
            }
        }
    }
    let mut relabel = HashMap::new();
    Ok(owner
        .into_iter()
        .map(|o| {
            let next = relabel.len();
            *relabel.entry(o).or_insert(next)
        })
        .collect())
}
