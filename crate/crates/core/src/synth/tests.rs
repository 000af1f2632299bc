use std::collections::{BTreeSet, HashMap};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::embeddings::{EmbeddingMatrix, EmbeddingSet};
use crate::encoder::{EncoderConfig, EncoderModel, Variant};
use crate::probes::ProbeConfig;
use crate::tasks::{QueryRef, Sample};
use crate::types::{ControlCode, Format};

fn small(seed: u64) -> SynthCorpusConfig {
    SynthCorpusConfig { docs_per_topic: 40, train_queries: 40, test_queries: 16, seed, ..Default::default() }
}

fn suite(cfg: &SynthCorpusConfig) -> SynthSuite {
    build_tasks(&generate_corpus(cfg).unwrap(), 5, 960, cfg.seed)
}

/// An embedding set whose rows come from `f(document index)`; query pseudo-documents get `q(query index)`.
fn embeddings(s: &SynthSuite, dim: usize, f: impl Fn(usize) -> Vec<f64>, q: impl Fn(usize) -> Vec<f64>) -> EmbeddingSet {
    let n = s.corpus.docs.len();
    ControlCode::ALL
        .iter()
        .map(|&code| {
            let mut m = EmbeddingMatrix::new(code, dim, "fixture");
            for (i, d) in s.documents.iter().enumerate() {
                m.rows.insert(d.id.clone(), if i < n { f(i) } else { q(i - n) });
            }
            (code, m)
        })
        .collect()
}

fn fast_probe() -> ProbeConfig {
    ProbeConfig { epochs: 150, ..Default::default() }
}

#[test]
fn corpus_is_a_pure_function_of_config() {
    let a = serde_json::to_string(&generate_corpus(&small(4)).unwrap()).unwrap();
    let b = serde_json::to_string(&generate_corpus(&small(4)).unwrap()).unwrap();
    let c = serde_json::to_string(&generate_corpus(&small(5)).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        SynthCorpusConfig { topics: 0, ..small(0) },
        SynthCorpusConfig { intra_p: 1.5, ..small(0) },
        SynthCorpusConfig { heldout_keywords: 19, ..small(0) },
        SynthCorpusConfig { test_fraction: 1.0, ..small(0) },
    ] {
        assert!(generate_corpus(&bad).is_err());
    }
}

#[test]
fn citation_edges_match_planted_probabilities() {
    let cfg = small(11);
    let c = generate_corpus(&cfg).unwrap();
    let n = c.docs.len();
    let same: usize = (0..n).map(|i| (0..n).filter(|&j| j != i && c.community[i] == c.community[j]).count()).sum();
    let cross = n * (n - 1) - same;
    let intra_edges = c.citations.iter().filter(|e| c.community[e.from] == c.community[e.to]).count();
    let inter_edges = c.citations.len() - intra_edges;
    for (edges, pairs, p) in [(intra_edges, same, cfg.intra_p), (inter_edges, cross, cfg.inter_p)] {
        let mean = pairs as f64 * p;
        let sd = (pairs as f64 * p * (1.0 - p)).sqrt();
        assert!((edges as f64 - mean).abs() <= 3.0 * sd, "{edges} edges vs {mean:.1} ± {:.1}", 3.0 * sd);
    }
    assert!(c.citations.iter().all(|e| e.from != e.to && (1..=7).contains(&e.count)));
}

#[test]
fn targets_follow_recency() {
    let c = generate_corpus(&small(2)).unwrap();
    let n = c.docs.len() as f64;
    let (mr, mt) = (c.recency.iter().sum::<f64>() / n, c.target.iter().sum::<f64>() / n);
    let cov: f64 = c.recency.iter().zip(&c.target).map(|(r, t)| (r - mr) * (t - mt)).sum::<f64>() / n;
    let vr = c.recency.iter().map(|r| (r - mr).powi(2)).sum::<f64>() / n;
    let vt = c.target.iter().map(|t| (t - mt).powi(2)).sum::<f64>() / n;
    assert!(cov / (vr * vt).sqrt() > 0.9);
    for (d, r) in c.docs.iter().zip(&c.recency) {
        assert_eq!(d.year, Some(1990 + (r * 30.0).floor() as i32));
    }
}

#[test]
fn single_topic_flags_classification_tasks() {
    let cfg = SynthCorpusConfig { topics: 1, ..small(3) };
    let s = suite(&cfg);
    assert!(s.corpus.topic.iter().all(|&t| t == 0));
    for name in ["topic-clf", "supertopic-fewshot", "field-multilabel"] {
        assert!(s.bench.tasks.iter().find(|t| t.name == name).unwrap().degenerate.is_some(), "{name}");
    }
    assert!(!s.bench.warnings.is_empty());
    let set = embeddings(&s, 2, |i| vec![i as f64, 1.0], |_| vec![0.0, 1.0]);
    let r = run_benchmark(&s.bench, &set, &fast_probe(), "k1");
    assert!(r.row("topic-clf").unwrap().error.as_deref().unwrap().contains("degenerate"));
    assert!(r.row("recency-rgn").unwrap().score.is_some());
}

#[test]
fn influential_positives_have_planted_counts() {
    let s = suite(&small(6));
    let c = &s.corpus;
    let index: HashMap<&str, usize> = c.docs.iter().enumerate().map(|(i, d)| (d.id.as_str(), i)).collect();
    let counts: HashMap<(usize, usize), u32> = c.citations.iter().map(|e| ((e.from, e.to), e.count)).collect();
    let task = s.bench.tasks.iter().find(|t| t.name == "influential-prx").unwrap();
    let Protocol::Rank { queries, metric: RankMetric::Map { threshold: 2 } } = &task.protocol else { panic!() };
    let mut influential = 0;
    for q in queries {
        for (d, g) in &q.candidates {
            let count = counts.get(&(index[q.query.as_str()], index[d.as_str()])).copied();
            match g {
                2 => {
                    influential += 1;
                    assert!(count.unwrap() >= 4);
                }
                1 => assert!(count.unwrap() < 4),
                _ => assert!(count.is_none()),
            }
        }
    }
    assert!(influential > 0);
}

#[test]
fn splits_are_disjoint_and_triplets_capped() {
    let s = suite(&small(8));
    let c = &s.corpus;
    let test_ids: BTreeSet<&str> = c.test_docs().into_iter().map(|i| c.docs[i].id.as_str()).collect();
    let query_ids: BTreeSet<&str> = c.queries.iter().map(|q| q.id.as_str()).collect();
    for t in &s.training {
        let mut per_query: HashMap<QueryRef, usize> = HashMap::new();
        for smp in &t.samples {
            let ids: Vec<&str> = match smp {
                Sample::Labeled { doc, .. } => vec![doc],
                Sample::Triplet { query, pos, neg } => {
                    *per_query.entry(query.clone()).or_default() += 1;
                    match query {
                        QueryRef::Doc(q) => vec![q, pos, neg],
                        QueryRef::Text(_) => vec![pos, neg],
                    }
                }
            };
            assert!(ids.iter().all(|d| !test_ids.contains(d)), "{} trains on a test document", t.spec.name);
        }
        assert!(per_query.values().all(|&n| n <= 5), "{}", t.spec.name);
    }
    for t in &s.bench.tasks {
        let fit = t.protocol.fit_ids();
        let test = t.protocol.test_ids();
        assert!(fit.is_disjoint(&test), "{}", t.name);
        assert!(test.iter().all(|d| test_ids.contains(d) || query_ids.contains(d)), "{}", t.name);
        assert!(fit.iter().all(|d| !test_ids.contains(d)), "{}", t.name);
    }
}

/// Expected average precision of a uniformly random ranking, by simulation.
fn random_ranking_map(lists: &[Vec<u32>], threshold: u32, rng: &mut ChaCha8Rng) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for grades in lists {
        if !grades.iter().any(|&g| g >= threshold) {
            continue;
        }
        let mut sum = 0.0;
        for _ in 0..200 {
            let mut g = grades.clone();
            g.shuffle(rng);
            let (mut hits, mut ap) = (0.0, 0.0);
            for (i, &x) in g.iter().enumerate() {
                if x >= threshold {
                    hits += 1.0;
                    ap += hits / (i + 1) as f64;
                }
            }
            sum += ap / hits;
        }
        total += sum / 200.0;
        n += 1;
    }
    total / n as f64
}

#[test]
fn random_embeddings_score_near_chance() {
    let base = suite(&small(21));
    let mut s = base.clone();
    s.bench.tasks.retain(|t| matches!(t.name.as_str(), "topic-clf" | "recency-rgn" | "citation-prx"));
    let Protocol::Rank { queries, .. } = &s.bench.tasks[2].protocol else { panic!() };
    let lists: Vec<Vec<u32>> = queries.iter().map(|q| q.candidates.iter().map(|c| c.1).collect()).collect();
    let prior = random_ranking_map(&lists, 1, &mut ChaCha8Rng::seed_from_u64(0));
    let k = s.corpus.config.topics as f64;
    let (mut f1, mut tau, mut map) = (0.0, 0.0, 0.0);
    let seeds = 10;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let n = s.documents.len();
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..16).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
        let nd = s.corpus.docs.len();
        let set = embeddings(&s, 16, |i| rows[i].clone(), |q| rows[nd + q].clone());
        let r = run_benchmark(&s.bench, &set, &fast_probe(), "random");
        f1 += r.row("topic-clf").unwrap().raw.unwrap();
        tau += r.row("recency-rgn").unwrap().raw.unwrap();
        map += r.row("citation-prx").unwrap().raw.unwrap();
    }
    let n = seeds as f64;
    assert!((f1 / n - 1.0 / k).abs() < 0.1, "macro-F1 {} vs chance {}", f1 / n, 1.0 / k);
    assert!((tau / n).abs() < 0.1, "tau {}", tau / n);
    assert!((map / n - prior).abs() < 0.05, "MAP {} vs prior {prior}", map / n);
}

#[test]
fn one_hot_topics_classify_perfectly_and_reports_repeat() {
    let mut s = suite(&small(13));
    s.bench.tasks.retain(|t| matches!(t.name.as_str(), "topic-clf" | "keyword-srch" | "reviewer-match"));
    let k = s.corpus.config.topics;
    let topics = s.corpus.topic.clone();
    let query_topics: Vec<usize> = s.corpus.queries.iter().map(|q| q.topic).collect();
    let one_hot = |t: usize| (0..k).map(|j| if j == t { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let set = embeddings(&s, k, |i| one_hot(topics[i]), |q| one_hot(query_topics[q]));
    let a = run_benchmark(&s.bench, &set, &fast_probe(), "oracle");
    assert_eq!(a.row("topic-clf").unwrap().score, Some(100.0));
    let b = run_benchmark(&s.bench, &set, &fast_probe(), "oracle");
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    for row in &a.rows {
        assert!(row.audit.iter().any(|l| l.contains("fixture")), "{}", row.name);
    }
}

#[test]
fn missing_embeddings_fail_only_their_tasks() {
    let mut s = suite(&small(14));
    s.bench.tasks.retain(|t| matches!(t.name.as_str(), "topic-clf" | "recency-rgn" | "keyword-srch"));
    let mut set = embeddings(&s, 3, |i| vec![i as f64, 1.0, 0.5], |q| vec![q as f64, 0.0, 1.0]);
    set.remove(&ControlCode::Clf);
    let first = s.corpus.docs[s.corpus.test_docs()[0]].id.clone();
    set.get_mut(&ControlCode::Rgn).unwrap().rows.remove(&first);
    let r = run_benchmark(&s.bench, &set, &fast_probe(), "partial");
    assert!(r.row("topic-clf").unwrap().error.is_some());
    assert!(r.row("recency-rgn").unwrap().error.as_deref().unwrap().contains(&first));
    assert!(r.row("keyword-srch").unwrap().score.is_some());
    assert_eq!(r.overall_average, r.row("keyword-srch").unwrap().score);
    assert_eq!(r.warnings.len(), 2);
}

#[test]
fn untrained_cross_matrix_is_bounded() {
    let cfg = SynthCorpusConfig { docs_per_topic: 15, train_queries: 16, test_queries: 8, topics: 4, ..small(1) };
    let s = suite(&cfg);
    let enc = EncoderConfig { variant: Variant::Ctrl, ..Default::default() };
    let model = EncoderModel::new(enc, 5).unwrap();
    let set = crate::embeddings::embed_documents(&model, &s.documents, false).unwrap();
    let m = cross_format_matrix(&s.bench, &set, &fast_probe());
    assert_eq!(m.rows.len(), 4);
    assert_eq!(m.rows.iter().map(|r| r.format).collect::<Vec<_>>(), Format::ALL.to_vec());
    for row in &m.rows {
        assert_eq!(row.scores.len(), 4);
        assert!(row.scores.iter().all(|v| v.is_some_and(|v| (0.0..=100.0).contains(&v))), "{row:?}");
    }
}

fn arb_row() -> impl Strategy<Value = TaskRow> {
    (0usize..4, any::<bool>(), prop::option::weighted(0.8, 0.0..100.0f64)).prop_map(|(f, in_train, score)| TaskRow {
        name: "t".into(),
        format: Format::ALL[f],
        in_train,
        metric: "m".into(),
        score,
        raw: score.map(|s| s / 100.0),
        sub_scores: Vec::new(),
        skipped: 0,
        audit: Vec::new(),
        error: score.is_none().then(|| "failed".into()),
    })
}

proptest! {
    #[test]
    fn aggregates_recompute_from_rows(rows in prop::collection::vec(arb_row(), 0..12)) {
        let r = BenchmarkReport::from_rows("p", rows.clone(), Vec::new());
        let ok: Vec<&TaskRow> = rows.iter().filter(|r| r.score.is_some()).collect();
        let avg = |sel: &dyn Fn(&TaskRow) -> bool| {
            let v: Vec<f64> = ok.iter().filter(|r| sel(r)).map(|r| r.score.unwrap()).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => (x - y).abs() < 1e-9,
            (None, None) => true,
            _ => false,
        };
        prop_assert!(close(r.overall_average, avg(&|_| true)));
        prop_assert!(close(r.in_train_average, avg(&|r| r.in_train)));
        prop_assert!(close(r.out_of_train_average, avg(&|r| !r.in_train)));
        for f in Format::ALL {
            prop_assert!(close(r.format_averages.get(&f).copied(), avg(&|r| r.format == f)));
        }
    }
}
