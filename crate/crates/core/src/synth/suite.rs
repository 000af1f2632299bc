use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{QuerySplit, SynthCorpus, INFLUENTIAL};
use crate::objectives::HeadKind;
use crate::tasks::{DocIndex, Label, Objective, QueryRef, Sample, TaskSpec, TrainingTask};
use crate::trainer::sample_triplets;
use crate::types::{Document, Format};

/// Uncited documents added to each citation ranking list.
const NEGATIVES: usize = 10;
/// Training papers per synthetic reviewer.
const REVIEWER_PAPERS: usize = 4;
const REVIEWER_QUERIES: usize = 40;
const CLUSTER_VALIDATION: usize = 100;
const CLUSTER_TEST: usize = 200;
/// Co-citations needed for a pair to count as related, and list sizes.
const COCITED: u32 = 3;
const COCITE_POSITIVES: usize = 5;
const COCITE_NEGATIVES: usize = 20;

/// Ranking candidates of one query, with relevance grades.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankQuery {
    /// Id of a document or of a query pseudo-document.
    pub query: String,
    pub candidates: Vec<(String, u32)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMetric {
    /// Mean average precision with grades ≥ threshold relevant.
    Map {
        threshold: u32,
    },
    Ndcg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Classify {
        classes: usize,
        train: Vec<(String, usize)>,
        test: Vec<(String, usize)>,
        /// Few-shot settings; `None` fits once on the full training pool.
        kshot: Option<Vec<Option<usize>>>,
    },
    Multilabel {
        train: Vec<(String, Vec<bool>)>,
        test: Vec<(String, Vec<bool>)>,
    },
    Regress {
        train: Vec<(String, f64)>,
        test: Vec<(String, f64)>,
    },
    Rank {
        metric: RankMetric,
        queries: Vec<RankQuery>,
    },
    Cluster {
        /// Rows used to pick the merge threshold.
        validation: Vec<(String, usize)>,
        test: Vec<(String, usize)>,
    },
    Reviewers {
        reviewers: Vec<(String, Vec<String>)>,
        /// Query paper and its grade for every reviewer, in reviewer order.
        queries: Vec<(String, Vec<u32>)>,
    },
}

impl Protocol {
    pub fn metric_name(&self) -> &'static str {
        match self {
            Protocol::Classify { kshot: Some(_), .. } => "few-shot macro-F1",
            Protocol::Classify { .. } => "macro-F1",
            Protocol::Multilabel { .. } => "multilabel macro-F1",
            Protocol::Regress { .. } => "Kendall tau",
            Protocol::Rank { metric: RankMetric::Ndcg, .. } => "nDCG",
            Protocol::Rank { .. } => "MAP",
            Protocol::Cluster { .. } => "B3 F1",
            Protocol::Reviewers { .. } => "P@5/P@10 soft+hard",
        }
    }

    /// Document ids scored by the evaluation (excluding the fitting rows).
    pub fn test_ids(&self) -> BTreeSet<&str> {
        match self {
            Protocol::Classify { test, .. } | Protocol::Cluster { test, .. } => test.iter().map(|(d, _)| d.as_str()).collect(),
            Protocol::Multilabel { test, .. } => test.iter().map(|(d, _)| d.as_str()).collect(),
            Protocol::Regress { test, .. } => test.iter().map(|(d, _)| d.as_str()).collect(),
            Protocol::Rank { queries, .. } => queries
                .iter()
                .flat_map(|q| std::iter::once(q.query.as_str()).chain(q.candidates.iter().map(|(d, _)| d.as_str())))
                .collect(),
            Protocol::Reviewers { queries, .. } => queries.iter().map(|(d, _)| d.as_str()).collect(),
        }
    }

    /// Document ids used to fit probes, thresholds or reviewer profiles.
    pub fn fit_ids(&self) -> BTreeSet<&str> {
        match self {
            Protocol::Classify { train, .. } => train.iter().map(|(d, _)| d.as_str()).collect(),
            Protocol::Cluster { validation, .. } => validation.iter().map(|(d, _)| d.as_str()).collect(),
            Protocol::Multilabel { train, .. } => train.iter().map(|(d, _)| d.as_str()).collect(),
            Protocol::Regress { train, .. } => train.iter().map(|(d, _)| d.as_str()).collect(),
            Protocol::Rank { .. } => BTreeSet::new(),
            Protocol::Reviewers { reviewers, .. } => reviewers.iter().flat_map(|(_, p)| p.iter().map(String::as_str)).collect(),
        }
    }
}

/// An evaluation task: its format, whether a training task shares its data, and its protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub name: String,
    pub format: Format,
    pub in_train: bool,
    /// Used as the format's row of the cross-format matrix.
    pub sampled: bool,
    /// Set when the task cannot be scored (e.g. a single class).
    pub degenerate: Option<String>,
    pub protocol: Protocol,
}

/// The evaluation tasks of a suite and the warnings raised while building them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Benchmark {
    pub tasks: Vec<EvalTask>,
    pub warnings: Vec<String>,
}

impl Benchmark {
    pub fn sampled(&self, format: Format) -> Option<&EvalTask> {
        self.tasks.iter().find(|t| t.sampled && t.format == format)
    }

    pub fn task(&self, name: &str) -> Option<&EvalTask> {
        self.tasks.iter().find(|t| t.name == name)
    }
}

/// Documents, training tasks and evaluation tasks derived from one corpus.
#[derive(Clone, Debug)]
pub struct SynthSuite {
    pub corpus: SynthCorpus,
    /// Corpus documents followed by one pseudo-document per search query.
    pub documents: Vec<Document>,
    pub index: DocIndex,
    pub training: Vec<TrainingTask>,
    pub bench: Benchmark,
}

fn spec(name: &str, format: Format, objective: Objective, cap: usize) -> TaskSpec {
    TaskSpec {
        name: name.into(),
        format,
        objective,
        train_path: format!("{name}.train.jsonl"),
        test_path: format!("{name}.test.jsonl"),
        cap,
    }
}

/// Derives the in-train and held-out tasks. Every task fits on training-split
/// documents and scores on test-split documents.
pub fn build_tasks(corpus: &SynthCorpus, triplets_per_query: usize, cap: usize, seed: u64) -> SynthSuite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a5c);
    let cfg = &corpus.config;
    let docs = &corpus.docs;
    let id = |i: usize| docs[i].id.clone();
    let train_docs = corpus.train_docs();
    let test_docs = corpus.test_docs();
    let mut warnings = Vec::new();

    let mut documents = docs.clone();
    for q in &corpus.queries {
        documents.push(Document::query(q.id.clone(), q.text.clone()));
    }
    let index: DocIndex = documents.iter().map(|d| (d.id.clone(), d.clone())).collect();

    let k = cfg.topics;
    let topic_degenerate = (k < 2).then(|| format!("{k} topic: classification needs at least two classes"));
    let super_k = k.div_ceil(2);
    let super_degenerate = (super_k < 2).then(|| format!("{super_k} supertopic: classification needs at least two classes"));
    for w in topic_degenerate.iter().chain(&super_degenerate) {
        warnings.push(w.clone());
    }

    let mut outgoing: HashMap<usize, Vec<(usize, u32)>> = HashMap::new();
    for c in &corpus.citations {
        outgoing.entry(c.from).or_default().push((c.to, c.count));
    }
    let grade_of = |count: u32| if count >= INFLUENTIAL { 2 } else { 1 };
    let citation_lists = |pool: &[usize], rng: &mut ChaCha8Rng| -> Vec<(usize, Vec<(usize, u32)>)> {
        let members: BTreeSet<usize> = pool.iter().copied().collect();
        let mut lists = Vec::new();
        for &q in pool {
            let cited: Vec<(usize, u32)> = outgoing
                .get(&q)
                .map(|v| v.iter().filter(|(t, _)| members.contains(t)).map(|&(t, c)| (t, grade_of(c))).collect())
                .unwrap_or_default();
            if cited.is_empty() {
                continue;
            }
            let cited_set: BTreeSet<usize> = cited.iter().map(|c| c.0).collect();
            let uncited: Vec<usize> = pool.iter().copied().filter(|&d| d != q && !cited_set.contains(&d)).collect();
            let mut cands = cited;
            cands.extend(uncited.choose_multiple(rng, NEGATIVES).map(|&d| (d, 0)));
            cands.sort_unstable();
            lists.push((q, cands));
        }
        lists
    };

    // Training tasks use the training split only.
    let mut training = Vec::new();
    training.push(TrainingTask {
        spec: spec("topic-clf", Format::Clf, Objective::Multiclass, cap),
        head: Some(HeadKind::Multiclass(k.max(1))),
        samples: train_docs.iter().map(|&i| Sample::Labeled { doc: id(i), label: Label::Class(corpus.topic[i]) }).collect(),
    });
    training.push(TrainingTask {
        spec: spec("recency-rgn", Format::Rgn, Objective::Regression, cap),
        head: Some(HeadKind::Regression),
        samples: train_docs.iter().map(|&i| Sample::Labeled { doc: id(i), label: Label::Scalar(corpus.target[i]) }).collect(),
    });
    let mut prx_samples = Vec::new();
    for (q, cands) in citation_lists(&train_docs, &mut rng) {
        let scored: Vec<(String, f64)> = cands.iter().map(|&(d, g)| (id(d), g as f64)).collect();
        prx_samples.extend(sample_triplets(&QueryRef::Doc(id(q)), &scored, triplets_per_query, &mut rng));
    }
    training.push(TrainingTask {
        spec: spec("citation-prx", Format::Prx, Objective::Triplet, cap),
        head: None,
        samples: prx_samples,
    });
    let mut srch_samples = Vec::new();
    for q in corpus.queries.iter().filter(|q| q.split == QuerySplit::Train) {
        let scored: Vec<(String, f64)> = q.candidates.iter().map(|&(d, g)| (id(d), g as f64)).collect();
        srch_samples.extend(sample_triplets(&QueryRef::Text(q.text.clone()), &scored, triplets_per_query, &mut rng));
    }
    training.push(TrainingTask {
        spec: spec("keyword-srch", Format::Srch, Objective::Triplet, cap),
        head: None,
        samples: srch_samples,
    });

    let labeled = |pool: &[usize], f: &dyn Fn(usize) -> usize| pool.iter().map(|&i| (id(i), f(i))).collect::<Vec<_>>();
    let scalar = |pool: &[usize], f: &dyn Fn(usize) -> f64| pool.iter().map(|&i| (id(i), f(i))).collect::<Vec<_>>();
    let topic = |i: usize| corpus.topic[i];
    let supertopic = |i: usize| corpus.topic[i] / 2;
    let fields = |i: usize| {
        let mut v = vec![false; k];
        v[corpus.topic[i]] = true;
        if let Some(s) = corpus.secondary[i] {
            v[s] = true;
        }
        v
    };
    let rank_queries = |lists: Vec<(usize, Vec<(usize, u32)>)>| {
        lists
            .into_iter()
            .map(|(q, c)| RankQuery { query: id(q), candidates: c.into_iter().map(|(d, g)| (id(d), g)).collect() })
            .collect::<Vec<_>>()
    };
    let test_citations = citation_lists(&test_docs, &mut rng);
    let search = |split: QuerySplit| {
        corpus
            .queries
            .iter()
            .filter(|q| q.split == split)
            .map(|q| RankQuery { query: q.id.clone(), candidates: q.candidates.iter().map(|&(d, g)| (id(d), g)).collect() })
            .collect::<Vec<_>>()
    };

    let mut eval = vec![
        EvalTask {
            name: "topic-clf".into(),
            format: Format::Clf,
            in_train: true,
            sampled: true,
            degenerate: topic_degenerate.clone(),
            protocol: Protocol::Classify {
                classes: k,
                train: labeled(&train_docs, &topic),
                test: labeled(&test_docs, &topic),
                kshot: None,
            },
        },
        EvalTask {
            name: "recency-rgn".into(),
            format: Format::Rgn,
            in_train: true,
            sampled: true,
            degenerate: None,
            protocol: Protocol::Regress {
                train: scalar(&train_docs, &|i| corpus.target[i]),
                test: scalar(&test_docs, &|i| corpus.target[i]),
            },
        },
        EvalTask {
            name: "citation-prx".into(),
            format: Format::Prx,
            in_train: true,
            sampled: true,
            degenerate: None,
            protocol: Protocol::Rank { metric: RankMetric::Map { threshold: 1 }, queries: rank_queries(test_citations.clone()) },
        },
        EvalTask {
            name: "influential-prx".into(),
            format: Format::Prx,
            in_train: true,
            sampled: false,
            degenerate: None,
            protocol: Protocol::Rank { metric: RankMetric::Map { threshold: 2 }, queries: rank_queries(test_citations) },
        },
        EvalTask {
            name: "keyword-srch".into(),
            format: Format::Srch,
            in_train: true,
            sampled: true,
            degenerate: None,
            protocol: Protocol::Rank { metric: RankMetric::Ndcg, queries: search(QuerySplit::Test) },
        },
        EvalTask {
            name: "supertopic-fewshot".into(),
            format: Format::Clf,
            in_train: false,
            sampled: false,
            degenerate: super_degenerate,
            protocol: Protocol::Classify {
                classes: super_k,
                train: labeled(&train_docs, &supertopic),
                test: labeled(&test_docs, &supertopic),
                kshot: Some(vec![Some(5), Some(10), None]),
            },
        },
        EvalTask {
            name: "field-multilabel".into(),
            format: Format::Clf,
            in_train: false,
            sampled: false,
            degenerate: topic_degenerate,
            protocol: Protocol::Multilabel {
                train: train_docs.iter().map(|&i| (id(i), fields(i))).collect(),
                test: test_docs.iter().map(|&i| (id(i), fields(i))).collect(),
            },
        },
        EvalTask {
            name: "year-rgn".into(),
            format: Format::Rgn,
            in_train: false,
            sampled: false,
            degenerate: None,
            protocol: Protocol::Regress {
                train: scalar(&train_docs, &|i| docs[i].year.unwrap_or_default() as f64),
                test: scalar(&test_docs, &|i| docs[i].year.unwrap_or_default() as f64),
            },
        },
    ];

    // Co-citation: two test documents cited together by some document.
    let test_set: BTreeSet<usize> = test_docs.iter().copied().collect();
    let mut cocited: BTreeMap<usize, BTreeMap<usize, u32>> = BTreeMap::new();
    for targets in outgoing.values() {
        let t: Vec<usize> = targets.iter().map(|x| x.0).filter(|d| test_set.contains(d)).collect();
        for &a in &t {
            for &b in &t {
                if a != b {
                    *cocited.entry(a).or_default().entry(b).or_default() += 1;
                }
            }
        }
    }
    let mut cocite_queries = Vec::new();
    for (&q, partners) in &cocited {
        let mut strong: Vec<(usize, u32)> = partners.iter().filter(|(_, &n)| n >= COCITED).map(|(&d, &n)| (d, n)).collect();
        if strong.is_empty() {
            continue;
        }
        strong.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        strong.truncate(COCITE_POSITIVES);
        let mut cands: Vec<(usize, u32)> = strong.into_iter().map(|(d, _)| (d, 1)).collect();
        let unrelated: Vec<usize> = test_docs.iter().copied().filter(|d| *d != q && !partners.contains_key(d)).collect();
        cands.extend(unrelated.choose_multiple(&mut rng, COCITE_NEGATIVES).map(|&d| (d, 0)));
        cands.sort_unstable();
        cocite_queries.push((q, cands));
    }
    eval.push(EvalTask {
        name: "cocite-prx".into(),
        format: Format::Prx,
        in_train: false,
        sampled: false,
        degenerate: None,
        protocol: Protocol::Rank { metric: RankMetric::Map { threshold: 1 }, queries: rank_queries(cocite_queries) },
    });

    let mut val_pool = train_docs.clone();
    val_pool.shuffle(&mut rng);
    val_pool.truncate(CLUSTER_VALIDATION);
    val_pool.sort_unstable();
    let mut cluster_pool = test_docs.clone();
    cluster_pool.shuffle(&mut rng);
    cluster_pool.truncate(CLUSTER_TEST);
    cluster_pool.sort_unstable();
    let community = |i: usize| corpus.community[i];
    eval.push(EvalTask {
        name: "community-b3".into(),
        format: Format::Prx,
        in_train: false,
        sampled: false,
        degenerate: None,
        protocol: Protocol::Cluster { validation: labeled(&val_pool, &community), test: labeled(&cluster_pool, &community) },
    });

    let mut profiles: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for &i in &train_docs {
        profiles.entry((corpus.community[i], corpus.topic[i])).or_default().push(i);
    }
    let mut reviewers = Vec::new();
    let mut reviewer_keys = Vec::new();
    for (&(c, t), papers) in &profiles {
        let mut papers = papers.clone();
        papers.shuffle(&mut rng);
        papers.truncate(REVIEWER_PAPERS);
        papers.sort_unstable();
        reviewers.push((format!("reviewer-c{c}-t{t}"), papers.into_iter().map(id).collect()));
        reviewer_keys.push((c, t));
    }
    let mut review_queries = test_docs.clone();
    review_queries.shuffle(&mut rng);
    review_queries.truncate(REVIEWER_QUERIES);
    review_queries.sort_unstable();
    let review_queries = review_queries
        .into_iter()
        .map(|q| {
            let grades = reviewer_keys
                .iter()
                .map(|&(c, t)| match (c == corpus.community[q], t == corpus.topic[q]) {
                    (true, true) => 3,
                    (true, false) => 2,
                    (false, true) => 1,
                    (false, false) => 0,
                })
                .collect();
            (id(q), grades)
        })
        .collect();
    eval.push(EvalTask {
        name: "reviewer-match".into(),
        format: Format::Prx,
        in_train: false,
        sampled: false,
        degenerate: None,
        protocol: Protocol::Reviewers { reviewers, queries: review_queries },
    });
    eval.push(EvalTask {
        name: "heldout-query-srch".into(),
        format: Format::Srch,
        in_train: false,
        sampled: false,
        degenerate: None,
        protocol: Protocol::Rank { metric: RankMetric::Ndcg, queries: search(QuerySplit::Heldout) },
    });

    SynthSuite { corpus: corpus.clone(), documents, index, training, bench: Benchmark { tasks: eval, warnings } }
}
