use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::types::Document;

/// Knobs of the planted-structure corpus. Generation is a pure function of this value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthCorpusConfig {
    /// Topics, arranged on a ring so each has two adjacent topics.
    pub topics: usize,
    pub docs_per_topic: usize,
    /// Words in each topic's pool.
    pub topic_words: usize,
    /// Trailing pool words reserved for held-out search queries.
    pub heldout_keywords: usize,
    /// Chance that a topic word is drawn from an adjacent topic's pool instead.
    pub topic_drift: f64,
    /// Words shared by each pair of adjacent topics.
    pub bridge_words: usize,
    pub noise_words: usize,
    /// Citation communities, assigned independently of topics.
    pub communities: usize,
    pub community_words: usize,
    pub intra_p: f64,
    pub inter_p: f64,
    /// Chance that a document also draws words from an adjacent topic.
    pub secondary_p: f64,
    /// Buckets of the latent recency, each with its own era words.
    pub eras: usize,
    pub era_words: usize,
    pub target_noise: f64,
    pub title_len: usize,
    pub abstract_len: usize,
    pub test_fraction: f64,
    pub train_queries: usize,
    pub test_queries: usize,
    pub query_words: usize,
    pub venues: usize,
    pub seed: u64,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        Self {
            topics: 8,
            docs_per_topic: 150,
            topic_words: 20,
            heldout_keywords: 6,
            topic_drift: 0.2,
            bridge_words: 4,
            noise_words: 200,
            communities: 12,
            community_words: 6,
            intra_p: 0.2,
            inter_p: 0.005,
            secondary_p: 0.3,
            eras: 10,
            era_words: 3,
            target_noise: 0.25,
            title_len: 4,
            abstract_len: 16,
            test_fraction: 0.3,
            train_queries: 300,
            test_queries: 60,
            query_words: 3,
            venues: 6,
            seed: 0,
        }
    }
}

impl SynthCorpusConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.topics == 0 || self.docs_per_topic == 0 || self.communities == 0 {
            return Err("topics, docs_per_topic and communities must be positive".into());
        }
        if self.heldout_keywords + self.query_words > self.topic_words || self.query_words == 0 {
            return Err("topic pools must hold the query and held-out keywords".into());
        }
        for (name, p) in [
            ("intra_p", self.intra_p),
            ("inter_p", self.inter_p),
            ("topic_drift", self.topic_drift),
            ("secondary_p", self.secondary_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} = {p} is not a probability"));
            }
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err("test_fraction must lie in (0,1)".into());
        }
        if self.eras == 0 || self.era_words == 0 || self.noise_words == 0 || self.community_words == 0 {
            return Err("word pools must be non-empty".into());
        }
        if self.title_len < 2 || self.abstract_len < 4 || self.venues == 0 {
            return Err("documents need at least 2 title and 4 abstract words".into());
        }
        Ok(())
    }
}

/// A directed citation with its influence count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Citation {
    pub from: usize,
    pub to: usize,
    pub count: u32,
}

/// A citation cited at least this many times counts as influential.
pub const INFLUENTIAL: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySplit {
    Train,
    Test,
    /// Built from keywords never used by training queries.
    Heldout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchQuery {
    pub id: String,
    pub text: String,
    pub topic: usize,
    pub split: QuerySplit,
    /// Candidate document indices with grades 2 (same topic), 1 (adjacent), 0 (other).
    pub candidates: Vec<(usize, u32)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub config: SynthCorpusConfig,
    pub docs: Vec<Document>,
    pub topic: Vec<usize>,
    pub secondary: Vec<Option<usize>>,
    pub community: Vec<usize>,
    pub recency: Vec<f64>,
    pub target: Vec<f64>,
    pub is_test: Vec<bool>,
    pub citations: Vec<Citation>,
    pub queries: Vec<SearchQuery>,
}

impl SynthCorpus {
    /// Topics adjacent to `k` on the ring (none for a single topic).
    pub fn neighbors(&self, k: usize) -> Vec<usize> {
        ring_neighbors(k, self.config.topics)
    }

    pub fn train_docs(&self) -> Vec<usize> {
        (0..self.docs.len()).filter(|&i| !self.is_test[i]).collect()
    }

    pub fn test_docs(&self) -> Vec<usize> {
        (0..self.docs.len()).filter(|&i| self.is_test[i]).collect()
    }

    /// Relevance of a document to a query on `topic`.
    pub fn topic_grade(&self, topic: usize, doc: usize) -> u32 {
        if self.topic[doc] == topic {
            2
        } else if self.neighbors(topic).contains(&self.topic[doc]) {
            1
        } else {
            0
        }
    }
}

fn ring_neighbors(k: usize, n: usize) -> Vec<usize> {
    match n {
        1 => vec![],
        2 => vec![1 - k],
        _ => vec![(k + n - 1) % n, (k + 1) % n],
    }
}

fn topic_word(k: usize, j: usize) -> String {
    format!("topic{k}w{j}")
}

/// Builds documents, labels, citation graph and search queries from `cfg`.
pub fn generate_corpus(cfg: &SynthCorpusConfig) -> Result<SynthCorpus, String> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k_topics = cfg.topics;
    let n = k_topics * cfg.docs_per_topic;
    let noise = Normal::new(0.0, cfg.target_noise.max(0.0)).map_err(|e| e.to_string())?;

    let mut docs = Vec::with_capacity(n);
    let mut topic = Vec::with_capacity(n);
    let mut secondary = Vec::with_capacity(n);
    let mut community = Vec::with_capacity(n);
    let mut recency = Vec::with_capacity(n);
    let mut target = Vec::with_capacity(n);
    for k in 0..k_topics {
        let neigh = ring_neighbors(k, k_topics);
        for _ in 0..cfg.docs_per_topic {
            let i = docs.len();
            let comm = rng.random_range(0..cfg.communities);
            let sec = if !neigh.is_empty() && rng.random_bool(cfg.secondary_p) { neigh.choose(&mut rng).copied() } else { None };
            let r: f64 = rng.random();
            let era = ((r * cfg.eras as f64) as usize).min(cfg.eras - 1);

            let draw_topic = |rng: &mut ChaCha8Rng, from: usize| {
                let pool_topic = if rng.random_bool(cfg.topic_drift) && !neigh.is_empty() && from == k {
                    *neigh.choose(rng).expect("neighbors")
                } else {
                    from
                };
                topic_word(pool_topic, rng.random_range(0..cfg.topic_words))
            };
            let community_word = |rng: &mut ChaCha8Rng| format!("comm{comm}w{}", rng.random_range(0..cfg.community_words));
            let noise_word = |rng: &mut ChaCha8Rng| format!("noise{}", rng.random_range(0..cfg.noise_words));

            let mut title = vec![draw_topic(&mut rng, k), draw_topic(&mut rng, k), community_word(&mut rng)];
            while title.len() < cfg.title_len {
                title.push(noise_word(&mut rng));
            }
            title.shuffle(&mut rng);

            let mut words = Vec::with_capacity(cfg.abstract_len);
            let share = |f: f64| ((cfg.abstract_len as f64 * f).round() as usize).max(1);
            for _ in 0..share(0.3) {
                words.push(draw_topic(&mut rng, k));
            }
            for _ in 0..share(0.12) {
                let t = sec.unwrap_or(k);
                words.push(draw_topic(&mut rng, t));
            }
            if let Some(&nb) = neigh.choose(&mut rng) {
                let (a, b) = (k.min(nb), k.max(nb));
                if cfg.bridge_words > 0 {
                    words.push(format!("bridge{a}x{b}w{}", rng.random_range(0..cfg.bridge_words)));
                }
            }
            for _ in 0..share(0.25) {
                words.push(community_word(&mut rng));
            }
            for _ in 0..share(0.19) {
                let e = if rng.random_bool(0.8) {
                    era
                } else if rng.random_bool(0.5) {
                    era.saturating_sub(1)
                } else {
                    (era + 1).min(cfg.eras - 1)
                };
                words.push(format!("era{e}w{}", rng.random_range(0..cfg.era_words)));
            }
            while words.len() < cfg.abstract_len {
                words.push(noise_word(&mut rng));
            }
            words.truncate(cfg.abstract_len);
            words.shuffle(&mut rng);

            let mut doc = Document::new(format!("doc{i:05}"), title.join(" "), words.join(" "));
            doc.venue = Some(format!("venue{}", rng.random_range(0..cfg.venues)));
            doc.year = Some(1990 + (r * 30.0).floor() as i32);
            docs.push(doc);
            topic.push(k);
            secondary.push(sec);
            community.push(comm);
            recency.push(r);
            target.push(2.0 * 3f64.sqrt() * (r - 0.5) + noise.sample(&mut rng));
        }
    }

    let mut is_test = vec![false; n];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for &i in order.iter().take((n as f64 * cfg.test_fraction).round() as usize) {
        is_test[i] = true;
    }

    let same_topic = Binomial::new(6, 0.55).map_err(|e| e.to_string())?;
    let cross_topic = Binomial::new(6, 0.1).map_err(|e| e.to_string())?;
    let mut citations = Vec::new();
    for from in 0..n {
        for to in 0..n {
            if from == to {
                continue;
            }
            let p = if community[from] == community[to] { cfg.intra_p } else { cfg.inter_p };
            if rng.random_bool(p) {
                let dist = if topic[from] == topic[to] { &same_topic } else { &cross_topic };
                let count = 1 + dist.sample(&mut rng) as u32;
                citations.push(Citation { from, to, count });
            }
        }
    }

    let train_docs: Vec<usize> = (0..n).filter(|&i| !is_test[i]).collect();
    let test_docs: Vec<usize> = (0..n).filter(|&i| is_test[i]).collect();
    let query_pool = cfg.topic_words - cfg.heldout_keywords;
    let mut queries = Vec::new();
    let groups =
        [(QuerySplit::Train, cfg.train_queries), (QuerySplit::Test, cfg.test_queries), (QuerySplit::Heldout, cfg.test_queries)];
    for (split, count) in groups {
        let pool_docs = if split == QuerySplit::Train { &train_docs } else { &test_docs };
        for q in 0..count {
            let k = q % k_topics;
            let range: Vec<usize> = match split {
                QuerySplit::Heldout => (query_pool..cfg.topic_words).collect(),
                _ => (0..query_pool).collect(),
            };
            let picked: Vec<String> = range.choose_multiple(&mut rng, cfg.query_words).map(|&j| topic_word(k, j)).collect();
            let mut by_grade: [Vec<usize>; 3] = Default::default();
            for &d in pool_docs {
                let g = if topic[d] == k {
                    2
                } else if ring_neighbors(k, k_topics).contains(&topic[d]) {
                    1
                } else {
                    0
                };
                by_grade[g].push(d);
            }
            let mut candidates = Vec::new();
            for (g, want) in [(2usize, 8usize), (1, 6), (0, 6)] {
                for &d in by_grade[g].choose_multiple(&mut rng, want) {
                    candidates.push((d, g as u32));
                }
            }
            candidates.sort_unstable();
            let tag = match split {
                QuerySplit::Train => "train",
                QuerySplit::Test => "test",
                QuerySplit::Heldout => "heldout",
            };
            queries.push(SearchQuery { id: format!("q-{tag}-{q:04}"), text: picked.join(" "), topic: k, split, candidates });
        }
    }

    Ok(SynthCorpus { config: cfg.clone(), docs, topic, secondary, community, recency, target, is_test, citations, queries })
}
