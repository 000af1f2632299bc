use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::tasks::{QueryRef, Sample};

/// Up to `k` triplets pairing a candidate with one of strictly lower score.
///
/// Pairs are drawn without replacement from all valid (higher, lower) pairs.
pub fn sample_triplets(query: &QueryRef, candidates: &[(String, f64)], k: usize, rng: &mut impl Rng) -> Vec<Sample> {
    let mut pairs = Vec::new();
    for (pos, ps) in candidates {
        for (neg, ns) in candidates {
            if ps > ns && pos != neg {
                pairs.push((pos, neg));
            }
        }
    }
    pairs.shuffle(rng);
    pairs.into_iter().take(k).map(|(p, n)| Sample::Triplet { query: query.clone(), pos: p.clone(), neg: n.clone() }).collect()
}

/// Draws equal shares of every task into each batch.
///
/// Each task walks a shuffled permutation of its samples and reshuffles when
/// it runs out, so small tasks cycle while the largest sets the epoch length.
#[derive(Clone, Debug)]
pub struct Batcher {
    share: usize,
    sizes: Vec<usize>,
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    passes: Vec<u64>,
    seed: u64,
    warning: Option<String>,
}

impl Batcher {
    pub fn new(sizes: &[usize], batch_size: usize, seed: u64) -> Result<Self, TrainError> {
        if sizes.is_empty() {
            return Err(TrainError::Config("no training tasks".into()));
        }
        if let Some(i) = sizes.iter().position(|&s| s == 0) {
            return Err(TrainError::Config(format!("task {i} has no samples")));
        }
        let share = batch_size / sizes.len();
        if share == 0 {
            return Err(TrainError::Config(format!("batch size {batch_size} is smaller than the {} tasks", sizes.len())));
        }
        let warning = (!batch_size.is_multiple_of(sizes.len())).then(|| {
            let msg = format!(
                "batch size {batch_size} is not divisible by {} tasks; using {share} per task ({} per batch)",
                sizes.len(),
                share * sizes.len()
            );
            log::warn!("{msg}");
            msg
        });
        let mut b = Self {
            share,
            sizes: sizes.to_vec(),
            orders: vec![Vec::new(); sizes.len()],
            cursors: vec![0; sizes.len()],
            passes: vec![0; sizes.len()],
            seed,
            warning,
        };
        for t in 0..sizes.len() {
            b.reshuffle(t);
        }
        Ok(b)
    }

    fn reshuffle(&mut self, t: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((t as u64) << 32) | self.passes[t]);
        let mut order: Vec<usize> = (0..self.sizes[t]).collect();
        order.shuffle(&mut rng);
        self.orders[t] = order;
        self.cursors[t] = 0;
        self.passes[t] += 1;
    }

    /// Samples drawn from each task per batch.
    pub fn share(&self) -> usize {
        self.share
    }

    pub fn warning(&self) -> Option<&str> {
        self.warning.as_deref()
    }

    /// Steps needed for the largest task to be seen once.
    pub fn steps_per_epoch(&self) -> usize {
        let largest = *self.sizes.iter().max().expect("non-empty");
        largest.div_ceil(self.share)
    }

    /// Sample indices per task for the next batch.
    pub fn next_batch(&mut self) -> Vec<Vec<usize>> {
        (0..self.sizes.len())
            .map(|t| {
                let mut out = Vec::with_capacity(self.share);
                while out.len() < self.share {
                    if self.cursors[t] == self.orders[t].len() {
                        self.reshuffle(t);
                    }
                    out.push(self.orders[t][self.cursors[t]]);
                    self.cursors[t] += 1;
                }
                out
            })
            .collect()
    }
}
