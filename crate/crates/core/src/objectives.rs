//! Training losses and the linear task heads they sit on.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::gradcheck::GradCase;
use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

/// Default triplet margin.
pub const TRIPLET_MARGIN: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("invalid loss input: {0}")]
    Input(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Multiclass(usize),
    Multilabel(usize),
    Regression,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Multiclass(k) | HeadKind::Multilabel(k) => k,
            HeadKind::Regression => 1,
        }
    }
}

/// Linear map from embeddings to task outputs. Used only while training.
#[derive(Clone, Debug)]
pub struct TaskHead {
    pub kind: HeadKind,
    pub weight: Arc<Tensor>,
    pub bias: Arc<Tensor>,
}

impl TaskHead {
    pub fn new(kind: HeadKind, hidden: usize, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = kind.outputs();
        Self { kind, weight: Arc::new(Tensor::randn(&[hidden, k], std, &mut rng)), bias: Arc::new(Tensor::zeros(&[k])) }
    }

    pub fn bind(&self, tape: &mut Tape) -> [Var; 2] {
        [tape.leaf_shared(Arc::clone(&self.weight), true), tape.leaf_shared(Arc::clone(&self.bias), true)]
    }

    /// Logits `[n,K]` (or predictions `[n]` for regression) from embeddings `[n,H]`.
    pub fn apply(&self, tape: &mut Tape, bound: [Var; 2], emb: Var) -> Result<Var, AutodiffError> {
        let z = tape.matmul(emb, bound[0])?;
        let z = tape.add(z, bound[1])?;
        match self.kind {
            HeadKind::Regression => tape.col(z, 0),
            _ => Ok(z),
        }
    }
}

/// Mean negative log-probability of the true class.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var, ObjectiveError> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(ObjectiveError::Input(format!("logits {shape:?} for {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= shape[1]) {
        return Err(ObjectiveError::Input(format!("label {bad} outside 0..{}", shape[1])));
    }
    let lp = tape.log_softmax(logits);
    let picked = tape.pick_per_row(lp, labels)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

/// Mean over all `n·K` entries of the sigmoid cross-entropy, computed as `softplus(z) − y·z`.
pub fn bce_multilabel(tape: &mut Tape, logits: Var, labels: &[Vec<bool>]) -> Result<Var, ObjectiveError> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || labels.iter().any(|r| r.len() != shape[1]) {
        return Err(ObjectiveError::Input(format!("logits {shape:?} do not match label matrix")));
    }
    let y: Vec<f64> = labels.iter().flatten().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let y = tape.constant(Tensor::new(shape, y)?);
    let sp = tape.softplus(logits);
    let yz = tape.mul(logits, y)?;
    let per = tape.sub(sp, yz)?;
    Ok(tape.mean(per))
}

pub fn mse(tape: &mut Tape, pred: Var, target: &[f64]) -> Result<Var, ObjectiveError> {
    let shape = tape.value(pred).shape().to_vec();
    if shape != [target.len()] {
        return Err(ObjectiveError::Input(format!("predictions {shape:?} for {} targets", target.len())));
    }
    let t = tape.constant(Tensor::vector(target.to_vec()));
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Query, positive and negative embeddings, each `[n,H]`.
#[derive(Clone, Copy, Debug)]
pub struct TripletBatch {
    pub query: Var,
    pub positive: Var,
    pub negative: Var,
    pub margin: f64,
}

/// Mean over triplets of `max(d(q,p⁺) − d(q,p⁻) + margin, 0)` with Euclidean `d`.
pub fn triplet_margin(tape: &mut Tape, batch: TripletBatch) -> Result<Var, ObjectiveError> {
    if !(batch.margin > 0.0) {
        return Err(ObjectiveError::Input(format!("margin must be positive, got {}", batch.margin)));
    }
    let s = tape.value(batch.query).shape().to_vec();
    for v in [batch.positive, batch.negative] {
        if tape.value(v).shape() != s.as_slice() || s.len() != 2 {
            return Err(ObjectiveError::Input(format!("triplet blocks {s:?} and {:?} differ", tape.value(v).shape())));
        }
    }
    let dp = tape.sub(batch.query, batch.positive)?;
    let dp = tape.row_norm(dp);
    let dn = tape.sub(batch.query, batch.negative)?;
    let dn = tape.row_norm(dn);
    let gap = tape.sub(dp, dn)?;
    let gap = tape.add_scalar(gap, batch.margin);
    let hinge = tape.relu(gap);
    Ok(tape.mean(hinge))
}

/// Finite-difference cases for the four losses on random small batches.
pub fn loss_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1055);
    let n = rng.random_range(1..=4);
    let k = rng.random_range(2..=4);
    let h = rng.random_range(2..=4);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let multi: Vec<Vec<bool>> = (0..n).map(|_| (0..k).map(|_| rng.random_bool(0.5)).collect()).collect();
    let targets: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let logits = Tensor::randn(&[n, k], 1.5, &mut rng);
    let preds = Tensor::randn(&[n], 1.0, &mut rng);
    // Keep the hinge away from its kink so central differences stay on one side.
    let (q, p, neg) = loop {
        let q = Tensor::randn(&[n, h], 1.0, &mut rng);
        let p = Tensor::randn(&[n, h], 1.0, &mut rng);
        let neg = Tensor::randn(&[n, h], 1.0, &mut rng);
        let dist = |a: &Tensor, b: &Tensor, i: usize| -> f64 {
            a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        let clear = (0..n).all(|i| {
            let g = dist(&q, &p, i) - dist(&q, &neg, i) + TRIPLET_MARGIN;
            g.abs() > 1e-3 && dist(&q, &p, i) > 1e-3 && dist(&q, &neg, i) > 1e-3
        });
        if clear {
            break (q, p, neg);
        }
    };
    let lift = |e: ObjectiveError| match e {
        ObjectiveError::Autodiff(a) => a,
        ObjectiveError::Input(m) => AutodiffError::Invalid(m),
    };
    vec![
        GradCase {
            name: "cross_entropy",
            inputs: vec![logits.clone()],
            build: Box::new(move |t: &mut Tape, v: &[Var]| cross_entropy(t, v[0], &labels).map_err(lift)),
        },
        GradCase {
            name: "bce_multilabel",
            inputs: vec![logits],
            build: Box::new(move |t: &mut Tape, v: &[Var]| bce_multilabel(t, v[0], &multi).map_err(lift)),
        },
        GradCase {
            name: "mse",
            inputs: vec![preds],
            build: Box::new(move |t: &mut Tape, v: &[Var]| mse(t, v[0], &targets).map_err(lift)),
        },
        GradCase {
            name: "triplet_margin",
            inputs: vec![q, p, neg],
            build: Box::new(move |t: &mut Tape, v: &[Var]| {
                let batch = TripletBatch { query: v[0], positive: v[1], negative: v[2], margin: TRIPLET_MARGIN };
                triplet_margin(t, batch).map_err(lift)
            }),
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::FD_STEP;
    use proptest::prelude::*;

    fn triplet_value(q: &[f64], p: &[f64], n: &[f64]) -> f64 {
        let h = q.len();
        let mut tape = Tape::new();
        let mut leaf = |x: &[f64]| tape.leaf(Tensor::matrix(1, h, x.to_vec()).unwrap(), true);
        let (q, p, n) = (leaf(q), leaf(p), leaf(n));
        let l = triplet_margin(&mut tape, TripletBatch { query: q, positive: p, negative: n, margin: 1.0 }).unwrap();
        tape.value(l).item()
    }

    fn ce_value(logits: Tensor, labels: &[usize]) -> f64 {
        let mut tape = Tape::new();
        let z = tape.leaf(logits, true);
        let l = cross_entropy(&mut tape, z, labels).unwrap();
        tape.value(l).item()
    }

    fn bce_value(logits: Tensor, labels: &[Vec<bool>]) -> f64 {
        let mut tape = Tape::new();
        let z = tape.leaf(logits, true);
        let l = bce_multilabel(&mut tape, z, labels).unwrap();
        tape.value(l).item()
    }

    fn mse_value(pred: Vec<f64>, target: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(pred), true);
        let l = mse(&mut tape, p, target).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn triplet_worked_examples() {
        assert_eq!(triplet_value(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(triplet_value(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 2.0]), 0.0);
        assert_eq!(triplet_value(&[0.0, 0.0], &[0.0, 2.0], &[1.0, 0.0]), 2.0);
    }

    #[test]
    fn triplet_hinge_has_zero_gradient_at_kink() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(), true);
        let p = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(), true);
        let n = tape.leaf(Tensor::matrix(1, 2, vec![0.0, 2.0]).unwrap(), true);
        let l = triplet_margin(&mut tape, TripletBatch { query: q, positive: p, negative: n, margin: 1.0 }).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        tape.backward(l).unwrap();
        assert!(tape.grad(q).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cross_entropy_values() {
        assert!((ce_value(Tensor::matrix(1, 4, vec![0.3; 4]).unwrap(), &[2]) - 4f64.ln()).abs() < 1e-12);
        let e = std::f64::consts::E;
        let expected = -(e / (e + 1.0)).ln();
        assert!((ce_value(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(), &[0]) - expected).abs() < 1e-12);
        let confident = ce_value(Tensor::matrix(1, 3, vec![60.0, 0.0, 0.0]).unwrap(), &[0]);
        assert!(confident < 1e-20);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(), true);
        assert!(matches!(cross_entropy(&mut tape, z, &[2]), Err(ObjectiveError::Input(_))));
    }

    #[test]
    fn bce_values_and_stability() {
        let ln2 = 2f64.ln();
        let labels = vec![vec![true, false, true]];
        assert!((bce_value(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap(), &labels) - ln2).abs() < 1e-12);
        let big = bce_value(Tensor::matrix(1, 1, vec![20.0]).unwrap(), &[vec![true]]);
        assert!(big.is_finite() && big < 1e-8);
        let huge = bce_value(Tensor::matrix(1, 1, vec![800.0]).unwrap(), &[vec![false]]);
        assert!((huge - 800.0).abs() < 1e-9);
        let softplus1 = (1.0 + 1f64.exp()).ln();
        assert!((bce_value(Tensor::matrix(1, 1, vec![1.0]).unwrap(), &[vec![false]]) - softplus1).abs() < 1e-12);
        assert!((softplus1 - 1.3133).abs() < 1e-4);
    }

    #[test]
    fn mse_values() {
        assert_eq!(mse_value(vec![1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(mse_value(vec![0.0, 0.0], &[1.0, 3.0]), 5.0);
        let base = mse_value(vec![0.5, -1.0, 2.0], &[1.0, 3.0, -2.0]);
        let scaled = mse_value(vec![1.5, -3.0, 6.0], &[3.0, 9.0, -6.0]);
        assert!((scaled - 9.0 * base).abs() < 1e-12);
    }

    #[test]
    fn losses_match_finite_differences() {
        for seed in 0..20 {
            for case in loss_cases(seed) {
                let r = case.run(FD_STEP).unwrap();
                assert!(r.passed(), "{} seed {seed}: {}", r.name, r.max_rel_error);
            }
        }
    }

    #[test]
    fn head_shapes() {
        let mut tape = Tape::new();
        let emb = tape.leaf(Tensor::matrix(3, 4, vec![0.1; 12]).unwrap(), false);
        for (kind, shape) in [(HeadKind::Multiclass(5), vec![3, 5]), (HeadKind::Regression, vec![3])] {
            let head = TaskHead::new(kind, 4, 0.1, 1);
            let b = head.bind(&mut tape);
            let out = head.apply(&mut tape, b, emb).unwrap();
            assert_eq!(tape.value(out).shape(), shape.as_slice());
        }
    }

    fn rotate(v: &[f64], c: f64, s: f64) -> Vec<f64> {
        v.chunks(2).flat_map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]]).collect()
    }

    proptest! {
        #[test]
        fn triplet_is_rotation_invariant(
            q in prop::collection::vec(-3.0f64..3.0, 2),
            p in prop::collection::vec(-3.0f64..3.0, 2),
            n in prop::collection::vec(-3.0f64..3.0, 2),
            angle in 0.0f64..std::f64::consts::TAU,
        ) {
            let (s, c) = angle.sin_cos();
            let base = triplet_value(&q, &p, &n);
            let rot = triplet_value(&rotate(&q, c, s), &rotate(&p, c, s), &rotate(&n, c, s));
            prop_assert!((base - rot).abs() < 1e-9);
            prop_assert!(base >= 0.0);
        }

        #[test]
        fn losses_are_non_negative(z in prop::collection::vec(-30.0f64..30.0, 6), y in prop::collection::vec(any::<bool>(), 6)) {
            let t = Tensor::matrix(2, 3, z.clone()).unwrap();
            prop_assert!(ce_value(t.clone(), &[0, 2]) >= 0.0);
            let labels = vec![y[..3].to_vec(), y[3..].to_vec()];
            prop_assert!(bce_value(t, &labels) >= 0.0);
            prop_assert!(mse_value(z[..3].to_vec(), &z[3..]) >= 0.0);
        }
    }
}
