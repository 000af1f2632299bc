//! Linear probes on frozen embeddings.
//!
//! Classifiers are one-vs-rest hinge-loss SVMs, regressors use the
//! ε-insensitive loss; both minimize `‖w‖²/2 + C·Σ loss` by dual
//! coordinate descent, visiting rows in a seeded random order each epoch.
//! One-vs-rest classifiers weight each binary problem's positive and negative
//! rows to equal total cost.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::{kendall_tau_b, macro_f1, multilabel_macro_f1, MetricError};

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("degenerate probe input: {0}")]
    Degenerate(String),
    #[error("invalid probe config: {0}")]
    Config(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub c_grid: Vec<f64>,
    pub val_fraction: f64,
    pub epochs: usize,
    /// Width of the insensitive band of the regression loss, in target standard deviations.
    pub svr_epsilon: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { c_grid: vec![0.01, 0.1, 1.0, 10.0, 100.0], val_fraction: 0.2, epochs: 5000, svr_epsilon: 0.0, seed: 0 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.c_grid.is_empty() || self.c_grid.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(ProbeError::Config("C grid must be non-empty and positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(ProbeError::Config(format!("validation fraction {} outside (0,1)", self.val_fraction)));
        }
        if self.epochs == 0 {
            return Err(ProbeError::Config("epochs must be positive".into()));
        }
        Ok(())
    }
}

const CONVERGED: f64 = 1e-10;

/// Weight vector with the bias stored last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Vec<f64>,
}

impl Linear {
    pub fn score(&self, x: &[f64]) -> f64 {
        let d = self.w.len() - 1;
        x.iter().zip(&self.w[..d]).map(|(a, b)| a * b).sum::<f64>() + self.w[d]
    }
}

enum Loss<'a> {
    /// Signs in {−1, +1}.
    Hinge(&'a [f64]),
    /// Targets and band half-width.
    Insensitive(&'a [f64], f64),
}

/// Dual coordinate descent on `‖w‖²/2 + Σ Cᵢ·lossᵢ`; the bias is folded
/// into `w` through a constant unit feature.
fn descend(x: &[&[f64]], loss: Loss, c: &[f64], epochs: usize, seed: u64) -> Linear {
    let n = x.len();
    let d = x[0].len();
    let q: Vec<f64> = x.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>() + 1.0).collect();
    let mut w = vec![0.0; d + 1];
    let mut alpha = vec![0.0; n];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut violation = 0.0f64;
        for &i in &order {
            let row = x[i];
            let f = row.iter().zip(&w[..d]).map(|(a, b)| a * b).sum::<f64>() + w[d];
            let old = alpha[i];
            let (new, sign) = match loss {
                Loss::Hinge(s) => ((old - (s[i] * f - 1.0) / q[i]).clamp(0.0, c[i]), s[i]),
                Loss::Insensitive(y, eps) => {
                    // Proximal step on the |β|·ε term.
                    let u = old - (f - y[i]) / q[i];
                    let shrunk = u.signum() * (u.abs() - eps / q[i]).max(0.0);
                    (shrunk.clamp(-c[i], c[i]), 1.0)
                }
            };
            let delta = new - old;
            if delta != 0.0 {
                alpha[i] = new;
                let step = delta * sign;
                for (wj, v) in w[..d].iter_mut().zip(row) {
                    *wj += step * v;
                }
                w[d] += step;
                violation = violation.max(delta.abs() * q[i]);
            }
        }
        if violation < CONVERGED {
            break;
        }
    }
    Linear { w }
}

/// Deterministic train/validation split of `0..n`.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn pick<'a>(x: &'a [Vec<f64>], idx: &[usize]) -> Vec<&'a [f64]> {
    idx.iter().map(|&i| x[i].as_slice()).collect()
}

fn check_rows(x: &[Vec<f64>], n_labels: usize) -> Result<(), ProbeError> {
    if x.is_empty() || x.len() != n_labels {
        return Err(ProbeError::Degenerate(format!("{} rows for {} labels", x.len(), n_labels)));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d || r.iter().any(|v| !v.is_finite())) {
        return Err(ProbeError::Degenerate("rows must be finite and equally sized".into()));
    }
    Ok(())
}

/// Scans the C grid in ascending order and keeps the first best validation score.
fn select_c(grid: &[f64], score: impl Fn(f64) -> Result<f64, ProbeError> + Sync) -> Result<(f64, f64), ProbeError> {
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let scores = grid.par_iter().map(|&c| score(c)).collect::<Result<Vec<_>, _>>()?;
    let mut best = (grid[0], scores[0]);
    for (&c, &s) in grid.iter().zip(&scores).skip(1) {
        if s > best.1 {
            best = (c, s);
        }
    }
    Ok(best)
}

/// One-vs-rest linear classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSvc {
    pub classes: usize,
    pub c: f64,
    pub models: Vec<Linear>,
}

impl LinearSvc {
    pub fn decision(&self, x: &[f64]) -> Vec<f64> {
        self.models.iter().map(|m| m.score(x)).collect()
    }

    /// Class with the largest one-vs-rest score.
    pub fn predict(&self, x: &[f64]) -> usize {
        let s = self.decision(x);
        let mut best = 0;
        for k in 1..s.len() {
            if s[k] > s[best] {
                best = k;
            }
        }
        best
    }

    /// Labels with positive one-vs-rest score.
    pub fn predict_multi(&self, x: &[f64]) -> Vec<bool> {
        self.decision(x).into_iter().map(|s| s > 0.0).collect()
    }
}

/// Per-row `C` that gives the positive and negative rows equal total weight.
fn balanced(signs: &[f64], c: f64) -> Vec<f64> {
    let n = signs.len() as f64;
    let pos = signs.iter().filter(|&&v| v > 0.0).count() as f64;
    let neg = n - pos;
    signs
        .iter()
        .map(|&v| {
            let own = if v > 0.0 { pos } else { neg };
            if pos == 0.0 || neg == 0.0 {
                c
            } else {
                c * n / (2.0 * own)
            }
        })
        .collect()
}

fn fit_ovr(
    x: &[&[f64]],
    positive: &(dyn Fn(usize, usize) -> bool + Sync),
    classes: usize,
    c: f64,
    epochs: usize,
    seed: u64,
) -> Vec<Linear> {
    (0..classes)
        .into_par_iter()
        .map(|k| {
            let s: Vec<f64> = (0..x.len()).map(|i| if positive(i, k) { 1.0 } else { -1.0 }).collect();
            descend(x, Loss::Hinge(&s), &balanced(&s, c), epochs, seed)
        })
        .collect()
}

/// Multiclass one-vs-rest SVM with C chosen by validation macro-F1, refit on all rows.
pub fn fit_linear_svc(x: &[Vec<f64>], y: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<LinearSvc, ProbeError> {
    cfg.validate()?;
    check_rows(x, y.len())?;
    if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
        return Err(ProbeError::Degenerate(format!("label {bad} outside {classes} classes")));
    }
    let present = (0..classes).filter(|k| y.contains(k)).count();
    if present < 2 {
        return Err(ProbeError::Degenerate("need at least two classes".into()));
    }
    let (train, val) = split_indices(x.len(), cfg.val_fraction, cfg.seed);
    let xt = pick(x, &train);
    let xv = pick(x, &val);
    let yv: Vec<usize> = val.iter().map(|&i| y[i]).collect();
    let (c, _) = select_c(&cfg.c_grid, |c| {
        let models = fit_ovr(&xt, &|i, k| y[train[i]] == k, classes, c, cfg.epochs, cfg.seed);
        let svc = LinearSvc { classes, c, models };
        let pred: Vec<usize> = xv.iter().map(|r| svc.predict(r)).collect();
        Ok(macro_f1(&pred, &yv, classes)?)
    })?;
    let all = pick(x, &(0..x.len()).collect::<Vec<_>>());
    let models = fit_ovr(&all, &|i, k| y[i] == k, classes, c, cfg.epochs, cfg.seed);
    Ok(LinearSvc { classes, c, models })
}

/// Multi-label one-vs-rest SVM with C chosen by validation macro-F1 over labels.
pub fn fit_multilabel_svc(x: &[Vec<f64>], y: &[Vec<bool>], cfg: &ProbeConfig) -> Result<LinearSvc, ProbeError> {
    cfg.validate()?;
    check_rows(x, y.len())?;
    let classes = y[0].len();
    if classes == 0 || y.iter().any(|r| r.len() != classes) {
        return Err(ProbeError::Degenerate("inconsistent label space".into()));
    }
    let (train, val) = split_indices(x.len(), cfg.val_fraction, cfg.seed);
    let xt = pick(x, &train);
    let xv = pick(x, &val);
    let yv: Vec<Vec<bool>> = val.iter().map(|&i| y[i].clone()).collect();
    let (c, _) = select_c(&cfg.c_grid, |c| {
        let models = fit_ovr(&xt, &|i, k| y[train[i]][k], classes, c, cfg.epochs, cfg.seed);
        let svc = LinearSvc { classes, c, models };
        let pred: Vec<Vec<bool>> = xv.iter().map(|r| svc.predict_multi(r)).collect();
        Ok(multilabel_macro_f1(&pred, &yv)?)
    })?;
    let all = pick(x, &(0..x.len()).collect::<Vec<_>>());
    let models = fit_ovr(&all, &|i, k| y[i][k], classes, c, cfg.epochs, cfg.seed);
    Ok(LinearSvc { classes, c, models })
}

/// Linear ε-insensitive regressor. Targets are standardized before fitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSvr {
    pub c: f64,
    pub model: Linear,
    pub mean: f64,
    pub std: f64,
}

impl LinearSvr {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.model.score(x) * self.std + self.mean
    }
}

fn standardize(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let std = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    (mean, std)
}

fn fit_svr_once(x: &[&[f64]], y: &[f64], c: f64, cfg: &ProbeConfig) -> LinearSvr {
    let (mean, std) = standardize(y);
    let std = if std > 0.0 { std } else { 1.0 };
    let z: Vec<f64> = y.iter().map(|v| (v - mean) / std).collect();
    LinearSvr { c, model: descend(x, Loss::Insensitive(&z, cfg.svr_epsilon), &vec![c; x.len()], cfg.epochs, cfg.seed), mean, std }
}

/// Regression probe with C chosen by validation Kendall τ-b, refit on all rows.
pub fn fit_linear_svr(x: &[Vec<f64>], y: &[f64], cfg: &ProbeConfig) -> Result<LinearSvr, ProbeError> {
    cfg.validate()?;
    check_rows(x, y.len())?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::Degenerate("non-finite target".into()));
    }
    if y.iter().all(|&v| v == y[0]) {
        return Err(ProbeError::Degenerate("constant targets".into()));
    }
    let (train, val) = split_indices(x.len(), cfg.val_fraction, cfg.seed);
    let xt = pick(x, &train);
    let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
    let yv: Vec<f64> = val.iter().map(|&i| y[i]).collect();
    let (c, _) = select_c(&cfg.c_grid, |c| {
        let m = fit_svr_once(&xt, &yt, c, cfg);
        let pred: Vec<f64> = val.iter().map(|&i| m.predict(&x[i])).collect();
        Ok(kendall_tau_b(&pred, &yv)?.unwrap_or(-1.0))
    })?;
    let all = pick(x, &(0..x.len()).collect::<Vec<_>>());
    Ok(fit_svr_once(&all, y, c, cfg))
}

/// Outcome of a few-shot evaluation: one score per setting and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KShotResult {
    /// `None` is the full training pool.
    pub settings: Vec<Option<usize>>,
    pub sub_scores: Vec<f64>,
    pub score: f64,
    pub warnings: Vec<String>,
}

/// Samples `k` training rows per class (seeded), fits a classifier and scores
/// macro-F1 × 100 on the fixed test rows; repeats for each setting.
#[allow(clippy::too_many_arguments)]
pub fn kshot_eval(
    x: &[Vec<f64>],
    y: &[usize],
    classes: usize,
    train: &[usize],
    test: &[usize],
    settings: &[Option<usize>],
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<KShotResult, ProbeError> {
    if test.is_empty() {
        return Err(ProbeError::Config("empty test split".into()));
    }
    if settings.is_empty() {
        return Err(ProbeError::Config("no few-shot settings".into()));
    }
    let mut warnings = Vec::new();
    let mut sub_scores = Vec::with_capacity(settings.len());
    for (si, setting) in settings.iter().enumerate() {
        let rows: Vec<usize> = match setting {
            None => train.to_vec(),
            Some(k) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(si as u64));
                let mut chosen = Vec::new();
                for class in 0..classes {
                    let mut pool: Vec<usize> = train.iter().copied().filter(|&i| y[i] == class).collect();
                    if pool.len() < *k {
                        warnings.push(format!("class {class} has {} training rows, fewer than k={k}", pool.len()));
                    }
                    pool.shuffle(&mut rng);
                    chosen.extend(pool.into_iter().take(*k));
                }
                chosen.sort_unstable();
                chosen
            }
        };
        let xs: Vec<Vec<f64>> = rows.iter().map(|&i| x[i].clone()).collect();
        let ys: Vec<usize> = rows.iter().map(|&i| y[i]).collect();
        let svc = fit_linear_svc(&xs, &ys, classes, &ProbeConfig { seed: cfg.seed.wrapping_add(si as u64), ..cfg.clone() })?;
        let pred: Vec<usize> = test.iter().map(|&i| svc.predict(&x[i])).collect();
        let gold: Vec<usize> = test.iter().map(|&i| y[i]).collect();
        sub_scores.push(100.0 * macro_f1(&pred, &gold, classes)?);
    }
    let score = sub_scores.iter().sum::<f64>() / sub_scores.len() as f64;
    Ok(KShotResult { settings: settings.to_vec(), sub_scores, score, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let centers = [[3.0, 0.0], [-3.0, 0.0], [0.0, 3.0]];
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let k = i % 3;
            x.push(vec![centers[k][0] + noise.sample(&mut rng), centers[k][1] + noise.sample(&mut rng)]);
            y.push(k);
        }
        (x, y)
    }

    #[test]
    fn separable_blobs_are_classified_perfectly() {
        let (x, y) = blobs(90, 1);
        let svc = fit_linear_svc(&x, &y, 3, &ProbeConfig::default()).unwrap();
        let pred: Vec<usize> = x.iter().map(|r| svc.predict(r)).collect();
        assert_eq!(macro_f1(&pred, &y, 3).unwrap(), 1.0);
    }

    #[test]
    fn single_class_is_degenerate() {
        let x = vec![vec![1.0], vec![2.0], vec![3.0]];
        assert!(matches!(fit_linear_svc(&x, &[0, 0, 0], 2, &ProbeConfig::default()), Err(ProbeError::Degenerate(_))));
        assert!(matches!(fit_linear_svr(&x, &[1.0, 1.0, 1.0], &ProbeConfig::default()), Err(ProbeError::Degenerate(_))));
    }

    #[test]
    fn duplicated_training_rows_match_doubled_c() {
        let (x, y) = blobs(30, 2);
        let cfg = ProbeConfig { c_grid: vec![1.0], ..Default::default() };
        let all: Vec<&[f64]> = x.iter().map(|r| r.as_slice()).collect();
        let doubled: Vec<&[f64]> = all.iter().chain(all.iter()).copied().collect();
        let s: Vec<f64> = y.iter().map(|&k| if k == 0 { 1.0 } else { -1.0 }).collect();
        let s2: Vec<f64> = s.iter().chain(s.iter()).copied().collect();
        let a = descend(&all, Loss::Hinge(&s), &balanced(&s, 2.0), cfg.epochs, 0);
        let b = descend(&doubled, Loss::Hinge(&s2), &balanced(&s2, 1.0), cfg.epochs, 0);
        for (u, v) in a.w.iter().zip(&b.w) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn class_permutation_does_not_change_predictions() {
        let (x, y) = blobs(60, 3);
        let perm = [2, 0, 1];
        let yp: Vec<usize> = y.iter().map(|&k| perm[k]).collect();
        let cfg = ProbeConfig::default();
        let a = fit_linear_svc(&x, &y, 3, &cfg).unwrap();
        let b = fit_linear_svc(&x, &yp, 3, &cfg).unwrap();
        for r in &x {
            assert_eq!(perm[a.predict(r)], b.predict(r));
        }
    }

    #[test]
    fn realizable_regression_ranks_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let y: Vec<f64> = x.iter().map(|r| 2.5 * r[0] - 1.0).collect();
        let svr = fit_linear_svr(&x, &y, &ProbeConfig::default()).unwrap();
        let pred: Vec<f64> = x.iter().map(|r| svr.predict(r)).collect();
        assert_eq!(kendall_tau_b(&pred, &y).unwrap(), Some(1.0));
        let shifted: Vec<f64> = y.iter().map(|v| v + 7.0).collect();
        let svr2 = fit_linear_svr(&x, &shifted, &ProbeConfig::default()).unwrap();
        let pred2: Vec<f64> = x.iter().map(|r| svr2.predict(r)).collect();
        assert_eq!(kendall_tau_b(&pred2, &y).unwrap(), Some(1.0));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (t, v) = split_indices(50, 0.2, 9);
        assert_eq!((t.len(), v.len()), (40, 10));
        assert!(t.iter().all(|i| !v.contains(i)));
        assert_eq!(split_indices(50, 0.2, 9), (t, v));
    }

    #[test]
    fn kshot_uses_fixed_test_split() {
        let (x, y) = blobs(120, 5);
        let (train, test) = split_indices(120, 0.25, 77);
        let cfg = ProbeConfig { epochs: 100, ..Default::default() };
        let full = kshot_eval(&x, &y, 3, &train, &test, &[None], 1, &cfg).unwrap();
        let svc = fit_linear_svc(
            &train.iter().map(|&i| x[i].clone()).collect::<Vec<_>>(),
            &train.iter().map(|&i| y[i]).collect::<Vec<_>>(),
            3,
            &cfg,
        )
        .unwrap();
        let pred: Vec<usize> = test.iter().map(|&i| svc.predict(&x[i])).collect();
        let gold: Vec<usize> = test.iter().map(|&i| y[i]).collect();
        assert_eq!(full.score, 100.0 * macro_f1(&pred, &gold, 3).unwrap());
        let a = kshot_eval(&x, &y, 3, &train, &test, &[Some(5), Some(10), None], 1, &cfg).unwrap();
        assert_eq!(a.sub_scores.len(), 3);
        assert!((a.score - a.sub_scores.iter().sum::<f64>() / 3.0).abs() < 1e-12);
        assert!(matches!(kshot_eval(&x, &y, 3, &train, &[], &[None], 1, &cfg), Err(ProbeError::Config(_))));
        let clipped = kshot_eval(&x, &y, 3, &train, &test, &[Some(1000)], 1, &cfg).unwrap();
        assert_eq!(clipped.warnings.len(), 3);
    }
}
