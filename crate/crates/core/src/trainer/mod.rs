//! Multi-task training with task-heterogeneous batches.
//!
//! Every step draws the same number of samples from each task, evaluates the
//! per-task mean losses on independent tapes (in parallel, reduced in a fixed
//! order), averages them across tasks and applies one AdamW update.

mod batching;
mod optim;

pub use batching::{sample_triplets, Batcher};
pub use optim::{lr_schedule, AdamState, AdamW};

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{tokenize, EncoderError, EncoderModel, ParamGroup, Variant};
use crate::objectives::{bce_multilabel, cross_entropy, mse, triplet_margin, ObjectiveError, TaskHead, TripletBatch};
use crate::tasks::{DocIndex, Label, Objective, QueryRef, Sample, TrainingTask};
use crate::types::{ControlCode, Document};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("unknown document `{0}`")]
    MissingDoc(String),
    #[error("non-finite loss {loss} on task `{task}` at step {step}")]
    NonFinite { task: String, step: usize, loss: f64 },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

impl From<crate::autodiff::AutodiffError> for TrainError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        TrainError::Encoder(e.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Epochs of joint training (CLS_ONLY, CTRL, PALS).
    pub epochs: usize,
    /// Epochs of adapter-only training (ADAPTER, first FUSION stage).
    pub adapter_epochs: usize,
    /// Epochs of fusion-only training (second FUSION stage).
    pub fusion_epochs: usize,
    pub peak_lr: f64,
    pub warmup: usize,
    pub optimizer: AdamW,
    pub margin: f64,
    pub triplets_per_query: usize,
    /// Per-task sample cap.
    pub task_cap: usize,
    pub with_metadata: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Full-scale settings.
    pub fn paper() -> Self {
        Self {
            batch_size: 256,
            epochs: 2,
            adapter_epochs: 6,
            fusion_epochs: 4,
            peak_lr: 5e-5,
            warmup: 700,
            optimizer: AdamW::default(),
            margin: 1.0,
            triplets_per_query: 5,
            task_cap: 600_000,
            with_metadata: false,
            seed: 0,
        }
    }

    /// Small settings that train the miniature encoder from scratch in minutes.
    pub fn desk() -> Self {
        Self {
            batch_size: 32,
            epochs: 3,
            adapter_epochs: 4,
            fusion_epochs: 2,
            peak_lr: 3e-3,
            warmup: 50,
            task_cap: 960,
            ..Self::paper()
        }
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.warmup == 0 {
            return bad("warmup must be at least 1");
        }
        if self.task_cap == 0 || self.triplets_per_query == 0 {
            return bad("caps must be at least 1");
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return bad("peak_lr must be positive");
        }
        if !(self.margin > 0.0) {
            return bad("margin must be positive");
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || o.weight_decay < 0.0 {
            return bad("optimizer betas must lie in [0,1), eps > 0, weight_decay ≥ 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub task: String,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: EncoderModel,
    /// Parameters at the end of the epoch with the lowest mean batch loss.
    pub best: EncoderModel,
    pub trace: Vec<LossRecord>,
    pub steps: usize,
}

/// Which parameter groups a variant trains.
pub fn trainable_groups(variant: Variant) -> fn(ParamGroup) -> bool {
    match variant {
        Variant::ClsOnly | Variant::Ctrl | Variant::Pals => |_| true,
        Variant::Adapter => |g| matches!(g, ParamGroup::Adapter(_)),
        Variant::Fusion => |g| matches!(g, ParamGroup::Fusion(_)),
    }
}

fn epochs_for(variant: Variant, cfg: &TrainConfig) -> usize {
    match variant {
        Variant::ClsOnly | Variant::Ctrl | Variant::Pals => cfg.epochs,
        Variant::Adapter => cfg.adapter_epochs,
        Variant::Fusion => cfg.fusion_epochs,
    }
}

/// Samples per tape; fixed so results do not depend on the thread count.
const CHUNK: usize = 4;

struct Chunk<'a> {
    task: usize,
    samples: Vec<&'a Sample>,
    weight: f64,
}

struct ChunkResult {
    /// Unweighted mean loss of the chunk's samples.
    loss: f64,
    weight: f64,
    grads: Vec<Option<Vec<f64>>>,
    head: Option<[Vec<f64>; 2]>,
}

struct Step<'a> {
    model: &'a EncoderModel,
    tasks: &'a [TrainingTask],
    heads: &'a [Option<TaskHead>],
    docs: &'a DocIndex,
    trainable: fn(ParamGroup) -> bool,
    cfg: &'a TrainConfig,
}

impl Step<'_> {
    fn doc(&self, id: &str) -> Result<&Document, TrainError> {
        self.docs.get(id).ok_or_else(|| TrainError::MissingDoc(id.to_string()))
    }

    fn encode(&self, tape: &mut Tape, vars: &[Var], doc: &Document, code: ControlCode) -> Result<Var, TrainError> {
        let seq = tokenize(doc, self.model.lead_for(code), self.model.config(), self.cfg.with_metadata)?;
        Ok(self.model.forward(tape, vars, seq.trimmed(), Some(code))?)
    }

    fn run(&self, chunk: &Chunk) -> Result<ChunkResult, TrainError> {
        let task = &self.tasks[chunk.task];
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape, self.trainable);
        let format = task.spec.format;
        let (loss, head_vars) = if task.spec.objective == Objective::Triplet {
            let (mut q, mut p, mut n) = (Vec::new(), Vec::new(), Vec::new());
            for s in &chunk.samples {
                let Sample::Triplet { query, pos, neg } = s else {
                    return Err(TrainError::Config(format!("task `{}` mixes sample kinds", task.spec.name)));
                };
                let qv = match query {
                    QueryRef::Doc(id) => self.encode(&mut tape, &vars, self.doc(id)?, format.query_code())?,
                    QueryRef::Text(text) => {
                        self.encode(&mut tape, &vars, &Document::query("query", text.clone()), format.query_code())?
                    }
                };
                q.push(qv);
                p.push(self.encode(&mut tape, &vars, self.doc(pos)?, format.doc_code())?);
                n.push(self.encode(&mut tape, &vars, self.doc(neg)?, format.doc_code())?);
            }
            let batch = TripletBatch {
                query: tape.stack_rows(&q)?,
                positive: tape.stack_rows(&p)?,
                negative: tape.stack_rows(&n)?,
                margin: self.cfg.margin,
            };
            (triplet_margin(&mut tape, batch)?, None)
        } else {
            let head = self.heads[chunk.task].as_ref().expect("labeled tasks carry a head");
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for s in &chunk.samples {
                let Sample::Labeled { doc, label } = s else {
                    return Err(TrainError::Config(format!("task `{}` mixes sample kinds", task.spec.name)));
                };
                rows.push(self.encode(&mut tape, &vars, self.doc(doc)?, format.doc_code())?);
                labels.push(label);
            }
            let emb = tape.stack_rows(&rows)?;
            let hv = head.bind(&mut tape);
            let out = head.apply(&mut tape, hv, emb)?;
            let loss = match task.spec.objective {
                Objective::Multiclass => {
                    let y: Vec<usize> = labels.iter().map(|l| if let Label::Class(c) = l { *c } else { usize::MAX }).collect();
                    cross_entropy(&mut tape, out, &y)?
                }
                Objective::Multilabel => {
                    let y: Vec<Vec<bool>> =
                        labels.iter().map(|l| if let Label::Multi(v) = l { v.clone() } else { Vec::new() }).collect();
                    bce_multilabel(&mut tape, out, &y)?
                }
                _ => {
                    let y: Vec<f64> = labels.iter().map(|l| if let Label::Scalar(v) = l { *v } else { f64::NAN }).collect();
                    mse(&mut tape, out, &y)?
                }
            };
            (loss, Some(hv))
        };
        let value = tape.value(loss).item();
        let weighted = tape.scale(loss, chunk.weight);
        tape.backward(weighted)?;
        let grads = vars
            .iter()
            .zip(self.model.params())
            .map(|(&v, p)| if (self.trainable)(p.group) { tape.take_grad(v) } else { None })
            .collect();
        let head = head_vars.map(|[w, b]| {
            let gw = tape.take_grad(w).unwrap_or_default();
            let gb = tape.take_grad(b).unwrap_or_default();
            [gw, gb]
        });
        Ok(ChunkResult { loss: value, weight: chunk.weight, grads, head })
    }
}

fn add_into(acc: &mut Option<Vec<f64>>, g: Option<Vec<f64>>) {
    match (acc.as_mut(), g) {
        (Some(a), Some(g)) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
        (None, Some(g)) => *acc = Some(g),
        _ => {}
    }
}

/// Trains `model` on `tasks` under the regime of its variant.
///
/// CLS_ONLY, CTRL and PALS update every parameter; ADAPTER updates only the
/// format adapters; FUSION updates only the fusion layers (its second stage,
/// see [`train_fusion`]). Task heads are created fresh and discarded.
pub fn train(
    mut model: EncoderModel,
    tasks: &[TrainingTask],
    docs: &DocIndex,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(TrainError::Config("no training tasks".into()));
    }
    for t in tasks {
        t.validate().map_err(TrainError::Config)?;
    }
    let variant = model.variant();
    let trainable = trainable_groups(variant);
    let epochs = epochs_for(variant, cfg);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pools: Vec<Vec<&Sample>> = tasks
        .iter()
        .map(|t| {
            let cap = t.spec.cap.min(cfg.task_cap);
            let mut pool: Vec<&Sample> = t.samples.iter().collect();
            if pool.len() > cap {
                pool.shuffle(&mut rng);
                pool.truncate(cap);
            }
            pool
        })
        .collect();
    let sizes: Vec<usize> = pools.iter().map(Vec::len).collect();
    let mut batcher = Batcher::new(&sizes, cfg.batch_size, cfg.seed.wrapping_add(1))?;
    let share = batcher.share();
    let steps_per_epoch = batcher.steps_per_epoch();

    let hidden = model.hidden();
    let init_std = model.config().init_std;
    let mut heads: Vec<Option<TaskHead>> = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| t.head.map(|k| TaskHead::new(k, hidden, init_std, cfg.seed.wrapping_add(100 + i as u64))))
        .collect();
    let mut head_state: Vec<Option<[AdamState; 2]>> =
        heads.iter().map(|h| h.as_ref().map(|h| [AdamState::new(h.weight.numel()), AdamState::new(h.bias.numel())])).collect();
    let mut state: Vec<Option<AdamState>> =
        model.params().iter().map(|p| trainable(p.group).then(|| AdamState::new(p.value.numel()))).collect();

    let n_tasks = tasks.len() as f64;
    let mut trace = Vec::new();
    let mut best = (f64::INFINITY, model.clone());
    let mut step = 0;
    for epoch in 0..epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..steps_per_epoch {
            step += 1;
            let lr = lr_schedule(step, cfg.peak_lr, cfg.warmup);
            let picks = batcher.next_batch();
            let mut chunks = Vec::new();
            for (t, idx) in picks.iter().enumerate() {
                for part in idx.chunks(CHUNK) {
                    chunks.push(Chunk {
                        task: t,
                        samples: part.iter().map(|&i| pools[t][i]).collect(),
                        weight: part.len() as f64 / (share as f64 * n_tasks),
                    });
                }
            }
            let ctx = Step { model: &model, tasks, heads: &heads, docs, trainable, cfg };
            let results = chunks.par_iter().map(|c| ctx.run(c)).collect::<Result<Vec<_>, _>>()?;

            let mut task_loss = vec![0.0; tasks.len()];
            let mut grads: Vec<Option<Vec<f64>>> = vec![None; model.params().len()];
            let mut head_grads: Vec<Option<[Vec<f64>; 2]>> = vec![None; tasks.len()];
            for (c, r) in chunks.iter().zip(results) {
                task_loss[c.task] += r.loss * r.weight * n_tasks;
                for (acc, g) in grads.iter_mut().zip(r.grads) {
                    add_into(acc, g);
                }
                if let Some([gw, gb]) = r.head {
                    match &mut head_grads[c.task] {
                        Some([aw, ab]) => {
                            aw.iter_mut().zip(gw).for_each(|(x, y)| *x += y);
                            ab.iter_mut().zip(gb).for_each(|(x, y)| *x += y);
                        }
                        slot => *slot = Some([gw, gb]),
                    }
                }
            }
            for (t, &loss) in task_loss.iter().enumerate() {
                if !loss.is_finite() {
                    return Err(TrainError::NonFinite { task: tasks[t].spec.name.clone(), step, loss });
                }
                trace.push(LossRecord { step, task: tasks[t].spec.name.clone(), loss, lr });
            }
            epoch_loss += task_loss.iter().sum::<f64>() / n_tasks;

            for ((p, g), s) in model.params_mut().iter_mut().zip(grads).zip(state.iter_mut()) {
                if let (Some(g), Some(s)) = (g, s.as_mut()) {
                    cfg.optimizer.step(Arc::make_mut(&mut p.value).data_mut(), &g, s, lr)?;
                }
            }
            for ((h, g), s) in heads.iter_mut().zip(head_grads).zip(head_state.iter_mut()) {
                if let (Some(h), Some([gw, gb]), Some([sw, sb])) = (h.as_mut(), g, s.as_mut()) {
                    cfg.optimizer.step(Arc::make_mut(&mut h.weight).data_mut(), &gw, sw, lr)?;
                    cfg.optimizer.step(Arc::make_mut(&mut h.bias).data_mut(), &gb, sb, lr)?;
                }
            }
        }
        let mean = epoch_loss / steps_per_epoch as f64;
        log::info!("{variant} epoch {} of {epochs}: mean batch loss {mean:.5}", epoch + 1);
        if mean < best.0 {
            best = (mean, model.clone());
        }
    }
    let best = if epochs == 0 { model.clone() } else { best.1 };
    Ok(TrainOutcome { model, best, trace, steps: step })
}

/// Two-stage FUSION training: adapters on the frozen trunk, then fusion
/// layers on the frozen trunk and adapters. Step numbers continue across stages.
pub fn train_fusion(
    mut model: EncoderModel,
    tasks: &[TrainingTask],
    docs: &DocIndex,
    cfg: &TrainConfig,
    attach_seed: u64,
) -> Result<TrainOutcome, TrainError> {
    if model.variant() == Variant::ClsOnly {
        model.attach(Variant::Adapter, attach_seed)?;
    }
    if model.variant() != Variant::Adapter {
        return Err(TrainError::Config(format!("fusion training starts from a trunk or adapter model, got {}", model.variant())));
    }
    let stage1 = train(model, tasks, docs, cfg)?;
    let mut fused = stage1.model;
    fused.attach(Variant::Fusion, attach_seed.wrapping_add(1))?;
    let mut stage2 = train(fused, tasks, docs, cfg)?;
    for r in &mut stage2.trace {
        r.step += stage1.steps;
    }
    let mut trace = stage1.trace;
    trace.extend(stage2.trace);
    Ok(TrainOutcome { model: stage2.model, best: stage2.best, trace, steps: stage1.steps + stage2.steps })
}

#[cfg(test)]
mod tests;
