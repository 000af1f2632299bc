use super::*;
use crate::encoder::EncoderConfig;
use crate::objectives::HeadKind;
use crate::tasks::TaskSpec;
use crate::types::Format;
use std::collections::BTreeSet;

#[test]
fn schedule_examples() {
    assert_eq!(lr_schedule(700, 5e-5, 700), 5e-5);
    assert!((lr_schedule(2800, 5e-5, 700) - 2.5e-5).abs() < 1e-12);
    assert_eq!(lr_schedule(1, 5e-5, 700), 5e-5 / 700.0);
    assert!(lr_schedule(699, 5e-5, 700) < lr_schedule(700, 5e-5, 700));
    assert!(lr_schedule(701, 5e-5, 700) < lr_schedule(700, 5e-5, 700));
}

#[test]
fn adamw_examples() {
    let opt = AdamW { weight_decay: 0.0, ..AdamW::default() };
    let mut p = vec![1.5, -2.0];
    let mut s = AdamState::new(2);
    opt.step(&mut p, &[0.0, 0.0], &mut s, 0.1).unwrap();
    assert_eq!(p, [1.5, -2.0]);

    // One step with gradient g: both moments are exactly bias-corrected back to g and g².
    let g = 0.3;
    let mut p = vec![1.0];
    let mut s = AdamState::new(1);
    opt.step(&mut p, &[g], &mut s, 0.01).unwrap();
    let m_hat = (0.1 * g) / (1.0 - 0.9);
    let v_hat = (0.001 * g * g) / (1.0 - 0.999);
    let expected = 1.0 - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
    assert!((p[0] - expected).abs() < 1e-15);
    assert!((p[0] - (1.0 - 0.01)).abs() < 1e-9);

    let decay = AdamW { weight_decay: 0.5, ..AdamW::default() };
    let mut p = vec![2.0];
    let mut s = AdamState::new(1);
    decay.step(&mut p, &[0.0], &mut s, 0.1).unwrap();
    assert_eq!(p[0], 2.0 * (1.0 - 0.1 * 0.5));

    assert!(opt.step(&mut [1.0], &[1.0, 2.0], &mut AdamState::new(1), 0.1).is_err());
}

fn scored(items: &[(&str, f64)]) -> Vec<(String, f64)> {
    items.iter().map(|(a, s)| (a.to_string(), *s)).collect()
}

fn pairs(samples: &[Sample]) -> Vec<(String, String)> {
    samples
        .iter()
        .map(|s| match s {
            Sample::Triplet { pos, neg, .. } => (pos.clone(), neg.clone()),
            _ => unreachable!(),
        })
        .collect()
}

#[test]
fn triplet_sampling_examples() {
    let q = QueryRef::Doc("q".into());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(sample_triplets(&q, &scored(&[("a", 1.0), ("b", 1.0)]), 5, &mut rng).is_empty());
    assert_eq!(pairs(&sample_triplets(&q, &scored(&[("a", 2.0), ("b", 1.0)]), 5, &mut rng)), [("a".into(), "b".into())]);
    let got = pairs(&sample_triplets(&q, &scored(&[("a", 2.0), ("b", 2.0), ("c", 0.0)]), 5, &mut rng));
    let allowed: BTreeSet<(String, String)> = [("a".into(), "c".into()), ("b".into(), "c".into())].into();
    assert_eq!(got.iter().cloned().collect::<BTreeSet<_>>(), allowed);

    let many = scored(&[("a", 3.0), ("b", 2.0), ("c", 1.0), ("d", 0.0), ("e", 0.0)]);
    let first = sample_triplets(&q, &many, 5, &mut ChaCha8Rng::seed_from_u64(9));
    assert_eq!(first.len(), 5);
    assert_eq!(first, sample_triplets(&q, &many, 5, &mut ChaCha8Rng::seed_from_u64(9)));
    let distinct: BTreeSet<_> = pairs(&first).into_iter().collect();
    assert_eq!(distinct.len(), 5);
}

#[test]
fn batcher_splits_equally() {
    assert_eq!(Batcher::new(&[100; 8], 256, 0).unwrap().share(), 32);
    assert_eq!(Batcher::new(&[10], 32, 0).unwrap().share(), 32);
    let b = Batcher::new(&[5, 5, 5], 8, 0).unwrap();
    assert_eq!(b.share(), 2);
    assert!(b.warning().is_some());
    assert!(Batcher::new(&[], 8, 0).is_err());
    assert!(Batcher::new(&[3, 0], 8, 0).is_err());
    assert!(Batcher::new(&[3, 3, 3], 2, 0).is_err());
}

#[test]
fn batcher_epoch_covers_largest_task_and_cycles_small_ones() {
    let sizes = [40, 17, 9, 64];
    let mut b = Batcher::new(&sizes, 32, 3).unwrap();
    assert_eq!(b.steps_per_epoch(), 8);
    let mut seen = vec![Vec::new(); 4];
    for _ in 0..b.steps_per_epoch() {
        let batch = b.next_batch();
        for (t, idx) in batch.iter().enumerate() {
            assert_eq!(idx.len(), 8);
            assert!(idx.iter().all(|&i| i < sizes[t]));
            seen[t].extend_from_slice(idx);
        }
    }
    let mut largest = seen[3].clone();
    largest.sort_unstable();
    assert_eq!(largest, (0..64).collect::<Vec<_>>());
    // The 9-sample task is cycled: each full pass is a permutation.
    for pass in seen[2].chunks(9).filter(|c| c.len() == 9) {
        let mut p = pass.to_vec();
        p.sort_unstable();
        assert_eq!(p, (0..9).collect::<Vec<_>>());
    }
}

fn tiny_encoder(variant: Variant) -> EncoderConfig {
    EncoderConfig {
        vocab_size: 128,
        hidden: 16,
        heads: 2,
        ffn: 32,
        max_len: 16,
        bottleneck: 4,
        pal_rank: 4,
        variant,
        ..Default::default()
    }
}

fn toy_data() -> (DocIndex, Vec<TrainingTask>) {
    let mut docs = DocIndex::new();
    let mut clf = Vec::new();
    let mut rgn = Vec::new();
    let mut prx = Vec::new();
    for i in 0..24 {
        let class = i % 2;
        let word = if class == 0 { "alpha beta" } else { "gamma delta" };
        let id = format!("d{i}");
        docs.insert(id.clone(), Document::new(&id, format!("{word} t{i}"), format!("{word} body")));
        clf.push(Sample::Labeled { doc: id.clone(), label: Label::Class(class) });
        rgn.push(Sample::Labeled { doc: id.clone(), label: Label::Scalar(class as f64 - 0.5) });
        if i >= 2 {
            prx.push(Sample::Triplet {
                query: QueryRef::Doc(id.clone()),
                pos: format!("d{}", i - 2),
                neg: format!("d{}", i - 1),
            });
        }
    }
    let spec = |name: &str, format, objective| TaskSpec {
        name: name.into(),
        format,
        objective,
        train_path: String::new(),
        test_path: String::new(),
        cap: 1000,
    };
    let tasks = vec![
        TrainingTask { spec: spec("clf", Format::Clf, Objective::Multiclass), head: Some(HeadKind::Multiclass(2)), samples: clf },
        TrainingTask { spec: spec("rgn", Format::Rgn, Objective::Regression), head: Some(HeadKind::Regression), samples: rgn },
        TrainingTask { spec: spec("prx", Format::Prx, Objective::Triplet), head: None, samples: prx },
        TrainingTask {
            spec: spec("srch", Format::Srch, Objective::Triplet),
            head: None,
            samples: vec![Sample::Triplet { query: QueryRef::Text("alpha".into()), pos: "d0".into(), neg: "d1".into() }],
        },
    ];
    (docs, tasks)
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        epochs,
        adapter_epochs: epochs,
        fusion_epochs: epochs,
        warmup: 2,
        peak_lr: 5e-3,
        ..TrainConfig::desk()
    }
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let (docs, tasks) = toy_data();
    let m = EncoderModel::new(tiny_encoder(Variant::Ctrl), 1).unwrap();
    let out = train(m.clone(), &tasks, &docs, &quick(0)).unwrap();
    assert_eq!(out.model.hash_params(|_| true), m.hash_params(|_| true));
    assert!(out.trace.is_empty());
}

#[test]
fn classification_loss_decreases() {
    let (docs, tasks) = toy_data();
    let m = EncoderModel::new(tiny_encoder(Variant::ClsOnly), 2).unwrap();
    let cfg = TrainConfig { epochs: 12, ..quick(12) };
    let out = train(m, &tasks[..1], &docs, &cfg).unwrap();
    let first = out.trace.first().unwrap().loss;
    let last: f64 = out.trace.iter().rev().take(3).map(|r| r.loss).sum::<f64>() / 3.0;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn training_is_deterministic() {
    let (docs, tasks) = toy_data();
    let m = EncoderModel::new(tiny_encoder(Variant::Ctrl), 3).unwrap();
    let a = train(m.clone(), &tasks, &docs, &quick(1)).unwrap();
    let b = train(m, &tasks, &docs, &quick(1)).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.model.hash_params(|_| true), b.model.hash_params(|_| true));
    assert_eq!(a.trace.len(), a.steps * tasks.len());
}

#[test]
fn adapter_training_freezes_the_trunk() {
    let (docs, tasks) = toy_data();
    let m = EncoderModel::new(tiny_encoder(Variant::Adapter), 4).unwrap();
    let trunk = |g: ParamGroup| g == ParamGroup::Trunk;
    let adapters = |g: ParamGroup| matches!(g, ParamGroup::Adapter(_));
    let out = train(m.clone(), &tasks, &docs, &quick(1)).unwrap();
    assert_eq!(out.model.hash_params(trunk), m.hash_params(trunk));
    assert_ne!(out.model.hash_params(adapters), m.hash_params(adapters));
}

#[test]
fn fusion_stage_two_freezes_adapters() {
    let (docs, tasks) = toy_data();
    let trunk = EncoderModel::new(tiny_encoder(Variant::ClsOnly), 5).unwrap();
    let mut adapted = trunk.clone();
    adapted.attach(Variant::Adapter, 6).unwrap();
    let stage1 = train(adapted, &tasks, &docs, &quick(1)).unwrap();
    let mut fused = stage1.model.clone();
    fused.attach(Variant::Fusion, 7).unwrap();
    let stage2 = train(fused.clone(), &tasks, &docs, &quick(1)).unwrap();
    let adapters = |g: ParamGroup| matches!(g, ParamGroup::Adapter(_));
    let fusion = |g: ParamGroup| matches!(g, ParamGroup::Fusion(_));
    assert_eq!(stage2.model.hash_params(adapters), fused.hash_params(adapters));
    assert_eq!(stage2.model.hash_params(|g| g == ParamGroup::Trunk), trunk.hash_params(|g| g == ParamGroup::Trunk));
    assert_ne!(stage2.model.hash_params(fusion), fused.hash_params(fusion));

    let both = train_fusion(trunk, &tasks, &docs, &quick(1), 6).unwrap();
    assert_eq!(both.model.hash_params(|_| true), stage2.model.hash_params(|_| true));
    assert_eq!(both.steps, stage1.steps + stage2.steps);
}

#[test]
fn non_finite_loss_aborts_with_task_and_step() {
    let (docs, mut tasks) = toy_data();
    for s in &mut tasks[1].samples {
        if let Sample::Labeled { label, .. } = s {
            *label = Label::Scalar(1e300);
        }
    }
    let m = EncoderModel::new(tiny_encoder(Variant::Ctrl), 1).unwrap();
    match train(m, &tasks, &docs, &quick(1)) {
        Err(TrainError::NonFinite { task, step, .. }) => {
            assert_eq!(task, "rgn");
            assert_eq!(step, 1);
        }
        other => panic!("expected a non-finite abort, got {:?}", other.map(|o| o.steps)),
    }
}

#[test]
fn missing_documents_are_reported() {
    let (docs, mut tasks) = toy_data();
    tasks[0].samples.push(Sample::Labeled { doc: "nope".into(), label: Label::Class(0) });
    let cfg = TrainConfig { task_cap: 1000, ..quick(1) };
    let m = EncoderModel::new(tiny_encoder(Variant::Ctrl), 1).unwrap();
    assert!(matches!(train(m, &tasks[..1], &docs, &cfg), Err(TrainError::MissingDoc(_))));
}

#[test]
fn incompatible_objectives_are_rejected() {
    let (docs, mut tasks) = toy_data();
    tasks[0].spec.objective = Objective::Triplet;
    let m = EncoderModel::new(tiny_encoder(Variant::Ctrl), 1).unwrap();
    assert!(matches!(train(m, &tasks, &docs, &quick(1)), Err(TrainError::Config(_))));
}
