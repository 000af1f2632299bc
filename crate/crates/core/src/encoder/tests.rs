use super::*;
use crate::autodiff::gradcheck::weighted_sum;
use crate::autodiff::Tape;
use crate::types::{ControlCode, Document};

fn small(variant: Variant) -> EncoderConfig {
    EncoderConfig {
        vocab_size: 64,
        hidden: 16,
        heads: 2,
        ffn: 32,
        max_len: 24,
        bottleneck: 4,
        pal_rank: 4,
        variant,
        ..Default::default()
    }
}

fn doc() -> Document {
    Document::new("d1", "sparse retrieval models", "we compare dense and sparse retrievers on scientific text")
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn identical_tokens_give_identical_embeddings() {
    let m = EncoderModel::new(small(Variant::Ctrl), 3).unwrap();
    let a = m.embed(&doc(), ControlCode::Clf, false).unwrap();
    let mut other = doc();
    other.id = "d2".into();
    let b = m.embed(&other, ControlCode::Clf, false).unwrap();
    assert_eq!(a, b);
}

#[test]
fn control_codes_change_the_embedding() {
    let m = EncoderModel::new(small(Variant::Ctrl), 3).unwrap();
    let a = m.embed(&doc(), ControlCode::Clf, false).unwrap();
    let b = m.embed(&doc(), ControlCode::Prx, false).unwrap();
    assert!(max_abs_diff(&a, &b) > 1e-9);
}

#[test]
fn padding_does_not_change_embeddings() {
    for variant in Variant::ALL {
        let cfg = small(variant);
        let m = EncoderModel::new(cfg.clone(), 11).unwrap();
        let seq = tokenize(&doc(), m.lead_for(ControlCode::Rgn), &cfg, false).unwrap();
        assert!(seq.content_len() < seq.ids.len(), "test needs padding");
        let full = m.encode(&seq.ids, Some(ControlCode::Rgn)).unwrap();
        let trimmed = m.encode(seq.trimmed(), Some(ControlCode::Rgn)).unwrap();
        let partial = m.encode(&seq.ids[..seq.content_len() + 3], Some(ControlCode::Rgn)).unwrap();
        assert!(max_abs_diff(&full, &trimmed) <= 1e-9, "{variant}");
        assert!(max_abs_diff(&partial, &trimmed) <= 1e-9, "{variant}");
        assert_eq!(full.len(), cfg.hidden);
    }
}

#[test]
fn embedding_dimension_is_hidden_for_all_variants_and_codes() {
    for variant in Variant::ALL {
        let m = EncoderModel::new(small(variant), 1).unwrap();
        for code in ControlCode::ALL {
            assert_eq!(m.embed(&doc(), code, true).unwrap().len(), 16);
        }
    }
}

fn adapter_closed_form(h: usize, b: usize, l: usize) -> usize {
    // down [h,b] + b, up [b,h] + h, layer-norm gain and bias 2h, per layer
    l * (2 * h * b + b + h + 2 * h)
}

fn pal_closed_form(h: usize, r: usize, l: usize) -> usize {
    // encoder [h,r], decoder [r,h], q/k/v [r,r]
    l * (2 * h * r + 3 * r * r)
}

fn fusion_closed_form(h: usize, l: usize) -> usize {
    l * (3 * h * h + 3 * h)
}

#[test]
fn parameter_counts_match_closed_forms() {
    let cfg = EncoderConfig::default();
    let (h, b, r, l) = (cfg.hidden, cfg.bottleneck, cfg.pal_rank, cfg.layers);
    assert_eq!((h, b, l), (64, 16, 2));
    let count = |v: Variant| EncoderModel::new(EncoderConfig { variant: v, ..cfg.clone() }, 0).unwrap();
    for code in ControlCode::ALL {
        assert_eq!(count(Variant::ClsOnly).param_count(code), 0);
        assert_eq!(count(Variant::Ctrl).param_count(code), 64);
        assert_eq!(count(Variant::Adapter).param_count(code), adapter_closed_form(h, b, l));
        assert_eq!(count(Variant::Adapter).param_count(code), 2 * (2 * 64 * 16 + 16 + 64) + 2 * 2 * 64);
        assert_eq!(count(Variant::Pals).param_count(code), pal_closed_form(h, r, l));
        assert_eq!(count(Variant::Fusion).param_count(code), adapter_closed_form(h, b, l) + fusion_closed_form(h, l));
    }
}

#[test]
fn attaching_twice_is_a_state_error() {
    let mut m = EncoderModel::new(small(Variant::Adapter), 0).unwrap();
    assert!(matches!(m.attach(Variant::Adapter, 1), Err(EncoderError::State(_))));
    assert!(matches!(m.attach(Variant::Ctrl, 1), Err(EncoderError::State(_))));
    m.attach(Variant::Fusion, 1).unwrap();
    assert!(matches!(m.attach(Variant::Fusion, 1), Err(EncoderError::State(_))));
    let mut c = EncoderModel::new(small(Variant::Ctrl), 0).unwrap();
    assert!(c.attach(Variant::Ctrl, 2).is_err());
}

#[test]
fn fusion_on_adapter_model_keeps_adapter_weights() {
    let mut m = EncoderModel::new(small(Variant::Adapter), 0).unwrap();
    let is_adapter = |g: ParamGroup| matches!(g, ParamGroup::Adapter(_));
    let before = m.hash_params(is_adapter);
    m.attach(Variant::Fusion, 9).unwrap();
    assert_eq!(m.hash_params(is_adapter), before);
    assert_eq!(m.variant(), Variant::Fusion);
}

#[test]
fn adapter_models_need_a_route() {
    let m = EncoderModel::new(small(Variant::Pals), 0).unwrap();
    let seq = tokenize(&doc(), Lead::Cls, m.config(), false).unwrap();
    assert!(matches!(m.encode(seq.trimmed(), None), Err(EncoderError::Routing(_))));
    let trunk = EncoderModel::new(small(Variant::ClsOnly), 0).unwrap();
    let coded = tokenize(&doc(), Lead::Code(ControlCode::Clf), trunk.config(), false).unwrap();
    assert!(matches!(trunk.encode(coded.trimmed(), None), Err(EncoderError::Routing(_))));
}

#[test]
fn prx_batch_leaves_other_code_rows_without_gradient() {
    let m = EncoderModel::new(small(Variant::Ctrl), 5).unwrap();
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape, |_| true);
    let mut outs = Vec::new();
    for text in ["first query text", "another document entirely"] {
        let d = Document::new("x", text, "with an abstract");
        let seq = tokenize(&d, Lead::Code(ControlCode::Prx), m.config(), false).unwrap();
        outs.push(m.forward(&mut tape, &vars, seq.trimmed(), Some(ControlCode::Prx)).unwrap());
    }
    let stacked = tape.stack_rows(&outs).unwrap();
    let loss = weighted_sum(&mut tape, stacked).unwrap();
    tape.backward(loss).unwrap();
    for (p, &v) in m.params().iter().zip(&vars) {
        match p.group {
            ParamGroup::Code(ControlCode::Prx) => {
                assert!(tape.grad(v).unwrap().iter().any(|&g| g != 0.0));
            }
            ParamGroup::Code(_) => {
                assert!(tape.grad(v).is_none_or(|g| g.iter().all(|&x| x == 0.0)), "{}", p.name);
            }
            _ => {}
        }
    }
}

#[test]
fn frozen_trunk_gradients_reach_only_the_routed_adapter() {
    for variant in [Variant::Adapter, Variant::Pals] {
        let m = EncoderModel::new(small(variant), 5).unwrap();
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, |g| g != ParamGroup::Trunk);
        let seq = tokenize(&doc(), Lead::Cls, m.config(), false).unwrap();
        let out = m.forward(&mut tape, &vars, seq.trimmed(), Some(ControlCode::Rgn)).unwrap();
        let loss = weighted_sum(&mut tape, out).unwrap();
        tape.backward(loss).unwrap();
        for (p, &v) in m.params().iter().zip(&vars) {
            let nonzero = tape.grad(v).is_some_and(|g| g.iter().any(|&x| x != 0.0));
            let expect = p.group.code() == Some(ControlCode::Rgn);
            if !expect {
                assert!(!nonzero, "{variant}: unexpected gradient on {}", p.name);
            }
        }
    }
}

/// Finite-difference check of the full encoder with respect to a sample of parameters.
#[test]
fn encoder_gradients_match_finite_differences() {
    for variant in Variant::ALL {
        let cfg = EncoderConfig { init_std: 0.3, ..small(variant) };
        let m = EncoderModel::new(cfg.clone(), 21).unwrap();
        let seq = tokenize(&doc(), m.lead_for(ControlCode::Prx), &cfg, false).unwrap();
        let ids = seq.ids[..seq.content_len() + 2].to_vec();
        let loss_of = |model: &EncoderModel| -> f64 {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, |_| false);
            let out = model.forward(&mut tape, &vars, &ids, Some(ControlCode::Prx)).unwrap();
            let l = weighted_sum(&mut tape, out).unwrap();
            tape.value(l).item()
        };
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, |_| true);
        let out = m.forward(&mut tape, &vars, &ids, Some(ControlCode::Prx)).unwrap();
        let l = weighted_sum(&mut tape, out).unwrap();
        tape.backward(l).unwrap();
        let h = 1e-5;
        for (pi, p) in m.params().iter().enumerate() {
            let n = p.value.numel();
            let analytic = tape.grad(vars[pi]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
            for j in [0, n / 2, n - 1] {
                let mut up = m.clone();
                std::sync::Arc::make_mut(&mut up.params_mut()[pi].value).data_mut()[j] += h;
                let mut down = m.clone();
                std::sync::Arc::make_mut(&mut down.params_mut()[pi].value).data_mut()[j] -= h;
                let numeric = (loss_of(&up) - loss_of(&down)) / (2.0 * h);
                let err = (numeric - analytic[j]).abs() / numeric.abs().max(analytic[j].abs()).max(1.0);
                assert!(err < 1e-4, "{variant} {}[{j}]: {numeric} vs {}", p.name, analytic[j]);
            }
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    for variant in [Variant::Ctrl, Variant::Fusion] {
        let m = EncoderModel::new(small(variant), 8).unwrap();
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.hash_params(|_| true), m.hash_params(|_| true));
        assert_eq!(back.variant(), variant);
        let a = m.embed(&doc(), ControlCode::Qry, true).unwrap();
        let b = back.embed(&doc(), ControlCode::Qry, true).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn tampered_checkpoint_fails_reference_check() {
    let m = EncoderModel::new(small(Variant::Ctrl), 8).unwrap();
    let mut ckpt = Checkpoint::from_model(&m).unwrap();
    let w1 = ckpt.params.iter_mut().find(|p| p.name == "layer0.ffn.w1").unwrap();
    w1.data[0] += 0.5;
    assert!(matches!(ckpt.into_model(), Err(EncoderError::Checkpoint(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = EncoderConfig { hidden: 10, heads: 4, ..Default::default() };
    assert!(matches!(EncoderModel::new(bad, 0), Err(EncoderError::Config(_))));
    let short = EncoderConfig { max_len: 3, ..Default::default() };
    assert!(short.validate().is_err());
}
