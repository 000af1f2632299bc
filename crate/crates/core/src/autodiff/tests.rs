use super::gradcheck::{self, FD_STEP};
use super::*;

fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, data.to_vec()).unwrap()
}

#[test]
fn matmul_examples() {
    let mut t = Tape::new();
    let i = t.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let b = t.constant(m(2, 2, &[2.0, 3.0, 4.0, 5.0]));
    let y = t.matmul(i, b).unwrap();
    assert_eq!(t.value(y).data(), &[2.0, 3.0, 4.0, 5.0]);

    let a = t.constant(m(1, 2, &[1.0, 2.0]));
    let c = t.constant(m(2, 1, &[3.0, 4.0]));
    let y = t.matmul(a, c).unwrap();
    assert_eq!(t.value(y).data(), &[11.0]);

    let z = t.constant(Tensor::zeros(&[2, 3]));
    let any = t.constant(m(3, 2, &[1.0, -2.0, 3.5, 4.0, 9.0, -1.0]));
    let y = t.matmul(z, any).unwrap();
    assert_eq!(t.value(y), &Tensor::zeros(&[2, 2]));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    let err = t.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, AutodiffError::Shape { .. }));
}

#[test]
fn elementwise_examples() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = t.constant(Tensor::vector(vec![3.0, 4.0]));
    let s = t.add(a, b).unwrap();
    assert_eq!(t.value(s).data(), &[4.0, 6.0]);

    let z = t.constant(Tensor::scalar(0.0));
    let g = t.gelu(z);
    assert_eq!(t.value(g).item(), 0.0);

    let x = t.constant(Tensor::vector(vec![2.0, 3.0]));
    let h = t.scale(x, 0.5);
    assert_eq!(t.value(h).data(), &[1.0, 1.5]);
}

#[test]
fn broadcast_only_on_trailing_axes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let ok = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let bad = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let y = t.add(a, ok).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    assert!(matches!(t.add(a, bad), Err(AutodiffError::Shape { .. })));
    // The right operand never broadcasts up into a larger left operand.
    assert!(t.add(ok, a).is_err());
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let u = t.constant(Tensor::vector(vec![0.0; 4]));
    let y = t.softmax(u);
    assert_eq!(t.value(y).data(), &[0.25; 4]);

    let big = t.constant(Tensor::vector(vec![1000.0, 0.0]));
    let y = t.softmax(big);
    let d = t.value(y).data();
    assert!(d.iter().all(|v| v.is_finite()));
    assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-300);

    let l = t.constant(Tensor::vector(vec![1f64.ln(), 3f64.ln()]));
    let y = t.softmax(l);
    let d = t.value(y).data();
    assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::new();
    let one = t.constant(Tensor::filled(&[3], 1.0));
    let zero = t.constant(Tensor::zeros(&[3]));
    let c = t.constant(Tensor::filled(&[1, 3], 7.0));
    let y = t.layer_norm(c, one, zero, LAYER_NORM_EPS).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));

    let one2 = t.constant(Tensor::filled(&[2], 1.0));
    let zero2 = t.constant(Tensor::zeros(&[2]));
    let x = t.constant(m(1, 2, &[1.0, -1.0]));
    let y = t.layer_norm(x, one2, zero2, LAYER_NORM_EPS).unwrap();
    let d = t.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-5 && (d[1] + 1.0).abs() < 1e-5);

    let bias = t.constant(Tensor::vector(vec![0.5, -2.0]));
    let x = t.constant(m(2, 2, &[3.0, 9.0, -4.0, 1.0]));
    let y = t.layer_norm(x, zero2, bias, LAYER_NORM_EPS).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, -2.0, 0.5, -2.0]);
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.leaf(m(2, 3, &[1.0, -2.0, 0.5, 4.0, 0.0, 3.0]), true);
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);

    let mut t = Tape::new();
    let data = [1.0, -2.0, 0.5, 4.0];
    let x = t.leaf(Tensor::vector(data.to_vec()), true);
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq);
    let half = t.scale(s, 0.5);
    t.backward(half).unwrap();
    assert_eq!(t.grad(x).unwrap(), &data);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    let y = t.scale(x, 2.0);
    assert!(matches!(t.backward(y), Err(AutodiffError::NonScalarLoss(_))));
}

#[test]
fn fan_out_accumulates() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![3.0]), true);
    let a = t.scale(x, 2.0);
    let b = t.scale(x, 5.0);
    let c = t.add(a, b).unwrap();
    let s = t.sum(c);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[7.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    let c = t.constant(Tensor::vector(vec![3.0, 4.0]));
    let y = t.mul(x, c).unwrap();
    let s = t.sum(y);
    t.backward(s).unwrap();
    assert!(t.grad(c).is_none());
    assert_eq!(t.grad(x).unwrap(), &[3.0, 4.0]);
}

#[test]
fn three_op_graph_matches_finite_differences() {
    for seed in 0..10 {
        let case = gradcheck::random_graph_case(seed, 3);
        let r = case.run(FD_STEP).unwrap();
        assert!(r.passed(), "seed {seed}: {r:?}");
    }
}

#[test]
fn every_primitive_passes_gradcheck() {
    for seed in 0..5 {
        for case in gradcheck::primitive_cases(seed) {
            let r = case.run(FD_STEP).unwrap();
            assert!(r.passed(), "seed {seed}: {r:?}");
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let case = gradcheck::random_graph_case(42, 10);
        let mut t = Tape::new();
        let vars: Vec<Var> = case.inputs.iter().map(|x| t.leaf(x.clone(), true)).collect();
        let out = (case.build)(&mut t, &vars).unwrap();
        t.value(out).item().to_bits()
    };
    assert_eq!(run(), run());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..5, vals in prop::collection::vec(-50.0f64..50.0, 20)) {
            let cols = 4;
            let data = vals[..rows * cols].to_vec();
            let mut t = Tape::new();
            let x = t.constant(Tensor::matrix(rows, cols, data).unwrap());
            let y = t.softmax(x);
            for r in 0..rows {
                let s: f64 = t.value(y).row(r).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn forward_values_stay_finite(seed in 0u64..500) {
            let case = gradcheck::random_graph_case(seed, 10);
            let mut t = Tape::new();
            let vars: Vec<Var> = case.inputs.iter().map(|x| t.leaf(x.clone(), true)).collect();
            let out = (case.build)(&mut t, &vars).unwrap();
            prop_assert!(t.value(out).all_finite());
        }
    }
}
