use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t2(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut tape = Tape::new();
    let i2 = tape.leaf(&t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let a = tape.leaf(&t2(&[&[1.5, -2.0], &[0.25, 7.0]]));
    let ia = tape.matmul(i2, a).unwrap();
    assert_eq!(tape.value(ia), tape.value(a));

    let m = tape.leaf(&t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let ones = tape.leaf(&t2(&[&[1.0], &[1.0]]));
    let out = tape.matmul(m, ones).unwrap();
    assert_eq!(tape.shape(out), &[2, 1]);
    assert_eq!(tape.value(out), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_mismatch() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::zeros(&[2, 3]));
    let b = tape.leaf(&Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(crate::Error::Dimension(_))));
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let b = random(&[4, 3], &mut rng, -2.0, 2.0);
    let a = random(&[5, 4], &mut rng, -2.0, 2.0);
    let err = finite_difference_check(
        |tape, x| {
            let bv = tape.leaf(&b);
            let p = tape.matmul(x, bv)?;
            Ok(tape.sum(p))
        },
        &a,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");

    // Transposed variant, gradient w.r.t. the right operand.
    let err = finite_difference_check(
        |tape, x| {
            let av = tape.leaf(&a);
            let p = tape.matmul_nt(av, x, 0.5)?;
            let q = tape.mul(p, p)?;
            Ok(tape.sum(q))
        },
        &random(&[3, 4], &mut rng, -2.0, 2.0),
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn elementwise_values() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![3], vec![-1.0, 3.0, 0.0]).unwrap());
    let r = tape.relu(x);
    assert_eq!(tape.value(r), &[0.0, 3.0, 0.0]);
    let s = tape.sigmoid(x);
    assert_eq!(tape.value(s)[2], 0.5);
    let one = tape.leaf(&Tensor::scalar(1.0));
    let s1 = tape.sigmoid(one);
    assert!((tape.scalar(s1) - 0.7310585786).abs() < 1e-9);
}

#[test]
fn binary_shape_mismatch() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::zeros(&[2]));
    let b = tape.leaf(&Tensor::zeros(&[3]));
    assert!(tape.add(a, b).is_err());
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let x = Tensor::new(vec![1], vec![0.0]).unwrap().with_requires_grad();
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let r = tape.relu(v);
    let s = tape.sum(r);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v), Some(&[0.0][..]));
}

#[test]
fn softmax_values_and_stability() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
    let s = tape.softmax(x, 0).unwrap();
    for v in tape.value(s) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let y = tape.leaf(&Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
    let s = tape.softmax(y, 0).unwrap();
    assert!((tape.value(s)[0] - 1.0).abs() < 1e-12);
    assert!(tape.value(s)[1] >= 0.0 && tape.value(s)[1] < 1e-300);
}

#[test]
fn softmax_axis0_and_axis1_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = random(&[3, 4], &mut rng, -2.0, 2.0);
    for axis in 0..2 {
        let err = finite_difference_check(
            |tape, x| {
                let s = tape.softmax(x, axis)?;
                let wv = tape.leaf(&w);
                let p = tape.mul(s, wv)?;
                Ok(tape.sum(p))
            },
            &random(&[3, 4], &mut rng, -2.0, 2.0),
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "axis {axis}: {err}");
    }
}

#[test]
fn mean_values_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![2], vec![2.0, 4.0]).unwrap().with_requires_grad());
    let m = tape.mean(x, 0).unwrap();
    assert_eq!(tape.value(m), &[3.0]);
    tape.backward(m).unwrap();
    assert_eq!(tape.grad(x), Some(&[0.5, 0.5][..]));

    let c = tape.leaf(&Tensor::filled(&[3, 5], 1.25));
    let m = tape.mean(c, 1).unwrap();
    assert_eq!(tape.shape(m), &[3, 1]);
    assert!(tape.value(m).iter().all(|&v| (v - 1.25).abs() < 1e-15));
}

#[test]
fn backward_contracts() {
    let w = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap().with_requires_grad();
    let mut tape = Tape::new();
    let v = tape.leaf(&w);
    let s = tape.sum(v);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v), Some(&[1.0, 1.0, 1.0][..]));
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v), Some(&[2.0, 2.0, 2.0][..]));

    let mut tape = Tape::new();
    let v = tape.leaf(&w);
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v), Some(&[1.0, -2.0, 4.0][..]));

    assert!(matches!(tape.backward(sq), Err(crate::Error::Usage(_))));
}

#[test]
fn params_accumulate_into_store() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new(vec![2], vec![1.0, 3.0]).unwrap()).unwrap();
    let mut tape = Tape::new();
    let a = tape.param(&store, id);
    let b = tape.param(&store, id);
    assert_eq!(a, b);
    let sq = tape.mul(a, b).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    tape.write_param_grads(&mut store);
    assert_eq!(store.get(id).tensor.grad(), Some(&[2.0, 6.0][..]));
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = random(&[6], &mut rng, 0.5, 1.5);
    let b = random(&[6], &mut rng, -0.5, 0.5);
    let w = random(&[4, 6], &mut rng, -1.0, 1.0);
    let err = finite_difference_check(
        |tape, x| {
            let gv = tape.leaf(&g);
            let bv = tape.leaf(&b);
            let y = tape.layer_norm(x, gv, bv, 1e-5)?;
            let wv = tape.leaf(&w);
            let p = tape.mul(y, wv)?;
            Ok(tape.sum(p))
        },
        &random(&[4, 6], &mut rng, -2.0, 2.0),
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn structural_ops_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bias = random(&[2], &mut rng, -1.0, 1.0);
    let err = finite_difference_check(
        |tape, x| {
            let a = tape.slice_cols(x, 1, 2)?;
            let c = tape.slice_cols(x, 0, 1)?;
            let cat = tape.concat_cols(&[a, c, a])?;
            let g = tape.gather_rows(cat, &[2, 0, 2])?;
            let sq = tape.mul(g, g)?;
            let first = tape.slice_cols(sq, 0, 2)?;
            let bv = tape.leaf(&bias);
            let biased = tape.add_row_bias(first, bv)?;
            let r = tape.reshape(biased, vec![6])?;
            let sig = tape.sigmoid(r);
            let sc = tape.scale(sig, -3.0);
            Ok(tape.sum(sc))
        },
        &random(&[3, 3], &mut rng, -2.0, 2.0),
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn custom_node_injects_local_gradient() {
    let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_requires_grad();
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let c = tape.custom(&[v], 42.0, vec![vec![0.25, -1.0]]).unwrap();
    let s = tape.scale(c, 2.0);
    assert_eq!(tape.scalar(s), 84.0);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v), Some(&[0.5, -2.0][..]));
}

#[test]
fn linear_function_is_exact() {
    let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
    let err = finite_difference_check(
        |tape, v| {
            let s = tape.scale(v, 3.5);
            Ok(tape.sum(s))
        },
        &x,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err <= 1e-9, "{err}");
}

#[test]
fn sigmoid_chain_and_relu_away_from_kink() {
    let x = Tensor::new(vec![3], vec![0.4, -1.1, 1.7]).unwrap();
    let err = finite_difference_check(
        |tape, v| {
            let a = tape.sigmoid(v);
            let b = tape.scale(a, 2.0);
            let c = tape.sigmoid(b);
            let d = tape.mul(c, a)?;
            Ok(tape.sum(d))
        },
        &x,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err}");

    let x = Tensor::new(vec![4], vec![0.5, -0.3, 1.9, -1.0]).unwrap();
    let err = finite_difference_check(
        |tape, v| {
            let r = tape.relu(v);
            let sq = tape.mul(r, v)?;
            Ok(tape.sum(sq))
        },
        &x,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn checker_rejects_bad_eps_and_non_finite() {
    let x = Tensor::scalar(1.0);
    assert!(finite_difference_check(|t, v| Ok(t.sum(v)), &x, 0.0).is_err());
    let err = finite_difference_check(
        |t, v| {
            let s = t.scale(v, f64::INFINITY);
            Ok(t.sum(s))
        },
        &x,
        1e-5,
    );
    assert!(matches!(err, Err(crate::Error::Numeric(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(vals in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let n = vals.len();
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![n], vals).unwrap());
        let s = tape.softmax(x, 0).unwrap();
        let total: f64 = tape.value(s).iter().sum();
        prop_assert!(tape.value(s).iter().all(|&v| v >= 0.0));
        prop_assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn backward_is_linear(
        w in prop::collection::vec(-2.0f64..2.0, 4),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let x = Tensor::new(vec![4], w).unwrap().with_requires_grad();
        let grad_of = |ca: f64, cb: f64| {
            let mut tape = Tape::new();
            let v = tape.leaf(&x);
            let s = tape.sigmoid(v);
            let l1 = tape.sum(s);
            let sq = tape.mul(v, v).unwrap();
            let l2 = tape.sum(sq);
            let l1s = tape.scale(l1, ca);
            let l2s = tape.scale(l2, cb);
            let total = tape.add(l1s, l2s).unwrap();
            tape.backward(total).unwrap();
            tape.grad(v).unwrap().to_vec()
        };
        let both = grad_of(a, b);
        let g1 = grad_of(1.0, 0.0);
        let g2 = grad_of(0.0, 1.0);
        for i in 0..4 {
            prop_assert!((both[i] - (a * g1[i] + b * g2[i])).abs() <= 1e-10);
        }
    }

    #[test]
    fn sgd_with_zero_grad_is_identity(w in prop::collection::vec(-5.0f64..5.0, 1..6), lr in 1e-6f64..1.0) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![w.len()], w.clone()).unwrap()).unwrap();
        ensure_grads(&mut store);
        let cfg = OptimizerConfig { learning_rate: lr, weight_decay: 0.0, ..Default::default() };
        sgd_step(&mut store, &cfg, 0).unwrap();
        prop_assert_eq!(store.get(id).tensor.data(), &w[..]);
    }
}
