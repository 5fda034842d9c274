use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unipact_tensor::{adam_update, AdamConfig, Graph, Moments, OpKind, ParamStore, OptimState, Tensor, TensorError};

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let a = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let i = g.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let c = g.matmul(a, i).unwrap();
    assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_row_sum() {
    let mut g = Graph::new();
    let a = g.constant(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let b = g.constant(vec![3, 1], vec![1.0; 3]).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[1, 1]);
    assert_eq!(g.value(c), &[6.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = (random(&mut rng, 12), random(&mut rng, 8));
    let mut expected = [0.0f64; 6];
    for i in 0..3 {
        for j in 0..2 {
            for p in 0..4 {
                expected[i * 2 + j] += a[i * 4 + p] as f64 * b[p * 2 + j] as f64;
            }
        }
    }
    let mut g = Graph::new();
    let va = g.constant(vec![3, 4], a).unwrap();
    let vb = g.constant(vec![4, 2], b).unwrap();
    let c = g.matmul(va, vb).unwrap();
    for (x, e) in g.value(c).iter().zip(expected) {
        assert!((*x as f64 - e).abs() < 1e-6);
    }
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut g = Graph::new();
    let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    assert!(matches!(g.matmul(a, b), Err(TensorError::Shape { op: "matmul", .. })));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let y = g.softmax(x);
    assert_eq!(g.value(y), &[0.5, 0.5]);

    for c in [-40.0f32, 0.0, 7.5, 45.0] {
        let x = g.constant(vec![1, 3], vec![c; 3]).unwrap();
        let y = g.softmax(x);
        for v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    let x = g.constant(vec![1, 2], vec![0.0, 3.0f32.ln()]).unwrap();
    let y = g.softmax(x);
    assert!((g.value(y)[0] - 0.25).abs() < 1e-6);
    assert!((g.value(y)[1] - 0.75).abs() < 1e-6);
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    // near-certain prediction
    let x = g.constant(vec![1, 3], vec![0.0, 200.0, 0.0]).unwrap();
    let l = g.cross_entropy(x, &[1], &[true]).unwrap();
    assert_eq!(g.scalar(l), 0.0);

    let x = g.constant(vec![2, 8], vec![0.0; 16]).unwrap();
    let l = g.cross_entropy(x, &[3, 0], &[false, true]).unwrap();
    assert!((g.scalar(l) - 8.0f32.ln()).abs() < 1e-6);
    assert!((g.scalar(l) - 2.0794).abs() < 1e-4);
}

#[test]
fn cross_entropy_ignores_unmasked_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits = random(&mut rng, 4 * 6);
    let mask = [true, false, true, false];
    let run = |targets: &[usize]| {
        let mut g = Graph::new();
        let x = g.input(vec![4, 6], logits.clone()).unwrap();
        let l = g.cross_entropy(x, targets, &mask).unwrap();
        g.backward(l).unwrap();
        (g.scalar(l), g.grad(x).unwrap().to_vec())
    };
    let (l1, g1) = run(&[1, 2, 3, 4]);
    let (l2, g2) = run(&[1, 5, 3, 0]);
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
    // masked-out rows get exactly zero gradient
    assert!(g1[6..12].iter().all(|&v| v == 0.0));
    assert!(g1[18..24].iter().all(|&v| v == 0.0));
}

#[test]
fn cross_entropy_empty_mask_errors() {
    let mut g = Graph::new();
    let x = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    assert_eq!(g.cross_entropy(x, &[0, 0], &[false, false]), Err(TensorError::NoSupervisedPositions));
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.input(vec![2, 3], vec![0.3; 6]).unwrap();
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

    let mut g = Graph::new();
    let x = g.input(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::new();
    let x = g.input(vec![2, 2], vec![1.0; 4]).unwrap();
    let y = g.scale(x, 2.0);
    assert!(matches!(g.backward(y), Err(TensorError::NonScalarRoot(_))));
    assert_eq!(g.kind(y), OpKind::Scale);
}

#[test]
fn frozen_leaves_receive_no_gradient() {
    let mut g = Graph::new();
    let w = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let x = g.input(vec![1, 2], vec![0.5, -0.5]).unwrap();
    let y = g.matmul(x, w).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(w).is_none());
    assert_eq!(g.grad(x).unwrap(), &[3.0, 7.0]);
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let cfg = AdamConfig::default();
    let mut p = vec![0.25f32, -1.5, 3.0];
    let before = p.clone();
    let mut m = Moments::default();
    for step in 1..=10 {
        adam_update(&mut p, &[0.0; 3], &mut m, &cfg, step).unwrap();
    }
    for (a, b) in p.iter().zip(before) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn adam_first_step_is_learning_rate() {
    let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
    let mut p = vec![0.0f32];
    let mut m = Moments::default();
    adam_update(&mut p, &[1.0], &mut m, &cfg, 1).unwrap();
    // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps)
    assert!((p[0] + 0.1).abs() < 1e-6);
}

#[test]
fn adam_identical_params_stay_identical() {
    let mut store = ParamStore::new();
    let a = store.insert("a", Tensor::filled(&[4], 0.7).with_grad(true)).unwrap();
    let b = store.insert("b", Tensor::filled(&[4], 0.7).with_grad(true)).unwrap();
    let mut opt = OptimState::new(AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let g = random(&mut rng, 4);
        store.zero_grads();
        store.get_mut(a).accumulate_grad(&g).unwrap();
        store.get_mut(b).accumulate_grad(&g).unwrap();
        opt.step(&mut store).unwrap();
    }
    assert_eq!(opt.step, 20);
    assert_eq!(store.get(a).data, store.get(b).data);
}

#[test]
fn adam_shape_mismatch_errors() {
    let mut m = Moments::default();
    let err = adam_update(&mut [0.0; 3], &[0.0; 2], &mut m, &AdamConfig::default(), 1);
    assert!(matches!(err, Err(TensorError::Shape { .. })));
}

#[test]
fn causal_softmax_hides_future() {
    let mut g = Graph::new();
    let x = g.constant(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = g.causal_softmax(x).unwrap();
    let v = g.value(y);
    // 2 queries over 4 keys: row 0 sees 3 keys, row 1 sees all 4
    assert_eq!(v[3], 0.0);
    assert!((v[..3].iter().sum::<f32>() - 1.0).abs() < 1e-6);
    assert!((v[4..].iter().sum::<f32>() - 1.0).abs() < 1e-6);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut g = Graph::new();
        let x = g.input(vec![5, 8], random(&mut rng, 40)).unwrap();
        let w = g.input(vec![8, 8], random(&mut rng, 64)).unwrap();
        let gain = g.input(vec![8], vec![1.0; 8]).unwrap();
        let bias = g.input(vec![8], vec![0.0; 8]).unwrap();
        let h = g.matmul(x, w).unwrap();
        let h = g.gelu(h);
        let h = g.layer_norm(h, gain, bias).unwrap();
        let p = g.softmax(h);
        let l = g.sum(p);
        g.backward(l).unwrap();
        (g.value(h).to_vec(), g.grad(w).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in proptest::collection::vec(proptest::collection::vec(-50.0f32..50.0, 7), 1..6)) {
        let n = rows.len();
        let mut g = Graph::new();
        let x = g.constant(vec![n, 7], rows.concat()).unwrap();
        let y = g.softmax(x);
        for row in g.value(y).chunks(7) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|v| *v >= 0.0 && *v <= 1.0 && v.is_finite()));
        }
    }

    #[test]
    fn forward_ops_stay_finite(data in proptest::collection::vec(-10.0f32..10.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(vec![3, 4], data.clone()).unwrap();
        let w = g.constant(vec![4, 4], data[..4].iter().cycle().take(16).cloned().collect()).unwrap();
        let gain = g.constant(vec![4], vec![1.0; 4]).unwrap();
        let bias = g.constant(vec![4], vec![0.0; 4]).unwrap();
        let h = g.matmul(x, w).unwrap();
        let h = g.gelu(h);
        let h = g.layer_norm(h, gain, bias).unwrap();
        let s = g.matmul_nt(h, h).unwrap();
        let p = g.causal_softmax(s).unwrap();
        prop_assert!(g.value(p).iter().all(|v| v.is_finite()));
        prop_assert!(g.value(h).iter().all(|v| v.is_finite()));
    }
}
