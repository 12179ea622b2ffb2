use super::*;
use crate::check::{grad_estimate, GradTolerance};
use crate::rng::Rng;

fn randn(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Gradcheck harness: builds a weighted-scalar loss over the op output and
/// compares analytic gradients of every input against central differences.
fn gradcheck(
    shapes: &[&[usize]],
    seed: u64,
    build: impl Fn(&Tape<f64>, &[Tensor]) -> Tensor,
) {
    let mut rng = Rng::seeded(seed);
    let inputs: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| randn(&mut rng, s.iter().product()))
        .collect();
    let run = |vals: &[Vec<f64>]| -> (f64, Option<Vec<Vec<f64>>>, u64) {
        let tape = Tape::<f64>::new();
        let ts: Vec<Tensor> = vals
            .iter()
            .zip(shapes.iter())
            .map(|(v, s)| {
                tape.leaf(std::sync::Arc::new(v.clone()), s, None)
                    .expect("leaf")
            })
            .collect();
        let out = build(&tape, &ts);
        // fixed probe weights make the loss sensitive to every output
        let mut wrng = Rng::seeded(seed ^ 0xabcd);
        let w = tape
            .constant(randn(&mut wrng, out.numel()), out.shape())
            .unwrap();
        let weighted = tape.mul(&out, &w).unwrap();
        let loss = tape.sum_all(&weighted).unwrap();
        let lv = tape.value_scalar(&loss).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let g = ts
            .iter()
            .map(|t| grads.get(t).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        (lv, Some(g), 0)
    };
    let (_, analytic, _) = run(&inputs);
    let analytic = analytic.unwrap();
    let tol = GradTolerance::default();
    for which in 0..inputs.len() {
        let mut f = |x: &[f64]| {
            let mut vals = inputs.clone();
            vals[which] = x.to_vec();
            run(&vals).0
        };
        let fd = grad_estimate(&mut f, &inputs[which], 1e-5);
        tol.compare(&analytic[which], &fd)
            .unwrap_or_else(|e| panic!("input {which}: {e}"));
    }
}

// ── matmul oracles ───────────────────────────────────────────────────

#[test]
fn matmul_identity_passes_vector_through() {
    let tape = Tape::<f64>::new();
    let eye = tape
        .constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3])
        .unwrap();
    let v = tape.constant(vec![2.0, -1.0, 0.5], &[3, 1]).unwrap();
    let out = tape.matmul(&eye, &v).unwrap();
    assert_eq!(tape.values(&out).as_ref(), &vec![2.0, -1.0, 0.5]);
}

#[test]
fn matmul_hand_computed() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let b = tape.constant(vec![1.0, 1.0], &[2, 1]).unwrap();
    let out = tape.matmul(&a, &b).unwrap();
    assert_eq!(tape.values(&out).as_ref(), &vec![3.0, 7.0]);
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    // random 4x5 * 5x3, rel. error well under 1e-6 at 64-bit per op contract
    let mut rng = Rng::seeded(42);
    let a = randn(&mut rng, 20);
    let b = randn(&mut rng, 15);
    let run = |av: &[f64], bv: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
        let tape = Tape::<f64>::new();
        let ta = tape
            .leaf(std::sync::Arc::new(av.to_vec()), &[4, 5], None)
            .unwrap();
        let tb = tape
            .leaf(std::sync::Arc::new(bv.to_vec()), &[5, 3], None)
            .unwrap();
        let out = tape.matmul(&ta, &tb).unwrap();
        let loss = tape.sum_all(&out).unwrap();
        let lv = tape.value_scalar(&loss).unwrap();
        let g = tape.backward(&loss).unwrap();
        (
            lv,
            g.get(&ta).unwrap().to_vec(),
            g.get(&tb).unwrap().to_vec(),
        )
    };
    let (_, ga, gb) = run(&a, &b);
    let tight = GradTolerance {
        rtol: 1e-6,
        atol: 1e-9,
    };
    let mut fa = |x: &[f64]| run(x, &b).0;
    tight.compare(&ga, &grad_estimate(&mut fa, &a, 1e-5)).unwrap();
    let mut fb = |x: &[f64]| run(&a, x).0;
    tight.compare(&gb, &grad_estimate(&mut fb, &b, 1e-5)).unwrap();
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let tape = Tape::<f64>::new();
    let a = tape.zeros(&[2, 3]);
    let b = tape.zeros(&[4, 2]);
    let err = tape.matmul(&a, &b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn matmul_batched_broadcast_matches_loop() {
    let mut rng = Rng::seeded(9);
    let a = randn(&mut rng, 2 * 3 * 4);
    let b = randn(&mut rng, 4 * 5);
    let tape = Tape::<f64>::new();
    let ta = tape.constant(a.clone(), &[2, 3, 4]).unwrap();
    let tb = tape.constant(b.clone(), &[4, 5]).unwrap();
    let out = tape.matmul(&ta, &tb).unwrap();
    assert_eq!(out.shape(), &[2, 3, 5]);
    let ov = tape.values(&out);
    for h in 0..2 {
        for i in 0..3 {
            for j in 0..5 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a[h * 12 + i * 4 + k] * b[k * 5 + j];
                }
                let got = ov[h * 15 + i * 5 + j];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

// ── softmax oracles ──────────────────────────────────────────────────

#[test]
fn softmax_uniform_on_zeros() {
    let tape = Tape::<f64>::new();
    let x = tape.zeros(&[4]);
    let y = tape.softmax(&x, 0).unwrap();
    for &v in tape.values(&y).iter() {
        assert!((v - 0.25).abs() < 1e-15);
    }
}

#[test]
fn softmax_extreme_logits_stay_finite() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(vec![1000.0, 0.0], &[2]).unwrap();
    let y = tape.softmax(&x, 0).unwrap();
    let v = tape.values(&y);
    assert_eq!(v[0], 1.0);
    assert_eq!(v[1], 0.0); // underflows cleanly, no NaN
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = Rng::seeded(3);
    let tape = Tape::<f64>::new();
    let x = tape.constant(randn(&mut rng, 15), &[3, 5]).unwrap();
    let y = tape.softmax(&x, 1).unwrap();
    let v = tape.values(&y);
    for r in 0..3 {
        let s: f64 = v[r * 5..(r + 1) * 5].iter().sum();
        assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
    }
}

// ── layer norm oracles ───────────────────────────────────────────────

#[test]
fn layer_norm_constant_vector_is_zero() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(vec![5.0; 6], &[6]).unwrap();
    let gain = tape.constant(vec![1.0; 6], &[6]).unwrap();
    let bias = tape.zeros(&[6]);
    let y = tape.layer_norm(&x, &gain, &bias).unwrap();
    for &v in tape.values(&y).iter() {
        assert!(v.abs() < 1e-9, "zero-variance input must normalize to 0, got {v}");
    }
}

#[test]
fn layer_norm_two_point_row() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(vec![1.0, 3.0], &[2]).unwrap();
    let gain = tape.constant(vec![1.0, 1.0], &[2]).unwrap();
    let bias = tape.zeros(&[2]);
    let y = tape.layer_norm(&x, &gain, &bias).unwrap();
    let v = tape.values(&y);
    // mean 2, var 1 -> (±1)/sqrt(1 + 1e-6)
    let expect = 1.0 / (1.0f64 + 1e-6).sqrt();
    assert!((v[0] + expect).abs() < 1e-12);
    assert!((v[1] - expect).abs() < 1e-12);
}

#[test]
fn layer_norm_gradcheck() {
    gradcheck(&[&[3, 4], &[4], &[4]], 17, |t, xs| {
        t.layer_norm(&xs[0], &xs[1], &xs[2]).unwrap()
    });
}

// ── gradient barrier oracles ─────────────────────────────────────────

#[test]
fn barrier_blocks_gradient_exactly() {
    let tape = Tape::<f64>::new();
    let x = tape
        .leaf(std::sync::Arc::new(vec![1.0, -2.0, 3.0]), &[3], None)
        .unwrap();
    let y = tape.gradient_barrier(&x).unwrap();
    let loss = tape.sum_all(&y).unwrap();
    let g = tape.backward(&loss).unwrap();
    assert!(g.get(&x).is_none(), "no gradient may reach through a barrier");
}

#[test]
fn barrier_product_rule_keeps_live_branch() {
    // z = x * barrier(x): dz/dx must equal barrier(x) values
    let vals = vec![1.5, -0.5, 2.0];
    let tape = Tape::<f64>::new();
    let x = tape
        .leaf(std::sync::Arc::new(vals.clone()), &[3], None)
        .unwrap();
    let xb = tape.gradient_barrier(&x).unwrap();
    let z = tape.mul(&x, &xb).unwrap();
    let loss = tape.sum_all(&z).unwrap();
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.get(&x).unwrap(), vals.as_slice());
}

#[test]
fn barrier_forward_is_bit_identical() {
    let vals = vec![std::f64::consts::PI, -1.0 / 3.0, 1e-300];
    let tape = Tape::<f64>::new();
    let x = tape.constant(vals.clone(), &[3]).unwrap();
    let y = tape.gradient_barrier(&x).unwrap();
    for (a, b) in tape.values(&y).iter().zip(vals.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

// ── backward contract ────────────────────────────────────────────────

#[test]
fn backward_rejects_non_scalar_loss() {
    let tape = Tape::<f64>::new();
    let x = tape
        .leaf(std::sync::Arc::new(vec![1.0, 2.0]), &[2], None)
        .unwrap();
    assert!(matches!(
        tape.backward(&x),
        Err(TensorError::NotScalar { .. })
    ));
}

#[test]
fn foreign_tensor_is_rejected() {
    let t1 = Tape::<f64>::new();
    let t2 = Tape::<f64>::new();
    let a = t1.zeros(&[2]);
    let b = t2.zeros(&[2]);
    assert!(matches!(
        t1.add(&a, &b),
        Err(TensorError::ForeignTensor { .. })
    ));
}

#[test]
fn division_by_zero_is_an_error_not_a_nan() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(vec![1.0], &[1]).unwrap();
    let b = tape.constant(vec![0.0], &[1]).unwrap();
    assert!(matches!(
        tape.div(&a, &b),
        Err(TensorError::NonFinite { .. })
    ));
}

// ── per-op finite-difference sweep ───────────────────────────────────

#[test]
fn gradcheck_elementwise_ops() {
    gradcheck(&[&[2, 3], &[2, 3]], 1, |t, xs| t.add(&xs[0], &xs[1]).unwrap());
    gradcheck(&[&[2, 3], &[2, 3]], 2, |t, xs| t.sub(&xs[0], &xs[1]).unwrap());
    gradcheck(&[&[2, 3], &[2, 3]], 3, |t, xs| t.mul(&xs[0], &xs[1]).unwrap());
    gradcheck(&[&[6], &[6]], 4, |t, xs| {
        // keep denominators away from zero
        let b = t.add_scalar(&xs[1], 4.0).unwrap();
        t.div(&xs[0], &b).unwrap()
    });
    gradcheck(&[&[5]], 5, |t, xs| t.exp(&xs[0]).unwrap());
    gradcheck(&[&[5]], 6, |t, xs| {
        let pos = t.exp(&xs[0]).unwrap(); // strictly positive input for ln
        t.ln(&pos).unwrap()
    });
    gradcheck(&[&[7]], 7, |t, xs| t.sigmoid(&xs[0]).unwrap());
    gradcheck(&[&[7]], 8, |t, xs| t.tanh(&xs[0]).unwrap());
    gradcheck(&[&[7]], 9, |t, xs| t.gelu(&xs[0]).unwrap());
    gradcheck(&[&[8]], 10, |t, xs| t.clamp(&xs[0], -0.4, 0.4).unwrap());
    gradcheck(&[&[6]], 11, |t, xs| t.mul_scalar(&xs[0], -1.7).unwrap());
}

#[test]
fn gradcheck_structure_ops() {
    gradcheck(&[&[2, 6]], 20, |t, xs| t.reshape(&xs[0], &[3, 4]).unwrap());
    gradcheck(&[&[2, 3, 4]], 21, |t, xs| {
        t.transpose(&xs[0], &[2, 0, 1]).unwrap()
    });
    gradcheck(&[&[3]], 22, |t, xs| t.broadcast_to(&xs[0], &[4, 3]).unwrap());
    gradcheck(&[&[2, 1, 3]], 23, |t, xs| {
        t.broadcast_to(&xs[0], &[2, 5, 3]).unwrap()
    });
    gradcheck(&[&[2, 3], &[2, 2]], 24, |t, xs| {
        t.concat(&[&xs[0], &xs[1]], 1).unwrap()
    });
    gradcheck(&[&[4, 5]], 25, |t, xs| t.narrow(&xs[0], 1, 1, 3).unwrap());
}

#[test]
fn gradcheck_reductions_and_norms() {
    gradcheck(&[&[3, 4]], 30, |t, xs| t.reduce_sum(&xs[0], 0, false).unwrap());
    gradcheck(&[&[3, 4]], 31, |t, xs| t.reduce_mean(&xs[0], 1, true).unwrap());
    gradcheck(&[&[3, 4]], 32, |t, xs| t.softmax(&xs[0], 1).unwrap());
    gradcheck(&[&[3, 4]], 33, |t, xs| t.softmax(&xs[0], 0).unwrap());
    gradcheck(&[&[3, 4]], 34, |t, xs| t.log_softmax(&xs[0], 1).unwrap());
    gradcheck(&[&[3, 4]], 35, |t, xs| t.standardize(&xs[0]).unwrap());
    gradcheck(&[&[3, 4]], 36, |t, xs| t.l2_normalize(&xs[0], 1).unwrap());
    gradcheck(&[&[2, 3, 2]], 37, |t, xs| t.l2_normalize(&xs[0], 1).unwrap());
}

#[test]
fn gradcheck_matmul_and_contract() {
    gradcheck(&[&[4, 5], &[5, 3]], 40, |t, xs| {
        t.matmul(&xs[0], &xs[1]).unwrap()
    });
    gradcheck(&[&[2, 3, 4], &[2, 4, 2]], 41, |t, xs| {
        t.matmul(&xs[0], &xs[1]).unwrap()
    });
    gradcheck(&[&[2, 3, 4], &[4, 2]], 42, |t, xs| {
        t.matmul(&xs[0], &xs[1]).unwrap()
    });
    gradcheck(&[&[2, 4, 3], &[2, 4, 5]], 43, |t, xs| {
        t.contract("hij,hid->hjd", &xs[0], &xs[1]).unwrap()
    });
}

#[test]
fn contract_matches_manual_aggregation() {
    // out[h,j,d] = sum_i a[h,i,j] * v[h,i,d]
    let (h, n, m, dc) = (2, 3, 4, 5);
    let mut rng = Rng::seeded(77);
    let a = randn(&mut rng, h * n * m);
    let v = randn(&mut rng, h * n * dc);
    let tape = Tape::<f64>::new();
    let ta = tape.constant(a.clone(), &[h, n, m]).unwrap();
    let tv = tape.constant(v.clone(), &[h, n, dc]).unwrap();
    let out = tape.contract("hij,hid->hjd", &ta, &tv).unwrap();
    assert_eq!(out.shape(), &[h, m, dc]);
    let ov = tape.values(&out);
    for hh in 0..h {
        for j in 0..m {
            for d in 0..dc {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += a[hh * n * m + i * m + j] * v[hh * n * dc + i * dc + d];
                }
                let got = ov[hh * m * dc + j * dc + d];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn contract_rejects_reductions_and_bad_specs() {
    let tape = Tape::<f64>::new();
    let a = tape.zeros(&[2, 3]);
    let b = tape.zeros(&[3, 4]);
    assert!(tape.contract("ij,jk", &a, &b).is_err());
    assert!(tape.contract("ij,jk->i", &a, &b).is_err()); // drops k: reduction
    assert!(tape.contract("ii,ik->ik", &a, &b).is_err()); // repeated letter
    assert!(tape.contract("ij,jk->ik", &a, &b).is_ok());
}

#[test]
fn no_grad_tape_records_nothing() {
    let tape = Tape::<f64>::no_grad();
    let x = tape
        .leaf(std::sync::Arc::new(vec![1.0, 2.0]), &[2], Some("x"))
        .unwrap();
    let y = tape.mul(&x, &x).unwrap();
    let loss = tape.sum_all(&y).unwrap();
    assert!(matches!(tape.backward(&loss), Err(TensorError::GradDisabled)));
}

#[test]
fn named_gradients_sum_over_rebinds() {
    let mut store = crate::params::ParameterStore::<f64>::new();
    store.register("w", vec![2.0], &[1]).unwrap();
    let tape = Tape::<f64>::new();
    let w1 = store.bind(&tape, "w").unwrap();
    let w2 = store.bind(&tape, "w").unwrap();
    let prod = tape.mul(&w1, &w2).unwrap(); // w^2 via two binds
    let loss = tape.sum_all(&prod).unwrap();
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.named()["w"], vec![4.0]); // d(w^2)/dw = 2w = 4
}

// ── property tests ───────────────────────────────────────────────────

mod properties {
    use super::Tape;
    use crate::rng::Rng;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_is_a_distribution(
            rows in 1usize..4,
            cols in 1usize..6,
            seed in 0u64..1000,
        ) {
            let mut rng = Rng::seeded(seed);
            let vals: Vec<f64> = (0..rows * cols).map(|_| rng.normal() * 10.0).collect();
            let tape = Tape::<f64>::new();
            let x = tape.constant(vals, &[rows, cols]).unwrap();
            let y = tape.softmax(&x, 1).unwrap();
            let v = tape.values(&y);
            for r in 0..rows {
                let row = &v[r * cols..(r + 1) * cols];
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }

        #[test]
        fn reshape_transpose_round_trip(seed in 0u64..1000) {
            let mut rng = Rng::seeded(seed);
            let vals: Vec<f64> = (0..24).map(|_| rng.normal()).collect();
            let tape = Tape::<f64>::new();
            let x = tape.constant(vals.clone(), &[2, 3, 4]).unwrap();
            let t = tape.transpose(&x, &[1, 2, 0]).unwrap();
            let back = tape.transpose(&t, &[2, 0, 1]).unwrap();
            let got = tape.values(&back);
            prop_assert_eq!(got.as_ref(), &vals);
        }
    }
}
