use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random values bounded away from zero so ReLU kinks are never crossed.
fn random_off_kink(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut t = random(shape, seed);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

/// Contracts an output with fixed random weights so every output element
/// carries an O(1) gradient.
fn weighted_sum<'t>(tape: &mut Tape<'t, f64>, out: Var, seed: u64) -> Result<Var> {
    let w = random(tape.shape(out), seed);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

const F64_TOL: f64 = 1e-6;
const EPS: f64 = 1e-5;

#[test]
fn matmul_shapes_and_identity() {
    let mut tape = Tape::new();
    let a = tape.leaf(random(&[2, 3], 1));
    let b = tape.leaf(random(&[3, 4], 2));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(c), &[2, 4]);

    let mut eye = Tensor::<f64>::zeros([3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let x = random(&[3, 5], 3);
    let i = tape.constant(eye);
    let xv = tape.constant(x.clone());
    let y = tape.matmul(i, xv).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn matmul_mismatch_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::zeros([2, 3]));
    let b = tape.leaf(Tensor::zeros([4, 2]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn matmul_gradients_match_finite_differences() {
    for seed in 0..10 {
        let errs = grad_check_many(
            |t, v| {
                let c = t.matmul(v[0], v[1])?;
                weighted_sum(t, c, 99)
            },
            &[random(&[4, 5], seed), random(&[5, 6], seed + 100)],
            EPS,
        )
        .unwrap();
        assert!(errs.iter().all(|&e| e < F64_TOL), "{errs:?}");
    }
}

#[test]
fn conv2d_unit_kernel_is_identity() {
    let mut tape = Tape::new();
    let x = random(&[1, 4, 4], 5);
    let xv = tape.constant(x.clone());
    let w = tape.constant(Tensor::ones([1, 1, 1, 1]));
    let y = tape.conv2d(xv, w, 1, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 4, 4]);
    assert_eq!(tape.value(y).data(), x.data());
}

#[test]
fn conv2d_output_extents() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([1, 5, 5]));
    let w = tape.constant(Tensor::zeros([1, 1, 3, 3]));
    let y = tape.conv2d(x, w, 1, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 5, 5]);
    let y2 = tape.conv2d(x, w, 2, 1).unwrap();
    assert_eq!(tape.shape(y2), &[1, 3, 3]);

    let big = tape.constant(Tensor::zeros([1, 1, 7, 7]));
    assert!(matches!(tape.conv2d(x, big, 1, 0), Err(Error::Dimension(_))));
    assert!(matches!(tape.conv2d(x, w, 0, 1), Err(Error::Parameter(_))));
}

#[test]
fn conv2d_matches_direct_summation() {
    let x = random(&[2, 5, 6], 8);
    let w = random(&[3, 2, 3, 3], 9);
    let (stride, pad) = (2, 1);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv2d(xv, wv, stride, pad).unwrap();
    let (oh, ow) = (3, 3);
    assert_eq!(tape.shape(y), &[3, oh, ow]);
    for o in 0..3 {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for c in 0..2 {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let iy = (oy * stride + ki) as isize - pad as isize;
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if (0..5).contains(&iy) && (0..6).contains(&ix) {
                                acc += x.data()[(c * 5 + iy as usize) * 6 + ix as usize]
                                    * w.data()[((o * 2 + c) * 3 + ki) * 3 + kj];
                            }
                        }
                    }
                }
                let got = tape.value(y).data()[(o * oh + oy) * ow + ox];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    for seed in 0..10 {
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let errs = grad_check_many(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], stride, pad)?;
                    weighted_sum(t, y, 7)
                },
                &[random(&[2, 6, 6], seed), random(&[3, 2, 3, 3], seed + 50)],
                EPS,
            )
            .unwrap();
            assert!(errs.iter().all(|&e| e < F64_TOL), "{errs:?}");
        }
    }
}

#[test]
fn relu_add_scale_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::<f64>::vector(vec![-1.0, 0.0, 2.0]));
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

    let zero = tape.constant(Tensor::zeros([3]));
    let s = tape.add(x, zero).unwrap();
    assert_eq!(tape.value(s), tape.value(x));

    let k = tape.scale(x, 2.0).unwrap();
    assert_eq!(tape.value(k).data(), &[-2.0, 0.0, 4.0]);

    let other = tape.constant(Tensor::zeros([2]));
    assert!(matches!(tape.add(x, other), Err(Error::Dimension(_))));
    assert!(matches!(tape.mul(x, other), Err(Error::Dimension(_))));
}

#[test]
fn relu_gradient_is_a_mask() {
    let x = Tensor::<f64>::vector(vec![-1.0, 2.0]);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let r = tape.relu(xv).unwrap();
    let s = tape.sum(r).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(xv).unwrap().data(), &[0.0, 1.0]);
    let err = grad_check(|t, v| {
        let r = t.relu(v)?;
        t.sum(r)
    }, &x, EPS)
    .unwrap();
    assert!(err < F64_TOL);

    // exactly at the kink the subgradient is 0
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::<f64>::vector(vec![0.0]));
    let r = tape.relu(z).unwrap();
    let s = tape.sum(r).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(z).unwrap().data(), &[0.0]);
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    for seed in 0..10 {
        let errs = grad_check_many(
            |t, v| {
                let a = t.add(v[0], v[1])?;
                let m = t.mul(a, v[1])?;
                let r = t.relu(m)?;
                let s = t.scale(r, 1.7)?;
                weighted_sum(t, s, 3)
            },
            &[random_off_kink(&[3, 4], seed), random_off_kink(&[3, 4], seed + 10)],
            EPS,
        )
        .unwrap();
        assert!(errs.iter().all(|&e| e < F64_TOL), "{errs:?}");
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::<f64>::vector(vec![0.0, 0.0]));
    let s = tape.softmax(a).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

    let big = tape.constant(Tensor::<f64>::vector(vec![1000.0, 1000.0]));
    let s = tape.softmax(big).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

    let r = tape.constant(random(&[5], 4));
    let s = tape.softmax(r).unwrap();
    let total: f64 = tape.value(s).data().iter().sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert!(tape.value(s).data().iter().all(|&p| p > 0.0));
}

#[test]
fn softmax_and_attention_style_gradients() {
    for seed in 0..10 {
        let errs = grad_check_many(
            |t, v| {
                let s = t.softmax(v[0])?;
                weighted_sum(t, s, 11)
            },
            &[random(&[3, 5], seed)],
            EPS,
        )
        .unwrap();
        assert!(errs[0] < F64_TOL, "{errs:?}");
    }
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::<f64>::ones([4]));
    let b = tape.constant(Tensor::<f64>::zeros([4]));
    let x = tape.constant(Tensor::full([4], 3.5));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let g = tape.constant(Tensor::<f64>::ones([2]));
    let b = tape.constant(Tensor::<f64>::zeros([2]));
    let x = tape.constant(Tensor::vector(vec![1.0, 3.0]));
    let y = tape.layer_norm(x, g, b, 1e-15).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-12 && (d[1] - 1.0).abs() < 1e-12);
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    for seed in 0..10 {
        let errs = grad_check_many(
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(t, y, 21)
            },
            &[random(&[3, 6], seed), random(&[6], seed + 1), random(&[6], seed + 2)],
            EPS,
        )
        .unwrap();
        assert!(errs.iter().all(|&e| e < F64_TOL), "{errs:?}");
    }
}

#[test]
fn channel_norm_gradients_match_finite_differences() {
    for seed in 0..10 {
        let errs = grad_check_many(
            |t, v| {
                let y = t.channel_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(t, y, 22)
            },
            &[random(&[3, 3, 4], seed), random(&[3], seed + 1), random(&[3], seed + 2)],
            EPS,
        )
        .unwrap();
        assert!(errs.iter().all(|&e| e < F64_TOL), "{errs:?}");
    }
}

#[test]
fn dropout_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let x = tape.leaf(random(&[10], 1));
    assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(tape.dropout(x, 0.3, false, &mut rng).unwrap(), x);
    assert!(matches!(
        tape.dropout(x, 1.0, true, &mut rng),
        Err(Error::Parameter(_))
    ));
    assert!(matches!(
        tape.dropout(x, -0.1, false, &mut rng),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn dropout_survivor_rate_and_mean() {
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::ones([n]));
    let y = tape.dropout(x, 0.3, true, &mut rng).unwrap();
    let out = tape.value(y).data();
    let survivors = out.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
    let mean = out.iter().sum::<f64>() / n as f64;
    assert!((survivors - 0.7).abs() < 0.01, "{survivors}");
    assert!((mean - 1.0).abs() < 0.02, "{mean}");

    // same seed, same mask
    let mut a = ChaCha8Rng::seed_from_u64(3);
    let mut b = ChaCha8Rng::seed_from_u64(3);
    let y1 = tape.dropout(x, 0.3, true, &mut a).unwrap();
    let y2 = tape.dropout(x, 0.3, true, &mut b).unwrap();
    assert_eq!(tape.value(y1), tape.value(y2));
}

#[test]
fn dropout_gradient_with_fixed_mask() {
    let errs = grad_check_many(
        |t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let y = t.dropout(v[0], 0.3, true, &mut rng)?;
            weighted_sum(t, y, 2)
        },
        &[random(&[20], 1)],
        EPS,
    )
    .unwrap();
    assert!(errs[0] < F64_TOL);
}

#[test]
fn global_avg_pool_examples_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let p = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.value(p).data(), &[2.5]);
    let c = tape.constant(Tensor::<f64>::full([3, 4, 4], 0.75));
    let p = tape.global_avg_pool(c).unwrap();
    assert_eq!(tape.value(p).data(), &[0.75; 3]);

    for seed in 0..10 {
        let errs = grad_check_many(
            |t, v| {
                let p = t.global_avg_pool(v[0])?;
                weighted_sum(t, p, 4)
            },
            &[random(&[3, 4, 5], seed)],
            EPS,
        )
        .unwrap();
        assert!(errs[0] < F64_TOL);
    }
}

#[test]
fn embedding_lookup_examples() {
    let table = Tensor::<f64>::new([3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let mut tape = Tape::new();
    let t = tape.leaf(table.clone());
    let e = tape.embedding(t, &[0]).unwrap();
    assert_eq!(tape.value(e).data(), &[1.0, 2.0]);

    let e = tape.embedding(t, &[1, 1]).unwrap();
    let w = tape.constant(Tensor::new([2, 2], vec![1.0, 2.0, 10.0, 20.0]).unwrap());
    let m = tape.mul(e, w).unwrap();
    let s = tape.sum(m).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(t).unwrap().data(), &[0.0, 0.0, 11.0, 22.0, 0.0, 0.0]);

    let err = tape.embedding(t, &[0, 3]).unwrap_err();
    assert!(matches!(err, Error::Index { id: 3, rows: 3 }));
    assert!(err.to_string().contains('3'));
}

#[test]
fn embedding_gradients_match_finite_differences() {
    for seed in 0..10 {
        let errs = grad_check_many(
            |t, v| {
                let e = t.embedding(v[0], &[4, 0, 4, 2])?;
                weighted_sum(t, e, 8)
            },
            &[random(&[5, 3], seed)],
            EPS,
        )
        .unwrap();
        assert!(errs[0] < F64_TOL);
    }
}

#[test]
fn concat_examples() {
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(Tensor::zeros([768]));
    let b = tape.leaf(Tensor::zeros([2048]));
    let c = tape.concat(&[a, b]).unwrap();
    assert_eq!(tape.shape(c), &[2816]);

    let empty = tape.leaf(Tensor::zeros([0]));
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let c = tape.concat(&[empty, x]).unwrap();
    assert_eq!(tape.value(c), tape.value(x));

    let m = tape.leaf(Tensor::zeros([2, 2]));
    assert!(matches!(tape.concat(&[x, m]), Err(Error::Dimension(_))));
}

#[test]
fn concat_backward_splits_exactly() {
    let mut tape = Tape::new();
    let a = tape.leaf(random(&[3], 1));
    let b = tape.leaf(random(&[4], 2));
    let c = tape.concat(&[a, b]).unwrap();
    let upstream = random(&[7], 3);
    let w = tape.constant(upstream.clone());
    let m = tape.mul(c, w).unwrap();
    let s = tape.sum(m).unwrap();
    tape.backward(s).unwrap();
    let mut recomposed = tape.grad(a).unwrap().into_data();
    recomposed.extend(tape.grad(b).unwrap().into_data());
    assert_eq!(recomposed, upstream.into_data());
}

#[test]
fn batched_concat_and_slicing_gradients() {
    for seed in 0..10 {
        let errs = grad_check_many(
            |t, v| {
                let c = t.concat(&[v[0], v[1]])?;
                let s = t.slice_cols(c, 1, 4)?;
                let tr = t.transpose(s)?;
                let r = t.select_row(tr, 2)?;
                let full = t.reshape(c, &[14])?;
                let a = weighted_sum(t, r, 1)?;
                let b = weighted_sum(t, full, 2)?;
                t.add(a, b)
            },
            &[random(&[2, 3], seed), random(&[2, 4], seed + 1)],
            EPS,
        )
        .unwrap();
        assert!(errs.iter().all(|&e| e < F64_TOL), "{errs:?}");
    }
}

#[test]
fn add_bias_gradients() {
    let errs = grad_check_many(
        |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            weighted_sum(t, y, 6)
        },
        &[random(&[3, 4], 1), random(&[4], 2)],
        EPS,
    )
    .unwrap();
    assert!(errs.iter().all(|&e| e < F64_TOL));
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::<f64>::new([1, 2], vec![0.0, 0.0]).unwrap());
    let l = tape.cross_entropy(z, &[0]).unwrap();
    assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);

    let z = tape.leaf(Tensor::<f64>::new([1, 2], vec![30.0, -30.0]).unwrap());
    let l = tape.cross_entropy(z, &[0]).unwrap();
    assert!(tape.value(l).data()[0] < 1e-20);

    assert!(matches!(tape.cross_entropy(z, &[2]), Err(Error::Label(2))));
    assert!(matches!(tape.cross_entropy(z, &[0, 1]), Err(Error::Dimension(_))));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::<f64>::new([2, 2], vec![1.0, 2.0, 0.5, -0.5]).unwrap());
    let l = tape.cross_entropy(z, &[1, 0]).unwrap();
    tape.backward(l).unwrap();
    let g = tape.grad(z).unwrap();
    let p0 = 1.0 / (1.0 + (1.0f64).exp());
    let p1 = 1.0 / (1.0 + (-1.0f64).exp());
    let expected = [p0 / 2.0, (1.0 - p0 - 1.0) / 2.0, (p1 - 1.0) / 2.0, (1.0 - p1) / 2.0];
    for (a, b) in g.data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }

    for seed in 0..10 {
        let err = grad_check(|t, v| t.cross_entropy(v, &[0, 1, 1, 0]), &random(&[4, 2], seed), EPS)
            .unwrap();
        assert!(err < F64_TOL);
    }
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::<f64>::vector(vec![1.0, 2.0, 3.0]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);

    let c = tape.constant(Tensor::<f64>::vector(vec![1.0, 1.0, 1.0]));
    let p = tape.mul(x, c).unwrap();
    let s = tape.sum(p).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(c).is_none());
    // a fresh sweep replaces, not adds to, earlier gradients
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    assert!(matches!(tape.backward(p), Err(Error::Contract(_))));
}

#[test]
fn reused_value_accumulates() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::<f64>::vector(vec![1.5]));
    let a = tape.scale(x, 2.0).unwrap();
    let b = tape.scale(x, 3.0).unwrap();
    let c = tape.add(a, b).unwrap();
    let s = tape.sum(c).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[5.0]);
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::vector(vec![f32::MAX, f32::MAX]));
    assert!(matches!(tape.add(x, x), Err(Error::NonFinite("add"))));
}

#[test]
fn grad_check_on_linear_and_relu() {
    let x = random_off_kink(&[8], 3);
    let lin = grad_check(|t, v| {
        let s = t.scale(v, 3.0)?;
        t.sum(s)
    }, &x, 1e-3)
    .unwrap();
    assert!(lin < 1e-9, "{lin}");

    let relu = |t: &mut Tape<'_, f64>, v: Var| {
        let r = t.relu(v)?;
        t.sum(r)
    };
    assert!(grad_check(relu, &x, EPS).unwrap() < F64_TOL);

    // smooth nonlinearity: the smaller step is at least as accurate
    let smooth = |t: &mut Tape<'_, f64>, v: Var| {
        let s = t.softmax(v)?;
        let sq = t.mul(s, s)?;
        t.sum(sq)
    };
    let coarse = grad_check(smooth, &x, 1e-3).unwrap();
    let fine = grad_check(smooth, &x, 1e-5).unwrap();
    assert!(fine <= coarse || fine < 1e-8, "{coarse} {fine}");
    assert!(grad_check(smooth, &x, 0.0).is_err());
}

proptest! {
    #[test]
    fn softmax_shift_is_bitwise_invariant(
        xs in prop::collection::vec(-64i32..64, 1..8),
        shift in -100i32..100,
    ) {
        // dyadic inputs and integer shifts keep every addition exact
        let x: Vec<f64> = xs.iter().map(|&v| v as f64 / 8.0).collect();
        let shifted: Vec<f64> = x.iter().map(|&v| v + shift as f64).collect();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(x));
        let b = tape.constant(Tensor::vector(shifted));
        let sa = tape.softmax(a).unwrap();
        let sb = tape.softmax(b).unwrap();
        prop_assert_eq!(tape.value(sa), tape.value(sb));
        let total: f64 = tape.value(sa).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_non_negative(
        logits in prop::collection::vec(-50.0f64..50.0, 2..=2),
        label in 0usize..2,
    ) {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new([1, 2], logits).unwrap());
        let l = tape.cross_entropy(z, &[label]).unwrap();
        prop_assert!(tape.value(l).data()[0] >= 0.0);
    }
}
