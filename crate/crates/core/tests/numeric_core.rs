//! Op-level checks for the tensor/tape layer against direct formulas and
//! finite differences.

use gfk_core::error::GfkError;
use gfk_core::gradcheck::finite_diff_check;
use gfk_core::tape::{PoolKind, Tape, Var};
use gfk_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn matmul_identity_and_scalar() {
    let mut tape = Tape::new();
    let eye = tape.constant(Tensor::from_rows(&[vec![1., 0., 0.], vec![0., 1., 0.], vec![0., 0., 1.]]).unwrap());
    let a_t = Tensor::from_rows(&[vec![1., 2.], vec![3., 4.], vec![5., 6.]]).unwrap();
    let a = tape.constant(a_t.clone());
    let c = tape.matmul(eye, a).unwrap();
    assert_eq!(tape.value(c).data(), a_t.data());

    let x = tape.constant(Tensor::from_rows(&[vec![2.]]).unwrap());
    let y = tape.constant(Tensor::from_rows(&[vec![3.]]).unwrap());
    let z = tape.matmul(x, y).unwrap();
    assert_eq!(tape.value(z).data(), &[6.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (a, b) = (random(&[5, 4], &mut rng), random(&[4, 3], &mut rng));
    let mut expect = [[0.0f64; 3]; 5];
    for i in 0..5 {
        for j in 0..3 {
            for t in 0..4 {
                expect[i][j] += a.data()[i * 4 + t] * b.data()[t * 3 + j];
            }
        }
    }
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a), tape.constant(b));
    let c = tape.matmul(av, bv).unwrap();
    for i in 0..5 {
        for j in 0..3 {
            assert!((tape.value(c).data()[i * 3 + j] - expect[i][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(GfkError::Dimension { .. })));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 4]));
    let y = tape.softmax_masked(x, None).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.25));

    let x = tape.constant(Tensor::from_rows(&[vec![0.3, -2.0, 5.0]]).unwrap());
    let y = tape.softmax_masked(x, Some(&[true, false, true])).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 1.0, 0.0]);

    let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
    let y = tape.softmax_masked(x, None).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, v) in tape.value(y).data().iter().enumerate() {
        assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
    }
}

#[test]
fn softmax_fully_masked_row_is_degenerate() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 2]));
    let err = tape.softmax_masked(x, Some(&[false, true, true, true])).unwrap_err();
    assert!(matches!(err, GfkError::DegenerateRow { row: 1 }));
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let gamma = tape.constant(Tensor::full(&[4], 1.0));
    let beta = tape.constant(Tensor::zeros(&[4]));
    let x = tape.constant(Tensor::full(&[1, 4], 3.5));
    let y = tape.layer_norm(x, gamma, beta, 1e-12).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xt = random(&[1, 4], &mut rng);
    let x = tape.constant(xt.clone());
    let eps = 1e-12;
    let y = tape.layer_norm(x, gamma, beta, eps).unwrap();
    let out = tape.value(y).data();
    let mean: f64 = out.iter().sum::<f64>() / 4.0;
    let var: f64 = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-10);
    assert!((var - 1.0).abs() < 1e-9);

    // formula oracle with a non-trivial affine
    let g_t = random(&[4], &mut rng);
    let b_t = random(&[4], &mut rng);
    let (g, b) = (tape.constant(g_t.clone()), tape.constant(b_t.clone()));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    let xs = xt.data();
    let mu = xs.iter().sum::<f64>() / 4.0;
    let var = xs.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 4.0;
    for j in 0..4 {
        let expect = (xs[j] - mu) / (var + 1e-5).sqrt() * g_t.data()[j] + b_t.data()[j];
        assert!((tape.value(y).data()[j] - expect).abs() < 1e-12);
    }
}

#[test]
fn backward_product_and_unused_leaf() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0).with_grad());
    let y = tape.leaf(Tensor::scalar(3.0).with_grad());
    let z = tape.leaf(Tensor::scalar(9.0).with_grad());
    let root = tape.mul(x, y).unwrap();
    tape.backward(root).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[3.0]);
    assert_eq!(tape.grad(y).unwrap(), &[2.0]);
    assert_eq!(tape.grad(z).unwrap(), &[0.0]);

    tape.backward(root).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0], "second call accumulates");
    tape.zero_grad();
    assert_eq!(tape.grad(x).unwrap(), &[0.0]);
}

#[test]
fn backward_requires_scalar_root() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]).with_grad());
    assert!(matches!(tape.backward(x), Err(GfkError::Contract(_))));
}

#[test]
fn three_op_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = [random(&[3, 4], &mut rng), random(&[4, 5], &mut rng), random(&[3, 5], &mut rng)];
    let report = finite_diff_check(
        |t, v| {
            let c = t.matmul(v[0], v[1])?;
            let s = t.softmax_masked(c, None)?;
            let w = t.mul(s, v[2])?;
            t.sum(w)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

type Build = fn(&mut Tape, &[Var]) -> gfk_core::error::Result<Var>;

fn weighted_sum(t: &mut Tape, out: Var, w: Var) -> gfk_core::error::Result<Var> {
    let p = t.mul(out, w)?;
    t.sum(p)
}

/// (name, input shapes, builder); the last input is always a random weight
/// with the op's output shape, so the checked scalar is a generic projection.
fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2], vec![3, 2]], |t, v| {
            let o = t.matmul(v[0], v[1])?;
            weighted_sum(t, o, v[2])
        }),
        ("batch_matmul", vec![vec![2, 3, 4], vec![2, 4, 2], vec![2, 3, 2]], |t, v| {
            let o = t.batch_matmul(v[0], v[1], false)?;
            weighted_sum(t, o, v[2])
        }),
        ("batch_matmul_nt", vec![vec![2, 3, 4], vec![2, 5, 4], vec![2, 3, 5]], |t, v| {
            let o = t.batch_matmul(v[0], v[1], true)?;
            weighted_sum(t, o, v[2])
        }),
        ("transpose", vec![vec![3, 4], vec![4, 3]], |t, v| {
            let o = t.transpose(v[0])?;
            weighted_sum(t, o, v[1])
        }),
        ("add", vec![vec![2, 3], vec![2, 3], vec![2, 3]], |t, v| {
            let o = t.add(v[0], v[1])?;
            weighted_sum(t, o, v[2])
        }),
        ("add_tiled", vec![vec![4, 3], vec![3], vec![4, 3]], |t, v| {
            let o = t.add_row_bias(v[0], v[1])?;
            weighted_sum(t, o, v[2])
        }),
        ("scale", vec![vec![5], vec![5]], |t, v| {
            let o = t.scale(v[0], -1.7)?;
            weighted_sum(t, o, v[1])
        }),
        ("softmax_masked", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let mask = [false, true, false, false, false, false, true, true, true, false, false, false];
            let o = t.softmax_masked(v[0], Some(&mask))?;
            weighted_sum(t, o, v[1])
        }),
        ("log_softmax", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let o = t.log_softmax(v[0])?;
            weighted_sum(t, o, v[1])
        }),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5], vec![3, 5]], |t, v| {
            let o = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, o, v[3])
        }),
        ("gelu", vec![vec![7], vec![7]], |t, v| {
            let o = t.gelu(v[0])?;
            weighted_sum(t, o, v[1])
        }),
        ("gather_rows", vec![vec![3, 2], vec![4, 2]], |t, v| {
            let o = t.gather_rows(v[0], vec![Some(2), None, Some(0), Some(2)])?;
            weighted_sum(t, o, v[1])
        }),
        ("gather_flat", vec![vec![2, 3], vec![2, 2]], |t, v| {
            let o = t.gather_flat(v[0], vec![5, 0, 0, 3], vec![2, 2])?;
            weighted_sum(t, o, v[1])
        }),
        ("concat_rows", vec![vec![2, 3], vec![1, 3], vec![3, 3]], |t, v| {
            let o = t.concat_rows(&[v[0], v[1]])?;
            weighted_sum(t, o, v[2])
        }),
        ("concat_cols", vec![vec![2, 3], vec![2, 1], vec![2, 4]], |t, v| {
            let o = t.concat_cols(v[0], v[1])?;
            weighted_sum(t, o, v[2])
        }),
        ("swap_axes12", vec![vec![2, 3, 2, 2], vec![2, 2, 3, 2]], |t, v| {
            let o = t.swap_axes12(v[0])?;
            weighted_sum(t, o, v[1])
        }),
        ("pool_max", vec![vec![5, 3], vec![3, 3]], |t, v| {
            let o = t.pool_rows(v[0], vec![vec![0, 1, 2], vec![], vec![3, 4]], PoolKind::Max)?;
            weighted_sum(t, o, v[1])
        }),
        ("pool_mean", vec![vec![5, 3], vec![3, 3]], |t, v| {
            let o = t.pool_rows(v[0], vec![vec![0, 4], vec![1], vec![]], PoolKind::Mean)?;
            weighted_sum(t, o, v[1])
        }),
        ("mean", vec![vec![4]], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.mean(sq)
        }),
        ("reshape", vec![vec![2, 3], vec![3, 2]], |t, v| {
            let o = t.reshape(v[0], vec![3, 2])?;
            weighted_sum(t, o, v[1])
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn every_op_passes_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, shapes, build) in op_cases() {
            let params: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            let report = finite_diff_check(build, &params, 1e-5).unwrap();
            prop_assert!(report.max_rel_error < 1e-6, "{}: {:?}", name, report);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[rows, cols], &mut rng);
        let mut mask: Vec<bool> = (0..rows * cols).map(|_| rng.random_bool(0.4)).collect();
        for r in 0..rows {
            mask[r * cols] = false;
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tape.softmax_masked(xv, Some(&mask)).unwrap();
        for (r, row) in tape.value(y).data().chunks(cols).enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (c, &v) in row.iter().enumerate() {
                if mask[r * cols + c] {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn kernels_are_bitwise_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random(&[6, 5], &mut rng), random(&[5, 4], &mut rng));
        let run = |a: &Tensor, b: &Tensor| {
            let mut tape = Tape::new();
            let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
            let c = tape.matmul(av, bv).unwrap();
            let s = tape.softmax_masked(c, None).unwrap();
            tape.value(s).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(&a, &b), run(&a, &b));
    }
}

#[test]
fn f32_mode_rounds_outputs() {
    let mut tape = Tape::with_precision(gfk_core::tape::Precision::F32);
    let x = tape.constant(Tensor::scalar(0.1));
    let y = tape.scale(x, 1.0).unwrap();
    assert_eq!(tape.value(y).data()[0], 0.1f32 as f64);
}

#[test]
fn non_finite_results_are_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(1e200));
    assert!(matches!(tape.mul(x, x), Err(GfkError::NonFinite("mul"))));
}
