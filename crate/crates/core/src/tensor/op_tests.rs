use proptest::prelude::*;

use super::*;
use crate::testutil::{naive_conv, rand_tensor};

fn t(dims: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
}

fn constant(tape: &mut Tape, x: Tensor) -> Var {
    tape.constant(x)
}

// ---- elementwise ----

#[test]
fn add_example() {
    let mut tape = Tape::new();
    let a = constant(&mut tape, t(&[2], &[1.0, 2.0]));
    let b = constant(&mut tape, t(&[2], &[3.0, 4.0]));
    assert_eq!(tape.add(&a, &b).unwrap().value().data(), &[4.0, 6.0]);
}

#[test]
fn mul_by_zero_and_self_difference_are_zero() {
    let mut tape = Tape::new();
    let x = constant(&mut tape, rand_tensor(&[3, 4], 1));
    let z = constant(&mut tape, Tensor::zeros(vec![3, 4]).unwrap());
    assert!(tape
        .mul(&x, &z)
        .unwrap()
        .value()
        .data()
        .iter()
        .all(|v| *v == 0.0));
    assert!(tape
        .sub(&x, &x)
        .unwrap()
        .value()
        .data()
        .iter()
        .all(|v| *v == 0.0));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = constant(&mut tape, Tensor::zeros(vec![2, 3]).unwrap());
    let b = constant(&mut tape, Tensor::zeros(vec![3, 2]).unwrap());
    let msg = tape.add(&a, &b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn non_finite_results_are_errors() {
    let mut tape = Tape::new();
    let a = constant(&mut tape, t(&[1], &[f64::MAX]));
    assert!(matches!(
        tape.scalar_mul(&a, 10.0),
        Err(Error::NonFinite { .. })
    ));
}

// ---- matmul ----

#[test]
fn identity_matmul_returns_operand() {
    let mut tape = Tape::new();
    let i = constant(&mut tape, t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let a = constant(&mut tape, t(&[2, 2], &[0.3, -1.2, 4.0, 2.5]));
    assert_eq!(tape.matmul(&i, &a).unwrap().value(), a.value());
}

#[test]
fn row_times_column() {
    let mut tape = Tape::new();
    let a = constant(&mut tape, t(&[1, 2], &[1.0, 2.0]));
    let b = constant(&mut tape, t(&[2, 1], &[3.0, 4.0]));
    assert_eq!(tape.matmul(&a, &b).unwrap().value().data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let a = rand_tensor(&[5, 7], 2);
    let b = rand_tensor(&[7, 3], 3);
    let mut expected = vec![0.0; 15];
    for i in 0..5 {
        for j in 0..3 {
            for k in 0..7 {
                expected[i * 3 + j] += a.data()[i * 7 + k] * b.data()[k * 3 + j];
            }
        }
    }
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a), tape.constant(b));
    let c = tape.matmul(&av, &bv).unwrap();
    for (x, y) in c.value().data().iter().zip(&expected) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_inner_dim_mismatch() {
    let mut tape = Tape::new();
    let a = constant(&mut tape, Tensor::zeros(vec![2, 3]).unwrap());
    let b = constant(&mut tape, Tensor::zeros(vec![2, 3]).unwrap());
    assert!(tape.matmul(&a, &b).is_err());
}

// ---- conv2d ----

#[test]
fn pointwise_identity_kernel_is_identity() {
    let x = rand_tensor(&[1, 3, 4, 5], 4);
    let mut w = Tensor::zeros(vec![3, 3, 1, 1]).unwrap();
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w));
    assert_eq!(tape.conv2d(&xv, &wv, None, 1).unwrap().value(), &x);
}

#[test]
fn depthwise_delta_kernel_is_identity() {
    let x = rand_tensor(&[2, 3, 5, 4], 5);
    let mut w = Tensor::zeros(vec![3, 1, 3, 3]).unwrap();
    for c in 0..3 {
        w.data_mut()[c * 9 + 4] = 1.0;
    }
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w));
    assert_eq!(tape.conv2d(&xv, &wv, None, 3).unwrap().value(), &x);
}

#[test]
fn full_conv_matches_naive_loops() {
    let x = rand_tensor(&[1, 2, 5, 5], 6);
    let w = rand_tensor(&[3, 2, 3, 3], 7);
    let bias = rand_tensor(&[3], 8);
    let expected = naive_conv(&x, &w, Some(&bias), 1);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x), tape.constant(w), tape.constant(bias));
    let y = tape.conv2d(&xv, &wv, Some(&bv), 1).unwrap();
    for (a, b) in y.value().data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn grouped_conv_matches_naive_loops() {
    let x = rand_tensor(&[2, 4, 4, 6], 9);
    let w = rand_tensor(&[6, 2, 3, 3], 10);
    let expected = naive_conv(&x, &w, None, 2);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x), tape.constant(w));
    let y = tape.conv2d(&xv, &wv, None, 2).unwrap();
    assert!(y
        .value()
        .data()
        .iter()
        .zip(&expected)
        .all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn conv_group_mismatch_is_error() {
    let mut tape = Tape::new();
    let x = constant(&mut tape, Tensor::zeros(vec![1, 3, 4, 4]).unwrap());
    let w = constant(&mut tape, Tensor::zeros(vec![4, 2, 3, 3]).unwrap());
    assert!(tape.conv2d(&x, &w, None, 2).is_err());
}

// ---- pixel shuffle ----

#[test]
fn unshuffle_example() {
    let mut tape = Tape::new();
    let x = constant(&mut tape, t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.pixel_unshuffle(&x, 2).unwrap();
    assert_eq!(y.dims(), &[1, 4, 1, 1]);
    assert_eq!(y.value().data(), &[1.0, 2.0, 3.0, 4.0]);
    let back = tape.pixel_shuffle(&y, 2).unwrap();
    assert_eq!(back.value(), x.value());
}

#[test]
fn shuffle_factor_one_is_identity() {
    let x = rand_tensor(&[1, 4, 3, 2], 11);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    assert_eq!(tape.pixel_shuffle(&xv, 1).unwrap().value(), &x);
    assert_eq!(tape.pixel_unshuffle(&xv, 1).unwrap().value(), &x);
}

#[test]
fn shuffle_errors_on_bad_dims() {
    let mut tape = Tape::new();
    let x = constant(&mut tape, Tensor::zeros(vec![1, 3, 3, 4]).unwrap());
    assert!(tape.pixel_unshuffle(&x, 2).is_err());
    assert!(tape.pixel_shuffle(&x, 2).is_err());
}

#[test]
fn shuffle_gradient_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(&[1, 8, 2, 3], 12));
    let y = tape.pixel_shuffle(&x, 2).unwrap();
    let s = tape.sum(&y).unwrap();
    tape.backward(&s).unwrap();
    assert!(tape.grad(&x).unwrap().data().iter().all(|g| *g == 1.0));
}

proptest! {
    #[test]
    fn unshuffle_then_shuffle_is_bit_exact(b in 1usize..3, c in 1usize..4, h in 1usize..4, w in 1usize..4, seed in any::<u64>()) {
        let x = rand_tensor(&[b, c, 2 * h, 2 * w], seed);
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let u = tape.pixel_unshuffle(&xv, 2).unwrap();
        let mut sorted_in = x.data().to_vec();
        let mut sorted_out = u.value().data().to_vec();
        sorted_in.sort_by(f64::total_cmp);
        sorted_out.sort_by(f64::total_cmp);
        prop_assert_eq!(sorted_in, sorted_out);
        let back = tape.pixel_shuffle(&u, 2).unwrap();
        prop_assert_eq!(back.value(), &x);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_are_shift_invariant(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let x = rand_tensor(&[3, 7], seed);
        let mut tape = Tape::inference();
        let xv = tape.constant(x);
        let y = tape.softmax(&xv, 1).unwrap();
        for row in y.value().data().chunks(7) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let shifted = tape.scalar_add(&xv, shift).unwrap();
        let ys = tape.softmax(&shifted, 1).unwrap();
        prop_assert!(ys.value().max_abs_diff(y.value()) < 1e-12);
    }
}

// ---- layer norm ----

fn ln(tape: &mut Tape, x: &Var, c: usize, gamma: f64, beta: f64) -> Var {
    let g = tape.constant(Tensor::full(vec![c], gamma).unwrap());
    let b = tape.constant(Tensor::full(vec![c], beta).unwrap());
    tape.layer_norm(x, &g, &b, 1e-6).unwrap()
}

#[test]
fn layer_norm_constant_channels_give_zero() {
    let mut tape = Tape::new();
    let x = constant(&mut tape, Tensor::full(vec![1, 4, 2, 2], 3.5).unwrap());
    let y = ln(&mut tape, &x, 4, 1.0, 0.0);
    assert!(y.value().data().iter().all(|v| *v == 0.0));
}

#[test]
fn layer_norm_zero_gamma_gives_beta() {
    let mut tape = Tape::new();
    let x = constant(&mut tape, rand_tensor(&[2, 3, 2, 2], 13));
    let y = ln(&mut tape, &x, 3, 0.0, 0.25);
    assert!(y.value().data().iter().all(|v| *v == 0.25));
}

#[test]
fn layer_norm_statistics() {
    let (b, c, h, w) = (2, 16, 3, 5);
    let mut tape = Tape::new();
    let x = constant(&mut tape, rand_tensor(&[b, c, h, w], 14));
    let y = ln(&mut tape, &x, c, 1.0, 0.0);
    let d = y.value().data();
    for bi in 0..b {
        for p in 0..h * w {
            let vals: Vec<f64> = (0..c).map(|ch| d[(bi * c + ch) * h * w + p]).collect();
            let mean = vals.iter().sum::<f64>() / c as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}

// ---- softmax, activations, l2 ----

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = constant(&mut tape, t(&[2], &[0.0, 0.0]));
    assert_eq!(tape.softmax(&x, 0).unwrap().value().data(), &[0.5, 0.5]);
    let x = constant(&mut tape, t(&[2], &[2f64.ln(), 0.0]));
    let y = tape.softmax(&x, 0).unwrap();
    assert!((y.value().data()[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((y.value().data()[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_over_middle_axis() {
    let mut tape = Tape::new();
    let x = constant(&mut tape, rand_tensor(&[2, 3, 4], 15));
    let y = tape.softmax(&x, 1).unwrap();
    let d = y.value().data();
    for o in 0..2 {
        for i in 0..4 {
            let s: f64 = (0..3).map(|a| d[(o * 3 + a) * 4 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

/// Standard normal CDF by composite Simpson integration of the density.
fn phi_by_quadrature(x: f64) -> f64 {
    let n = 20_000;
    let (a, b) = (0.0, x);
    let hstep = (b - a) / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(a) + pdf(b);
    for i in 1..n {
        s += pdf(a + i as f64 * hstep) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    0.5 + s * hstep / 3.0
}

#[test]
fn activation_examples() {
    let mut tape = Tape::new();
    let x = constant(&mut tape, t(&[1], &[0.0]));
    assert_eq!(tape.gelu(&x).unwrap().value().data(), &[0.0]);
    assert_eq!(tape.tanh(&x).unwrap().value().data(), &[0.0]);
    let one = constant(&mut tape, t(&[1], &[1.0]));
    let g = tape.gelu(&one).unwrap().value().data()[0];
    assert!((g - phi_by_quadrature(1.0)).abs() < 1e-10);
    assert!((g - 0.8413447).abs() < 1e-7);
    let big = constant(&mut tape, t(&[4], &[-30.0, -2.0, 2.0, 30.0]));
    let th = tape.tanh(&big).unwrap();
    assert!(th.value().data().iter().all(|v| v.abs() < 1.0));
}

#[test]
fn l2_normalize_examples() {
    let mut tape = Tape::new();
    let x = constant(&mut tape, t(&[2], &[3.0, 4.0]));
    let y = tape.l2_normalize(&x, 0, 1e-12).unwrap();
    assert!((y.value().data()[0] - 0.6).abs() < 1e-15 && (y.value().data()[1] - 0.8).abs() < 1e-15);
    let u = constant(&mut tape, t(&[3], &[0.0, 1.0, 0.0]));
    assert_eq!(
        tape.l2_normalize(&u, 0, 1e-12).unwrap().value().data(),
        &[0.0, 1.0, 0.0]
    );
    let z = constant(&mut tape, Tensor::zeros(vec![3]).unwrap());
    assert_eq!(
        tape.l2_normalize(&z, 0, 1e-12).unwrap().value().data(),
        &[0.0; 3]
    );
}

// ---- structural ----

#[test]
fn concat_on_channels() {
    let mut tape = Tape::new();
    let a = constant(&mut tape, rand_tensor(&[1, 2, 4, 4], 16));
    let b = constant(&mut tape, rand_tensor(&[1, 2, 4, 4], 17));
    assert_eq!(tape.concat(&[&a, &b], 1).unwrap().dims(), &[1, 4, 4, 4]);
}

#[test]
fn transpose_twice_is_identity() {
    let x = rand_tensor(&[2, 3, 4], 18);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.transpose(&xv, 0, 2).unwrap();
    assert_eq!(y.dims(), &[4, 3, 2]);
    assert_eq!(tape.transpose(&y, 0, 2).unwrap().value(), &x);
}

#[test]
fn slices_reassemble() {
    let x = rand_tensor(&[2, 5, 3], 19);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let a = tape.slice(&xv, 1, 0, 2).unwrap();
    let b = tape.slice(&xv, 1, 2, 3).unwrap();
    assert_eq!(tape.concat(&[&a, &b], 1).unwrap().value(), &x);
    assert!(tape.slice(&xv, 1, 4, 2).is_err());
}

#[test]
fn reshape_requires_equal_counts() {
    let mut tape = Tape::new();
    let x = constant(&mut tape, Tensor::zeros(vec![2, 6]).unwrap());
    assert_eq!(tape.reshape(&x, &[3, 4]).unwrap().dims(), &[3, 4]);
    assert!(tape.reshape(&x, &[5, 2]).is_err());
}

// ---- backward ----

#[test]
fn backward_of_sum_and_square() {
    let x0 = rand_tensor(&[3, 2], 20);
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let s = tape.sum(&x).unwrap();
    tape.backward(&s).unwrap();
    assert!(tape.grad(&x).unwrap().data().iter().all(|g| *g == 1.0));

    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let sq = tape.mul(&x, &x).unwrap();
    let s = tape.sum(&sq).unwrap();
    tape.backward(&s).unwrap();
    for (g, v) in tape.grad(&x).unwrap().data().iter().zip(x0.data()) {
        assert_eq!(*g, 2.0 * v);
    }
}

#[test]
fn backward_accumulates_until_zeroed() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::ones(vec![2]).unwrap());
    let s = tape.sum(&x).unwrap();
    tape.backward(&s).unwrap();
    tape.backward(&s).unwrap();
    assert_eq!(tape.grad(&x).unwrap().data(), &[2.0, 2.0]);
    tape.zero_grads();
    tape.backward(&s).unwrap();
    assert_eq!(tape.grad(&x).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::ones(vec![2]).unwrap());
    assert!(matches!(tape.backward(&x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn unreached_leaves_get_zero_grads() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::ones(vec![2]).unwrap());
    let unused = tape.leaf(Tensor::ones(vec![3]).unwrap());
    let s = tape.sum(&x).unwrap();
    tape.backward(&s).unwrap();
    assert_eq!(tape.grad(&unused).unwrap().data(), &[0.0; 3]);
}

#[test]
fn inference_tape_records_nothing() {
    let mut tape = Tape::inference();
    let x = tape.leaf(Tensor::ones(vec![2]).unwrap());
    let y = tape.mul(&x, &x).unwrap();
    assert!(!y.requires_grad());
    assert!(tape.is_empty());
}

// ---- gradient checks ----

const H: f64 = 1e-5;
const OP_TOL: f64 = 1e-4;

fn check(f: impl Fn(&mut Tape, &Var) -> Result<Var>, x: Tensor) {
    let r = grad_check(f, &x, H, OP_TOL).unwrap();
    assert!(r.passed, "max rel err {}", r.max_rel_error);
}

/// Fixed random weights make every op's output a generic scalar.
fn weighted_sum(tape: &mut Tape, y: &Var, seed: u64) -> Result<Var> {
    let w = tape.constant(rand_tensor(y.dims(), seed));
    let p = tape.mul(y, &w)?;
    tape.sum(&p)
}

#[test]
fn grad_check_sum_tanh() {
    let x = rand_tensor(&[4, 5], 21);
    let r = grad_check(
        |t, x| {
            let y = t.tanh(x)?;
            t.sum(&y)
        },
        &x,
        H,
        1e-5,
    )
    .unwrap();
    assert!(r.passed);
}

#[test]
fn grad_check_sum_is_exact() {
    let x = Tensor::new(vec![6], vec![1.0, -2.0, 3.0, 4.0, 0.0, 7.0]).unwrap();
    let h = 2f64.powi(-17);
    let r = grad_check(|t, x| t.sum(x), &x, h, 1e-12).unwrap();
    assert_eq!(r.max_rel_error, 0.0);
}

#[test]
fn grad_check_rejects_bad_step_and_nondeterminism() {
    let x = rand_tensor(&[3], 22);
    assert!(grad_check(|t, x| t.sum(x), &x, 1e-2, 1e-4).is_err());
    let counter = std::sync::atomic::AtomicU64::new(0);
    let r = grad_check(
        |t, x| {
            let k = counter.fetch_add(1, std::sync::atomic::Ordering::SeqCst) as f64;
            let s = t.sum(x)?;
            t.scalar_add(&s, k)
        },
        &x,
        H,
        1e-4,
    );
    assert!(matches!(r, Err(Error::NonDeterministic(_))));
}

#[test]
fn grad_check_elementwise_ops() {
    let other = rand_tensor(&[3, 4], 31);
    check(
        |t, x| {
            let o = t.constant(other.clone());
            let y = t.mul(x, &o)?;
            let y = t.add(&y, x)?;
            let y = t.sub(&y, &o)?;
            let y = t.scalar_mul(&y, 1.7)?;
            let y = t.scalar_add(&y, 0.3)?;
            weighted_sum(t, &y, 1)
        },
        rand_tensor(&[3, 4], 30),
    );
    check(
        |t, x| {
            let y = t.gelu(x)?;
            weighted_sum(t, &y, 2)
        },
        rand_tensor(&[3, 4], 32),
    );
    check(
        |t, x| {
            let y = t.tanh(x)?;
            weighted_sum(t, &y, 3)
        },
        rand_tensor(&[3, 4], 33),
    );
    check(
        |t, x| {
            let y = t.mean(x)?;
            t.scalar_mul(&y, 3.0)
        },
        rand_tensor(&[3, 4], 34),
    );
    // Inputs bounded away from zero so no central difference straddles the kink.
    let away = Tensor::new(vec![6], vec![0.5, -0.7, 0.9, -0.2, 0.3, -1.1]).unwrap();
    check(
        |t, x| {
            let y = t.abs(x)?;
            weighted_sum(t, &y, 4)
        },
        away,
    );
}

#[test]
fn grad_check_matmul() {
    let b = rand_tensor(&[2, 4, 3], 41);
    check(
        |t, x| {
            let bv = t.leaf(b.clone());
            let y = t.matmul(x, &bv)?;
            weighted_sum(t, &y, 5)
        },
        rand_tensor(&[2, 5, 4], 40),
    );
    let a = rand_tensor(&[2, 5, 4], 42);
    check(
        |t, x| {
            let av = t.constant(a.clone());
            let y = t.matmul(&av, x)?;
            weighted_sum(t, &y, 6)
        },
        rand_tensor(&[2, 4, 3], 43),
    );
}

#[test]
fn grad_check_conv_input_weight_bias() {
    let w = rand_tensor(&[4, 2, 3, 3], 51);
    let x = rand_tensor(&[2, 4, 4, 5], 52);
    let bias = rand_tensor(&[4], 53);
    check(
        |t, xv| {
            let wv = t.constant(w.clone());
            let y = t.conv2d(xv, &wv, None, 2)?;
            weighted_sum(t, &y, 7)
        },
        x.clone(),
    );
    check(
        |t, wv| {
            let xv = t.constant(x.clone());
            let y = t.conv2d(&xv, wv, None, 2)?;
            weighted_sum(t, &y, 8)
        },
        w.clone(),
    );
    check(
        |t, bv| {
            let xv = t.constant(x.clone());
            let wv = t.constant(w.clone());
            let y = t.conv2d(&xv, &wv, Some(bv), 2)?;
            weighted_sum(t, &y, 9)
        },
        bias,
    );
    let pw = rand_tensor(&[3, 4, 1, 1], 54);
    check(
        |t, xv| {
            let wv = t.constant(pw.clone());
            let y = t.conv2d(xv, &wv, None, 1)?;
            weighted_sum(t, &y, 10)
        },
        x,
    );
}

#[test]
fn grad_check_layer_norm() {
    let g = rand_tensor(&[4], 61);
    let b = rand_tensor(&[4], 62);
    let x = rand_tensor(&[2, 4, 3, 3], 63);
    check(
        |t, xv| {
            let gv = t.constant(g.clone());
            let bv = t.constant(b.clone());
            let y = t.layer_norm(xv, &gv, &bv, 1e-6)?;
            weighted_sum(t, &y, 11)
        },
        x.clone(),
    );
    check(
        |t, gv| {
            let xv = t.constant(x.clone());
            let bv = t.constant(b.clone());
            let y = t.layer_norm(&xv, gv, &bv, 1e-6)?;
            weighted_sum(t, &y, 12)
        },
        g.clone(),
    );
    check(
        |t, bv| {
            let xv = t.constant(x.clone());
            let gv = t.constant(g.clone());
            let y = t.layer_norm(&xv, &gv, bv, 1e-6)?;
            weighted_sum(t, &y, 13)
        },
        b.clone(),
    );
}

#[test]
fn grad_check_softmax_l2_scale() {
    check(
        |t, x| {
            let y = t.softmax(x, 2)?;
            weighted_sum(t, &y, 14)
        },
        rand_tensor(&[2, 3, 5], 70),
    );
    check(
        |t, x| {
            let y = t.softmax(x, 1)?;
            weighted_sum(t, &y, 15)
        },
        rand_tensor(&[2, 3, 5], 71),
    );
    check(
        |t, x| {
            let y = t.l2_normalize(x, 2, 1e-12)?;
            weighted_sum(t, &y, 16)
        },
        rand_tensor(&[2, 3, 5], 72),
    );
    check(
        |t, x| {
            let y = t.l2_normalize(x, 0, 1e-12)?;
            weighted_sum(t, &y, 17)
        },
        rand_tensor(&[2, 3, 5], 73),
    );
    let s = rand_tensor(&[3], 74);
    let x = rand_tensor(&[2, 3, 5], 75);
    check(
        |t, xv| {
            let sv = t.constant(s.clone());
            let y = t.scale_axis(xv, &sv, 1)?;
            weighted_sum(t, &y, 18)
        },
        x.clone(),
    );
    check(
        |t, sv| {
            let xv = t.constant(x.clone());
            let y = t.scale_axis(&xv, sv, 1)?;
            weighted_sum(t, &y, 19)
        },
        s,
    );
}

#[test]
fn grad_check_structural() {
    let other = rand_tensor(&[1, 3, 2, 4], 81);
    check(
        |t, x| {
            let y = t.pixel_unshuffle(x, 2)?;
            weighted_sum(t, &y, 20)
        },
        rand_tensor(&[1, 2, 4, 6], 80),
    );
    check(
        |t, x| {
            let y = t.pixel_shuffle(x, 2)?;
            weighted_sum(t, &y, 21)
        },
        rand_tensor(&[1, 8, 2, 3], 82),
    );
    check(
        |t, x| {
            let y = t.reshape(x, &[4, 6])?;
            weighted_sum(t, &y, 22)
        },
        rand_tensor(&[2, 3, 4], 83),
    );
    check(
        |t, x| {
            let y = t.permute(x, &[2, 0, 1])?;
            weighted_sum(t, &y, 23)
        },
        rand_tensor(&[2, 3, 4], 84),
    );
    check(
        |t, x| {
            let o = t.constant(other.clone());
            let y = t.concat(&[&o, x, &o], 1)?;
            weighted_sum(t, &y, 24)
        },
        rand_tensor(&[1, 2, 2, 4], 85),
    );
    check(
        |t, x| {
            let y = t.slice(x, 1, 1, 2)?;
            weighted_sum(t, &y, 25)
        },
        rand_tensor(&[2, 4, 3], 86),
    );
}

#[test]
fn grad_check_attention() {
    let (k, v) = (rand_tensor(&[2, 5, 3], 91), rand_tensor(&[2, 5, 3], 92));
    let q = rand_tensor(&[2, 5, 3], 90);
    let scale = 1.0 / 3f64.sqrt();
    check(
        |t, x| {
            let kv = t.constant(k.clone());
            let vv = t.constant(v.clone());
            let y = t.attention(x, &kv, &vv, scale)?;
            weighted_sum(t, &y, 26)
        },
        q.clone(),
    );
    check(
        |t, x| {
            let qv = t.constant(q.clone());
            let vv = t.constant(v.clone());
            let y = t.attention(&qv, x, &vv, scale)?;
            weighted_sum(t, &y, 27)
        },
        k.clone(),
    );
    check(
        |t, x| {
            let qv = t.constant(q.clone());
            let kv = t.constant(k.clone());
            let y = t.attention(&qv, &kv, x, scale)?;
            weighted_sum(t, &y, 28)
        },
        v.clone(),
    );
}

#[test]
fn fused_attention_matches_explicit_softmax() {
    let (q, k, v) = (
        rand_tensor(&[2, 6, 4], 93),
        rand_tensor(&[2, 6, 4], 94),
        rand_tensor(&[2, 6, 4], 95),
    );
    let mut tape = Tape::inference();
    let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
    let fused = tape.attention(&qv, &kv, &vv, 0.5).unwrap();
    let kt = tape.transpose(&kv, 1, 2).unwrap();
    let s = tape.matmul(&qv, &kt).unwrap();
    let s = tape.scalar_mul(&s, 0.5).unwrap();
    let p = tape.softmax(&s, 2).unwrap();
    let explicit = tape.matmul(&p, &vv).unwrap();
    assert!(fused.value().max_abs_diff(explicit.value()) < 1e-12);
}

#[test]
fn ops_are_deterministic() {
    let x = rand_tensor(&[2, 8, 6, 6], 100);
    let w = rand_tensor(&[8, 8, 3, 3], 101);
    let run = || {
        let mut tape = Tape::inference();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        tape.conv2d(&xv, &wv, None, 1).unwrap().into_tensor()
    };
    let a = crate::par::with_threads(1, run);
    let b = run();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}
