mod common;

use common::{grad_check, project, random_tensor, rng};
use proptest::prelude::*;
use sdb_core::diffcore::{gelu, gelu_grad, Adam, F64Bits, NodeId, OpKind, Tape, Tensor};
use sdb_core::Error;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn check_op(shapes: &[&[usize]], f: impl Fn(&mut Tape, &[NodeId]) -> sdb_core::Result<NodeId>) {
    for point in 0..10 {
        let mut r = rng(100 + point);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(s, &mut r)).collect();
        let err = grad_check(&inputs, H, |t, ids| {
            let y = f(t, ids)?;
            project(t, y, 7)
        });
        assert!(err < TOL, "point {point}: relative error {err}");
    }
}

#[test]
fn matmul_identity_returns_operand() {
    let mut tape = Tape::new();
    let a = Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 4.0]).unwrap();
    let i = tape.constant(Tensor::identity(2));
    let an = tape.constant(a.clone());
    let out = tape.apply(OpKind::MatMul, &[i, an]).unwrap();
    assert_eq!(tape.value(out).unwrap(), &a);
}

#[test]
fn softmax_of_equal_row_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 4], 2.5));
    let s = tape.softmax_rows(x).unwrap();
    let v = tape.value(s).unwrap();
    assert!(v.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    assert!((v.data().iter().sum::<f64>() - 1.0).abs() < 1e-15);
}

#[test]
fn gelu_derivative_matches_central_differences() {
    let mut r = rng(3);
    for _ in 0..100 {
        let x: f64 = rand::Rng::random_range(&mut r, -4.0..4.0);
        let fd = (gelu(x + H) - gelu(x - H)) / (2.0 * H);
        assert!(common::rel_err(gelu_grad(x), fd) < TOL, "x = {x}");
    }
}

#[test]
fn elementwise_ops_pass_gradient_check() {
    check_op(&[&[3, 4], &[3, 4]], |t, x| t.add(x[0], x[1]));
    check_op(&[&[3, 4], &[3, 4]], |t, x| t.sub(x[0], x[1]));
    check_op(&[&[3, 4], &[3, 4]], |t, x| t.mul(x[0], x[1]));
    check_op(&[&[3, 4]], |t, x| t.scale(x[0], -1.7));
    check_op(&[&[3, 4]], |t, x| t.apply(OpKind::Scale(F64Bits::new(0.3)), &[x[0]]));
    check_op(&[&[3, 4]], |t, x| t.gelu(x[0]));
}

#[test]
fn matrix_ops_pass_gradient_check() {
    check_op(&[&[3, 4], &[4, 2]], |t, x| t.matmul(x[0], x[1]));
    check_op(&[&[3, 4]], |t, x| t.transpose(x[0]));
    check_op(&[&[3, 5]], |t, x| t.softmax_rows(x[0]));
    check_op(&[&[4, 6], &[6], &[6]], |t, x| t.layer_norm(x[0], x[1], x[2]));
    check_op(&[&[3, 4], &[4]], |t, x| t.add_bias(x[0], x[1]));
    check_op(&[&[3, 4]], |t, x| t.scale_rows(x[0], &[0.5, -2.0, 3.0]));
}

#[test]
fn reductions_and_row_ops_pass_gradient_check() {
    check_op(&[&[3, 4]], |t, x| t.sum(x[0]));
    check_op(&[&[3, 4], &[3, 4]], |t, x| t.mse(x[0], x[1]));
    check_op(&[&[2, 3], &[1, 3], &[4, 3]], |t, x| t.concat_rows(x));
    check_op(&[&[5, 3]], |t, x| t.slice_rows(x[0], 1, 4));
    check_op(&[&[5, 3]], |t, x| t.apply(OpKind::SliceRows { start: 0, end: 2 }, x));
}

#[test]
fn attention_passes_gradient_check() {
    check_op(&[&[6, 4], &[6, 4], &[6, 4]], |t, x| t.attention(x[0], x[1], x[2], 2, 3, 2));
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::new();
    let x = tape.param(random_tensor(&[2, 3], &mut rng(1)));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap().get(x).unwrap();
    assert!(g.data().iter().all(|&v| v == 1.0));
}

#[test]
fn self_mse_gradient_is_zero() {
    let mut tape = Tape::new();
    let x = tape.param(random_tensor(&[2, 3], &mut rng(2)));
    let l = tape.mse(x, x).unwrap();
    let g = tape.backward(l).unwrap().get(x).unwrap();
    assert!(g.data().iter().all(|&v| v == 0.0));
}

#[test]
fn untouched_leaf_gets_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(random_tensor(&[2, 2], &mut rng(3)));
    let unused = tape.param(random_tensor(&[3], &mut rng(4)));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap().get(unused).unwrap();
    assert_eq!(g, Tensor::zeros(&[3]));
}

#[test]
fn non_scalar_loss_is_a_contract_error() {
    let mut tape = Tape::new();
    let x = tape.param(random_tensor(&[2, 2], &mut rng(5)));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn shape_mismatch_names_the_op() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 3]));
    match tape.add(a, b) {
        Err(Error::Dimension { op, .. }) => assert_eq!(op, "add"),
        other => panic!("unexpected {other:?}"),
    }
    match tape.matmul(a, a) {
        Err(Error::Dimension { op, .. }) => assert_eq!(op, "matmul"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn non_finite_result_is_a_numeric_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::full(&[1, 2], 1e200));
    assert!(matches!(tape.mul(a, a), Err(Error::Numeric { .. })));
}

#[test]
fn cleared_tape_rejects_old_ids() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(1.0));
    tape.clear();
    assert!(tape.value(x).is_err());
    let y = tape.param(Tensor::scalar(2.0));
    let s = tape.sum(y).unwrap();
    let grads = tape.backward(s).unwrap();
    assert!(grads.get(x).is_err());
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut r = rng(9);
    let a_in = random_tensor(&[3, 4], &mut r);
    let b_in = random_tensor(&[4, 3], &mut r);
    let grads = |ca: f64, cb: f64| {
        let mut tape = Tape::new();
        let a = tape.param(a_in.clone());
        let b = tape.param(b_in.clone());
        let m = tape.matmul(a, b).unwrap();
        let g = tape.gelu(m).unwrap();
        let l1 = tape.sum(g).unwrap();
        let sm = tape.softmax_rows(m).unwrap();
        let l2 = project(&mut tape, sm, 11).unwrap();
        let l1 = tape.scale(l1, ca).unwrap();
        let l2 = tape.scale(l2, cb).unwrap();
        let l = tape.add(l1, l2).unwrap();
        let g = tape.backward(l).unwrap();
        g.get(a).unwrap()
    };
    let (ca, cb) = (0.7, -1.3);
    let both = grads(ca, cb);
    let g1 = grads(1.0, 0.0);
    let g2 = grads(0.0, 1.0);
    for i in 0..both.len() {
        let expect = ca * g1.data()[i] + cb * g2.data()[i];
        assert!((both.data()[i] - expect).abs() < 1e-10);
    }
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let run = || {
        let mut r = rng(12);
        let mut tape = Tape::new();
        let x = tape.param(random_tensor(&[6, 4], &mut r));
        let g = tape.param(random_tensor(&[4], &mut r));
        let b = tape.param(random_tensor(&[4], &mut r));
        let n = tape.layer_norm(x, g, b).unwrap();
        let a = tape.attention(n, n, n, 2, 3, 2).unwrap();
        tape.value(a).unwrap().clone()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn adam_leaves_params_unchanged_for_zero_gradient() {
    let mut adam = Adam::new();
    let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
    let before = p.clone();
    for _ in 0..5 {
        adam.step(&mut [&mut p], &[Tensor::zeros(&[3])], 1e-2).unwrap();
    }
    assert_eq!(p, before);
}

#[test]
fn adam_minimises_a_scalar_quadratic() {
    let target = 1.5;
    let mut adam = Adam::new();
    let mut x = Tensor::scalar(0.0);
    for _ in 0..500 {
        let g = Tensor::scalar(2.0 * (x.item() - target));
        adam.step(&mut [&mut x], &[g], 1e-2).unwrap();
    }
    assert!((x.item() - target).abs() < 1e-3, "x = {}", x.item());
}

#[test]
fn adam_updates_parameters_independently() {
    let run = |g2: f64| {
        let mut adam = Adam::new();
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(1.0);
        for _ in 0..10 {
            adam.step(&mut [&mut a, &mut b], &[Tensor::scalar(0.3), Tensor::scalar(g2)], 1e-2)
                .unwrap();
        }
        (a.item(), b.item())
    };
    let (a1, b1) = run(0.0);
    let (a2, b2) = run(-5.0);
    assert_eq!(a1, a2);
    assert_eq!(b1, 1.0);
    assert!(b2 > 1.0);
}

#[test]
fn adam_rejects_misaligned_gradients() {
    let mut adam = Adam::new();
    let mut p = Tensor::zeros(&[2]);
    assert!(matches!(adam.step(&mut [&mut p], &[], 1e-2), Err(Error::Contract(_))));
    assert!(matches!(
        adam.step(&mut [&mut p], &[Tensor::zeros(&[3])], 1e-2),
        Err(Error::Contract(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], values).unwrap());
        let s = tape.softmax_rows(x).unwrap();
        let v = tape.value(s).unwrap();
        for r in 0..3 {
            prop_assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_length_matches_shape(rows in 1usize..6, cols in 1usize..6) {
        let t = Tensor::zeros(&[rows, cols]);
        prop_assert_eq!(t.len(), rows * cols);
        prop_assert!(Tensor::new(vec![rows, cols], vec![0.0; rows * cols + 1]).is_err());
    }
}
