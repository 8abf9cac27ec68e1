use approx::assert_abs_diff_eq;
use ndarray::{array, Array2};
use proptest::prelude::*;

use super::*;
use crate::error::Error;
use crate::random::{normal_matrix, seeded};

#[test]
fn matmul_identity_and_dot() {
    let tape = Tape::<f64>::new();
    let i2 = tape.constant(Array2::eye(2));
    let m = tape.constant(array![[1.0, 2.0], [3.0, 4.0]]);
    assert_eq!(i2.matmul(m).unwrap().to_array(), array![[1.0, 2.0], [3.0, 4.0]]);

    let a = tape.constant(array![[1.0, 2.0]]);
    let b = tape.constant(array![[3.0], [4.0]]);
    assert_eq!(a.matmul(b).unwrap().to_array(), array![[11.0]]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Array2::zeros((2, 3)));
    let b = tape.constant(Array2::zeros((2, 3)));
    match a.matmul(b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, (2, 3));
            assert_eq!(rhs, (2, 3));
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_sum_gradient_matches_closed_form_and_fd() {
    let mut rng = seeded(3);
    let a: Array2<f64> = normal_matrix(&mut rng, 5, 7, 1.0);
    let b: Array2<f64> = normal_matrix(&mut rng, 7, 3, 1.0);

    let tape = Tape::new();
    let va = tape.leaf(a.clone());
    let vb = tape.constant(b.clone());
    let loss = va.matmul(vb).unwrap().sum();
    let grads = tape.backward(loss).unwrap();
    let expected = Array2::<f64>::ones((5, 3)).dot(&b.t());
    assert_abs_diff_eq!(grads.wrt(va).unwrap(), &expected, epsilon = 1e-12);

    let err = finite_difference_check(&[a, b], 1e-5, |_, v| Ok(v[0].matmul(v[1])?.sum())).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn pointwise_reference_values() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(array![[0.0, -3.0, 3.0, 1.0]]);
    assert_eq!(x.relu().to_array(), array![[0.0, 0.0, 3.0, 1.0]]);
    let g = x.gelu().to_array();
    assert_eq!(g[[0, 0]], 0.0);
    // extended-precision evaluation of the tanh approximation
    assert_abs_diff_eq!(g[[0, 3]], 0.841_191_990_608_276_7, epsilon = 1e-15);
    assert_abs_diff_eq!(g[[0, 3]], 0.841192, epsilon = 5e-7);
}

#[test]
fn softmax_reference_rows() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(array![[0.0, 0.0], [1000.0, 1000.0], [0.0, 3f64.ln()]]);
    let y = x.softmax_rows().to_array();
    assert_eq!(y.row(0).to_vec(), vec![0.5, 0.5]);
    assert_eq!(y.row(1).to_vec(), vec![0.5, 0.5]);
    assert_abs_diff_eq!(y[[2, 0]], 0.25, epsilon = 1e-15);
    assert_abs_diff_eq!(y[[2, 1]], 0.75, epsilon = 1e-15);
}

#[test]
fn backward_examples() {
    let tape = Tape::<f64>::new();
    let w = tape.leaf(array![[1.0, -2.0, 0.5], [0.3, 0.0, 4.0]]);
    let x = tape.constant(array![[2.0], [-1.0], [3.0]]);
    let loss = w.matmul(x).unwrap().sum();
    let grads = tape.backward(loss).unwrap();
    let expected = Array2::<f64>::ones((2, 1)).dot(&array![[2.0, -1.0, 3.0]]);
    assert_eq!(grads.wrt(w).unwrap(), &expected);

    let tape = Tape::<f64>::new();
    let y = tape.leaf(array![[1.5, -2.0, 0.25]]);
    let loss = y.square().sum();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(y).unwrap(), &array![[3.0, -4.0, 0.5]]);
}

#[test]
fn unreached_leaf_gets_zero_gradient() {
    let tape = Tape::<f64>::new();
    let a = tape.leaf(array![[1.0, 2.0]]);
    let unused = tape.leaf(array![[5.0], [6.0]]);
    let grads = tape.backward(a.sum()).unwrap();
    assert_eq!(grads.wrt(unused).unwrap(), &Array2::<f64>::zeros((2, 1)));
    assert_eq!(grads.leaf_count(), 2);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let tape = Tape::<f64>::new();
    let a = tape.leaf(array![[1.0, 2.0]]);
    assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
}

#[test]
fn named_params_share_one_accumulator() {
    let w0 = array![[2.0]];
    let tape = Tape::<f64>::new();
    let mut x = tape.constant(array![[1.0]]);
    for _ in 0..3 {
        let w = tape.param("w", &w0);
        x = x.matmul(w).unwrap();
    }
    // x = w^3, d/dw = 3w^2 = 12
    let grads = tape.backward(x.sum()).unwrap();
    assert_eq!(grads.named("w").unwrap(), &array![[12.0]]);
    assert_eq!(grads.leaf_count(), 1);
}

#[test]
fn two_layer_gelu_gradients_match_fd() {
    let mut rng = seeded(11);
    let params: Vec<Array2<f64>> = vec![
        normal_matrix(&mut rng, 4, 6, 1.0),
        normal_matrix(&mut rng, 6, 8, 0.5),
        normal_matrix(&mut rng, 1, 8, 0.5),
        normal_matrix(&mut rng, 8, 3, 0.5),
        normal_matrix(&mut rng, 1, 3, 0.5),
    ];
    let err = finite_difference_check(&params, 1e-5, |_, v| {
        let h = v[0].matmul(v[1])?.add(v[2])?.gelu();
        let out = h.matmul(v[3])?.add(v[4])?;
        Ok(out.square().mean())
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn quadratic_fd_is_exact() {
    let p = vec![array![[0.7, -1.3], [2.0, 0.1]]];
    let err = finite_difference_check(&p, 1e-4, |t, v| {
        let c = t.constant(array![[1.0, 2.0], [3.0, -1.0]]);
        Ok(v[0].sub(c)?.square().sum().scale(0.5))
    })
    .unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn fd_rejects_bad_step_and_nondeterminism() {
    let p = vec![array![[1.0]]];
    assert!(matches!(
        finite_difference_check(&p, 1e-2, |_, v| Ok(v[0].sum())),
        Err(Error::Oracle(_))
    ));
    let calls = std::cell::Cell::new(0.0);
    let res = finite_difference_check(&p, 1e-5, |t, v| {
        calls.set(calls.get() + 1.0);
        v[0].add(t.scalar(calls.get())).map(|x| x.sum())
    });
    assert!(matches!(res, Err(Error::Oracle(_))));
}

#[test]
fn every_primitive_passes_fd_on_random_instances() {
    type LossFn = for<'t> fn(&'t Tape<f64>, &[Var<'t, f64>]) -> crate::Result<Var<'t, f64>>;
    let cases: Vec<(&str, LossFn)> = vec![
        ("matmul", |_, v| Ok(v[0].matmul(v[1].t())?.square().sum())),
        ("add_row", |t, v| {
            let row = t.constant(Array2::from_elem((1, 3), 1.0 / 3.0)).matmul(v[1])?;
            Ok(v[0].add(row)?.square().sum())
        }),
        ("sub", |_, v| Ok(v[0].sub(v[1])?.square().sum())),
        ("hadamard", |_, v| Ok(v[0].mul(v[1])?.sum())),
        ("scale", |_, v| Ok(v[0].affine(-1.7, 0.3).square().sum())),
        ("relu", |_, v| Ok(v[0].relu().mul(v[1])?.sum())),
        ("sigmoid", |_, v| Ok(v[0].sigmoid().mul(v[1])?.sum())),
        ("exp", |_, v| Ok(v[0].scale(0.5).exp().mul(v[1])?.sum())),
        ("tanh", |_, v| Ok(v[0].tanh().mul(v[1])?.sum())),
        ("gelu", |_, v| Ok(v[0].gelu().mul(v[1])?.sum())),
        ("softmax", |_, v| Ok(v[0].softmax_rows().mul(v[1])?.sum())),
        ("concat", |t, v| Ok(t.concat_cols(&[v[0], v[1]])?.square().sum())),
    ];
    let mut rng = seeded(99);
    for (name, f) in cases {
        for _ in 0..50 {
            let a: Array2<f64> = normal_matrix(&mut rng, 3, 3, 1.0);
            let b: Array2<f64> = normal_matrix(&mut rng, 3, 3, 1.0);
            let err = finite_difference_check(&[a, b], 1e-5, f).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = seeded(5);
    let w: Array2<f64> = normal_matrix(&mut rng, 4, 4, 1.0);
    let x: Array2<f64> = normal_matrix(&mut rng, 2, 4, 1.0);
    let (alpha, beta) = (0.75, -2.5);
    let grad_of = |mix: Option<(f64, f64)>, which: usize| {
        let tape = Tape::new();
        let vw = tape.leaf(w.clone());
        let h = tape.constant(x.clone()).matmul(vw).unwrap();
        let l1 = h.gelu().sum();
        let l2 = h.square().mean();
        let loss = match mix {
            Some((a, b)) => l1.scale(a).add(l2.scale(b)).unwrap(),
            None if which == 1 => l1,
            None => l2,
        };
        tape.backward(loss).unwrap().wrt(vw).unwrap().clone()
    };
    let combined = grad_of(Some((alpha, beta)), 0);
    let separate = grad_of(None, 1) * alpha + grad_of(None, 2) * beta;
    assert_abs_diff_eq!(combined, separate, epsilon = 1e-12);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut rng = seeded(8);
    let a: Array2<f64> = normal_matrix(&mut rng, 6, 6, 1.0);
    let run = || {
        let tape = Tape::new();
        let v = tape.constant(a.clone());
        v.matmul(v.softmax_rows()).unwrap().gelu().to_array()
    };
    let (r1, r2) = (run(), run());
    assert!(r1.iter().zip(r2.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-1000.0f64..1000.0, 12)) {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Array2::from_shape_vec((3, 4), values).unwrap());
        let y = x.softmax_rows().to_array();
        for row in y.rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }
}
