use super::*;
use approx::assert_abs_diff_eq;

fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(rows)
}

#[test]
fn matmul_identity_and_dot() {
    let mut g = Graph::new();
    let i = g.constant(t(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let b = g.constant(t(&[vec![2.0, 3.0], vec![4.0, 5.0]]));
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.value(c).data(), &[2.0, 3.0, 4.0, 5.0]);

    let r = g.constant(t(&[vec![1.0, 2.0]]));
    let col = g.constant(t(&[vec![3.0], vec![4.0]]));
    let d = g.matmul(r, col).unwrap();
    assert_eq!(g.value(d).data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::<f64>::zeros(&[2, 3]));
    let b = g.constant(Tensor::<f64>::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let m = g.constant(t(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![1000.0, 0.0]]));
    let s = g.softmax_rows(m).unwrap();
    let v = g.value(s);
    assert_abs_diff_eq!(v.at(0, 0), 0.5, epsilon = 1e-15);
    assert_abs_diff_eq!(v.at(0, 1), 0.5, epsilon = 1e-15);
    let e = std::f64::consts::E;
    assert_abs_diff_eq!(v.at(1, 0), e / (e + 1.0), epsilon = 1e-15);
    assert_abs_diff_eq!(v.at(1, 0), 0.7310586, epsilon = 1e-7);
    assert_abs_diff_eq!(v.at(1, 1), 0.2689414, epsilon = 1e-7);
    assert_abs_diff_eq!(v.at(2, 0), 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(v.at(2, 1), 0.0, epsilon = 1e-12);
}

#[test]
fn softmax_rejects_nan() {
    let mut g = Graph::new();
    let m = g.constant(t(&[vec![f64::NAN, 0.0]]));
    assert!(matches!(g.softmax_rows(m), Err(Error::Numeric(_))));
}

#[test]
fn l2_normalize_examples() {
    let mut g = Graph::new();
    let m = g.constant(t(&[vec![3.0, 4.0], vec![0.6, 0.8]]));
    let n = g.l2_normalize_rows(m).unwrap();
    let v = g.value(n);
    assert_abs_diff_eq!(v.at(0, 0), 0.6, epsilon = 1e-15);
    assert_abs_diff_eq!(v.at(0, 1), 0.8, epsilon = 1e-15);
    assert_abs_diff_eq!(v.at(1, 0), 0.6, epsilon = 1e-15);
    assert_abs_diff_eq!(v.at(1, 1), 0.8, epsilon = 1e-15);

    let z = g.constant(t(&[vec![1.0, 1.0], vec![0.0, 0.0]]));
    assert!(matches!(
        g.l2_normalize_rows(z),
        Err(Error::DegenerateEmbedding { row: 1, .. })
    ));
}

#[test]
fn backward_linear_and_quadratic() {
    let mut g = Graph::new();
    let w = g.constant(t(&[vec![1.5, -2.0, 0.25]]));
    let x = g.param(t(&[vec![0.3, 0.1, -4.0]]));
    let wx = g.mul(w, x).unwrap();
    let lin = g.sum(wx);
    let grads = g.backward(lin).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.5, -2.0, 0.25]);
    assert!(grads.get(w).is_none());

    let xx = g.mul(x, x).unwrap();
    let quad = g.sum(xx);
    let grads = g.backward(quad).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.6, 0.2, -8.0]);
    assert_eq!(grads.get(quad).unwrap().data(), &[1.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.param(Tensor::<f64>::zeros(&[2, 2]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn repeated_backward_resets_unless_accumulating() {
    let mut g = Graph::new();
    let x = g.param(t(&[vec![1.0, 2.0]]));
    let xx = g.mul(x, x).unwrap();
    let loss = g.sum(xx);
    let first = g.backward(loss).unwrap();
    let second = g.backward(loss).unwrap();
    assert_eq!(first.get(x), second.get(x));

    let mut acc = g.backward(loss).unwrap();
    g.backward_into(loss, &mut acc).unwrap();
    assert_eq!(acc.get(x).unwrap().data(), &[4.0, 8.0]);
}

#[test]
fn frobenius_norm_zero_has_zero_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::<f64>::zeros(&[2, 3]));
    let n = g.frobenius_norm(x);
    let grads = g.backward(n).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn log_rejects_non_positive() {
    let mut g = Graph::new();
    let x = g.constant(t(&[vec![1.0, 0.0]]));
    assert!(matches!(g.log(x), Err(Error::Numeric(_))));
}

#[test]
fn row_max_except_skips_excluded_column() {
    let mut g = Graph::new();
    let m = g.param(t(&[vec![9.0, 2.0, 5.0], vec![1.0, 7.0, 3.0]]));
    let r = g.row_max_except(m, &[0, 1]).unwrap();
    assert_eq!(g.value(r).data(), &[5.0, 3.0]);
    let s = g.sum(r);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(m).unwrap().data(), &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn tensor_rejects_bad_lengths() {
    assert!(Tensor::<f64>::from_vec(vec![2, 2], vec![1.0; 3]).is_err());
    assert!(Tensor::<f64>::from_vec(vec![0, 2], vec![]).is_err());
}

#[test]
fn f32_graph_works() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::from_rows(&[vec![3.0f32, 4.0]]));
    let n = g.l2_normalize_rows(x).unwrap();
    assert!((g.value(n).at(0, 1) - 0.8).abs() < 1e-6);
}
