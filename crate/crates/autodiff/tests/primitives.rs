use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robustsim_autodiff::{
    evaluate, finite_diff_grad, max_relative_error, value_and_grad, Graph, Padding, TapeError, Tensor, Var,
};

fn vec1(v: &[f64]) -> Tensor {
    Tensor::from_vec(v.to_vec())
}

#[test]
fn scalar_product_forward() {
    let out = evaluate(&[vec1(&[2.0]), vec1(&[3.0])], |_, v| v[0].mul(v[1])).unwrap();
    assert_eq!(out.data(), &[6.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let out = evaluate(&[vec1(&[0.0, 0.0])], |_, v| v[0].softmax()).unwrap();
    assert_eq!(out.data(), &[0.5, 0.5]);
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let out = evaluate(&[vec1(&[3.5; 6])], |_, v| v[0].layer_norm()).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn square_derivative() {
    let (value, grads) = value_and_grad(&[Tensor::scalar(3.0)], |_, v| v[0].square()).unwrap();
    assert_eq!(value, 9.0);
    assert_eq!(grads[0].data(), &[6.0]);
}

#[test]
fn norm_derivative_is_unit_direction() {
    let (value, grads) = value_and_grad(&[vec1(&[3.0, 4.0])], |_, v| v[0].l2_norm()).unwrap();
    assert_eq!(value, 5.0);
    assert!((grads[0].data()[0] - 0.6).abs() < 1e-15);
    assert!((grads[0].data()[1] - 0.8).abs() < 1e-15);
}

#[test]
fn backward_rejects_non_scalar_output() {
    let g = Graph::new();
    let x = g.input(vec1(&[1.0, 2.0])).unwrap();
    let y = x.scale(2.0).unwrap();
    assert!(matches!(g.backward(y), Err(TapeError::Contract(_))));
}

#[test]
fn shape_mismatch_is_a_dimension_error() {
    let g = Graph::new();
    let a = g.input(vec1(&[1.0, 2.0])).unwrap();
    let b = g.input(vec1(&[1.0, 2.0, 3.0])).unwrap();
    assert!(matches!(a.add(b), Err(TapeError::Shape { op: "add", .. })));
    let m = g.input(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(m.matmul(m), Err(TapeError::Shape { .. })));
    let img = g.input(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
    let w = g.input(Tensor::zeros(&[3, 1, 3, 3])).unwrap();
    assert!(matches!(img.conv2d(w, None, 1, Padding::Same), Err(TapeError::Shape { .. })));
}

#[test]
fn non_finite_intermediate_is_a_numeric_error() {
    let g = Graph::new();
    let x = g.input(vec1(&[-1.0])).unwrap();
    assert!(matches!(x.log(), Err(TapeError::NonFinite { op: "log" })));
    let big = g.input(vec1(&[1000.0])).unwrap();
    assert!(matches!(big.exp(), Err(TapeError::NonFinite { .. })));
}

#[test]
fn norm_gradient_at_zero_is_an_error() {
    let r = value_and_grad(&[Tensor::zeros(&[3])], |_, v| v[0].l2_norm());
    assert!(matches!(r, Err(TapeError::NonFinite { .. })));
}

#[test]
fn unconnected_leaf_gets_zero_gradient() {
    let (_, grads) = value_and_grad(&[vec1(&[1.0, 2.0]), vec1(&[5.0])], |_, v| v[0].sum()).unwrap();
    assert_eq!(grads[1].data(), &[0.0]);
    assert_eq!(grads[0].shape(), &[2]);
}

#[test]
fn finite_difference_examples() {
    let x = Tensor::scalar(3.0);
    let g = finite_diff_grad(|t| Ok(t.item()? * t.item()?), &x, 1e-5).unwrap();
    assert!((g.data()[0] - 6.0).abs() < 1e-6);
    let g = finite_diff_grad(|_| Ok(4.2), &vec1(&[1.0, -2.0, 0.5]), 1e-5).unwrap();
    assert!(g.data().iter().all(|&v| v == 0.0));
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rand = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let leaves = vec![rand(&[4, 6]), rand(&[6, 8]), rand(&[8]), rand(&[8, 3]), rand(&[3])];
    fn mlp<'g>(v: &[Var<'g>]) -> robustsim_autodiff::Result<Var<'g>> {
        let h = v[0].matmul(v[1])?.add_bias(v[2])?.gelu()?;
        let out = h.matmul(v[3])?.add_bias(v[4])?;
        out.log_softmax()?.mean()
    }
    let (_, grads) = value_and_grad(&leaves, |_, v| mlp(v)).unwrap();
    for (i, grad) in grads.iter().enumerate() {
        let fd = finite_diff_grad(
            |t| {
                let mut probe = leaves.clone();
                probe[i] = t.clone();
                evaluate(&probe, |_, v| mlp(v))?.item()
            },
            &leaves[i],
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(grad, &fd) < 1e-4, "leaf {i}");
    }
}

#[test]
fn concat_and_slice_round_trip() {
    let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::new(vec![2, 1], vec![9.0, 8.0]).unwrap();
    let out = evaluate(&[a, b], |_, v| Var::concat(&[v[0], v[1]], 1)).unwrap();
    assert_eq!(out.data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
    let back = evaluate(&[out], |_, v| v[0].slice(1, 1, 2)).unwrap();
    assert_eq!(back.data(), &[2.0, 9.0, 4.0, 8.0]);
}

#[test]
fn same_padding_keeps_spatial_size() {
    let out = evaluate(&[Tensor::ones(&[1, 1, 5, 5]), Tensor::ones(&[1, 1, 3, 3])], |_, v| {
        v[0].conv2d(v[1], None, 1, Padding::Same)
    })
    .unwrap();
    assert_eq!(out.shape(), &[1, 1, 5, 5]);
    // corner sees a 2x2 window, centre the full 3x3
    assert_eq!(out.data()[0], 4.0);
    assert_eq!(out.data()[12], 9.0);
}
