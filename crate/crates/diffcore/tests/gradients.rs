use diffcore::{gradcheck, Graph, OpKind, ParamStore, Tensor};

const TOL: f64 = 1e-5;

#[test]
fn every_kind_passes_gradcheck_over_five_seeds() {
    for kind in OpKind::ALL {
        for seed in 0..5 {
            let err = gradcheck(kind, seed).unwrap();
            assert!(err < TOL, "{kind} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn reference_shapes_are_well_below_tolerance() {
    assert!(gradcheck(OpKind::MatMul, 7).unwrap() < 1e-6);
    assert!(gradcheck(OpKind::Conv3d, 1).unwrap() < 1e-6);
    assert!(gradcheck(OpKind::Attention, 3).unwrap() < 1e-6);
}

#[test]
fn sum_of_weights_has_unit_gradient() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::new(&[3], vec![0.3, -2.0, 5.0]).unwrap());
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let loss = g.sum(wv).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.param(w).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn square_sum_gradient_is_twice_the_weight() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let sq = g.mul(wv, wv).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.param(w).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn mean_sigmoid_at_zero_has_quarter_slope() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::zeros(&[1]));
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let s = g.sigmoid(wv).unwrap();
    let loss = g.mean(s).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.param(w).unwrap().data(), &[0.25]);
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::full(&[2], 1.5));
    let b = store.add("b", Tensor::full(&[2], -0.5));
    store.set_frozen(a, true);
    let mut g = Graph::new();
    let (av, bv) = (g.param(&store, a), g.param(&store, b));
    let p = g.mul(av, bv).unwrap();
    let loss = g.sum(p).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.param(a).is_none());
    assert_eq!(grads.param(b).unwrap().data(), &[1.5, 1.5]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[2, 2]));
    let y = g.sigmoid(x).unwrap();
    assert!(matches!(g.backward(y), Err(diffcore::DiffError::NotScalar(s)) if s == vec![2, 2]));
}

#[test]
fn repeated_backward_is_bitwise_identical() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
    let w = store.add("w", Tensor::randn(&[4, 2, 3, 3, 3], 0.3, &mut rng));
    let x = Tensor::<f32>::randn(&[1, 2, 4, 4, 4], 1.0, &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let wv = g.param(&store, w);
    let y = g.conv3d(xv, wv, None, 1, 1).unwrap();
    let s = g.softplus(y).unwrap();
    let loss = g.mean(s).unwrap();
    let first = g.backward(loss).unwrap();
    let second = g.backward(loss).unwrap();
    assert!(first.param(w).unwrap().bitwise_eq(second.param(w).unwrap()));
}
