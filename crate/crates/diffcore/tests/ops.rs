use diffcore::{DiffError, Graph, Tensor};
use proptest::prelude::*;

#[test]
fn identity_matmul_returns_operand() {
    let mut g = Graph::<f64>::new();
    let i = g.constant(Tensor::identity(2));
    let a = g.constant(Tensor::new(&[2, 2], vec![1.0, -2.0, 3.5, 4.0]).unwrap());
    let y = g.matmul(i, a).unwrap();
    assert_eq!(g.value(y), g.value(a));
}

#[test]
fn centered_delta_kernel_is_identity() {
    let x = Tensor::<f64>::from_fn(&[1, 2, 4, 3, 5], |i| (i as f64 * 0.37).sin());
    let mut k = Tensor::zeros(&[2, 2, 3, 3, 3]);
    k.set(&[0, 0, 1, 1, 1], 1.0);
    k.set(&[1, 1, 1, 1, 1], 1.0);
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(k));
    let y = g.conv3d(xv, kv, None, 1, 1).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn strided_conv_then_transpose_restores_extent() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[2, 3, 8, 6, 4], 0.5));
    let w = g.constant(Tensor::full(&[5, 3, 3, 3, 3], 0.1));
    let down = g.conv3d(x, w, None, 2, 1).unwrap();
    assert_eq!(g.shape(down), &[2, 5, 4, 3, 2]);
    let wt = g.constant(Tensor::full(&[5, 3, 2, 2, 2], 0.1));
    let up = g.conv_transpose3d(down, wt, None, 2, 0).unwrap();
    assert_eq!(g.shape(up), &[2, 3, 8, 6, 4]);
    let tri = g.upsample2(down).unwrap();
    assert_eq!(g.shape(tri), &[2, 5, 8, 6, 4]);
}

#[test]
fn uniform_logits_give_uniform_softmax() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[4]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.25; 4]);
}

#[test]
fn shape_errors_name_the_operation_and_axes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert!(matches!(&err, DiffError::Shape { op: "matmul", .. }));
    assert!(err.to_string().contains("[2, 3]"));

    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4, 4]));
    let w = g.constant(Tensor::zeros(&[3, 5, 3, 3, 3]));
    let err = g.conv3d(x, w, None, 1, 1).unwrap_err();
    assert!(err.to_string().contains("axis 1"), "{err}");
}

#[test]
fn non_finite_input_is_a_numeric_error() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(&[2], vec![1.0, f32::NAN]).unwrap());
    assert_eq!(g.sigmoid(x).unwrap_err(), DiffError::NonFinite { op: "sigmoid" });
}

#[test]
fn causal_attention_ignores_later_positions() {
    let mut g = Graph::<f64>::new();
    let base = Tensor::from_fn(&[1, 5, 4], |i| (i as f64 * 0.71).cos());
    let mut probe = base.clone();
    for j in 0..4 {
        probe.set(&[0, 4, j], 9.0);
    }
    let mut run = |t: Tensor<f64>| {
        let v = g.constant(t);
        let y = g.attention(v, v, v, 2, true).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(base), run(probe));
    assert_eq!(&a.data()[..16], &b.data()[..16]);
    assert_ne!(&a.data()[16..], &b.data()[16..]);
}

proptest! {
    #[test]
    fn softmax_rows_are_stochastic(vals in prop::collection::vec(-30.0f64..30.0, 24), axis in 0usize..3) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[2, 3, 4], vals).unwrap());
        let y = g.softmax(x, axis).unwrap();
        let p = g.value(y);
        let s = [2, 3, 4];
        let n = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let outer: usize = s[..axis].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let total: f64 = (0..n).map(|j| p.data()[(o * n + j) * inner + i]).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
        prop_assert!(p.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn concat_then_split_is_identity(a in 1usize..4, b in 1usize..4, axis in 0usize..2, seed in 0u64..1000) {
        let mut g = Graph::<f64>::new();
        let mut sa = [3, 2];
        let mut sb = [3, 2];
        sa[axis] = a;
        sb[axis] = b;
        let ta = Tensor::from_fn(&sa, |i| (i as f64 + seed as f64).sin());
        let tb = Tensor::from_fn(&sb, |i| (i as f64 * 3.0 + seed as f64).cos());
        let (va, vb) = (g.constant(ta.clone()), g.constant(tb.clone()));
        let c = g.concat(&[va, vb], axis).unwrap();
        let parts = g.split(c, axis, &[a, b]).unwrap();
        prop_assert_eq!(g.value(parts[0]), &ta);
        prop_assert_eq!(g.value(parts[1]), &tb);
    }
}
