use approx::assert_abs_diff_eq;
use sfa_tensor::{Elementwise, Init, ReduceKind, Tape, Tensor, TensorError};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::create(shape, Init::Data(data.to_vec())).unwrap()
}

#[test]
fn create_fills() {
    let z = Tensor::<f64>::create(&[2, 2], Init::Zeros).unwrap();
    assert_eq!(z.data(), &[0.0; 4]);
    let c = Tensor::<f64>::create(&[3], Init::Constant(1.0)).unwrap();
    assert_eq!(c.data(), &[1.0, 1.0, 1.0]);
    assert!(!c.requires_grad());
}

#[test]
fn create_uniform_is_seeded() {
    let init = Init::Uniform {
        lo: -1.0,
        hi: 1.0,
        seed: 7,
    };
    let a = Tensor::<f64>::create(&[2], init.clone()).unwrap();
    let b = Tensor::<f64>::create(&[2], init).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.id(), b.id());
    assert!(a.data().iter().all(|v| (-1.0..1.0).contains(v)));
}

#[test]
fn create_rejects_bad_shapes() {
    let err = Tensor::<f64>::create(&[2, 2], Init::Data(vec![1.0; 3])).unwrap_err();
    assert!(matches!(err, TensorError::DataLength { expected: 4, actual: 3, .. }));
    assert!(matches!(
        Tensor::<f64>::create(&[2, 0], Init::Zeros),
        Err(TensorError::ZeroExtent(_))
    ));
}

#[test]
fn clone_gets_new_identity() {
    let a = t(&[2], &[1.0, 2.0]);
    let b = a.clone();
    assert_eq!(a, b);
    assert_ne!(a.id(), b.id());
}

#[test]
fn sigmoid_and_tanh_at_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::<f64>::zeros(&[2, 3]));
    let s = tape.elementwise(Elementwise::Sigmoid(x)).unwrap();
    let h = tape.elementwise(Elementwise::Tanh(x)).unwrap();
    assert!(tape.value(s).iter().all(|&v| v == 0.5));
    assert!(tape.value(h).iter().all(|&v| v == 0.0));
}

#[test]
fn mul_broadcasts_scalar() {
    let mut tape = Tape::new();
    let a = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
    let b = tape.leaf(&t(&[1], &[2.0]));
    let c = tape.elementwise(Elementwise::Mul(a, b)).unwrap();
    assert_eq!(tape.value(c), &[2.0, 4.0, 6.0]);
    let s = tape.elementwise(Elementwise::Scale(a, 0.5)).unwrap();
    assert_eq!(tape.value(s), &[0.5, 1.0, 1.5]);
}

#[test]
fn incompatible_shapes_error() {
    let mut tape = Tape::new();
    let a = tape.leaf(&t(&[2], &[1.0, 2.0]));
    let b = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
    assert!(matches!(tape.add(a, b), Err(TensorError::Shape { op: "add", .. })));
}

#[test]
fn matmul_identity_and_dot() {
    let mut tape = Tape::new();
    let eye = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let x = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let y = tape.matmul(eye, x).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let a = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
    let b = tape.leaf(&t(&[2, 1], &[3.0, 4.0]));
    let d = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(d), &[1, 1]);
    assert_eq!(tape.value(d), &[11.0]);

    assert!(matches!(tape.matmul(a, a), Err(TensorError::Shape { op: "matmul", .. })));
}

#[test]
fn mean_of_constant() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::<f64>::full(&[4, 3], 2.5));
    let m = tape.mean(x, 0, None).unwrap();
    assert_eq!(tape.shape(m), &[1, 3]);
    assert!(tape.value(m).iter().all(|&v| v == 2.5));
}

#[test]
fn max_ties_route_to_lowest_index() {
    let x = t(&[3], &[1.0, 5.0, 5.0]).with_grad();
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let m = tape.max(v, 0, None).unwrap();
    assert_eq!(tape.value(m), &[5.0]);
    let grads = tape.backward(m).unwrap();
    assert_eq!(grads.wrt(&x).unwrap(), &[0.0, 1.0, 0.0]);
}

#[test]
fn masked_mean_skips_pads() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[3], &[2.0, 4.0, 999.0]));
    let m = tape.mean(x, 0, Some(&[true, true, false])).unwrap();
    assert_eq!(tape.value(m), &[3.0]);
}

#[test]
fn all_invalid_mask_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
    assert!(matches!(
        tape.reduce(ReduceKind::Mean, x, 0, Some(&[false, false])),
        Err(TensorError::DegenerateMask { .. })
    ));
    assert!(matches!(
        tape.reduce(ReduceKind::Max, x, 0, Some(&[true])),
        Err(TensorError::MaskLength { .. })
    ));
    assert!(matches!(tape.sum(x, 1, None), Err(TensorError::Axis { .. })));
}

#[test]
fn masked_reduction_ignores_masked_values() {
    // perturbing a masked coordinate leaves output and gradients bit-identical
    let run = |pad: f64| {
        let x = t(&[2, 3], &[0.3, -1.2, 0.7, pad, 2.0, -0.1]).with_grad();
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let mask = [true, false];
        let mean = tape.mean(v, 0, Some(&mask)).unwrap();
        let max = tape.max(v, 0, Some(&mask)).unwrap();
        let both = tape.add(mean, max).unwrap();
        let sq = tape.mul(both, both).unwrap();
        let loss = tape.sum_all(sq);
        let out = tape.value(both).to_vec();
        let g = tape.backward(loss).unwrap().wrt(&x).unwrap().to_vec();
        (out, g)
    };
    let (o1, g1) = run(5.0);
    let (o2, g2) = run(-1e6);
    assert_eq!(o1, o2);
    assert_eq!(g1, g2);
    assert!(g1[3..].iter().all(|&v| v == 0.0));
}

#[test]
fn softmax_values() {
    let mut tape = Tape::new();
    let a = tape.leaf(&t(&[2], &[0.0, 0.0]));
    let sa = tape.softmax(a, 0).unwrap();
    assert_eq!(tape.value(sa), &[0.5, 0.5]);

    let b = tape.leaf(&t(&[2], &[1.0, 0.0]));
    let sb = tape.softmax(b, 0).unwrap();
    let e = std::f64::consts::E;
    assert_abs_diff_eq!(tape.value(sb)[0], e / (e + 1.0), epsilon = 1e-15);
    assert_abs_diff_eq!(tape.value(sb)[1], 1.0 / (e + 1.0), epsilon = 1e-15);

    let c = tape.leaf(&t(&[2], &[1000.0, 1000.0]));
    let sc = tape.softmax(c, 0).unwrap();
    assert_eq!(tape.value(sc), &[0.5, 0.5]);
}

#[test]
fn masked_softmax_zeroes_masked_positions() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 50.0, 0.0, 0.0, -3.0]));
    let s = tape.masked_softmax(x, 1, Some(&[true, true, false])).unwrap();
    let v = tape.value(s);
    assert_eq!(v[2], 0.0);
    assert_eq!(v[5], 0.0);
    assert_abs_diff_eq!(v[0] + v[1], 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(v[3], 0.5, epsilon = 1e-15);
}

#[test]
fn concat_and_stack_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::<f64>::full(&[4, 2], 1.0));
    let b = tape.leaf(&Tensor::<f64>::full(&[4, 3], 2.0));
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.shape(c), &[4, 5]);
    assert_eq!(&tape.value(c)[..5], &[1.0, 1.0, 2.0, 2.0, 2.0]);
    assert!(tape.concat(&[a, b], 0).is_err());

    let s = tape.stack(&[a, a, a]).unwrap();
    assert_eq!(tape.shape(s), &[3, 4, 2]);
    for n in 0..3 {
        let slice = tape.narrow(s, 0, n, 1).unwrap();
        assert_eq!(tape.value(slice), tape.value(a));
    }
    assert!(tape.stack(&[a, b]).is_err());
}

#[test]
fn stack_then_sum_gives_unit_gradients() {
    let xs: Vec<Tensor<f64>> = (0..3)
        .map(|k| Tensor::full(&[2, 2], k as f64).with_grad())
        .collect();
    let mut tape = Tape::new();
    let vars: Vec<_> = xs.iter().map(|x| tape.leaf(x)).collect();
    let s = tape.stack(&vars).unwrap();
    let loss = tape.sum_all(s);
    let grads = tape.backward(loss).unwrap();
    for x in &xs {
        assert_eq!(grads.wrt(x).unwrap(), &[1.0; 4]);
    }
}

#[test]
fn backward_linear_and_quadratic() {
    let x = t(&[2], &[1.0, 2.0]).with_grad();
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let loss = tape.sum_all(v);
    assert_eq!(tape.backward(loss).unwrap().wrt(&x).unwrap(), &[1.0, 1.0]);

    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let sq = tape.mul(v, v).unwrap();
    let loss = tape.sum_all(sq);
    assert_eq!(tape.backward(loss).unwrap().wrt(&x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_contract_errors() {
    let x = t(&[2], &[1.0, 2.0]).with_grad();
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    assert!(matches!(tape.backward(v), Err(TensorError::NonScalarLoss(_))));
    let loss = tape.sum_all(v);
    tape.backward(loss).unwrap();
    assert_eq!(tape.backward(loss).unwrap_err(), TensorError::BackwardTwice);
    tape.reset_backward();
    assert!(tape.backward(loss).is_ok());
}

#[test]
fn no_grad_leaf_never_accumulates() {
    let x = t(&[2], &[1.0, 2.0]).with_grad();
    let c = t(&[2], &[3.0, 4.0]);
    let mut tape = Tape::new();
    let (vx, vc) = (tape.leaf(&x), tape.leaf(&c));
    let p = tape.mul(vx, vc).unwrap();
    let loss = tape.sum_all(p);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(&x).unwrap(), &[3.0, 4.0]);
    assert!(grads.wrt(&c).is_none());
    assert!(!grads.reached(vc));
}

#[test]
fn shared_consumers_sum_contributions() {
    // loss = sum(x) + sum(3x) → grad 4
    let x = t(&[3], &[0.1, 0.2, 0.3]).with_grad();
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let a = tape.sum_all(v);
    let s = tape.scale(v, 3.0);
    let b = tape.sum_all(s);
    let loss = tape.add(a, b).unwrap();
    assert_eq!(tape.backward(loss).unwrap().wrt(&x).unwrap(), &[4.0; 3]);
}

#[test]
fn binding_twice_returns_same_var() {
    let x = t(&[2], &[1.0, 2.0]).with_grad();
    let mut tape = Tape::new();
    assert_eq!(tape.leaf(&x), tape.leaf(&x));
    let y = x.clone();
    assert_ne!(tape.leaf(&x), tape.leaf(&y));
}

#[test]
fn detach_cuts_the_graph() {
    let x = t(&[2], &[1.0, 2.0]).with_grad();
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let d = tape.detach(v);
    let p = tape.mul(v, d).unwrap();
    let loss = tape.sum_all(p);
    // d/dx (x * stop(x)) = stop(x)
    assert_eq!(tape.backward(loss).unwrap().wrt(&x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn gather_rows_and_index_errors() {
    let table = t(&[3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).with_grad();
    let mut tape = Tape::new();
    let v = tape.leaf(&table);
    let g = tape.gather_rows(v, &[2, 0, 2]).unwrap();
    assert_eq!(tape.value(g), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
    assert!(matches!(
        tape.gather_rows(v, &[3]),
        Err(TensorError::Index { index: 3, extent: 3, .. })
    ));
    let loss = tape.sum_all(g);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(&table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
}

#[test]
fn single_thread_determinism() {
    let run = || {
        let x = Tensor::<f64>::create(
            &[3, 4],
            Init::Uniform {
                lo: -1.0,
                hi: 1.0,
                seed: 11,
            },
        )
        .unwrap()
        .with_grad();
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let s = tape.softmax(v, 1).unwrap();
        let h = tape.tanh(s);
        let m = tape.max(h, 0, None).unwrap();
        let loss = tape.sum_all(m);
        let out = tape.item(loss);
        (out, tape.backward(loss).unwrap().wrt(&x).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}
