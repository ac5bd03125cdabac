use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn matmul_identity_and_hand_value() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let i = tape.constant(t(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let c = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let r = tape.constant(t(&[vec![1.0, 2.0]]));
    let col = tape.constant(t(&[vec![3.0], vec![4.0]]));
    let p = tape.matmul(r, col).unwrap();
    assert_eq!(tape.value(p).shape(), &[1, 1]);
    assert_eq!(tape.value(p).item(), 11.0);
}

#[test]
fn matmul_inner_dimension_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "matmul",
            left: vec![2, 3],
            right: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3] and [2, 3]"));
}

#[test]
fn softmax_cases() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = tape.constant(Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);

    let x = tape.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    let d = tape.value(y).data();
    assert!(d.iter().all(|v| v.is_finite()));
    assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-12);

    assert_eq!(
        tape.softmax(x, 1).unwrap_err(),
        TensorError::AxisOutOfRange { axis: 1, rank: 1 }
    );
}

#[test]
fn softmax_along_leading_axis() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[vec![0.0, 1.0], vec![0.0, 1.0]]));
    let y = tape.softmax(x, 0).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 0.5).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_cases() {
    let mut tape = Tape::new();
    let ones = tape.constant(Tensor::full(&[3], 1.0));
    let zeros = tape.constant(Tensor::zeros(&[3]));
    let x = tape.constant(Tensor::new(vec![1, 3], vec![5.0; 3]).unwrap());
    let y = tape.layer_norm(x, ones, zeros, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap());
    let y = tape.layer_norm(x, g, b, 0.0).unwrap();
    assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);

    let g0 = tape.constant(Tensor::zeros(&[2]));
    let bb = tape.constant(Tensor::new(vec![2], vec![0.7, 0.7]).unwrap());
    let y = tape.layer_norm(x, g0, bb, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.7, 0.7]);

    assert_eq!(
        tape.layer_norm(x, g, b, -1.0).unwrap_err(),
        TensorError::InvalidEps(-1.0)
    );
}

#[test]
fn gelu_embedding_cross_entropy() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    let gz = tape.gelu(z).unwrap();
    assert_eq!(tape.value(gz).item(), 0.0);

    let logits = tape.constant(Tensor::zeros(&[1, 4]));
    let ce = tape.cross_entropy(logits, &[Some(2)]).unwrap();
    assert!((tape.value(ce).item() - 4f64.ln()).abs() < 1e-12);
    assert!((tape.value(ce).item() - 1.386294).abs() < 1e-6);

    let logits = tape.constant(Tensor::new(vec![1, 3], vec![1e3, 0.0, 0.0]).unwrap());
    let ce = tape.cross_entropy(logits, &[Some(0)]).unwrap();
    assert!(tape.value(ce).item().abs() < 1e-6);

    assert_eq!(
        tape.cross_entropy(logits, &[Some(3)]).unwrap_err(),
        TensorError::IndexOutOfRange { index: 3, bound: 3 }
    );
    let table = tape.constant(Tensor::zeros(&[4, 2]));
    assert_eq!(
        tape.embedding(table, &[1, 4]).unwrap_err(),
        TensorError::IndexOutOfRange { index: 4, bound: 4 }
    );
}

#[test]
fn embedding_backward_scatters_into_table() {
    let mut tape = Tape::new();
    let table = tape.param(Tensor::new(vec![3, 2], vec![0.0; 6]).unwrap());
    let e = tape.embedding(table, &[2, 0, 2]).unwrap();
    let s = tape.sum(e).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
}

#[test]
fn product_rule() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(2.0));
    let y = tape.param(Tensor::scalar(3.0));
    let l = tape.mul(x, y).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[3.0]);
    assert_eq!(tape.grad(y).unwrap(), &[2.0]);
}

#[test]
fn backward_contract() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(2.0));
    let unused = tape.param(Tensor::scalar(5.0));
    let c = tape.constant(Tensor::scalar(4.0));
    let l = tape.mul(x, c).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4.0]);
    assert!(tape.grad(unused).is_none());
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.backward(l).unwrap_err(), TensorError::BackwardTwice);

    let mut tape = Tape::new();
    let v = tape.param(Tensor::zeros(&[2]));
    assert!(matches!(
        tape.backward(v).unwrap_err(),
        TensorError::NonScalarLoss { .. }
    ));

    let mut other = Tape::new();
    assert_eq!(other.gelu(v).unwrap_err(), TensorError::ForeignVar);
}

#[test]
fn scatter_add_rows_leaves_untouched_rows_bitwise() {
    let mut tape = Tape::new();
    let base = tape.constant(t(&[vec![-0.0, 1.5], vec![2.0, 3.0], vec![4.0, 5.0]]));
    let d = tape.constant(t(&[vec![1.0, 1.0]]));
    let out = tape.scatter_add_rows(base, d, &[1]).unwrap();
    let v = tape.value(out).data();
    assert_eq!(v[0].to_bits(), (-0.0f64).to_bits());
    assert_eq!(&v[2..4], &[3.0, 4.0]);
}

/// A composite graph touching every differentiable op.
fn composite(tape: &mut Tape, v: &[Var]) -> Result<Var, TensorError> {
    let (x, w, b, g, lb, table, s) = (v[0], v[1], v[2], v[3], v[4], v[5], v[6]);
    let h = tape.matmul(x, w)?; // 3x4
    let h = tape.add_bias(h, b)?;
    let h = tape.layer_norm(h, g, lb, 1e-5)?;
    let h = tape.gelu(h)?;
    let sc = tape.matmul_nt(h, h)?; // 3x3
    let sc = tape.scale(sc, 0.5)?;
    let p = tape.softmax(sc, 1)?;
    let p0 = tape.softmax(sc, 0)?;
    let p = tape.add(p, p0)?;
    let a = tape.matmul(p, h)?; // 3x4
    let e = tape.embedding(table, &[1, 0, 1])?; // 3x4
    let a = tape.mul(a, e)?;
    let a = tape.scale_by(a, s)?;
    let l = tape.slice_cols(a, 1, 2)?;
    let r = tape.slice_cols(a, 0, 2)?;
    let a2 = tape.concat_cols(&[r, l])?;
    let top = tape.slice_rows(a2, 0, 2)?;
    let g2 = tape.gather_rows(a2, &[2, 0])?;
    let both = tape.concat_rows(&[top, g2])?; // 4x4
    let tr = tape.transpose(both)?;
    let delta = tape.slice_rows(tr, 0, 2)?;
    let sc2 = tape.scatter_add_rows(tr, delta, &[3, 1])?;
    let re = tape.reshape(sc2, &[4, 4])?;
    let ce = tape.cross_entropy(re, &[Some(1), None, Some(3), Some(0)])?;
    let m = tape.mean(re)?;
    tape.add(ce, m)
}

#[test]
fn composite_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![
        random(&mut rng, &[3, 5]),
        random(&mut rng, &[5, 4]),
        random(&mut rng, &[4]),
        random(&mut rng, &[4]),
        random(&mut rng, &[4]),
        random(&mut rng, &[2, 4]),
        random(&mut rng, &[1]),
    ];
    let report = check_gradients(&inputs, 1e-6, usize::MAX, composite).unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
    assert_eq!(report.checked, inputs.iter().map(Tensor::numel).sum::<usize>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn randomized_small_graphs_pass_gradcheck(
        seed in 0u64..10_000,
        m in 1usize..=8,
        k in 1usize..=8,
        n in 2usize..=8,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            random(&mut rng, &[m, k]),
            random(&mut rng, &[k, n]),
            random(&mut rng, &[n]),
            random(&mut rng, &[n]),
        ];
        let targets: Vec<Option<usize>> = (0..m).map(|i| Some((i * 7 + seed as usize) % n)).collect();
        let report = check_gradients(&inputs, 1e-6, usize::MAX, |tape, v| {
            let h = tape.matmul(v[0], v[1])?;
            let h = tape.layer_norm(h, v[2], v[3], 1e-5)?;
            let h = tape.gelu(h)?;
            let s = tape.matmul_nt(h, h)?;
            let p = tape.softmax(s, 1)?;
            let o = tape.matmul(p, h)?;
            tape.cross_entropy(o, &targets)
        }).unwrap();
        prop_assert!(report.max_rel_error <= 1e-5, "{:?}", report);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_are_shift_invariant(
        vals in proptest::collection::vec(-50.0f64..50.0, 12),
        shift in -100.0f64..100.0,
    ) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], vals.clone()).unwrap());
        let xs = tape.constant(Tensor::new(vec![3, 4], vals.iter().map(|v| v + shift).collect()).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        let ys = tape.softmax(xs, 1).unwrap();
        for r in 0..3 {
            let s: f64 = tape.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
        prop_assert!(tape.value(y).max_abs_diff(tape.value(ys)) <= 1e-12);
    }
}

#[test]
fn identical_inputs_give_bitwise_identical_outputs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs: Vec<Tensor> = (0..7)
            .map(|i| match i {
                0 => random(&mut rng, &[3, 5]),
                1 => random(&mut rng, &[5, 4]),
                5 => random(&mut rng, &[2, 4]),
                6 => random(&mut rng, &[1]),
                _ => random(&mut rng, &[4]),
            })
            .collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let l = composite(&mut tape, &vars).unwrap();
        tape.backward(l).unwrap();
        let grads: Vec<f64> = vars.iter().flat_map(|v| tape.grad(*v).unwrap().to_vec()).collect();
        (tape.value(l).clone(), grads)
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a.bitwise_eq(&b));
    assert!(ga.iter().zip(&gb).all(|(x, y)| x.to_bits() == y.to_bits()));
}
