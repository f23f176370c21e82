use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::tensor::Tensor;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Registers random parameters with the given shapes, builds
/// `sum(op(params) ⊙ r)` with a fixed random `r`, and checks every coordinate
/// against central differences.
fn check_op<F>(shapes: &[&[usize]], seed: u64, build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> crate::Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("p{i}"), rand_tensor(&mut rng, s)).unwrap())
        .collect();
    let weights_seed = rng.random::<u64>();
    let loss = |store: &ParamStore, backward: bool, s: &mut ParamStore| -> crate::Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(store, id).unwrap()).collect();
        let out = build(&mut g, &vars)?;
        let shape = g.shape(out).to_vec();
        let mut wr = ChaCha8Rng::seed_from_u64(weights_seed);
        let w = g.input(rand_tensor(&mut wr, &shape))?;
        let prod = g.mul(out, w)?;
        let l = g.sum(prod)?;
        if backward {
            g.backward(l, s)?;
        }
        Ok(g.value(l).data()[0])
    };
    let mut grads = store.clone();
    loss(&store, true, &mut grads).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let g = grads.get(id).grad().unwrap().to_vec();
        store.get_mut(id).set_grad(Some(g));
    }
    let coords: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.get(id).len()).map(move |i| (id, i)))
        .collect();
    let mut scratch = ParamStore::new();
    let report = finite_diff_check(&mut store, &coords, 1e-5, |s| loss(s, false, &mut scratch)).unwrap();
    report.max_rel_err
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let i2 = g.input(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    let m = g.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.input(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
    let b = g.input(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap()).unwrap();
    let p = g.matmul(a, b).unwrap();
    assert_eq!(g.value(p).data(), &[11.0]);

    assert!(matches!(g.matmul(a, a), Err(Error::Dimension { .. })));
}

#[test]
fn matmul_zero_operand_gives_zero_gradient() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let mut g = Graph::new();
    let z = g.input(Tensor::zeros(&[3, 2])).unwrap();
    let wv = g.param(&store, w).unwrap();
    let out = g.matmul(z, wv).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    let l = g.sum(out).unwrap();
    g.backward(l, &mut store).unwrap();
    assert!(store.get(w).grad().unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn elementwise_examples() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::vector(vec![0.0])).unwrap();
    let mut g = Graph::new();
    let v = g.input(Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap();
    let r = g.relu(v).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = g.input(Tensor::scalar(0.0)).unwrap();
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.value(s).data(), &[0.5]);

    let xv = g.param(&store, x).unwrap();
    let t = g.tanh(xv).unwrap();
    assert_eq!(g.value(t).data(), &[0.0]);
    g.backward(t, &mut store).unwrap();
    assert_eq!(store.get(x).grad().unwrap(), &[1.0]);
}

#[test]
fn broadcast_rules() {
    let mut g = Graph::new();
    let m = g.input(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
    let row = g.input(Tensor::vector(vec![10.0, 20.0, 30.0])).unwrap();
    let s = g.add(m, row).unwrap();
    assert_eq!(g.value(s).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let two = g.input(Tensor::scalar(2.0)).unwrap();
    let p = g.mul(m, two).unwrap();
    assert_eq!(g.value(p).data(), &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
    let bad = g.input(Tensor::vector(vec![1.0, 2.0])).unwrap();
    assert!(g.add(m, bad).is_err());
}

#[test]
fn softmax_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let n = rng.random_range(1..12);
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
        let shift = rng.random_range(-100.0..100.0);
        let a = ops::softmax(&logits);
        let b = ops::softmax(&logits.iter().map(|x| x + shift).collect::<Vec<_>>());
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (x, y) in a.iter().zip(&b) {
            assert!(*x > 0.0 || logits.len() > 1);
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn concat_examples() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::vector(vec![1.0])).unwrap();
    let b = store.add("b", Tensor::vector(vec![2.0, 3.0])).unwrap();
    let mut g = Graph::new();
    let av = g.param(&store, a).unwrap();
    let bv = g.param(&store, b).unwrap();
    let c = g.concat(&[av, bv]).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
    assert_eq!(g.concat(&[av]).unwrap(), av);
    let l = g.sum(c).unwrap();
    g.backward(l, &mut store).unwrap();
    assert_eq!(store.get(a).grad().unwrap(), &[1.0]);
    assert_eq!(store.get(b).grad().unwrap(), &[1.0, 1.0]);

    let m = g.input(Tensor::zeros(&[2, 2])).unwrap();
    assert!(g.concat(&[m, av]).is_err());
}

#[test]
fn gather_examples() {
    let mut store = ParamStore::new();
    let t = store
        .add("t", Tensor::matrix(3, 2, vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]).unwrap())
        .unwrap();
    let mut g = Graph::new();
    let rows = g.gather(&store, t, &[2, 0]).unwrap();
    assert_eq!(g.value(rows).data(), &[20.0, 21.0, 0.0, 1.0]);
    let empty = g.gather(&store, t, &[]).unwrap();
    assert_eq!(g.shape(empty), &[0, 2]);
    assert!(matches!(g.gather(&store, t, &[3]), Err(Error::IndexOutOfRange { .. })));

    let rep = g.gather(&store, t, &[1, 1]).unwrap();
    let l = g.sum(rep).unwrap();
    g.backward(l, &mut store).unwrap();
    assert_eq!(store.get(t).grad().unwrap(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
}

#[test]
fn gather_scatter_is_linear_in_copies() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let t = store.add("t", rand_tensor(&mut rng, &[5, 3])).unwrap();
    let w = rand_tensor(&mut rng, &[1, 3]);
    let grad_for = |k: usize, store: &mut ParamStore| {
        store.clear_grad();
        let mut g = Graph::new();
        let rows = g.gather(store, t, &vec![4; k]).unwrap();
        let wv = g.input(w.clone()).unwrap();
        let p = g.mul(rows, wv).unwrap();
        let l = g.sum(p).unwrap();
        g.backward(l, store).unwrap();
        store.get(t).grad().unwrap().to_vec()
    };
    let one = grad_for(1, &mut store);
    for k in 2..6 {
        let many = grad_for(k, &mut store);
        for (a, b) in many.iter().zip(&one) {
            assert_eq!(*a, k as f64 * b);
        }
    }
}

#[test]
fn dropout_behaviour() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![1.0; 100_000])).unwrap();
    assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(g.dropout(x, 0.5, false, &mut rng).unwrap(), x);
    assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
    let d = g.dropout(x, 0.5, true, &mut rng).unwrap();
    let vals = g.value(d).data();
    let kept = vals.iter().filter(|&&v| v != 0.0).count() as f64 / vals.len() as f64;
    assert!((kept - 0.5).abs() < 0.01, "keep fraction {kept}");
    assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn backward_examples() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::vector(vec![0.3, -2.0, 5.0])).unwrap();
    let unused = store.add("unused", Tensor::vector(vec![1.0])).unwrap();
    let mut g = Graph::new();
    let xv = g.param(&store, x).unwrap();
    let l = g.sum(xv).unwrap();
    g.backward(l, &mut store).unwrap();
    assert_eq!(store.get(x).grad().unwrap(), &[1.0, 1.0, 1.0]);
    assert_eq!(store.get(unused).grad().unwrap(), &[0.0]);
    assert!(matches!(g.backward(xv, &mut store), Err(Error::NonScalarLoss(_))));

    // loss = sigmoid(w·x) at w = 0 → grad(w) = σ'(0) x = 0.25 x
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::matrix(1, 3, vec![0.0; 3]).unwrap()).unwrap();
    let mut g = Graph::new();
    let wv = g.param(&store, w).unwrap();
    let xin = g.input(Tensor::matrix(3, 1, vec![1.0, -2.0, 4.0]).unwrap()).unwrap();
    let z = g.matmul(wv, xin).unwrap();
    let s = g.sigmoid(z).unwrap();
    g.backward(s, &mut store).unwrap();
    assert_eq!(store.get(w).grad().unwrap(), &[0.25, -0.5, 1.0]);
}

#[test]
fn finite_diff_examples() {
    // f = x² at x = 3
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::vector(vec![3.0])).unwrap();
    let mut g = Graph::new();
    let xv = g.param(&store, x).unwrap();
    let sq = g.mul(xv, xv).unwrap();
    g.backward(sq, &mut store).unwrap();
    assert_eq!(store.get(x).grad().unwrap(), &[6.0]);
    let r = finite_diff_check(&mut store, &[(x, 0)], 1e-5, |s| Ok(s.get(x).data()[0].powi(2))).unwrap();
    assert!(r.max_rel_err < 1e-8, "{r:?}");
    assert_eq!(store.get(x).data(), &[3.0]);

    // relu at x = 1, away from the kink
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::vector(vec![1.0])).unwrap();
    let mut g = Graph::new();
    let xv = g.param(&store, x).unwrap();
    let r = g.relu(xv).unwrap();
    g.backward(r, &mut store).unwrap();
    let rep = finite_diff_check(&mut store, &[(x, 0)], 1e-5, |s| Ok(s.get(x).data()[0].max(0.0))).unwrap();
    assert!(rep.max_rel_err < 1e-6);
}

#[test]
fn every_op_passes_gradient_check() {
    let tol = 1e-5;
    let cases: Vec<(&str, f64)> = vec![
        ("matmul", check_op(&[&[3, 4], &[4, 2]], 1, |g, v| g.matmul(v[0], v[1]))),
        ("add_same", check_op(&[&[3, 4], &[3, 4]], 2, |g, v| g.add(v[0], v[1]))),
        ("add_row", check_op(&[&[3, 4], &[4]], 3, |g, v| g.add(v[0], v[1]))),
        ("add_scalar", check_op(&[&[3, 4], &[1]], 4, |g, v| g.add(v[0], v[1]))),
        ("mul_same", check_op(&[&[2, 3], &[2, 3]], 5, |g, v| g.mul(v[0], v[1]))),
        ("mul_row", check_op(&[&[2, 3], &[3]], 6, |g, v| g.mul(v[0], v[1]))),
        ("mul_scalar", check_op(&[&[2, 3], &[1]], 7, |g, v| g.mul(v[0], v[1]))),
        ("scale", check_op(&[&[5]], 8, |g, v| g.scale(v[0], -1.7))),
        ("tanh", check_op(&[&[2, 5]], 9, |g, v| g.tanh(v[0]))),
        ("sigmoid", check_op(&[&[2, 5]], 10, |g, v| g.sigmoid(v[0]))),
        ("relu", check_op(&[&[2, 5]], 11, |g, v| g.relu(v[0]))),
        ("softmax_vec", check_op(&[&[6]], 12, |g, v| g.softmax(v[0]))),
        ("softmax_rows", check_op(&[&[3, 4]], 13, |g, v| g.softmax(v[0]))),
        ("concat", check_op(&[&[2, 3], &[2, 2]], 14, |g, v| g.concat(&[v[0], v[1]]))),
        ("concat_rows", check_op(&[&[2, 3], &[3]], 15, |g, v| g.concat_rows(&[v[0], v[1]]))),
        ("sum", check_op(&[&[2, 3]], 16, |g, v| g.sum(v[0]))),
        ("mean_rows", check_op(&[&[4, 3]], 17, |g, v| g.mean_rows(v[0]))),
        ("transpose", check_op(&[&[2, 3]], 18, |g, v| g.transpose(v[0]))),
        ("slice_cols", check_op(&[&[3, 5]], 19, |g, v| g.slice_cols(v[0], 1, 4))),
        ("reshape", check_op(&[&[2, 3]], 20, |g, v| g.reshape(v[0], &[3, 2]))),
        ("project", check_op(&[&[4, 3], &[3]], 21, |g, v| g.project_rows(v[0], v[1], false, false))),
        ("reject", check_op(&[&[4, 3], &[3]], 22, |g, v| g.project_rows(v[0], v[1], true, false))),
        ("row_cosine", check_op(&[&[4], &[5, 4]], 23, |g, v| g.row_cosine(v[0], v[1]))),
        (
            "bce",
            check_op(&[&[6]], 24, |g, v| {
                let p = g.sigmoid(v[0])?;
                g.bce(p, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0])
            }),
        ),
    ];
    for (name, err) in cases {
        assert!(err < tol, "{name}: max rel err {err:e}");
    }
}

#[test]
fn bce_examples() {
    let ln2 = std::f64::consts::LN_2;
    assert!((bce_value(&[0.5], &[1.0]) - ln2).abs() < 1e-15);
    assert!((bce_value(&[0.5, 0.5], &[1.0, 0.0]) - ln2).abs() < 1e-15);
    assert!(bce_value(&[1.0 - 1e-15], &[1.0]) < 1e-11);
    assert!(bce_value(&[1.0], &[0.0]).is_finite());
    let mut g = Graph::new();
    let p = g.input(Tensor::vector(vec![0.5])).unwrap();
    assert!(g.bce(p, &[2.0]).is_err());
}

#[test]
fn non_finite_values_are_rejected() {
    let mut g = Graph::new();
    assert!(matches!(g.input(Tensor::vector(vec![f64::NAN])), Err(Error::NonFinite(_))));
    let big = g.input(Tensor::vector(vec![1e200])).unwrap();
    assert!(matches!(g.mul(big, big), Err(Error::NonFinite(_))));
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn matmul_chain_gradients_match_differences(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
            let err = check_op(&[&[m, k], &[k, n], &[n]], seed, |g, v| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.add(h, v[2])?;
                g.tanh(h)
            });
            prop_assert!(err < 1e-6, "max rel err {err}");
        }

        #[test]
        fn transpose_of_product_swaps_factors(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let a = g.input(rand_tensor(&mut rng, &[m, k])).unwrap();
            let b = g.input(rand_tensor(&mut rng, &[k, n])).unwrap();
            let ab = g.matmul(a, b).unwrap();
            let lhs = g.transpose(ab).unwrap();
            let bt = g.transpose(b).unwrap();
            let at = g.transpose(a).unwrap();
            let rhs = g.matmul(bt, at).unwrap();
            prop_assert_eq!(g.shape(lhs), g.shape(rhs));
            for (x, y) in g.value(lhs).data().iter().zip(g.value(rhs).data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
