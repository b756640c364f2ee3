use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Grad-checks `op` on the given parameter tensors, contracting the output
/// with a fixed random weight so every output element matters.
fn check_op<F>(seed: u64, inputs: Vec<Tensor>, op: F) -> f64
where
    F: Fn(&mut Graph, &[Value]) -> Result<Value>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("x{i}"), t).unwrap())
        .collect();
    // probe output shape to size the contraction weight
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let xs: Vec<Value> = ids.iter().map(|&id| b.get(id)).collect();
    let y = op(&mut g, &xs).unwrap();
    let (r, c) = g.shape(y);
    let weight = random(&mut rng, r, c, -1.0, 1.0);

    let report = grad_check(&store, 1e-5, 1e-6, |g, b| {
        let xs: Vec<Value> = ids.iter().map(|&id| b.get(id)).collect();
        let y = op(g, &xs)?;
        let w = g.constant(weight.clone());
        let yw = g.mul(y, w)?;
        Ok(g.sum(yw))
    })
    .unwrap();
    report.max_rel_err()
}

const TOL: f64 = 1e-6;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn binary_ops_pass_grad_check(seed in any::<u64>(), r in 1usize..4, c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, r, c, -2.0, 2.0);
        let b = random(&mut rng, r, c, 0.5, 2.0);
        let row = random(&mut rng, 1, c, 0.5, 2.0);
        let col = random(&mut rng, r, 1, 0.5, 2.0);
        let s = random(&mut rng, 1, 1, 0.5, 2.0);
        for other in [b, row, col, s] {
            let ins = vec![a.clone(), other];
            prop_assert!(check_op(seed, ins.clone(), |g, x| g.add(x[0], x[1])) < TOL);
            prop_assert!(check_op(seed, ins.clone(), |g, x| g.sub(x[0], x[1])) < TOL);
            prop_assert!(check_op(seed, ins.clone(), |g, x| g.mul(x[0], x[1])) < TOL);
            prop_assert!(check_op(seed, ins.clone(), |g, x| g.div(x[0], x[1])) < TOL);
        }
    }

    #[test]
    fn unary_ops_pass_grad_check(seed in any::<u64>(), r in 1usize..4, c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, r, c, -2.0, 2.0);
        let pos = random(&mut rng, r, c, 0.3, 2.0);
        prop_assert!(check_op(seed, vec![a.clone()], |g, x| Ok(g.tanh(x[0]))) < TOL);
        prop_assert!(check_op(seed, vec![a.clone()], |g, x| Ok(g.sigmoid(x[0]))) < TOL);
        prop_assert!(check_op(seed, vec![a.clone()], |g, x| Ok(g.relu(x[0]))) < TOL);
        prop_assert!(check_op(seed, vec![a.clone()], |g, x| Ok(g.softplus(x[0]))) < TOL);
        prop_assert!(check_op(seed, vec![a.clone()], |g, x| Ok(g.exp(x[0]))) < TOL);
        prop_assert!(check_op(seed, vec![pos.clone()], |g, x| Ok(g.ln(x[0]))) < TOL);
        prop_assert!(check_op(seed, vec![pos.clone()], |g, x| Ok(g.sqrt(x[0]))) < TOL);
        prop_assert!(check_op(seed, vec![a.clone()], |g, x| Ok(g.scale(x[0], -1.7))) < TOL);
        prop_assert!(check_op(seed, vec![a.clone()], |g, x| Ok(g.shift(x[0], 0.4))) < TOL);
        prop_assert!(check_op(seed, vec![a.clone()], |g, x| Ok(g.transpose(x[0]))) < TOL);
        prop_assert!(check_op(seed, vec![a.clone()], |g, x| Ok(g.softmax(x[0]))) < TOL);
        prop_assert!(check_op(seed, vec![a.clone()], |g, x| Ok(g.log_softmax(x[0]))) < TOL);
        // two-column rows normalise to ±1 up to eps, leaving O(eps) gradients
        // that finite differences cannot resolve
        if c > 2 {
            prop_assert!(check_op(seed, vec![a.clone()], |g, x| Ok(g.layer_norm(x[0], 1e-5))) < TOL);
        }
        prop_assert!(check_op(seed, vec![a.clone()], |g, x| Ok(g.sum(x[0]))) < TOL);
        prop_assert!(check_op(seed, vec![a.clone()], |g, x| Ok(g.mean_rows(x[0]))) < TOL);
        prop_assert!(check_op(seed, vec![a.clone()], |g, x| Ok(g.sum_cols(x[0]))) < TOL);
        prop_assert!(check_op(seed, vec![a.clone()], |g, x| g.select(x[0], r - 1, c - 1)) < TOL);
    }

    #[test]
    fn structural_ops_pass_grad_check(seed in any::<u64>(), r in 2usize..5, c in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, r, c, -2.0, 2.0);
        let b = random(&mut rng, r, c + 1, -2.0, 2.0);
        let m = random(&mut rng, c, 3, -2.0, 2.0);
        prop_assert!(check_op(seed, vec![a.clone(), m], |g, x| g.matmul(x[0], x[1])) < TOL);
        prop_assert!(check_op(seed, vec![a.clone()], |g, x| g.slice_cols(x[0], 1, c - 1)) < TOL);
        prop_assert!(check_op(seed, vec![a.clone()], |g, x| g.slice_rows(x[0], 1, r - 1)) < TOL);
        prop_assert!(check_op(seed, vec![a.clone(), b.clone()], |g, x| g.concat_cols(&[x[0], x[1], x[0]])) < TOL);
        let a2 = random(&mut rng, r + 1, c, -2.0, 2.0);
        prop_assert!(check_op(seed, vec![a.clone(), a2], |g, x| g.concat_rows(&[x[0], x[1]])) < TOL);
        let grouped = random(&mut rng, 2 * r, c, -2.0, 2.0);
        prop_assert!(check_op(seed, vec![grouped], |g, x| g.group_mean(x[0], 2)) < TOL);
        let vecb = random(&mut rng, 1, c, -2.0, 2.0);
        prop_assert!(check_op(seed, vec![a.clone(), vecb], |g, x| g.row_cosine(x[0], x[1])) < TOL);
    }

    #[test]
    fn gather_max_conv_and_pow_pass_grad_check(seed in any::<u64>(), t in 2usize..6, groups in 1usize..4, kernel in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cin, cout) = (3, 2);
        let x = random(&mut rng, t * groups, cin, -2.0, 2.0);
        let w = random(&mut rng, kernel * cin, cout, -1.0, 1.0);
        let b = random(&mut rng, 1, cout, -1.0, 1.0);
        for padding in [Padding::Causal, Padding::Same] {
            let err = check_op(seed, vec![x.clone(), w.clone(), b.clone()], |g, v| {
                g.conv1d(v[0], v[1], Some(v[2]), groups, kernel, padding)
            });
            prop_assert!(err < TOL);
        }
        let rows = t * groups;
        let nbrs: Vec<usize> = (0..rows).flat_map(|i| [(i + 1) % rows, (i + 2) % rows]).collect();
        prop_assert!(check_op(seed, vec![x.clone()], |g, v| g.gather_max(v[0], &nbrs, 2)) < TOL);

        let base = random(&mut rng, t, 1, 0.1, 3.0);
        let mut base_with_zero = base.clone();
        base_with_zero.set(0, 0, 0.0);
        let e = Tensor::scalar(rng.random_range(0.3..2.0));
        prop_assert!(check_op(seed, vec![e], |g, v| g.pow_exp(&base_with_zero, v[0])) < TOL);
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), r in 1usize..5, c in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let a = g.constant(random(&mut rng, r, c, -30.0, 30.0));
        let s = g.softmax(a);
        for row in 0..r {
            let vals = g.value(s).row(row);
            prop_assert!(vals.iter().all(|&v| v >= 0.0));
            prop_assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::filled(1, 4, 3.3));
    let s = g.softmax(a);
    assert_eq!(g.value(s).data(), &[0.25; 4]);
}

#[test]
fn causal_identity_kernel_is_identity() {
    let mut g = Graph::new();
    let x =
        g.constant(Tensor::from_vec(5, 2, vec![1., 2., 3., 4., 5., 6., 7., 8., 9., 10.]).unwrap());
    let w = g.constant(Tensor::identity(2));
    let y = g.conv1d(x, w, None, 1, 1, Padding::Causal).unwrap();
    assert_eq!(g.value(y), g.value(x));
    // same padding, kernel 3, only the centre tap set
    let mut w3 = Tensor::zeros(6, 2);
    w3.set(2, 0, 1.0);
    w3.set(3, 1, 1.0);
    let w3 = g.constant(w3);
    let y3 = g.conv1d(x, w3, None, 1, 3, Padding::Same).unwrap();
    assert_eq!(g.value(y3), g.value(x));
}

#[test]
fn causal_conv_ignores_future() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xa = random(&mut rng, 6 * 2, 3, -1.0, 1.0);
    let mut xb = xa.clone();
    // perturb time step 4 (rows 8 and 9)
    for c in 0..3 {
        xb.set(8, c, 5.0);
        xb.set(9, c, -5.0);
    }
    let w = random(&mut rng, 9, 4, -1.0, 1.0);
    let mut g = Graph::new();
    let (a, b, w) = (g.constant(xa), g.constant(xb), g.constant(w));
    let ya = g.conv1d(a, w, None, 2, 3, Padding::Causal).unwrap();
    let yb = g.conv1d(b, w, None, 2, 3, Padding::Causal).unwrap();
    assert_eq!(g.value(ya).data()[..8 * 4], g.value(yb).data()[..8 * 4]);
    assert_ne!(g.value(ya).data()[8 * 4..], g.value(yb).data()[8 * 4..]);
}

#[test]
fn matmul_adjoint_with_unit_upstream() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (a_t, b_t) = (
        random(&mut rng, 3, 4, -1.0, 1.0),
        random(&mut rng, 4, 2, -1.0, 1.0),
    );
    let mut g = Graph::new();
    let a = g.param(a_t);
    let b = g.param(b_t.clone());
    let c = g.matmul(a, b).unwrap();
    g.backward(c).unwrap();
    let expected = Tensor::filled(3, 2, 1.0).matmul(&b_t.transpose()).unwrap();
    assert_eq!(g.grad(a).unwrap(), &expected);
}

#[test]
fn shared_subexpressions_accumulate() {
    // y = s·s + s with s = x·w, versus the same function built from two
    // independent copies of the subgraph whose gradients are summed.
    let x = Tensor::from_vec(2, 2, vec![0.5, -1.0, 2.0, 0.3]).unwrap();
    let w = Tensor::from_vec(2, 1, vec![0.7, -0.4]).unwrap();

    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.param(w.clone()));
    let s = g.matmul(xv, wv).unwrap();
    let sq = g.mul(s, s).unwrap();
    let y = g.add(sq, s).unwrap();
    let y = g.sum(y);
    g.backward(y).unwrap();
    let shared = g.grad(wv).unwrap().clone();

    let mut total = Tensor::zeros(2, 1);
    for part in 0..2 {
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.param(w.clone()));
        let s1 = g.matmul(xv, wv).unwrap();
        let out = if part == 0 {
            let c = g.constant(g.value(s1).clone());
            let p = g.mul(s1, c).unwrap();
            let q = g.mul(c, s1).unwrap();
            let pq = g.add(p, q).unwrap();
            g.sum(pq)
        } else {
            g.sum(s1)
        };
        g.backward(out).unwrap();
        total.add_assign(g.grad(wv).unwrap());
    }
    for (a, b) in shared.data().iter().zip(total.data()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn dropout_only_in_train_mode() {
    let mut g = Graph::with_mode(Mode::Eval, 1);
    let x = g.constant(Tensor::filled(4, 4, 1.0));
    assert_eq!(g.dropout(x, 0.5), x);

    let mut g = Graph::with_mode(Mode::Train, 1);
    let x = g.param(Tensor::filled(20, 20, 1.0));
    let y = g.dropout(x, 0.5);
    assert_ne!(x, y);
    let vals = g.value(y).data();
    assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
    assert!(vals.iter().any(|&v| v == 0.0));
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), g.value(y).data());
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(2, 3));
    let b = g.constant(Tensor::zeros(2, 2));
    let err = g.add(a, b).unwrap_err();
    assert!(err.to_string().contains("(2, 3)") && err.to_string().contains("(2, 2)"));
    assert!(g.matmul(a, b).is_err());
}
