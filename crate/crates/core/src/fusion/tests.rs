use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{grad_check, jitter_params};

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_vec(
        r,
        c,
        (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn row_tensor(v: &[f64]) -> Tensor {
    Tensor::from_vec(1, v.len(), v.to_vec()).unwrap()
}

fn cross(d_s: usize, d_t: usize, heads: usize, seed: u64) -> (ParamStore, CrossAttention) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = CrossAttention::new(&mut store, &mut rng, "x", d_s, d_t, heads).unwrap();
    (store, c)
}

#[test]
fn single_frame_cross_attention_is_a_projection() {
    let (store, c) = cross(4, 6, 2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = random_tensor(&mut rng, 1, 4);
    let t = random_tensor(&mut rng, 1, 6);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let (sv, tv) = (g.constant(s.clone()), g.constant(t.clone()));
    let (fs, ft) = c.forward(&mut g, &p, sv, tv).unwrap();
    let m = &c.shape_from_traj;
    let expect_s = t
        .matmul(&store.get(m.wv).value)
        .unwrap()
        .matmul(&store.get(m.wo).value)
        .unwrap();
    let m = &c.traj_from_shape;
    let expect_t = s
        .matmul(&store.get(m.wv).value)
        .unwrap()
        .matmul(&store.get(m.wo).value)
        .unwrap();
    for (a, b) in g.value(fs).data().iter().zip(expect_s.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in g.value(ft).data().iter().zip(expect_t.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn identity_projections_with_uniform_keys_return_values() {
    let (mut store, c) = cross(4, 4, 1, 3);
    for m in [&c.shape_from_traj, &c.traj_from_shape] {
        for id in [m.wq, m.wk, m.wv, m.wo] {
            store.get_mut(id).value = Tensor::identity(4);
        }
    }
    let row = vec![0.3, -0.2, 0.9, 0.1];
    let stream = Tensor::from_rows(&vec![row.clone(); 5]).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let (a, b) = (g.constant(stream.clone()), g.constant(stream.clone()));
    let (fs, ft) = c.forward(&mut g, &p, a, b).unwrap();
    for (x, y) in g.value(ft).data().iter().zip(stream.data()) {
        assert!((x - y).abs() < 1e-15);
    }
    for (x, y) in g.value(fs).data().iter().zip(&row) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn cross_attention_shapes() {
    let (store, c) = cross(64, 64, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let s = g.constant(random_tensor(&mut rng, 16, 64));
    let t = g.constant(random_tensor(&mut rng, 16, 64));
    let (fs, ft) = c.forward(&mut g, &p, s, t).unwrap();
    assert_eq!(g.shape(fs), (1, 64));
    assert_eq!(g.shape(ft), (16, 64));
    let short = g.constant(random_tensor(&mut rng, 15, 64));
    assert!(matches!(
        c.forward(&mut g, &p, s, short),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn cost_examples() {
    let f = [0.5, -1.0, 2.0];
    let same = Tensor::from_rows(&vec![f.to_vec(); 4]).unwrap();
    assert!(ot_cost(&f, &same, 1.0, 0.0)
        .unwrap()
        .data()
        .iter()
        .all(|&c| c.abs() < 1e-15));

    let any = Tensor::from_rows(&[
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![1.0, 1.0, 1.0],
    ])
    .unwrap();
    assert_eq!(
        ot_cost(&f, &any, 0.0, 0.4).unwrap().data(),
        &[0.1, 0.0, 0.1]
    );

    let ortho = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, -3.0]]).unwrap();
    assert_eq!(
        ot_cost(&[2.0, 0.0], &ortho, 1.0, 0.0).unwrap().data(),
        &[1.0, 1.0]
    );

    // zero-norm features count as orthogonal
    let zero = Tensor::zeros(2, 2);
    assert_eq!(
        ot_cost(&[1.0, 0.0], &zero, 1.0, 0.0).unwrap().data(),
        &[1.0, 1.0]
    );
    assert_eq!(temporal_prior(1), vec![0.0]);
}

#[test]
fn graph_cost_matches_plain_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = random_tensor(&mut rng, 1, 5);
    let t = random_tensor(&mut rng, 7, 5);
    let plain = ot_cost(s.data(), &t, 0.8, 0.3).unwrap();
    let mut g = Graph::new();
    let (sv, tv) = (g.constant(s), g.constant(t));
    let col = ot_cost_graph(&mut g, sv, tv, 0.8, 0.3).unwrap();
    for (a, b) in g.value(col).data().iter().zip(plain.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

fn softmax_oracle(cost: &[f64], eps: f64) -> Vec<f64> {
    let w: Vec<f64> = cost.iter().map(|c| (-c / eps).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|x| x / z).collect()
}

#[test]
fn single_row_plan_examples() {
    let uniform = sinkhorn_align(&Tensor::filled(1, 5, 0.7), 0.1, 200, 1e-6).unwrap();
    assert!(uniform
        .gamma
        .data()
        .iter()
        .all(|&x| (x - 0.2).abs() < 1e-15));

    let sharp = sinkhorn_align(
        &Tensor::from_vec(1, 3, vec![0.0, 10.0, 10.0]).unwrap(),
        0.1,
        200,
        1e-6,
    )
    .unwrap();
    let want = [1.0, 0.0, 0.0];
    for (a, b) in sharp.gamma.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-6);
    }
    assert!(sharp.converged);
}

/// Exact 2×2 OT with uniform marginals: the optimum is one of the two
/// scaled permutation matrices.
fn lp_2x2(cost: &Tensor) -> [[f64; 2]; 2] {
    let identity = cost.get(0, 0) + cost.get(1, 1);
    let swap = cost.get(0, 1) + cost.get(1, 0);
    if identity <= swap {
        [[0.5, 0.0], [0.0, 0.5]]
    } else {
        [[0.0, 0.5], [0.5, 0.0]]
    }
}

#[test]
fn two_by_two_matches_linear_program() {
    let cost = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    let plan = sinkhorn_align(&cost, 0.01, 200, 1e-6).unwrap();
    let lp = lp_2x2(&cost);
    for i in 0..2 {
        for j in 0..2 {
            assert!((plan.gamma.get(i, j) - lp[i][j]).abs() < 1e-3);
        }
    }
    assert!(plan.converged && plan.marginal_residual < 1e-6);
    let swapped = Tensor::from_rows(&[vec![2.0, 0.5], vec![0.25, 3.0]]).unwrap();
    let plan = sinkhorn_align(&swapped, 0.01, 500, 1e-9).unwrap();
    assert_eq!(lp_2x2(&swapped), [[0.0, 0.5], [0.5, 0.0]]);
    assert!((plan.gamma.get(0, 1) - 0.5).abs() < 1e-3);
}

#[test]
fn small_epsilon_converges_tightly() {
    // nearly diagonal plans make plain scaling contract very slowly
    for gap in [0.21, 0.3, 0.5, 1.0] {
        let cost = Tensor::from_rows(&[vec![0.2, 0.3], vec![0.4, 0.5 - gap]]).unwrap();
        let plan = sinkhorn(&cost, &[0.5, 0.5], &[0.5, 0.5], 0.01, 200, 1e-12).unwrap();
        assert!(
            plan.converged,
            "gap {gap}: residual {}",
            plan.marginal_residual
        );
        assert!((plan.gamma.get(0, 0) - 0.5).abs() < 1e-3);
    }
}

#[test]
fn unconverged_plan_is_flagged() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cost = random_tensor(&mut rng, 6, 9).map(|x| 5.0 * x.abs());
    let plan = sinkhorn_align(&cost, 0.01, 1, 1e-14).unwrap();
    assert!(!plan.converged);
    assert_eq!(plan.iterations_used, 1);
    assert!(plan.gamma.all_finite());
    let col_sums: Vec<f64> = (0..9)
        .map(|j| (0..6).map(|i| plan.gamma.get(i, j)).sum())
        .collect();
    assert!(col_sums.iter().all(|s| (s - 1.0 / 9.0).abs() < 1e-12));
}

#[test]
fn sinkhorn_input_validation() {
    let bad = Tensor::from_vec(1, 2, vec![0.0, f64::NAN]).unwrap();
    assert!(sinkhorn_align(&bad, 0.1, 10, 1e-6).is_err());
    assert!(sinkhorn_align(&Tensor::zeros(2, 2), 0.0, 10, 1e-6).is_err());
    assert!(sinkhorn(&Tensor::zeros(2, 2), &[0.5], &[0.5, 0.5], 0.1, 10, 1e-6).is_err());
}

#[test]
fn alignment_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let feats = random_tensor(&mut rng, 4, 3);
    let mut g = Graph::new();
    let fv = g.constant(feats.clone());
    let one_hot = g.constant(Tensor::from_vec(1, 4, vec![0.0, 0.0, 1.0, 0.0]).unwrap());
    let picked = align_trajectory(&mut g, one_hot, fv).unwrap();
    assert_eq!(g.value(picked).data(), feats.row(2));
    let uniform = g.constant(Tensor::filled(1, 4, 0.25));
    let mean = align_trajectory(&mut g, uniform, fv).unwrap();
    let oracle = g.mean_rows(fv);
    for (a, b) in g.value(mean).data().iter().zip(g.value(oracle).data()) {
        assert!((a - b).abs() < 1e-15);
    }
    let single = g.constant(row_tensor(feats.row(1)));
    let config = FusionConfig::default();
    let s = g.constant(Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
    let (gamma, aligned) = geo_ot_align(&mut g, s, single, &config).unwrap();
    assert_eq!(g.value(gamma).data(), &[1.0]);
    assert_eq!(g.value(aligned).data(), feats.row(1));
    let bad = g.constant(Tensor::filled(1, 3, 0.5));
    assert!(align_trajectory(&mut g, bad, fv).is_err());
}

#[test]
fn graph_plan_equals_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let t = rng.random_range(1..30);
        let cost: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..2.0)).collect();
        let eps = [1.0, 0.1, 0.05][rng.random_range(0..3)];
        let mut g = Graph::new();
        let col = g.constant(Tensor::from_vec(t, 1, cost.clone()).unwrap());
        let gamma = ot_plan_graph(&mut g, col, eps);
        let plan = sinkhorn_align(
            &Tensor::from_vec(1, t, cost.clone()).unwrap(),
            eps,
            200,
            1e-6,
        )
        .unwrap();
        let oracle = softmax_oracle(&cost, eps);
        for j in 0..t {
            assert!((g.value(gamma).data()[j] - oracle[j]).abs() < 1e-10);
            assert!((plan.gamma.data()[j] - oracle[j]).abs() < 1e-10);
        }
    }
}

fn head(in_dim: usize, classes: usize, seed: u64) -> (ParamStore, Linear) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = Linear::new(&mut store, &mut rng, "cls", in_dim, classes, true).unwrap();
    (store, l)
}

#[test]
fn classifier_examples() {
    let (mut store, l) = head(5, 4, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (a, b) = (random_tensor(&mut rng, 1, 2), random_tensor(&mut rng, 1, 3));

    let logits_of = |store: &ParamStore| {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let y = classify(&mut g, &p, &l, &[av, bv]).unwrap();
        g.value(y).clone()
    };
    assert_eq!(logits_of(&store).shape(), (1, 4));

    // duplicate class 0 into class 2
    let w = store.get(l.w).value.clone();
    let mut dup = w.clone();
    for r in 0..5 {
        dup.set(r, 2, w.get(r, 0));
    }
    store.get_mut(l.w).value = dup;
    let y = logits_of(&store);
    assert_eq!(y.get(0, 0), y.get(0, 2));

    store.get_mut(l.w).value = Tensor::zeros(5, 4);
    assert!(logits_of(&store).data().iter().all(|&x| x == 0.0));
}

fn loss_of(fm: &[f64], fa: &[f64], alpha: f64) -> (f64, f64, f64) {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::from_vec(1, 3, vec![0.2, -0.4, 1.0]).unwrap());
    let m = g.constant(row_tensor(fm));
    let a = g.constant(row_tensor(fa));
    let l = loss_total(&mut g, logits, 1, m, a, alpha).unwrap();
    (
        g.value(l.total).item(),
        g.value(l.ce).item(),
        g.value(l.geo).item(),
    )
}

#[test]
fn loss_examples() {
    let (_, ce, geo) = loss_of(&[1.0, 2.0], &[1.0, 2.0], 0.5);
    assert!(geo.abs() < 1e-15);
    let z: f64 = [0.2f64, -0.4, 1.0].iter().map(|x| x.exp()).sum();
    assert!((ce - (z.ln() + 0.4)).abs() < 1e-12);
    assert!((loss_of(&[1.0, 2.0], &[-2.0, -4.0], 0.5).2 - 2.0).abs() < 1e-15);
    assert!((loss_of(&[1.0, 0.0], &[0.0, 3.0], 0.5).2 - 1.0).abs() < 1e-15);
    let (total, ce, geo) = loss_of(&[1.0, 0.5], &[0.3, -0.7], 0.25);
    assert!((total - (ce + 0.25 * geo)).abs() < 1e-15);

    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(1, 3));
    assert!(matches!(
        cross_entropy(&mut g, logits, 3),
        Err(Error::LabelOutOfRange {
            label: 3,
            classes: 3
        })
    ));
}

#[test]
fn config_validation() {
    assert!(FusionConfig::default().validate().is_ok());
    let zero = FusionConfig {
        lambda_feat: 0.0,
        lambda_time: 0.0,
        ..FusionConfig::default()
    };
    assert!(zero.validate().is_err());
    assert!(FusionConfig {
        epsilon_ot: 0.0,
        ..FusionConfig::default()
    }
    .validate()
    .is_err());
    assert!(FusionConfig {
        lambda_time: -1.0,
        ..FusionConfig::default()
    }
    .validate()
    .is_err());
}

#[test]
fn gradient_check_through_fusion_and_loss() {
    let (d_s, d_t, t_len, classes) = (4, 4, 5, 3);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cross = CrossAttention::new(&mut store, &mut rng, "x", d_s, d_t, 2).unwrap();
    let proj = GeoProjection::new(&mut store, &mut rng, "geo", d_s, d_t, 3).unwrap();
    let cls = Linear::new(&mut store, &mut rng, "cls", d_s + d_t, classes, true).unwrap();
    let s_in = store
        .add("s_in", random_tensor(&mut rng, t_len, d_s))
        .unwrap();
    let t_in = store
        .add("t_in", random_tensor(&mut rng, t_len, d_t))
        .unwrap();
    jitter_params(&mut store, 13, 0.05);
    let config = FusionConfig {
        num_classes: classes,
        ..FusionConfig::default()
    };
    let report = grad_check(&store, 1e-5, 1e-4, |g, p| {
        let (fs, ft) = cross.forward(g, p, p.get(s_in), p.get(t_in))?;
        let (_, aligned) = geo_ot_align(g, fs, ft, &config)?;
        let logits = classify(g, p, &cls, &[fs, aligned])?;
        let (fm, fa) = proj.project(g, p, fs, aligned)?;
        Ok(loss_total(g, logits, 2, fm, fa, config.alpha_loss)?.total)
    })
    .unwrap();
    assert!(report.passed(), "{:?}", report.worst());
}

fn entropy_of(cost: &Tensor, eps: f64) -> f64 {
    sinkhorn_align(cost, eps, 5000, 1e-10).unwrap().entropy()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plan_invariants(seed in any::<u64>(), n in 1usize..4, m in 1usize..12, eps in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost = random_tensor(&mut rng, n, m).map(|x| x.abs() * 2.0);
        let plan = sinkhorn_align(&cost, eps, 2000, 1e-9).unwrap();
        prop_assert!(plan.gamma.data().iter().all(|&x| x >= 0.0));
        prop_assert!((plan.gamma.sum() - 1.0).abs() < 1e-6);
        prop_assert!(plan.converged);
        prop_assert!(plan.marginal_residual < 1e-6);
    }

    #[test]
    fn entropy_shrinks_with_epsilon(seed in any::<u64>(), n in 1usize..3, m in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost = random_tensor(&mut rng, n, m).map(|x| x.abs());
        let h: Vec<f64> = [1.0, 0.1, 0.01].iter().map(|&e| entropy_of(&cost, e)).collect();
        prop_assert!(h[1] <= h[0] + 1e-9 && h[2] <= h[1] + 1e-9, "{:?}", h);
    }

    #[test]
    fn geo_loss_in_range(seed in any::<u64>(), d in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let geo = loss_of(&a, &b, 1.0).2;
        prop_assert!((0.0..=2.0 + 1e-15).contains(&geo));
    }

    #[test]
    fn argmax_ignores_logit_shift(seed in any::<u64>(), c in 2usize..12, shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_tensor(&mut rng, 1, c);
        let shifted = logits.map(|x| x + shift);
        prop_assert_eq!(logits.argmax_rows(), shifted.argmax_rows());
        let mut g = Graph::new();
        let (a, b) = (g.constant(logits), g.constant(shifted));
        let (pa, pb) = (g.softmax(a), g.softmax(b));
        for (x, y) in g.value(pa).data().iter().zip(g.value(pb).data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
