mod common;

use common::*;
use diffnet::analysis;
use diffnet::combiners::{self, Rule};
use diffnet::diffusion::{self, DiffusionConfig, NetworkState};
use diffnet::graph::{self, Topology};
use diffnet::kalman;
use diffnet::linalg;
use diffnet::stochmat::{self, Kind};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(48)
}

fn random_matrix(r: usize, c: usize, rng: &mut rand_chacha::ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| normal(rng))
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn vec_of_triple_product(seed in any::<u64>(), p in 1usize..4, q in 1usize..4, s in 1usize..4) {
        let mut r = rng(seed);
        let a = random_matrix(p, q, &mut r);
        let b = random_matrix(q, s, &mut r);
        let c = random_matrix(s, p, &mut r);
        let lhs = linalg::vec(&(&a * &b * &c));
        let rhs = linalg::kron(&c.transpose(), &a) * linalg::vec(&b);
        prop_assert!((lhs - rhs).amax() < 1e-12);
        let d = random_matrix(q, p, &mut r);
        let tr = (&a * &d).trace();
        let via_vec = linalg::vec(&a.transpose()).dot(&linalg::vec(&d));
        prop_assert!((tr - via_vec).abs() < 1e-12);
        let sq = random_matrix(q, q, &mut r);
        prop_assert_eq!(linalg::unvec(&linalg::vec(&sq), q), sq);
    }

    #[test]
    fn rho_f_is_rho_b_squared(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(2..=4);
        let m = r.random_range(1..=2);
        let t = random_graph(n, &mut r);
        let model = random_model(n, m, &mut r);
        let cfg = DiffusionConfig::general(
            random_left_stochastic(&t, &mut r),
            random_right_stochastic(&t, &mut r),
            random_left_stochastic(&t, &mut r),
            (0..n).map(|_| 0.5 * r.random::<f64>()).collect(),
        ).unwrap();
        let (_, c, _) = analysis::analyse(&model, &cfg).unwrap();
        let f = c.f_matrix().unwrap();
        let rho_f = f.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        prop_assert!((rho_f - c.rho_b * c.rho_b).abs() < 1e-9 * (1.0 + rho_f));
    }

    #[test]
    fn steady_state_matches_fixed_point(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(2..=5);
        let m = r.random_range(1..=3);
        let t = random_graph(n, &mut r);
        let model = random_model(n, m, &mut r);
        let (a1, a2, c) = (
            random_left_stochastic(&t, &mut r),
            random_left_stochastic(&t, &mut r),
            random_right_stochastic(&t, &mut r),
        );
        let mu: Vec<f64> = (0..n).map(|_| 0.02 + 0.3 * r.random::<f64>()).collect();
        let cfg = DiffusionConfig::general(a1.clone(), c.clone(), a2.clone(), mu.clone()).unwrap();
        let (_, vc, rep) = analysis::analyse(&model, &cfg).unwrap();
        let (b, y) = oracle_b_y(&model, &a1, &a2, &c, &mu);
        prop_assert!((&vc.b - &b).amax() < 1e-12);
        prop_assert!((&vc.y - &y).amax() < 1e-12 * y.amax().max(1e-300));
        let p = fixed_point_covariance(&b, &y);
        let (msd, emse) = oracle_msd_emse(&model, &p);
        prop_assert!(rel_err(rep.msd_network, msd) < 1e-8);
        prop_assert!(rel_err(rep.emse_network, emse) < 1e-8);
        let node_avg = rep.msd_node.iter().sum::<f64>() / n as f64;
        prop_assert!(rel_err(node_avg, rep.msd_network) < 1e-12);
        for k in 0..n {
            let pk = p.view((k * m, k * m), (m, m)).trace();
            prop_assert!(rel_err(rep.msd_node[k], pk) < 1e-8);
        }
    }

    #[test]
    fn learning_curve_matches_covariance_recursion(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(2..=4);
        let m = r.random_range(1..=2);
        let t = random_graph(n, &mut r);
        let model = random_model(n, m, &mut r);
        let a = random_left_stochastic(&t, &mut r);
        let cfg = DiffusionConfig::atc(a.clone(), DMatrix::identity(n, n), vec![0.1; n]).unwrap();
        let (mom, vc, _) = analysis::analyse(&model, &cfg).unwrap();
        let zero = DVector::zeros(m);
        let curve = analysis::msd_curve_theory(&vc, &mom, model.wo(), &zero, 40).unwrap();
        let (b, y) = oracle_b_y(&model, &DMatrix::identity(n, n), &a, &DMatrix::identity(n, n), &[0.1; 8][..n]);
        let e0 = DVector::from_fn(n * m, |i, _| model.wo()[i % m]);
        let mut p = &e0 * e0.transpose();
        for z in curve {
            p = &b * p * b.transpose() + &y;
            prop_assert!(rel_err(z, p.trace() / n as f64) < 1e-9);
        }
    }

    #[test]
    fn consensus_preserves_the_sum(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(2..=8);
        let t = random_graph(n, &mut r);
        let a = combiners::build_combination(&t, &Rule::Metropolis).unwrap().into_entries();
        let z0 = DVector::from_fn(n, |_, _| normal(&mut r));
        let z = diffusion::consensus_average(&a, &z0, 1, 25);
        prop_assert!((z.sum() - z0.sum()).abs() < 1e-10 * (1.0 + z0.abs().sum()));
    }

    #[test]
    fn rules_produce_their_declared_kind(seed in any::<u64>(), which in 0usize..6) {
        let mut r = rng(seed);
        let n = r.random_range(2..=9);
        let t = random_graph(n, &mut r);
        let rule = match which {
            0 => Rule::Averaging,
            1 => Rule::Laplacian { gamma: 1.0 / n as f64 },
            2 => Rule::MaxDegree,
            3 => Rule::Metropolis,
            4 => Rule::RelativeDegree,
            _ => Rule::RelativeVariance { gamma2: (0..n).map(|_| 0.1 + r.random::<f64>()).collect() },
        };
        let c = combiners::build_combination(&t, &rule).unwrap();
        let a = c.entries();
        prop_assert!(stochmat::is_kind(a, Kind::LeftStochastic, 1e-12));
        if rule.kind() == Kind::DoublyStochastic {
            prop_assert!(stochmat::is_kind(a, Kind::DoublyStochastic, 1e-12));
        }
        for l in 0..n {
            for k in 0..n {
                prop_assert!(a[(l, k)] >= 0.0);
                if a[(l, k)] != 0.0 {
                    prop_assert!(t.in_neighborhood(l, k));
                }
            }
        }
        if which == 3 {
            prop_assert!((a - metropolis(&t)).amax() < 1e-15);
        }
    }

    #[test]
    fn connectivity_agrees_with_search(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(2..=9);
        let edges: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .filter(|_| r.random::<f64>() < 0.3)
            .collect();
        let t = Topology::from_edges(n, &edges).unwrap();
        let rep = graph::connectivity(&t).unwrap();
        prop_assert_eq!(rep.connected, t.is_connected_bfs());
        prop_assert_eq!(rep.zero_multiplicity, t.component_count());
    }

    #[test]
    fn diffusion_rate_never_worse_than_isolated(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(2..=6);
        let m = r.random_range(1..=3);
        let t = random_graph(n, &mut r);
        let model = random_model(n, m, &mut r);
        let c = random_right_stochastic(&t, &mut r);
        let bounds = diffusion::step_size_bounds(&model, &c).unwrap();
        let mu: Vec<f64> = bounds.iter().map(|b| b * r.random::<f64>()).collect();
        let i = DMatrix::identity(n, n);
        let (a1, a2) = (random_left_stochastic(&t, &mut r), random_left_stochastic(&t, &mut r));
        let (b_diff, _) = oracle_b_y(&model, &a1, &a2, &c, &mu);
        let (b_iso, _) = oracle_b_y(&model, &i, &i, &c, &mu);
        let rho = |b: &DMatrix<f64>| b.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        prop_assert!(rho(&b_diff) <= rho(&b_iso) + 1e-10);
    }

    #[test]
    fn steepest_descent_error_follows_mean_recursion(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(2..=5);
        let m = r.random_range(1..=3);
        let t = random_graph(n, &mut r);
        let model = random_model(n, m, &mut r);
        let (a1, a2, c) = (
            random_left_stochastic(&t, &mut r),
            random_left_stochastic(&t, &mut r),
            random_right_stochastic(&t, &mut r),
        );
        let mu: Vec<f64> = (0..n).map(|_| 0.2 * r.random::<f64>()).collect();
        let cfg = DiffusionConfig::general(a1.clone(), c.clone(), a2.clone(), mu.clone()).unwrap();
        let (b, _) = oracle_b_y(&model, &a1, &a2, &c, &mu);
        let mut st = NetworkState::zeros(n, m);
        let mut e = DVector::from_fn(n * m, |i, _| model.wo()[i % m]);
        for _ in 0..30 {
            diffusion::steepest_descent_step(&mut st, &cfg, &model).unwrap();
            e = &b * e;
            let got = DVector::from_fn(n * m, |i, _| model.wo()[i % m] - st.w[i]);
            prop_assert!((got - &e).amax() < 1e-10);
        }
    }

    #[test]
    fn quadratic_gradient_reproduces_steepest_descent_bitwise(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(2..=5);
        let m = r.random_range(1..=3);
        let t = random_graph(n, &mut r);
        let model = random_model(n, m, &mut r);
        let cfg = DiffusionConfig::general(
            random_left_stochastic(&t, &mut r),
            random_right_stochastic(&t, &mut r),
            random_left_stochastic(&t, &mut r),
            vec![0.05; n],
        ).unwrap();
        let grad = |l: usize, w: &DVector<f64>| model.descent_gradient(l, w);
        let mut a = NetworkState::zeros(n, m);
        let mut b = NetworkState::zeros(n, m);
        for _ in 0..10 {
            diffusion::steepest_descent_step(&mut a, &cfg, &model).unwrap();
            diffusion::generic_cost_step(&mut b, &cfg, &grad, None).unwrap();
            prop_assert_eq!(&a.w, &b.w);
        }
    }

    #[test]
    fn atc_with_identity_is_non_cooperative_bitwise(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(2..=5);
        let model = random_model(n, 2, &mut r);
        let i = DMatrix::identity(n, n);
        let atc = DiffusionConfig::atc(i.clone(), i.clone(), vec![0.05; n]).unwrap();
        let cta = DiffusionConfig::cta(i, DMatrix::identity(n, n), vec![0.05; n]).unwrap();
        let nc = DiffusionConfig::non_cooperative(vec![0.05; n]).unwrap();
        let (mut x, mut y, mut z) = (NetworkState::zeros(n, 2), NetworkState::zeros(n, 2), NetworkState::zeros(n, 2));
        for _ in 0..20 {
            let snap = model.sample_snapshot(&mut r);
            diffusion::adaptive_step(&mut x, &atc, &snap, None).unwrap();
            diffusion::adaptive_step(&mut y, &cta, &snap, None).unwrap();
            diffusion::adaptive_step(&mut z, &nc, &snap, None).unwrap();
        }
        prop_assert_eq!(&x.w, &z.w);
        prop_assert_eq!(&y.w, &z.w);
    }

    #[test]
    fn consensus_fusion_is_diffusion_with_epsilon_weights(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(2..=8);
        let t = random_graph(n, &mut r);
        let eps = r.random::<f64>() / t.max_degree() as f64;
        let psi: Vec<DVector<f64>> = (0..n).map(|_| DVector::from_fn(3, |_, _| normal(&mut r))).collect();
        let mut a = DMatrix::zeros(n, n);
        for k in 0..n {
            for &l in t.neighborhood(k) {
                a[(l, k)] = if l == k { 1.0 + eps - t.degree(k) as f64 * eps } else { eps };
            }
        }
        let x = kalman::ckf_combine(&psi, &t, eps).unwrap();
        let y = kalman::diffusion_combine(&psi, &t, &a).unwrap();
        prop_assert_eq!(x, y);
    }

    #[test]
    fn noisy_links_never_help(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(2..=5);
        let t = random_graph(n, &mut r);
        let model = random_model(n, 2, &mut r);
        let cfg = DiffusionConfig::general(
            random_left_stochastic(&t, &mut r),
            random_right_stochastic(&t, &mut r),
            random_left_stochastic(&t, &mut r),
            vec![0.04; n],
        ).unwrap();
        let lm = diffnet::datamodel::LinkNoiseModel::random(&t, 2, [1e-5, 1e-2], &mut r);
        let mom = analysis::build_moments(&model, &cfg).unwrap();
        let dy = analysis::link_noise_correction(&mom, &cfg, &model, &lm).unwrap();
        prop_assert!(dy.symmetric_eigen().eigenvalues.min() >= -1e-12);
        let (_, _, clean) = analysis::analyse(&model, &cfg).unwrap();
        let (_, _, noisy) = analysis::analyse(&model, &cfg.with_link_noise(lm).unwrap()).unwrap();
        prop_assert!(noisy.msd_network >= clean.msd_network);
    }
}

/// Scalar filter converges to the root of `P = F²(P − P²/(P+R)) + GQG`.
#[test]
fn scalar_filter_reaches_riccati_fixed_point() {
    let (f, g, q, rr) = (0.9, 1.0, 0.2, 0.5);
    let one = |x: f64| DMatrix::from_element(1, 1, x);
    let model = kalman::StateSpaceModel::constant(
        kalman::SystemMatrices { f: one(f), g: one(g), q: one(q), h: vec![one(1.0)], r: vec![one(rr)] },
        one(1.0),
    )
    .unwrap();
    let t = Topology::complete(1);
    let mut s = kalman::init_states(&model, 1);
    for _ in 0..500 {
        kalman::dkf_tm_step(&mut s, &model, &t, &one(1.0), &[DVector::from_element(1, 0.0)]).unwrap();
    }
    let mut p: f64 = 1.0;
    for _ in 0..10_000 {
        p = f * f * (p - p * p / (p + rr)) + g * q * g;
    }
    let got = s[0].p_pred[(0, 0)];
    assert!((got - p).abs() < 1e-8, "{got} vs {p}");
    assert!((got - (f * f * (got - got * got / (got + rr)) + g * q * g)).abs() < 1e-8);
}

/// Quartic-plus-quadratic costs with a common minimizer: diffusion with the
/// exact gradient settles on it, and the step bound from the Hessian range holds.
#[test]
fn quartic_costs_converge_to_common_minimizer() {
    let mut r = rng(5);
    let n = 6;
    let m = 2;
    let t = random_graph(n, &mut r);
    let wo = DVector::from_vec(vec![0.7, -1.2]);
    let hs: Vec<DMatrix<f64>> = (0..n).map(|_| random_spd(m, 0.5, 1.5, &mut r)).collect();
    let grad = |l: usize, w: &DVector<f64>| {
        let e = w - &wo;
        &e * e.norm_squared() + &hs[l] * e
    };
    let a = metropolis(&t);
    let cfg = DiffusionConfig::atc(a, DMatrix::identity(n, n), vec![0.1; n]).unwrap();
    let mut st = NetworkState::zeros(n, m);
    for _ in 0..2000 {
        diffusion::generic_cost_step(&mut st, &cfg, &grad, None).unwrap();
    }
    for k in 0..n {
        assert!((st.node(k) - &wo).amax() < 1e-10);
    }
}
