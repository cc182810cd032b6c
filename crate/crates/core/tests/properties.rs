use mftd_core::dynamics::{g_field, g_hat_stochastic, q_hat_table, td_residual, td_step};
use mftd_core::env::{
    bellman_op, bellman_optimality_op, soft_bellman_op, softmax, stationary_distribution, TransitionSampler,
};
use mftd_core::fit::{fit_inverse, fit_power_law};
use mftd_core::metrics::{kappa_terms, kernel_drift, monotonicity_gap, KappaMode};
use mftd_core::network::{init_ensemble, kernel_matrix, q_hat};
use mftd_core::ot::{ensemble_sup_distance, w2_exact, w2_sliced};
use mftd_core::{ActivationSpec, FiniteMdp, ParticleEnsemble, Policy, QTable};
use proptest::prelude::*;

fn mdp_strategy() -> impl Strategy<Value = FiniteMdp> {
    (1usize..=5, 1usize..=3, 0.1f64..0.95, any::<u64>())
        .prop_map(|(ns, na, gamma, seed)| FiniteMdp::random(ns, na, gamma, 1.0, 3, seed).unwrap())
}

fn table(mdp: &FiniteMdp, values: &[f64]) -> QTable {
    let n = mdp.n_pairs();
    QTable::from_vec(mdp.n_states(), mdp.n_actions(), values.iter().cycle().take(n).copied().collect()).unwrap()
}

fn ensemble_strategy(m: usize, dim: usize) -> impl Strategy<Value = ParticleEnsemble> {
    prop::collection::vec(-3.0f64..3.0, m * dim)
        .prop_map(move |data| ParticleEnsemble::from_vec(m, dim, 1.0, data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bellman_operators_contract(
        mdp in mdp_strategy(),
        a in prop::collection::vec(-5.0f64..5.0, 15),
        b in prop::collection::vec(-5.0f64..5.0, 15),
        beta in 0.01f64..2.0,
    ) {
        let (q1, q2) = (table(&mdp, &a), table(&mdp, &b));
        let g = mdp.gamma();
        let d = q1.sup_distance(&q2);
        let pi = Policy::for_mdp_uniform(&mdp);
        let pairs = [
            (bellman_op(&mdp, &pi, &q1).unwrap(), bellman_op(&mdp, &pi, &q2).unwrap()),
            (bellman_optimality_op(&mdp, &q1).unwrap(), bellman_optimality_op(&mdp, &q2).unwrap()),
            (soft_bellman_op(&mdp, &q1, beta).unwrap(), soft_bellman_op(&mdp, &q2, beta).unwrap()),
        ];
        for (t1, t2) in pairs {
            prop_assert!(t1.sup_distance(&t2) <= g * d + 1e-12);
        }
    }

    #[test]
    fn softmax_lies_between_mean_shifted_max_and_max(
        v in prop::collection::vec(-50.0f64..50.0, 1..6),
        beta in 1e-3f64..10.0,
    ) {
        let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s = softmax(&v, beta);
        prop_assert!(s <= mx + 1e-12);
        prop_assert!(s >= mx - beta * (v.len() as f64).ln() - 1e-12);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        prop_assert!(s >= mean - 1e-9);
    }

    #[test]
    fn w2_is_permutation_invariant_and_symmetric(
        a in ensemble_strategy(7, 3),
        b in ensemble_strategy(7, 3),
        shift in 0usize..7,
    ) {
        let mut perm: Vec<usize> = (0..7).collect();
        perm.rotate_left(shift);
        perm.swap(0, 6);
        let d = w2_exact(&a, &b).unwrap().value;
        prop_assert!((w2_exact(&a.permuted(&perm), &b).unwrap().value - d).abs() < 1e-12);
        prop_assert!((w2_exact(&b, &a).unwrap().value - d).abs() < 1e-12);
        prop_assert!(w2_sliced(&a, &b, 64, 3).unwrap().value <= d + 1e-12);
        prop_assert!(d <= ensemble_sup_distance(&a, &b).unwrap().value + 1e-12);
    }

    #[test]
    fn monotonicity_gap_is_nonnegative(
        mdp in mdp_strategy(),
        f in prop::collection::vec(-10.0f64..10.0, 15),
    ) {
        let pi = Policy::for_mdp_uniform(&mdp);
        let st = stationary_distribution(&mdp, &pi).unwrap();
        prop_assert!(monotonicity_gap(&table(&mdp, &f), &mdp, &pi, &st).unwrap() >= -1e-10);
    }

    #[test]
    fn q_hat_is_lipschitz_in_the_sup_coupling(
        a in ensemble_strategy(6, 4),
        b in ensemble_strategy(6, 4),
        alpha in 0.1f64..10.0,
        seed in any::<u64>(),
    ) {
        let spec = ActivationSpec::tanh_sigmoid(1.0, 3);
        let mdp = FiniteMdp::random(2, 2, 0.5, 1.0, 3, seed).unwrap();
        let (a, b) = (a.with_alpha(alpha), b.with_alpha(alpha));
        let sup = ensemble_sup_distance(&a, &b).unwrap().value;
        for x in mdp.grid() {
            let diff = (q_hat(&spec, x, &a) - q_hat(&spec, x, &b)).abs();
            prop_assert!(diff <= alpha * spec.bounds().b1 * sup + 1e-12);
        }
    }

    #[test]
    fn td_step_displacement_is_bounded(
        seed in any::<u64>(),
        alpha in 0.5f64..10.0,
        eps in 1e-3f64..0.5,
    ) {
        let spec = ActivationSpec::tanh_sigmoid(1.0, 3);
        let mdp = FiniteMdp::random(3, 2, 0.8, 1.0, 3, seed).unwrap();
        let pi = Policy::for_mdp_uniform(&mdp);
        let st = stationary_distribution(&mdp, &pi).unwrap();
        let mut sampler = TransitionSampler::from_seed(&mdp, &pi, &st, seed).unwrap();
        let e = init_ensemble(16, 4, seed, true, alpha).unwrap();
        let eta = alpha.powi(-2);
        let tuple = sampler.sample();
        let delta = td_residual(&spec, &e, &tuple, &mdp);
        let next = td_step(&spec, &e, &tuple, &mdp, eta, eps).unwrap();
        let moved = ensemble_sup_distance(&e, &next).unwrap().value;
        prop_assert!(moved <= eta * eps * alpha * delta.abs() * spec.bounds().b1 + 1e-12);
    }

    #[test]
    fn kernel_drift_ignores_particle_relabeling(seed in any::<u64>(), shift in 1usize..8) {
        let spec = ActivationSpec::tanh_sigmoid(1.0, 3);
        let mdp = FiniteMdp::random(3, 2, 0.8, 1.0, 3, seed).unwrap();
        let e = init_ensemble(8, 4, seed, false, 2.0).unwrap();
        let mut perm: Vec<usize> = (0..8).collect();
        perm.rotate_left(shift);
        let grid = mdp.grid();
        let k0 = kernel_matrix(&spec, &e, &grid).unwrap();
        let k1 = kernel_matrix(&spec, &e.permuted(&perm), &grid).unwrap();
        prop_assert!(kernel_drift(&k1, &k0).unwrap() < 1e-12);
    }

    #[test]
    fn kappa_terms_match_direct_sums(
        mdp in mdp_strategy(),
        a in prop::collection::vec(-3.0f64..3.0, 15),
        b in prop::collection::vec(-3.0f64..3.0, 15),
        beta in 0.05f64..1.0,
    ) {
        let pi = Policy::for_mdp_uniform(&mdp);
        let st = stationary_distribution(&mdp, &pi).unwrap();
        let (q1, q2) = (table(&mdp, &a), table(&mdp, &b));
        for (mode, reduce) in [
            (KappaMode::Max, Box::new(|r: &[f64]| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)) as Box<dyn Fn(&[f64]) -> f64>),
            (KappaMode::Soft(beta), Box::new(move |r: &[f64]| {
                beta * (r.iter().map(|v| (v / beta).exp()).sum::<f64>() / r.len() as f64).ln()
            })),
        ] {
            let (mut num, mut den) = (0.0, 0.0);
            for s in 0..mdp.n_states() {
                for act in 0..mdp.n_actions() {
                    let d = st.prob(s, act);
                    num += d * (q1.get(s, act) - q2.get(s, act)).powi(2);
                    den += d * (reduce(q1.row(s)) - reduce(q2.row(s))).powi(2);
                }
            }
            let (n, dd) = kappa_terms(&q1, &q2, &st, mode);
            prop_assert!((n - num).abs() <= 1e-12 * (1.0 + num));
            prop_assert!((dd - den).abs() <= 1e-9 * (1.0 + den));
        }
    }

    #[test]
    fn slope_fit_recovers_exponent(p in -3.0f64..3.0, c in 0.01f64..100.0) {
        let x = [1e-3, 3e-3, 1e-2, 3e-2, 0.1, 0.3, 1.0];
        let y: Vec<f64> = x.iter().map(|v| c * f64::powf(*v, p)).collect();
        let f = fit_power_law(&x, &y).unwrap();
        prop_assert!((f.slope - p).abs() < 1e-6);
        prop_assert!((f.intercept - c.ln()).abs() < 1e-6);
    }

    #[test]
    fn inverse_fit_recovers_coefficients(a in -1.0f64..1.0, b in -5.0f64..5.0) {
        let alpha = [2.0, 5.0, 10.0, 20.0];
        let y: Vec<f64> = alpha.iter().map(|al| a + b / al).collect();
        let f = fit_inverse(&alpha, &y).unwrap();
        prop_assert!((f.intercept - a).abs() < 1e-9 && (f.slope - b).abs() < 1e-9);
    }
}

#[test]
fn stochastic_field_averages_to_expected_field() {
    let spec = ActivationSpec::tanh_sigmoid(1.0, 3);
    let mdp = FiniteMdp::random(3, 2, 0.7, 1.0, 3, 17).unwrap().with_reward_noise(0.5).unwrap();
    let pi = Policy::for_mdp_uniform(&mdp);
    let st = stationary_distribution(&mdp, &pi).unwrap();
    let e = init_ensemble(8, 4, 5, false, 3.0).unwrap();
    let theta = e.particle(2).to_vec();
    let exact = g_field(&spec, &theta, &e, &mdp, &pi, &st).unwrap();
    let mut sampler = TransitionSampler::from_seed(&mdp, &pi, &st, 99).unwrap();
    let n = 200_000;
    let mut sum = vec![0.0; theta.len()];
    let mut sq = vec![0.0; theta.len()];
    for _ in 0..n {
        let g = g_hat_stochastic(&spec, &theta, &e, &sampler.sample(), &mdp);
        for (i, v) in g.iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    for i in 0..theta.len() {
        let mean = sum[i] / n as f64;
        let sd = (sq[i] / n as f64 - mean * mean).max(0.0).sqrt();
        assert!(
            (mean - exact[i]).abs() <= 5.0 * sd / (n as f64).sqrt() + 1e-12,
            "coordinate {i}: {mean} vs {}",
            exact[i]
        );
    }
}

#[test]
fn larger_alpha_keeps_the_kernel_closer_to_initialization() {
    use mftd_core::dynamics::{run, DynamicsKind, RunConfig};
    let spec = ActivationSpec::tanh_sigmoid(1.0, 4);
    let mdp = FiniteMdp::random(5, 2, 0.9, 0.5, 4, 1).unwrap();
    let pi = Policy::for_mdp_uniform(&mdp);
    let drift = |alpha: f64| {
        let cfg = RunConfig::new(DynamicsKind::Etd, 64, alpha, 0.05, 20.0, 3);
        run(&cfg, &mdp, &pi, &spec, 1000).unwrap().records.last().unwrap().kernel_drift_fro
    };
    let (small, large) = (drift(1.0), drift(8.0));
    assert!(large < small, "kernel drift {large} at alpha 8 vs {small} at alpha 1");
}

#[test]
fn soft_q_approaches_q_learning_as_beta_shrinks() {
    use mftd_core::dynamics::{q_learning_step, soft_q_step};
    let spec = ActivationSpec::tanh_sigmoid(1.0, 3);
    let mdp = FiniteMdp::random(3, 3, 0.7, 1.0, 3, 8).unwrap();
    let pi = Policy::for_mdp_uniform(&mdp);
    let st = stationary_distribution(&mdp, &pi).unwrap();
    let start = init_ensemble(16, 4, 2, true, 2.0).unwrap();
    let steps = 100;
    let (eta, eps) = (0.25, 0.05);
    let gap = |beta: f64| {
        let mut sampler = TransitionSampler::from_seed(&mdp, &pi, &st, 4).unwrap();
        let (mut q, mut s) = (start.clone(), start.clone());
        for _ in 0..steps {
            let t = sampler.sample();
            q = q_learning_step(&spec, &q, &t, &mdp, eta, eps).unwrap();
            s = soft_q_step(&spec, &s, &t, &mdp, eta, eps, beta).unwrap();
        }
        q_hat_table(&spec, &q, &mdp).sup_distance(&q_hat_table(&spec, &s, &mdp))
    };
    let (coarse, fine) = (gap(0.5), gap(1e-3));
    assert!(fine < coarse && fine < 0.1 * coarse, "sup gap {fine} at beta 1e-3 vs {coarse} at beta 0.5");
}
