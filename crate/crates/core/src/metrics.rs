//! Diagnostics computed with exact expectations over the finite grid.

use serde::{Deserialize, Serialize};

use crate::dynamics::{q_hat_table, stream_rng, Trajectory};
use crate::env::{exact_msbe, softmax, FiniteMdp, Policy, QTable, StationaryDistribution};
use crate::error::{Error, Result};
use crate::network::{init_ensemble_with, ActivationSpec, KernelMatrix, ParticleEnsemble};
use crate::ot::w2_auto;

/// One diagnostics row of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: usize,
    pub t: f64,
    pub optimality_gap: f64,
    pub bellman_residual: f64,
    pub w2_drift: f64,
    pub kernel_drift_fro: f64,
    /// Mean `|delta|` over the sampled steps since the previous row for
    /// stochastic dynamics; `E_D |Q - T Q|` at the row for expected ones.
    pub delta_abs_mean: f64,
}

impl RunRecord {
    pub const HEADER: [&'static str; 7] =
        ["step", "t", "optimality_gap", "bellman_residual", "w2_drift", "kernel_drift_fro", "delta_abs_mean"];
}

fn check_table(q: &QTable, mdp: &FiniteMdp) -> Result<()> {
    if q.n_states() != mdp.n_states() || q.n_actions() != mdp.n_actions() {
        return Err(Error::ShapeMismatch(format!(
            "table is {}x{}, MDP is {}x{}",
            q.n_states(),
            q.n_actions(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    Ok(())
}

/// `sum_x D(x) (values[x] - q_ref[x])^2`.
pub fn optimality_gap_from_grid(values: &[f64], q_ref: &QTable, stationary: &StationaryDistribution) -> f64 {
    stationary.probs().iter().zip(values.iter().zip(q_ref.values())).map(|(d, (a, b))| d * (a - b) * (a - b)).sum()
}

/// `E_D[(Q_hat(x) - q_ref(x))^2]`.
pub fn optimality_gap(
    spec: &ActivationSpec,
    ensemble: &ParticleEnsemble,
    q_ref: &QTable,
    mdp: &FiniteMdp,
    stationary: &StationaryDistribution,
) -> Result<f64> {
    check_table(q_ref, mdp)?;
    let q = q_hat_table(spec, ensemble, mdp);
    Ok(optimality_gap_from_grid(q.values(), q_ref, stationary))
}

/// `(1/2) E_D[(Q_hat - T^pi Q_hat)^2]` on the full grid.
pub fn bellman_residual_exact(
    spec: &ActivationSpec,
    ensemble: &ParticleEnsemble,
    mdp: &FiniteMdp,
    policy: &Policy,
    stationary: &StationaryDistribution,
) -> Result<f64> {
    exact_msbe(mdp, policy, stationary, &q_hat_table(spec, ensemble, mdp))
}

/// `||K_t - K_0||_F / ||K_0||_F`.
pub fn kernel_drift(kt: &KernelMatrix, k0: &KernelMatrix) -> Result<f64> {
    if !kt.same_grid(k0) {
        return Err(Error::ShapeMismatch("kernel matrices are on different grids".into()));
    }
    let diff: f64 = kt.entries().iter().zip(k0.entries()).map(|(a, b)| (a - b) * (a - b)).sum();
    let base: f64 = k0.entries().iter().map(|a| a * a).sum();
    if base == 0.0 {
        return Err(Error::InvalidParameter("reference kernel is zero".into()));
    }
    Ok((diff / base).sqrt())
}

/// `E_D~[f(x)(f(x) - gamma f(x'))] - (1 - gamma) E_D[f(x)^2]`.
pub fn monotonicity_gap(
    f: &QTable,
    mdp: &FiniteMdp,
    policy: &Policy,
    stationary: &StationaryDistribution,
) -> Result<f64> {
    check_table(f, mdp)?;
    let gamma = mdp.gamma();
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let d = stationary.prob(s, a);
            let fx = f.get(s, a);
            let next: f64 = mdp
                .transition_row(s, a)
                .iter()
                .enumerate()
                .map(|(s2, p)| p * policy.row(s2).iter().zip(f.row(s2)).map(|(pi, v)| pi * v).sum::<f64>())
                .sum();
            lhs += d * fx * (fx - gamma * next);
            rhs += d * fx * fx;
        }
    }
    Ok(lhs - (1.0 - gamma) * rhs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentRow {
    /// Interval midpoint.
    pub t: f64,
    /// Finite-difference slope of `W2(rho_t, rho*)^2 / 2`.
    pub lhs: f64,
    /// `-(1 - gamma) eta gap`, gap averaged over the interval endpoints.
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentReport {
    pub rows: Vec<DescentRow>,
    /// Smallest `c >= 0` with `lhs <= rhs + c eta / alpha` on every row.
    pub c: f64,
}

/// Pairs the measured decay of `W2(rho_t, rho*)^2 / 2` with the gap term.
#[allow(clippy::too_many_arguments)]
pub fn descent_diagnostic(
    spec: &ActivationSpec,
    trajectory: &Trajectory,
    reference_star: &ParticleEnsemble,
    eta: f64,
    alpha: f64,
    mdp: &FiniteMdp,
    stationary: &StationaryDistribution,
    q_ref: &QTable,
) -> Result<DescentReport> {
    if trajectory.len() < 2 {
        return Err(Error::Insufficient("descent diagnostic needs at least 2 snapshots".into()));
    }
    let gamma = mdp.gamma();
    let points: Vec<(f64, f64, f64)> = trajectory
        .snapshots()
        .iter()
        .map(|(k, e)| {
            let w = w2_auto(e, reference_star, 0)?.value;
            let gap = optimality_gap(spec, e, q_ref, mdp, stationary)?;
            Ok((trajectory.time(*k), 0.5 * w * w, gap))
        })
        .collect::<Result<_>>()?;
    let rows: Vec<DescentRow> = points
        .windows(2)
        .map(|p| {
            let (t0, w0, g0) = p[0];
            let (t1, w1, g1) = p[1];
            DescentRow { t: 0.5 * (t0 + t1), lhs: (w1 - w0) / (t1 - t0), rhs: -(1.0 - gamma) * eta * 0.5 * (g0 + g1) }
        })
        .collect();
    let c = rows.iter().map(|r| (r.lhs - r.rhs) * alpha / eta).fold(0.0, f64::max);
    Ok(DescentReport { rows, c })
}

/// Which greedy operator the κ ratio uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KappaMode {
    Max,
    Soft(f64),
}

/// `(E[(Q1 - Q2)^2], E[(M Q1 - M Q2)^2])` under `stationary`, where `M` is a
/// max or softmax over the actions of the state.
pub fn kappa_terms(q1: &QTable, q2: &QTable, stationary: &StationaryDistribution, mode: KappaMode) -> (f64, f64) {
    let reduce = |row: &[f64]| match mode {
        KappaMode::Max => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        KappaMode::Soft(beta) => softmax(row, beta),
    };
    let mut num = 0.0;
    let mut den = 0.0;
    for s in 0..q1.n_states() {
        let dm = reduce(q1.row(s)) - reduce(q2.row(s));
        for a in 0..q1.n_actions() {
            let d = stationary.prob(s, a);
            let dq = q1.get(s, a) - q2.get(s, a);
            num += d * dq * dq;
            den += d * dm * dm;
        }
    }
    (num, den)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KappaSample {
    pub index: usize,
    pub numerator: f64,
    pub denominator: f64,
    /// `sqrt(numerator / denominator) - gamma`; absent when skipped.
    pub kappa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KappaReport {
    pub samples: Vec<KappaSample>,
    /// Infimum over the non-degenerate samples.
    pub kappa: f64,
    pub skipped: usize,
}

/// Width of the random ensembles drawn as function pairs.
pub const KAPPA_WIDTH: usize = 8;
/// Denominators below this are treated as zero.
pub const KAPPA_DEGENERATE: f64 = 1e-300;

/// Empirical witness for the κ condition: the infimum over `n_samples`
/// random pairs of width-8 ensembles of `sqrt(ratio) - gamma`. Pair `i` is
/// drawn from stream `i` of `seed`.
pub fn kappa_estimate(
    spec: &ActivationSpec,
    mdp: &FiniteMdp,
    exploration_stationary: &StationaryDistribution,
    n_samples: usize,
    seed: u64,
    mode: KappaMode,
) -> Result<KappaReport> {
    if n_samples < 2 {
        return Err(Error::InvalidParameter(format!("n_samples = {n_samples} must be >= 2")));
    }
    if let KappaMode::Soft(beta) = mode {
        if !(beta > 0.0) {
            return Err(Error::InvalidParameter(format!("beta = {beta} must be positive")));
        }
    }
    let gamma = mdp.gamma();
    let mut samples = Vec::with_capacity(n_samples);
    for index in 0..n_samples {
        let mut rng = stream_rng(seed, index as u64);
        let e1 = init_ensemble_with(&mut rng, KAPPA_WIDTH, spec.param_dim(), false, 1.0)?;
        let e2 = init_ensemble_with(&mut rng, KAPPA_WIDTH, spec.param_dim(), false, 1.0)?;
        let (num, den) =
            kappa_terms(&q_hat_table(spec, &e1, mdp), &q_hat_table(spec, &e2, mdp), exploration_stationary, mode);
        let kappa = (den > KAPPA_DEGENERATE).then(|| (num / den).sqrt() - gamma);
        samples.push(KappaSample { index, numerator: num, denominator: den, kappa });
    }
    let skipped = samples.iter().filter(|s| s.kappa.is_none()).count();
    if skipped == n_samples {
        return Err(Error::Insufficient("every kappa sample was degenerate".into()));
    }
    let kappa = samples.iter().filter_map(|s| s.kappa).fold(f64::INFINITY, f64::min);
    Ok(KappaReport { samples, kappa, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{exact_q, stationary_distribution};
    use crate::network::{init_ensemble, kernel_matrix};

    fn setup() -> (FiniteMdp, Policy, StationaryDistribution, ActivationSpec) {
        let mdp = FiniteMdp::random(4, 2, 0.8, 0.5, 3, 11).unwrap();
        let pi = Policy::for_mdp_uniform(&mdp);
        let d = stationary_distribution(&mdp, &pi).unwrap();
        (mdp, pi, d, ActivationSpec::canonical(3))
    }

    #[test]
    fn gap_against_own_values_is_zero() {
        let (mdp, _, d, spec) = setup();
        let e = init_ensemble(10, 4, 1, false, 2.0).unwrap();
        let own = q_hat_table(&spec, &e, &mdp);
        assert_eq!(optimality_gap(&spec, &e, &own, &mdp, &d).unwrap(), 0.0);
    }

    #[test]
    fn zero_network_gap_is_weighted_square() {
        let (mdp, pi, d, spec) = setup();
        let e = init_ensemble(10, 4, 1, true, 2.0).unwrap();
        let q = exact_q(&mdp, &pi).unwrap();
        let want: f64 = (0..mdp.n_pairs()).map(|x| d.probs()[x] * q.values()[x].powi(2)).sum();
        let got = optimality_gap(&spec, &e, &q, &mdp, &d).unwrap();
        assert!((got - want).abs() < 1e-14);
        let bad = QTable::zeros(3, 2);
        assert!(optimality_gap(&spec, &e, &bad, &mdp, &d).is_err());
    }

    #[test]
    fn residual_zero_at_fixed_point_and_gamma_zero_form() {
        let (mdp, pi, d, spec) = setup();
        let e = init_ensemble(10, 4, 1, false, 2.0).unwrap();
        let q = exact_q(&mdp, &pi).unwrap();
        assert!(exact_msbe(&mdp, &pi, &d, &q).unwrap() < 1e-20);

        let mdp0 = FiniteMdp::random(4, 2, 0.0, 0.5, 3, 11).unwrap();
        let d0 = stationary_distribution(&mdp0, &pi).unwrap();
        let qh = q_hat_table(&spec, &e, &mdp0);
        let want: f64 = 0.5
            * (0..mdp0.n_pairs())
                .map(|x| d0.probs()[x] * (qh.values()[x] - mdp0.reward_table().values()[x]).powi(2))
                .sum::<f64>();
        let got = bellman_residual_exact(&spec, &e, &mdp0, &pi, &d0).unwrap();
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn kernel_drift_identities() {
        let (mdp, _, _, spec) = setup();
        let e = init_ensemble(10, 4, 1, false, 2.0).unwrap();
        let k = kernel_matrix(&spec, &e, &mdp.grid()).unwrap();
        assert_eq!(kernel_drift(&k, &k).unwrap(), 0.0);
        let doubled = kernel_matrix(&spec, &e.clone().with_alpha(2.0f64.sqrt() * 2.0), &mdp.grid()).unwrap();
        let ratio = doubled.entries()[0] / k.entries()[0];
        if (ratio - 2.0).abs() < 1e-12 {
            assert!((kernel_drift(&doubled, &k).unwrap() - 1.0).abs() < 1e-12);
        }
        let other = kernel_matrix(&spec, &e, &mdp.grid()[..3]).unwrap();
        assert!(kernel_drift(&other, &k).is_err());
    }

    #[test]
    fn monotonicity_constant_equality() {
        let (mdp, pi, d, _) = setup();
        let c = QTable::from_vec(4, 2, vec![1.7; 8]).unwrap();
        assert!(monotonicity_gap(&c, &mdp, &pi, &d).unwrap().abs() < 1e-12);
        assert_eq!(monotonicity_gap(&QTable::zeros(4, 2), &mdp, &pi, &d).unwrap(), 0.0);
    }

    #[test]
    fn kappa_single_action_and_shift() {
        let mdp = FiniteMdp::random(3, 1, 0.6, 0.5, 2, 3).unwrap();
        let pi = Policy::for_mdp_uniform(&mdp);
        let d = stationary_distribution(&mdp, &pi).unwrap();
        let spec = ActivationSpec::canonical(2);
        let r = kappa_estimate(&spec, &mdp, &d, 20, 4, KappaMode::Max).unwrap();
        assert!((r.kappa - 0.4).abs() < 1e-12);
        assert!(kappa_estimate(&spec, &mdp, &d, 1, 4, KappaMode::Max).is_err());

        let q1 = QTable::from_vec(2, 2, vec![0.1, 0.5, -0.3, 0.2]).unwrap();
        let q2 = QTable::from_vec(2, 2, q1.values().iter().map(|v| v + 0.7).collect()).unwrap();
        let d2 = StationaryDistribution::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        for mode in [KappaMode::Max, KappaMode::Soft(0.3)] {
            let (n, dd) = kappa_terms(&q1, &q2, &d2, mode);
            assert!((n / dd - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn descent_needs_two_snapshots() {
        let (mdp, pi, d, spec) = setup();
        let e = init_ensemble(10, 4, 1, false, 2.0).unwrap();
        let q = exact_q(&mdp, &pi).unwrap();
        let mut traj = Trajectory::new(0.1);
        traj.push(0, e.clone()).unwrap();
        assert!(descent_diagnostic(&spec, &traj, &e, 1.0, 2.0, &mdp, &d, &q).is_err());
        traj.push(1, e.clone()).unwrap();
        let rep = descent_diagnostic(&spec, &traj, &e, 1.0, 2.0, &mdp, &d, &q).unwrap();
        assert_eq!(rep.rows[0].lhs, 0.0);
        assert!(rep.c.is_finite() && rep.c >= 0.0);
    }
}
