//! Particle update rules.
//!
//! - stochastic TD, Q-learning and soft Q-learning: one sampled tuple per step,
//!   every particle moved with the same residual;
//! - expected TD (ETD): the same step with the tuple distribution integrated
//!   out exactly over the finite MDP;
//! - continuous-time TD (CTTD): the ODE `d theta_i / dt = eta * g_hat(theta_i; ensemble)`
//!   integrated with classical RK4;
//! - ideal particles (IP): each particle driven independently by the field of
//!   a frozen reference path `t -> Q(.; rho_t)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    bellman_op, bellman_optimality_op, exact_q, greedy_action, soft_bellman_op, soft_value_iteration,
    stationary_distribution, value_iteration, FiniteMdp, Policy, QTable, StationaryDistribution, TransitionSampler,
    TransitionTuple,
};
use crate::error::{Error, Result};
use crate::metrics::{kernel_drift, optimality_gap_from_grid, RunRecord};
use crate::network::{init_ensemble_with, kernel_matrix, q_hat_grid, ActivationSpec, KernelMatrix, ParticleEnsemble};
use crate::ot::w2_auto;

/// Seed streams carved out of a run seed.
pub(crate) const STREAM_INIT: u64 = 0;
pub(crate) const STREAM_SAMPLER: u64 = 1;
pub(crate) const STREAM_REFERENCE: u64 = 2;
pub(crate) const STREAM_DISTANCE: u64 = 3;

/// Reference width multiplier and cap for ideal-particle runs.
pub const REFERENCE_WIDTH_FACTOR: usize = 64;
pub const REFERENCE_WIDTH_CAP: usize = 16_384;
/// Blow-up guard: abort when `|delta| > BLOWUP_FACTOR * (2 alpha B0 + B_r)`.
pub const BLOWUP_FACTOR: f64 = 1e3;
/// Tolerance for the tabular reference solutions used in diagnostics.
pub const TABULAR_TOL: f64 = 1e-12;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsKind {
    Td,
    Etd,
    Cttd,
    Ip,
    Q,
    SoftQ,
}

impl DynamicsKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DynamicsKind::Td => "td",
            DynamicsKind::Etd => "etd",
            DynamicsKind::Cttd => "cttd",
            DynamicsKind::Ip => "ip",
            DynamicsKind::Q => "q",
            DynamicsKind::SoftQ => "soft_q",
        }
    }

    fn is_stochastic(self) -> bool {
        matches!(self, DynamicsKind::Td | DynamicsKind::Q | DynamicsKind::SoftQ)
    }
}

fn default_true() -> bool {
    true
}

/// Parameters of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub alpha: f64,
    /// Defaults to `alpha^-2`.
    #[serde(default)]
    pub eta: Option<f64>,
    pub epsilon: f64,
    /// Horizon `T` in time units; the run takes `floor(T / epsilon)` steps.
    pub horizon: f64,
    #[serde(default)]
    pub seed: u64,
    pub dynamics: DynamicsKind,
    /// Soft Q-learning temperature.
    #[serde(default)]
    pub beta: Option<f64>,
    pub m: usize,
    /// Parameter dimension; must equal the embedding dimension plus one.
    #[serde(default)]
    pub param_dim: Option<usize>,
    #[serde(default = "default_true")]
    pub antithetic: bool,
    /// Internal RK4 step for CTTD/IP; defaults to `epsilon / 8`.
    #[serde(default)]
    pub dt_internal: Option<f64>,
}

impl RunConfig {
    pub fn new(dynamics: DynamicsKind, m: usize, alpha: f64, epsilon: f64, horizon: f64, seed: u64) -> Self {
        Self {
            alpha,
            eta: None,
            epsilon,
            horizon,
            seed,
            dynamics,
            beta: None,
            m,
            param_dim: None,
            antithetic: true,
            dt_internal: None,
        }
    }

    pub fn eta(&self) -> f64 {
        self.eta.unwrap_or(1.0 / (self.alpha * self.alpha))
    }

    /// `K = floor(T / epsilon)`. A 1e-9 guard absorbs the representation
    /// error of decimal stepsizes such as `50 / 0.05`.
    pub fn steps(&self) -> usize {
        ((self.horizon / self.epsilon) + 1e-9).floor() as usize
    }

    pub fn dt_internal(&self) -> f64 {
        self.dt_internal.unwrap_or(self.epsilon / 8.0)
    }

    pub fn validate(&self, spec: &ActivationSpec) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must be positive")))
            }
        };
        positive("alpha", self.alpha)?;
        positive("epsilon", self.epsilon)?;
        positive("eta", self.eta())?;
        positive("dt_internal", self.dt_internal())?;
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("horizon = {} must be >= 0", self.horizon)));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be >= 1".into()));
        }
        if self.antithetic && self.m % 2 != 0 {
            return Err(Error::Config("antithetic initialization needs even m".into()));
        }
        if self.dynamics == DynamicsKind::SoftQ {
            positive("beta", self.beta.unwrap_or(f64::NAN))?;
        }
        if let Some(d) = self.param_dim {
            if d != spec.param_dim() {
                return Err(Error::Config(format!("param_dim = {d} but the embedding gives D = {}", spec.param_dim())));
            }
        }
        Ok(())
    }
}

/// Ensemble snapshots at strictly increasing step indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Time elapsed per step index.
    pub time_per_step: f64,
    snapshots: Vec<(usize, ParticleEnsemble)>,
}

impl Trajectory {
    pub fn new(time_per_step: f64) -> Self {
        Self { time_per_step, snapshots: Vec::new() }
    }

    pub fn push(&mut self, step: usize, ensemble: ParticleEnsemble) -> Result<()> {
        if let Some((last, _)) = self.snapshots.last() {
            if step <= *last {
                return Err(Error::InvalidParameter(format!("snapshot step {step} after {last}")));
            }
        }
        self.snapshots.push((step, ensemble));
        Ok(())
    }

    pub fn snapshots(&self) -> &[(usize, ParticleEnsemble)] {
        &self.snapshots
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.time_per_step
    }

    pub fn last(&self) -> Option<&(usize, ParticleEnsemble)> {
        self.snapshots.last()
    }
}

/// Which Bellman operator defines the residual.
#[derive(Debug, Clone, PartialEq)]
pub enum BellmanTarget {
    /// `T^pi` for policy evaluation.
    Policy(Policy),
    /// `T*`, greedy over next actions.
    Greedy,
    /// `T_beta`, softmax over the uniform policy.
    Soft(f64),
}

impl BellmanTarget {
    pub fn apply(&self, mdp: &FiniteMdp, q: &QTable) -> Result<QTable> {
        match self {
            BellmanTarget::Policy(p) => bellman_op(mdp, p, q),
            BellmanTarget::Greedy => bellman_optimality_op(mdp, q),
            BellmanTarget::Soft(beta) => soft_bellman_op(mdp, q, *beta),
        }
    }

    /// Tabular fixed point of the operator.
    pub fn fixed_point(&self, mdp: &FiniteMdp) -> Result<QTable> {
        match self {
            BellmanTarget::Policy(p) => exact_q(mdp, p),
            BellmanTarget::Greedy => Ok(value_iteration(mdp, TABULAR_TOL)),
            BellmanTarget::Soft(beta) => soft_value_iteration(mdp, *beta, TABULAR_TOL),
        }
    }
}

/// Network values on the full state-action grid, as a table.
pub fn q_hat_table(spec: &ActivationSpec, ensemble: &ParticleEnsemble, mdp: &FiniteMdp) -> QTable {
    let values = q_hat_grid(spec, &mdp.grid(), ensemble);
    QTable::from_vec(mdp.n_states(), mdp.n_actions(), values).expect("grid matches MDP shape")
}

/// Network values on the grid together with every particle's gradients
/// there, from a single pass over the ensemble.
struct GridEval {
    q: QTable,
    /// `m` blocks of `n_pairs` rows of length `D`.
    grads: Vec<f64>,
}

fn grid_eval(spec: &ActivationSpec, ensemble: &ParticleEnsemble, mdp: &FiniteMdp, grid: &[&[f64]]) -> GridEval {
    let n = grid.len();
    let dim = ensemble.dim();
    let mut sums = vec![0.0; n];
    let mut values = vec![0.0; n];
    let mut grads = vec![0.0; ensemble.width() * n * dim];
    for (p, g) in ensemble.particles().zip(grads.chunks_mut(n * dim)) {
        spec.grid_values_and_grads(grid, p, &mut values, g);
        sums.iter_mut().zip(&values).for_each(|(s, v)| *s += v);
    }
    let scale = ensemble.alpha() / ensemble.width() as f64;
    let q = sums.into_iter().map(|s| scale * s).collect();
    GridEval { q: QTable::from_vec(mdp.n_states(), mdp.n_actions(), q).expect("grid matches MDP shape"), grads }
}

/// `out = scale * sum_x c(x) g(x)` for one particle's gradient rows `g`.
fn contract(weights: &[f64], grads: &[f64], scale: f64, out: &mut [f64]) {
    let dim = out.len();
    out.iter_mut().for_each(|v| *v = 0.0);
    for (&c, g) in weights.iter().zip(grads.chunks(dim)) {
        if c != 0.0 {
            out.iter_mut().zip(g).for_each(|(o, gi)| *o += c * gi);
        }
    }
    out.iter_mut().for_each(|v| *v *= scale);
}

/// `sum_x c(x) grad sigma(x; theta)` with `c(x) = -alpha D(x) (Q - T Q)(x)`:
/// the expected vector field `g`, `h`, or their soft analogue, with the
/// expectation over `(x, r, x')` done exactly.
#[derive(Debug, Clone)]
pub struct ExpectedField {
    weights: Vec<f64>,
}

impl ExpectedField {
    /// Field induced by network values `q` on the grid.
    pub fn from_values(
        q: &QTable,
        alpha: f64,
        mdp: &FiniteMdp,
        stationary: &StationaryDistribution,
        target: &BellmanTarget,
    ) -> Result<Self> {
        let tq = target.apply(mdp, q)?;
        let weights = stationary
            .probs()
            .iter()
            .zip(q.values().iter().zip(tq.values()))
            .map(|(d, (a, b))| -alpha * d * (a - b))
            .collect();
        Ok(Self { weights })
    }

    pub fn from_ensemble(
        spec: &ActivationSpec,
        ensemble: &ParticleEnsemble,
        mdp: &FiniteMdp,
        stationary: &StationaryDistribution,
        target: &BellmanTarget,
    ) -> Result<Self> {
        let q = q_hat_table(spec, ensemble, mdp);
        Self::from_values(&q, ensemble.alpha(), mdp, stationary, target)
    }

    /// Writes the field at `theta` into `out`; `scratch` holds one gradient.
    pub fn eval_into(
        &self,
        spec: &ActivationSpec,
        grid: &[&[f64]],
        theta: &[f64],
        out: &mut [f64],
        scratch: &mut [f64],
    ) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (x, &c) in grid.iter().zip(&self.weights) {
            if c == 0.0 {
                continue;
            }
            spec.value_and_grad(x, theta, scratch);
            out.iter_mut().zip(scratch.iter()).for_each(|(o, g)| *o += c * g);
        }
    }

    pub fn eval(&self, spec: &ActivationSpec, grid: &[&[f64]], theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; theta.len()];
        let mut scratch = vec![0.0; theta.len()];
        self.eval_into(spec, grid, theta, &mut out, &mut scratch);
        out
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// `g_hat(theta; ensemble)`: the expected TD field of the finite ensemble.
pub fn g_field(
    spec: &ActivationSpec,
    theta: &[f64],
    ensemble: &ParticleEnsemble,
    mdp: &FiniteMdp,
    policy: &Policy,
    stationary: &StationaryDistribution,
) -> Result<Vec<f64>> {
    let field = ExpectedField::from_ensemble(spec, ensemble, mdp, stationary, &BellmanTarget::Policy(policy.clone()))?;
    Ok(field.eval(spec, &mdp.grid(), theta))
}

/// TD residual `Q(x) - r - gamma Q(x')`.
pub fn td_residual(
    spec: &ActivationSpec,
    ensemble: &ParticleEnsemble,
    tuple: &TransitionTuple,
    mdp: &FiniteMdp,
) -> f64 {
    let q = crate::network::q_hat(spec, mdp.embedding(tuple.x(mdp)), ensemble);
    let q_next = crate::network::q_hat(spec, mdp.embedding(tuple.x_next(mdp)), ensemble);
    q - tuple.r - mdp.gamma() * q_next
}

/// Network values at every action of state `s`.
fn state_values(spec: &ActivationSpec, ensemble: &ParticleEnsemble, mdp: &FiniteMdp, s: usize) -> Vec<f64> {
    (0..mdp.n_actions()).map(|a| crate::network::q_hat(spec, mdp.embedding(mdp.pair(s, a)), ensemble)).collect()
}

/// Q-learning residual with `x' = (s', argmax_a Q(s', a))`, lowest index on ties.
pub fn q_residual(spec: &ActivationSpec, ensemble: &ParticleEnsemble, tuple: &TransitionTuple, mdp: &FiniteMdp) -> f64 {
    let q = crate::network::q_hat(spec, mdp.embedding(tuple.x(mdp)), ensemble);
    let next = state_values(spec, ensemble, mdp, tuple.s_next);
    q - tuple.r - mdp.gamma() * next[greedy_action(&next)]
}

pub fn soft_q_residual(
    spec: &ActivationSpec,
    ensemble: &ParticleEnsemble,
    tuple: &TransitionTuple,
    mdp: &FiniteMdp,
    beta: f64,
) -> f64 {
    let q = crate::network::q_hat(spec, mdp.embedding(tuple.x(mdp)), ensemble);
    let next = state_values(spec, ensemble, mdp, tuple.s_next);
    q - tuple.r - mdp.gamma() * crate::env::softmax(&next, beta)
}

fn check_delta(delta: f64) -> Result<f64> {
    if delta.is_finite() {
        Ok(delta)
    } else {
        Err(Error::NonFinite(format!("residual {delta}")))
    }
}

/// `theta_i -= eta epsilon alpha delta grad sigma(x; theta_i)` for all `i`.
pub fn residual_step_in_place(
    spec: &ActivationSpec,
    ensemble: &mut ParticleEnsemble,
    x: &[f64],
    delta: f64,
    eta: f64,
    epsilon: f64,
) {
    let scale = eta * epsilon * ensemble.alpha() * delta;
    if scale == 0.0 {
        return;
    }
    let dim = ensemble.dim();
    let mut g = vec![0.0; dim];
    for p in ensemble.as_mut_slice().chunks_mut(dim) {
        spec.value_and_grad(x, p, &mut g);
        p.iter_mut().zip(&g).for_each(|(c, gi)| *c -= scale * gi);
    }
}

/// One stochastic TD step on a tuple drawn from the transition distribution.
pub fn td_step(
    spec: &ActivationSpec,
    ensemble: &ParticleEnsemble,
    tuple: &TransitionTuple,
    mdp: &FiniteMdp,
    eta: f64,
    epsilon: f64,
) -> Result<ParticleEnsemble> {
    let delta = check_delta(td_residual(spec, ensemble, tuple, mdp))?;
    let mut next = ensemble.clone();
    residual_step_in_place(spec, &mut next, mdp.embedding(tuple.x(mdp)), delta, eta, epsilon);
    Ok(next)
}

/// `G_k(theta; ensemble) = -alpha delta_k grad sigma(x_k; theta)`.
pub fn g_hat_stochastic(
    spec: &ActivationSpec,
    theta: &[f64],
    ensemble: &ParticleEnsemble,
    tuple: &TransitionTuple,
    mdp: &FiniteMdp,
) -> Vec<f64> {
    let delta = td_residual(spec, ensemble, tuple, mdp);
    spec.grad(mdp.embedding(tuple.x(mdp)), theta).into_iter().map(|g| -ensemble.alpha() * delta * g).collect()
}

/// One Q-learning step on `(s, a, r, s')` drawn under the exploration policy.
pub fn q_learning_step(
    spec: &ActivationSpec,
    ensemble: &ParticleEnsemble,
    tuple: &TransitionTuple,
    mdp: &FiniteMdp,
    eta: f64,
    epsilon: f64,
) -> Result<ParticleEnsemble> {
    let delta = check_delta(q_residual(spec, ensemble, tuple, mdp))?;
    let mut next = ensemble.clone();
    residual_step_in_place(spec, &mut next, mdp.embedding(tuple.x(mdp)), delta, eta, epsilon);
    Ok(next)
}

/// One soft Q-learning step; the target uses `softmax^beta` at `s'`.
pub fn soft_q_step(
    spec: &ActivationSpec,
    ensemble: &ParticleEnsemble,
    tuple: &TransitionTuple,
    mdp: &FiniteMdp,
    eta: f64,
    epsilon: f64,
    beta: f64,
) -> Result<ParticleEnsemble> {
    if !(beta > 0.0) {
        return Err(Error::InvalidParameter(format!("beta = {beta} must be positive")));
    }
    let delta = check_delta(soft_q_residual(spec, ensemble, tuple, mdp, beta))?;
    let mut next = ensemble.clone();
    residual_step_in_place(spec, &mut next, mdp.embedding(tuple.x(mdp)), delta, eta, epsilon);
    Ok(next)
}

/// One expected TD step, `theta_i += eta epsilon g_hat(theta_i; ensemble)`.
pub fn etd_step(
    spec: &ActivationSpec,
    ensemble: &ParticleEnsemble,
    mdp: &FiniteMdp,
    policy: &Policy,
    stationary: &StationaryDistribution,
    eta: f64,
    epsilon: f64,
) -> Result<ParticleEnsemble> {
    expected_step(spec, ensemble, mdp, stationary, &BellmanTarget::Policy(policy.clone()), eta, epsilon)
}

/// Expected step for any [`BellmanTarget`].
pub fn expected_step(
    spec: &ActivationSpec,
    ensemble: &ParticleEnsemble,
    mdp: &FiniteMdp,
    stationary: &StationaryDistribution,
    target: &BellmanTarget,
    eta: f64,
    epsilon: f64,
) -> Result<ParticleEnsemble> {
    let grid = mdp.grid();
    let eval = grid_eval(spec, ensemble, mdp, &grid);
    let field = ExpectedField::from_values(&eval.q, ensemble.alpha(), mdp, stationary, target)?;
    let dim = ensemble.dim();
    let mut next = ensemble.clone();
    let mut f = vec![0.0; dim];
    for (p, g) in next.as_mut_slice().chunks_mut(dim).zip(eval.grads.chunks(grid.len() * dim)) {
        contract(field.weights(), g, eta * epsilon, &mut f);
        p.iter_mut().zip(&f).for_each(|(c, v)| *c += v);
    }
    check_finite(&next)?;
    Ok(next)
}

fn check_finite(e: &ParticleEnsemble) -> Result<()> {
    if e.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("ensemble after integration".into()))
    }
}

/// Number of RK4 steps and their length for a span.
fn rk4_grid(t_span: f64, dt: f64) -> Result<(usize, f64)> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("dt_internal = {dt} must be positive")));
    }
    if !(t_span >= 0.0 && t_span.is_finite()) {
        return Err(Error::InvalidParameter(format!("t_span = {t_span} must be >= 0")));
    }
    if t_span == 0.0 {
        return Ok((0, 0.0));
    }
    let n = ((t_span / dt) - 1e-9).ceil().max(1.0) as usize;
    Ok((n, t_span / n as f64))
}

/// Vector field of the whole CTTD system, `eta * g_hat(theta_i; state)`.
fn cttd_rhs(
    spec: &ActivationSpec,
    state: &ParticleEnsemble,
    mdp: &FiniteMdp,
    stationary: &StationaryDistribution,
    target: &BellmanTarget,
    eta: f64,
    out: &mut [f64],
) -> Result<()> {
    let grid = mdp.grid();
    let eval = grid_eval(spec, state, mdp, &grid);
    let field = ExpectedField::from_values(&eval.q, state.alpha(), mdp, stationary, target)?;
    let dim = state.dim();
    for (dst, g) in out.chunks_mut(dim).zip(eval.grads.chunks(grid.len() * dim)) {
        contract(field.weights(), g, eta, dst);
    }
    Ok(())
}

/// Generic classical RK4 step on a flat state.
fn rk4_step(
    state: &ParticleEnsemble,
    h: f64,
    mut rhs: impl FnMut(f64, &ParticleEnsemble, &mut [f64]) -> Result<()>,
) -> Result<ParticleEnsemble> {
    let n = state.as_slice().len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut stage = state.clone();
    let y = state.as_slice();

    rhs(0.0, state, &mut k1)?;
    stage.as_mut_slice().iter_mut().enumerate().for_each(|(i, s)| *s = y[i] + 0.5 * h * k1[i]);
    rhs(0.5 * h, &stage, &mut k2)?;
    stage.as_mut_slice().iter_mut().enumerate().for_each(|(i, s)| *s = y[i] + 0.5 * h * k2[i]);
    rhs(0.5 * h, &stage, &mut k3)?;
    stage.as_mut_slice().iter_mut().enumerate().for_each(|(i, s)| *s = y[i] + h * k3[i]);
    rhs(h, &stage, &mut k4)?;
    stage
        .as_mut_slice()
        .iter_mut()
        .enumerate()
        .for_each(|(i, s)| *s = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    check_finite(&stage)?;
    Ok(stage)
}

/// Integrates CTTD over `t_span` with RK4 steps of at most `dt_internal`.
#[allow(clippy::too_many_arguments)]
pub fn cttd_integrate(
    spec: &ActivationSpec,
    ensemble: &ParticleEnsemble,
    mdp: &FiniteMdp,
    policy: &Policy,
    stationary: &StationaryDistribution,
    eta: f64,
    t_span: f64,
    dt_internal: f64,
) -> Result<ParticleEnsemble> {
    let target = BellmanTarget::Policy(policy.clone());
    let (n, h) = rk4_grid(t_span, dt_internal)?;
    let mut state = ensemble.clone();
    for _ in 0..n {
        state = rk4_step(&state, h, |_, s, out| cttd_rhs(spec, s, mdp, stationary, &target, eta, out))?;
    }
    Ok(state)
}

/// Time-indexed network values `t -> Q(.; rho_t)` on the grid, linearly
/// interpolated between knots. Stands in for the mean-field measure.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldReference {
    pub width: usize,
    times: Vec<f64>,
    values: Vec<QTable>,
}

impl MeanFieldReference {
    pub fn from_trajectory(spec: &ActivationSpec, trajectory: &Trajectory, mdp: &FiniteMdp) -> Result<Self> {
        if trajectory.is_empty() {
            return Err(Error::Insufficient("empty reference trajectory".into()));
        }
        let width = trajectory.snapshots()[0].1.width();
        let (times, values) =
            trajectory.snapshots().iter().map(|(k, e)| (trajectory.time(*k), q_hat_table(spec, e, mdp))).unzip();
        Ok(Self { width, times, values })
    }

    /// Integrates CTTD on `reference` over `t_span` with RK4 steps of at most
    /// `dt`, recording the network on the grid after every step.
    #[allow(clippy::too_many_arguments)]
    pub fn record_cttd(
        spec: &ActivationSpec,
        reference: &ParticleEnsemble,
        mdp: &FiniteMdp,
        policy: &Policy,
        stationary: &StationaryDistribution,
        eta: f64,
        t_span: f64,
        dt: f64,
    ) -> Result<Self> {
        let target = BellmanTarget::Policy(policy.clone());
        let (n, h) = rk4_grid(t_span, dt)?;
        let mut times = vec![0.0];
        let mut values = vec![q_hat_table(spec, reference, mdp)];
        let mut state = reference.clone();
        for k in 0..n {
            state = rk4_step(&state, h, |_, s, out| cttd_rhs(spec, s, mdp, stationary, &target, eta, out))?;
            times.push((k + 1) as f64 * h);
            values.push(q_hat_table(spec, &state, mdp));
        }
        Ok(Self { width: reference.width(), times, values })
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().expect("reference is nonempty")
    }

    pub fn max_stride(&self) -> f64 {
        self.times.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    pub fn at(&self, t: f64) -> Result<QTable> {
        let end = self.end_time();
        if t < 0.0 || t > end * (1.0 + 1e-12) + 1e-12 {
            return Err(Error::ReferenceCoverage { t, end });
        }
        let i = self.times.partition_point(|&s| s <= t);
        if i == 0 {
            return Ok(self.values[0].clone());
        }
        if i >= self.times.len() {
            return Ok(self.values.last().expect("nonempty").clone());
        }
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let lam = (t - t0) / (t1 - t0);
        let (a, b) = (&self.values[i - 1], &self.values[i]);
        let mut out = a.clone();
        out.values_mut().iter_mut().zip(b.values()).for_each(|(v, w)| *v = (1.0 - lam) * *v + lam * w);
        Ok(out)
    }
}

/// Integrates ideal particles over `[t0, t0 + t_span]`: every particle
/// follows `eta * g(theta; rho_t)` with `rho_t` read from `reference`, and no
/// particle sees any other.
#[allow(clippy::too_many_arguments)]
pub fn ip_integrate(
    spec: &ActivationSpec,
    ensemble: &ParticleEnsemble,
    reference: &MeanFieldReference,
    mdp: &FiniteMdp,
    policy: &Policy,
    stationary: &StationaryDistribution,
    eta: f64,
    t0: f64,
    t_span: f64,
    dt_internal: f64,
) -> Result<ParticleEnsemble> {
    let (n, h) = rk4_grid(t_span, dt_internal)?;
    let end = t0 + t_span;
    if n > 0 && end > reference.end_time() * (1.0 + 1e-12) + 1e-12 {
        return Err(Error::ReferenceCoverage { t: end, end: reference.end_time() });
    }
    if n > 0 && reference.max_stride() > dt_internal * (1.0 + 1e-9) {
        return Err(Error::InvalidParameter(format!(
            "reference stride {} exceeds dt_internal {dt_internal}",
            reference.max_stride()
        )));
    }
    let target = BellmanTarget::Policy(policy.clone());
    let alpha = ensemble.alpha();
    let field_at = |t: f64| -> Result<ExpectedField> {
        ExpectedField::from_values(&reference.at(t)?, alpha, mdp, stationary, &target)
    };
    let grid = mdp.grid();
    let mut values = vec![0.0; grid.len()];
    let mut grads = vec![0.0; grid.len() * ensemble.dim()];
    let mut state = ensemble.clone();
    for k in 0..n {
        let t = t0 + k as f64 * h;
        let fields = [field_at(t)?, field_at(t + 0.5 * h)?, field_at(t + h)?];
        state = rk4_step(&state, h, |dt, s, out| {
            let f = if dt == 0.0 {
                &fields[0]
            } else if dt < h {
                &fields[1]
            } else {
                &fields[2]
            };
            let dim = s.dim();
            for (src, dst) in s.as_slice().chunks(dim).zip(out.chunks_mut(dim)) {
                spec.grid_values_and_grads(&grid, src, &mut values, &mut grads);
                contract(f.weights(), &grads, eta, dst);
            }
            Ok(())
        })?;
    }
    Ok(state)
}

/// How a run ended.
#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    BlownUp { last_healthy_step: usize, delta: f64 },
}

/// Output of [`run`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub records: Vec<RunRecord>,
    /// Minimum optimality gap over every iterate, and where it occurred.
    pub min_gap: f64,
    pub min_gap_step: usize,
    pub status: RunStatus,
    pub initial: ParticleEnsemble,
}

impl RunOutput {
    pub fn terminal(&self) -> &ParticleEnsemble {
        &self.trajectory.last().expect("trajectory always holds the initial ensemble").1
    }

    pub fn initial_gap(&self) -> f64 {
        self.records.first().map(|r| r.optimality_gap).unwrap_or(f64::NAN)
    }
}

/// Everything fixed for the duration of a run.
struct RunContext<'a> {
    spec: &'a ActivationSpec,
    mdp: &'a FiniteMdp,
    policy: &'a Policy,
    stationary: StationaryDistribution,
    target: BellmanTarget,
    q_ref: QTable,
    grid: Vec<&'a [f64]>,
    k0: KernelMatrix,
    initial: ParticleEnsemble,
    distance_seed: u64,
}

impl RunContext<'_> {
    fn gap(&self, e: &ParticleEnsemble) -> f64 {
        optimality_gap_from_grid(&q_hat_grid(self.spec, &self.grid, e), &self.q_ref, &self.stationary)
    }

    fn record(&self, step: usize, epsilon: f64, e: &ParticleEnsemble, delta_abs_mean: f64) -> Result<RunRecord> {
        let q = q_hat_table(self.spec, e, self.mdp);
        let tq = self.target.apply(self.mdp, &q)?;
        let residual = 0.5
            * self
                .stationary
                .probs()
                .iter()
                .zip(q.values().iter().zip(tq.values()))
                .map(|(d, (a, b))| d * (a - b) * (a - b))
                .sum::<f64>();
        let kt = kernel_matrix(self.spec, e, &self.grid)?;
        Ok(RunRecord {
            step,
            t: step as f64 * epsilon,
            optimality_gap: optimality_gap_from_grid(q.values(), &self.q_ref, &self.stationary),
            bellman_residual: residual,
            w2_drift: w2_auto(e, &self.initial, self.distance_seed)?.value,
            kernel_drift_fro: kernel_drift(&kt, &self.k0)?,
            delta_abs_mean,
        })
    }

    /// `E_D |Q - T Q|`, the residual magnitude of deterministic dynamics.
    fn expected_abs_residual(&self, e: &ParticleEnsemble) -> Result<f64> {
        let q = q_hat_table(self.spec, e, self.mdp);
        let tq = self.target.apply(self.mdp, &q)?;
        Ok(self
            .stationary
            .probs()
            .iter()
            .zip(q.values().iter().zip(tq.values()))
            .map(|(d, (a, b))| d * (a - b).abs())
            .sum())
    }
}

/// Runs `floor(T / epsilon)` steps of the configured dynamics from a fresh
/// initialization, recording diagnostics and a snapshot every `stride` steps
/// and at the end. `policy` is the evaluated policy for TD-type dynamics and
/// the exploration policy for Q-learning.
pub fn run(
    config: &RunConfig,
    mdp: &FiniteMdp,
    policy: &Policy,
    spec: &ActivationSpec,
    stride: usize,
) -> Result<RunOutput> {
    config.validate(spec)?;
    if spec.input_dim() != mdp.embed_dim() {
        return Err(Error::Config(format!(
            "activation input dimension {} != embedding dimension {}",
            spec.input_dim(),
            mdp.embed_dim()
        )));
    }
    let initial = init_ensemble_with(
        &mut stream_rng(config.seed, STREAM_INIT),
        config.m,
        spec.param_dim(),
        config.antithetic,
        config.alpha,
    )?;
    run_from(config, mdp, policy, spec, stride, initial)
}

/// As [`run`], starting from a given ensemble.
pub fn run_from(
    config: &RunConfig,
    mdp: &FiniteMdp,
    policy: &Policy,
    spec: &ActivationSpec,
    stride: usize,
    initial: ParticleEnsemble,
) -> Result<RunOutput> {
    config.validate(spec)?;
    let stride = stride.max(1);
    let stationary = stationary_distribution(mdp, policy)?;
    let target = match config.dynamics {
        DynamicsKind::Q => BellmanTarget::Greedy,
        DynamicsKind::SoftQ => BellmanTarget::Soft(config.beta.expect("validated")),
        _ => BellmanTarget::Policy(policy.clone()),
    };
    let q_ref = target.fixed_point(mdp)?;
    let grid = mdp.grid();
    let k0 = kernel_matrix(spec, &initial, &grid)?;
    let ctx = RunContext {
        spec,
        mdp,
        policy,
        stationary,
        target,
        q_ref,
        grid,
        k0,
        initial: initial.clone(),
        distance_seed: config.seed ^ STREAM_DISTANCE,
    };

    let eta = config.eta();
    let eps = config.epsilon;
    let k_total = config.steps();
    let guard = BLOWUP_FACTOR * (2.0 * config.alpha * spec.bounds().b0 + mdp.reward_bound());

    let mut sampler = TransitionSampler::new(mdp, policy, &ctx.stationary, stream_rng(config.seed, STREAM_SAMPLER))?;
    let dt = config.dt_internal();
    let reference = if config.dynamics == DynamicsKind::Ip {
        let m_ref = (REFERENCE_WIDTH_FACTOR * config.m).min(REFERENCE_WIDTH_CAP);
        let ref_init = init_ensemble_with(
            &mut stream_rng(config.seed, STREAM_REFERENCE),
            m_ref,
            spec.param_dim(),
            config.antithetic,
            config.alpha,
        )?;
        Some(MeanFieldReference::record_cttd(
            spec,
            &ref_init,
            mdp,
            policy,
            &ctx.stationary,
            eta,
            k_total as f64 * eps,
            dt / 2.0,
        )?)
    } else {
        None
    };

    let mut trajectory = Trajectory::new(eps);
    let mut records = Vec::new();
    let mut state = initial.clone();
    let mut min_gap = ctx.gap(&state);
    let mut min_gap_step = 0;
    let first_delta = if config.dynamics.is_stochastic() { 0.0 } else { ctx.expected_abs_residual(&state)? };
    records.push(ctx.record(0, eps, &state, first_delta)?);
    trajectory.push(0, state.clone())?;

    let mut window_abs = 0.0;
    let mut window_len = 0usize;
    let mut status = RunStatus::Completed;
    for k in 0..k_total {
        let next = match config.dynamics {
            DynamicsKind::Td | DynamicsKind::Q | DynamicsKind::SoftQ => {
                let tuple = sampler.sample();
                let delta = match config.dynamics {
                    DynamicsKind::Td => td_residual(spec, &state, &tuple, mdp),
                    DynamicsKind::Q => q_residual(spec, &state, &tuple, mdp),
                    _ => soft_q_residual(spec, &state, &tuple, mdp, config.beta.expect("validated")),
                };
                if !delta.is_finite() || delta.abs() > guard {
                    status = RunStatus::BlownUp { last_healthy_step: k, delta };
                    break;
                }
                window_abs += delta.abs();
                window_len += 1;
                let mut next = state.clone();
                residual_step_in_place(spec, &mut next, mdp.embedding(tuple.x(mdp)), delta, eta, eps);
                if !next.is_finite() {
                    status = RunStatus::BlownUp { last_healthy_step: k, delta };
                    break;
                }
                next
            }
            DynamicsKind::Etd => expected_step(spec, &state, mdp, &ctx.stationary, &ctx.target, eta, eps)?,
            DynamicsKind::Cttd => cttd_integrate(spec, &state, mdp, policy, &ctx.stationary, eta, eps, dt)?,
            DynamicsKind::Ip => ip_integrate(
                spec,
                &state,
                reference.as_ref().expect("built for ip"),
                mdp,
                policy,
                &ctx.stationary,
                eta,
                k as f64 * eps,
                eps,
                dt,
            )?,
        };
        if !config.dynamics.is_stochastic() {
            let r = ctx.expected_abs_residual(&next)?;
            if !r.is_finite() || r > guard || !next.is_finite() {
                status = RunStatus::BlownUp { last_healthy_step: k, delta: r };
                break;
            }
        }
        state = next;
        let step = k + 1;
        let gap = ctx.gap(&state);
        if gap < min_gap {
            min_gap = gap;
            min_gap_step = step;
        }
        if step % stride == 0 || step == k_total {
            let delta_mean = if config.dynamics.is_stochastic() {
                if window_len > 0 {
                    window_abs / window_len as f64
                } else {
                    0.0
                }
            } else {
                ctx.expected_abs_residual(&state)?
            };
            window_abs = 0.0;
            window_len = 0;
            records.push(ctx.record(step, eps, &state, delta_mean)?);
            trajectory.push(step, state.clone())?;
        }
    }
    if let RunStatus::BlownUp { last_healthy_step, .. } = status {
        if trajectory.last().map(|(s, _)| *s) != Some(last_healthy_step) {
            trajectory.push(last_healthy_step, state.clone())?;
        }
    }
    let _ = ctx.policy;
    Ok(RunOutput { trajectory, records, min_gap, min_gap_step, status, initial })
}
