//! Finite MDPs: tabular model, exact stationary distributions, exact Bellman
//! operators and their fixed points, and seeded i.i.d. transition sampling.
//!
//! State-action pairs are flattened as `x = s * n_actions + a`. Every exact
//! expectation in the crate is an enumeration over this index set.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-12;
const STATIONARY_MAX_SWEEPS: usize = 1_000_000;
/// L1 stopping tolerance of the power iteration; comfortably below the 1e-10
/// invariance guarantee.
const STATIONARY_L1_TOL: f64 = 1e-13;
const VALUE_ITERATION_MAX_SWEEPS: usize = 10_000_000;

/// A table indexed by state-action pairs, e.g. a Q-function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self { n_states, n_actions, values: vec![0.0; n_states * n_actions] }
    }

    pub fn from_vec(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_states * n_actions {
            return Err(Error::ShapeMismatch(format!(
                "table of {} values for {}x{} grid",
                values.len(),
                n_states,
                n_actions
            )));
        }
        Ok(Self { n_states, n_actions, values })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    /// Values at state `s`, one per action.
    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn sup_distance(&self, other: &QTable) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    fn check_shape(&self, n_states: usize, n_actions: usize) -> Result<()> {
        if self.n_states != n_states || self.n_actions != n_actions {
            return Err(Error::ShapeMismatch(format!(
                "table is {}x{}, MDP is {}x{}",
                self.n_states, self.n_actions, n_states, n_actions
            )));
        }
        Ok(())
    }
}

/// Tabular MDP with a unit-ball embedding of its state-action pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    /// `P[s][a][s']`, flattened.
    transition: Vec<f64>,
    reward_mean: Vec<f64>,
    reward_noise_halfwidth: f64,
    embed_dim: usize,
    embedding: Vec<f64>,
}

impl FiniteMdp {
    /// Builds and validates an MDP. `transition` is `P[s][a][s']` flattened,
    /// `reward_mean` is `r[s][a]` flattened and `embedding` is `x[s][a]`
    /// flattened with `embed_dim` coordinates per pair.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        transition: Vec<f64>,
        reward_mean: Vec<f64>,
        reward_noise_halfwidth: f64,
        embed_dim: usize,
        embedding: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidMdp("n_states and n_actions must be positive".into()));
        }
        if !(gamma >= 0.0 && gamma < 1.0) {
            return Err(Error::InvalidMdp(format!("gamma = {gamma} not in [0, 1)")));
        }
        let n = n_states * n_actions;
        if transition.len() != n * n_states {
            return Err(Error::InvalidMdp(format!(
                "transition has {} entries, expected {}",
                transition.len(),
                n * n_states
            )));
        }
        for (x, row) in transition.chunks(n_states).enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidMdp(format!("negative or non-finite P at pair {x}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidMdp(format!("P row at pair {x} sums to {sum}")));
            }
        }
        if reward_mean.len() != n || reward_mean.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidMdp("reward_mean must have n_states*n_actions finite entries".into()));
        }
        if !(reward_noise_halfwidth >= 0.0 && reward_noise_halfwidth.is_finite()) {
            return Err(Error::InvalidMdp("reward_noise_halfwidth must be finite and >= 0".into()));
        }
        if embed_dim == 0 || embedding.len() != n * embed_dim {
            return Err(Error::InvalidMdp(format!(
                "embedding has {} entries, expected {} x {embed_dim}",
                embedding.len(),
                n
            )));
        }
        for (x, e) in embedding.chunks(embed_dim).enumerate() {
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || norm > 1.0 + 1e-12 {
                return Err(Error::InvalidMdp(format!("embedding of pair {x} has norm {norm} > 1")));
            }
        }
        Ok(Self { n_states, n_actions, gamma, transition, reward_mean, reward_noise_halfwidth, embed_dim, embedding })
    }

    /// Random instance: squared-uniform transition rows, rewards uniform in
    /// `[-reward_scale, reward_scale]`, unit-norm Gaussian embeddings.
    pub fn random(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        reward_scale: f64,
        embed_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n_states * n_actions;
        let mut transition = Vec::with_capacity(n * n_states);
        for _ in 0..n {
            let row: Vec<f64> = (0..n_states).map(|_| rng.random::<f64>().powi(2) + 1e-3).collect();
            let sum: f64 = row.iter().sum();
            let mut row: Vec<f64> = row.into_iter().map(|p| p / sum).collect();
            fix_row_sum(&mut row);
            transition.extend(row);
        }
        let reward_mean = (0..n).map(|_| reward_scale * (2.0 * rng.random::<f64>() - 1.0)).collect();
        let embedding = random_unit_embedding(n, embed_dim, &mut rng);
        Self::new(n_states, n_actions, gamma, transition, reward_mean, 0.0, embed_dim, embedding)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Number of state-action pairs.
    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn pair(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let x = self.pair(s, a);
        &self.transition[x * self.n_states..(x + 1) * self.n_states]
    }

    pub fn reward_mean(&self, s: usize, a: usize) -> f64 {
        self.reward_mean[self.pair(s, a)]
    }

    pub fn reward_table(&self) -> QTable {
        QTable { n_states: self.n_states, n_actions: self.n_actions, values: self.reward_mean.clone() }
    }

    pub fn reward_noise_halfwidth(&self) -> f64 {
        self.reward_noise_halfwidth
    }

    /// `B_r`: the tightest bound with `|r| <= B_r` almost surely.
    pub fn reward_bound(&self) -> f64 {
        self.reward_mean.iter().fold(0.0_f64, |m, r| m.max(r.abs())) + self.reward_noise_halfwidth
    }

    /// Embedded point of the flattened pair index `x`.
    pub fn embedding(&self, x: usize) -> &[f64] {
        &self.embedding[x * self.embed_dim..(x + 1) * self.embed_dim]
    }

    /// All embedded points, in pair order.
    pub fn grid(&self) -> Vec<&[f64]> {
        self.embedding.chunks(self.embed_dim).collect()
    }

    pub fn with_reward_noise(mut self, halfwidth: f64) -> Result<Self> {
        if !(halfwidth >= 0.0 && halfwidth.is_finite()) {
            return Err(Error::InvalidMdp("reward_noise_halfwidth must be finite and >= 0".into()));
        }
        self.reward_noise_halfwidth = halfwidth;
        Ok(self)
    }

    /// Chain on state-action pairs induced by `policy`:
    /// `K[x][x'] = P[s][a][s'] * pi[a'|s']`.
    pub fn induced_chain(&self, policy: &Policy) -> Result<Vec<f64>> {
        policy.check_shape(self)?;
        let n = self.n_pairs();
        let mut k = vec![0.0; n * n];
        for x in 0..n {
            let row = &self.transition[x * self.n_states..(x + 1) * self.n_states];
            for (s2, &p) in row.iter().enumerate() {
                for a2 in 0..self.n_actions {
                    k[x * n + s2 * self.n_actions + a2] = p * policy.prob(s2, a2);
                }
            }
        }
        Ok(k)
    }

    pub fn from_spec(spec: &MdpSpec) -> Result<Self> {
        let (ns, na) = (spec.n_states, spec.n_actions);
        let mut transition = Vec::with_capacity(ns * na * ns);
        if spec.transition.len() != ns {
            return Err(Error::InvalidMdp("transition must have n_states rows".into()));
        }
        for rows in &spec.transition {
            if rows.len() != na {
                return Err(Error::InvalidMdp("transition[s] must have n_actions rows".into()));
            }
            for row in rows {
                if row.len() != ns {
                    return Err(Error::InvalidMdp("transition[s][a] must have n_states entries".into()));
                }
                transition.extend_from_slice(row);
            }
        }
        let reward_mean = flatten_table(&spec.reward_mean, ns, na, "reward_mean")?;
        let (embed_dim, embedding) = match (&spec.embedding, spec.embedding_seed) {
            (Some(e), _) => {
                let dim = e.first().and_then(|r| r.first()).map(Vec::len).unwrap_or(0);
                let mut flat = Vec::with_capacity(ns * na * dim);
                if e.len() != ns {
                    return Err(Error::InvalidMdp("embedding must have n_states rows".into()));
                }
                for rows in e {
                    if rows.len() != na || rows.iter().any(|v| v.len() != dim) {
                        return Err(Error::InvalidMdp("embedding rows must be n_actions x embedding_dim".into()));
                    }
                    for v in rows {
                        flat.extend_from_slice(v);
                    }
                }
                (dim, flat)
            }
            (None, Some(seed)) => {
                let dim = spec
                    .embedding_dim
                    .ok_or_else(|| Error::InvalidMdp("embedding_seed requires embedding_dim".into()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (dim, random_unit_embedding(ns * na, dim, &mut rng))
            }
            (None, None) => return Err(Error::InvalidMdp("one of embedding or embedding_seed is required".into())),
        };
        Self::new(
            ns,
            na,
            spec.gamma,
            transition,
            reward_mean,
            spec.reward_noise_halfwidth.unwrap_or(0.0),
            embed_dim,
            embedding,
        )
    }

    pub fn to_spec(&self) -> MdpSpec {
        let (ns, na) = (self.n_states, self.n_actions);
        MdpSpec {
            n_states: ns,
            n_actions: na,
            gamma: self.gamma,
            transition: (0..ns).map(|s| (0..na).map(|a| self.transition_row(s, a).to_vec()).collect()).collect(),
            reward_mean: (0..ns).map(|s| (0..na).map(|a| self.reward_mean(s, a)).collect()).collect(),
            reward_noise_halfwidth: Some(self.reward_noise_halfwidth),
            embedding: Some(
                (0..ns).map(|s| (0..na).map(|a| self.embedding(self.pair(s, a)).to_vec()).collect()).collect(),
            ),
            embedding_seed: None,
            embedding_dim: Some(self.embed_dim),
            initial_distribution: None,
        }
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: MdpSpec = serde_json::from_str(&text)?;
        Self::from_spec(&spec)
    }
}

/// JSON document describing an MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    /// `transition[s][a][s']`.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward_mean[s][a]`.
    pub reward_mean: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_noise_halfwidth: Option<f64>,
    /// `embedding[s][a]` is a point of the unit ball.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,
    /// Initial state distribution. Accepted for completeness; no computation
    /// depends on it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_distribution: Option<Vec<f64>>,
}

fn flatten_table(t: &[Vec<f64>], ns: usize, na: usize, name: &str) -> Result<Vec<f64>> {
    if t.len() != ns || t.iter().any(|r| r.len() != na) {
        return Err(Error::InvalidMdp(format!("{name} must be n_states x n_actions")));
    }
    Ok(t.iter().flatten().copied().collect())
}

/// Unit-norm Gaussian directions, one per pair.
fn random_unit_embedding(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        out.extend(v.iter().map(|c| c / norm));
    }
    out
}

/// Pushes rounding residue into the largest entry so the row sums to 1.
fn fix_row_sum(row: &mut [f64]) {
    let sum: f64 = row.iter().sum();
    if let Some(imax) = (0..row.len()).max_by(|&i, &j| row[i].total_cmp(&row[j])) {
        row[imax] += 1.0 - sum;
    }
}

/// Stochastic policy `pi[a|s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::InvalidPolicy(format!("{} probabilities for {n_states}x{n_actions}", probs.len())));
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidPolicy(format!("negative probability at state {s}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidPolicy(format!("row {s} sums to {sum}")));
            }
        }
        Ok(Self { n_states, n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self { n_states, n_actions, probs: vec![p; n_states * n_actions] }
    }

    pub fn for_mdp_uniform(mdp: &FiniteMdp) -> Self {
        Self::uniform(mdp.n_states(), mdp.n_actions())
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    fn check_shape(&self, mdp: &FiniteMdp) -> Result<()> {
        if self.n_states != mdp.n_states || self.n_actions != mdp.n_actions {
            return Err(Error::ShapeMismatch(format!(
                "policy is {}x{}, MDP is {}x{}",
                self.n_states, self.n_actions, mdp.n_states, mdp.n_actions
            )));
        }
        Ok(())
    }
}

/// Stationary distribution `D[s][a]` of the chain induced by a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDistribution {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl StationaryDistribution {
    /// Wraps an explicit distribution over pairs.
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions || n_actions == 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} probabilities for {n_states}x{n_actions} pairs",
                probs.len()
            )));
        }
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidParameter("pair distribution must be nonnegative and sum to 1".into()));
        }
        Ok(Self { n_states, n_actions, probs })
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    /// Probabilities in pair order.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// State marginal.
    pub fn state_marginal(&self) -> Vec<f64> {
        self.probs.chunks(self.n_actions).map(|r| r.iter().sum()).collect()
    }

    pub fn n_pairs(&self) -> usize {
        self.probs.len()
    }
}

/// Stationary distribution by power iteration from the uniform distribution.
///
/// Chains with more than one closed communicating class are rejected up
/// front; periodic chains fail to converge and are rejected at the cap.
pub fn stationary_distribution(mdp: &FiniteMdp, policy: &Policy) -> Result<StationaryDistribution> {
    let k = mdp.induced_chain(policy)?;
    let n = mdp.n_pairs();

    let closed = closed_class_count(&k, n);
    if closed != 1 {
        return Err(Error::ReducibleChain { closed_classes: closed });
    }

    let mut d = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    for _ in 0..STATIONARY_MAX_SWEEPS {
        next.iter_mut().for_each(|v| *v = 0.0);
        for (x, &dx) in d.iter().enumerate() {
            if dx == 0.0 {
                continue;
            }
            for (y, &kxy) in k[x * n..(x + 1) * n].iter().enumerate() {
                next[y] += dx * kxy;
            }
        }
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= total);
        let l1: f64 = d.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut d, &mut next);
        if l1 <= STATIONARY_L1_TOL {
            return Ok(StationaryDistribution { n_states: mdp.n_states, n_actions: mdp.n_actions, probs: d });
        }
    }
    Err(Error::NonConvergence { sweeps: STATIONARY_MAX_SWEEPS })
}

fn closed_class_count(k: &[f64], n: usize) -> usize {
    let mut g = DiGraph::<(), ()>::with_capacity(n, n * n);
    let nodes: Vec<_> = (0..n).map(|_| g.add_node(())).collect();
    for x in 0..n {
        for y in 0..n {
            if k[x * n + y] > 0.0 {
                g.add_edge(nodes[x], nodes[y], ());
            }
        }
    }
    let sccs = tarjan_scc(&g);
    let mut comp = vec![0usize; n];
    for (c, members) in sccs.iter().enumerate() {
        for node in members {
            comp[node.index()] = c;
        }
    }
    sccs.iter()
        .enumerate()
        .filter(|(c, members)| {
            members.iter().all(|node| {
                let x = node.index();
                (0..n).all(|y| k[x * n + y] == 0.0 || comp[y] == *c)
            })
        })
        .count()
}

/// One draw `(s, a, r, s', a')` from the transition distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionTuple {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    /// Next action drawn from the sampling policy. Q-learning ignores it.
    pub a_next: usize,
}

impl TransitionTuple {
    pub fn x(&self, mdp: &FiniteMdp) -> usize {
        mdp.pair(self.s, self.a)
    }

    pub fn x_next(&self, mdp: &FiniteMdp) -> usize {
        mdp.pair(self.s_next, self.a_next)
    }
}

/// Seeded i.i.d. sampler of transition tuples with `(s, a) ~ D`.
#[derive(Debug, Clone)]
pub struct TransitionSampler {
    rng: ChaCha8Rng,
    n_states: usize,
    n_actions: usize,
    pair_cdf: Vec<f64>,
    transition_cdf: Vec<f64>,
    policy_cdf: Vec<f64>,
    reward_mean: Vec<f64>,
    halfwidth: f64,
}

impl TransitionSampler {
    pub fn new(mdp: &FiniteMdp, policy: &Policy, stationary: &StationaryDistribution, rng: ChaCha8Rng) -> Result<Self> {
        policy.check_shape(mdp)?;
        if stationary.n_pairs() != mdp.n_pairs() {
            return Err(Error::ShapeMismatch("stationary distribution does not match MDP".into()));
        }
        let ns = mdp.n_states;
        Ok(Self {
            rng,
            n_states: ns,
            n_actions: mdp.n_actions,
            pair_cdf: cumulative(&stationary.probs),
            transition_cdf: mdp.transition.chunks(ns).flat_map(cumulative).collect(),
            policy_cdf: policy.probs.chunks(mdp.n_actions).flat_map(cumulative).collect(),
            reward_mean: mdp.reward_mean.clone(),
            halfwidth: mdp.reward_noise_halfwidth,
        })
    }

    pub fn from_seed(mdp: &FiniteMdp, policy: &Policy, stationary: &StationaryDistribution, seed: u64) -> Result<Self> {
        Self::new(mdp, policy, stationary, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn sample(&mut self) -> TransitionTuple {
        let x = draw(&self.pair_cdf, self.rng.random::<f64>());
        let (s, a) = (x / self.n_actions, x % self.n_actions);
        let noise = if self.halfwidth > 0.0 { self.rng.random_range(-self.halfwidth..=self.halfwidth) } else { 0.0 };
        let r = self.reward_mean[x] + noise;
        let ns = self.n_states;
        let s_next = draw(&self.transition_cdf[x * ns..(x + 1) * ns], self.rng.random::<f64>());
        let na = self.n_actions;
        let a_next = draw(&self.policy_cdf[s_next * na..(s_next + 1) * na], self.rng.random::<f64>());
        TransitionTuple { s, a, r, s_next, a_next }
    }
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = p
        .iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = f64::INFINITY;
    }
    out
}

/// Index of the first cdf entry exceeding `u`, skipping zero-mass entries.
fn draw(cdf: &[f64], u: f64) -> usize {
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

/// `Q^pi`, the solution of `Q = r + gamma P^pi Q`.
pub fn exact_q(mdp: &FiniteMdp, policy: &Policy) -> Result<QTable> {
    let n = mdp.n_pairs();
    let k = mdp.induced_chain(policy)?;
    let a = DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - mdp.gamma * k[i * n + j]
    });
    let b = DVector::from_column_slice(&mdp.reward_mean);
    let q = a.lu().solve(&b).ok_or(Error::Singular)?;
    Ok(QTable { n_states: mdp.n_states, n_actions: mdp.n_actions, values: q.iter().copied().collect() })
}

/// Expected next-state value `(P^pi q)[s][a]`.
fn expected_next(mdp: &FiniteMdp, s: usize, a: usize, state_value: &[f64]) -> f64 {
    mdp.transition_row(s, a).iter().zip(state_value).map(|(p, v)| p * v).sum()
}

fn apply_with_state_values(mdp: &FiniteMdp, state_value: &[f64]) -> QTable {
    let mut out = QTable::zeros(mdp.n_states, mdp.n_actions);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let v = mdp.reward_mean(s, a) + mdp.gamma * expected_next(mdp, s, a, state_value);
            out.set(s, a, v);
        }
    }
    out
}

/// Policy evaluation operator `T^pi`.
pub fn bellman_op(mdp: &FiniteMdp, policy: &Policy, q: &QTable) -> Result<QTable> {
    q.check_shape(mdp.n_states, mdp.n_actions)?;
    policy.check_shape(mdp)?;
    let v: Vec<f64> =
        (0..mdp.n_states).map(|s| q.row(s).iter().zip(policy.row(s)).map(|(qv, p)| qv * p).sum()).collect();
    Ok(apply_with_state_values(mdp, &v))
}

/// Maximum over actions, keeping the lowest index on ties.
pub fn greedy_action(row: &[f64]) -> usize {
    let mut best = 0;
    for (a, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = a;
        }
    }
    best
}

/// Bellman optimality operator `T*`.
pub fn bellman_optimality_op(mdp: &FiniteMdp, q: &QTable) -> Result<QTable> {
    q.check_shape(mdp.n_states, mdp.n_actions)?;
    let v: Vec<f64> = (0..mdp.n_states).map(|s| q.row(s)[greedy_action(q.row(s))]).collect();
    Ok(apply_with_state_values(mdp, &v))
}

/// `beta * log(mean_a exp(q_a / beta))`, the softmax over the uniform policy,
/// evaluated with a max shift.
pub fn softmax(values: &[f64], beta: f64) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean: f64 = values.iter().map(|v| ((v - max) / beta).exp()).sum::<f64>() / values.len() as f64;
    max + beta * mean.ln()
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("beta = {beta} must be positive")))
    }
}

/// Soft Bellman optimality operator `T_beta`.
pub fn soft_bellman_op(mdp: &FiniteMdp, q: &QTable, beta: f64) -> Result<QTable> {
    check_beta(beta)?;
    q.check_shape(mdp.n_states, mdp.n_actions)?;
    let v: Vec<f64> = (0..mdp.n_states).map(|s| softmax(q.row(s), beta)).collect();
    Ok(apply_with_state_values(mdp, &v))
}

/// Fixed point of a sup-norm contraction by plain iteration from zero,
/// returning the iterate together with the successive sweep errors.
fn iterate_to_fixed_point(mdp: &FiniteMdp, tol: f64, op: impl Fn(&QTable) -> QTable) -> (QTable, Vec<f64>) {
    let mut q = QTable::zeros(mdp.n_states, mdp.n_actions);
    let mut errors = Vec::new();
    for _ in 0..VALUE_ITERATION_MAX_SWEEPS {
        let tq = op(&q);
        let e = tq.sup_distance(&q);
        errors.push(e);
        if e <= tol {
            return (q, errors);
        }
        q = tq;
    }
    (q, errors)
}

/// Tabular optimal Q-function with `||T* Q - Q||_inf <= tol`.
pub fn value_iteration(mdp: &FiniteMdp, tol: f64) -> QTable {
    value_iteration_trace(mdp, tol).0
}

/// As [`value_iteration`], also returning `||T* Q_k - Q_k||_inf` per sweep.
pub fn value_iteration_trace(mdp: &FiniteMdp, tol: f64) -> (QTable, Vec<f64>) {
    iterate_to_fixed_point(mdp, tol, |q| bellman_optimality_op(mdp, q).expect("shape is fixed by construction"))
}

/// Tabular fixed point of `T_beta` with `||T_beta Q - Q||_inf <= tol`.
pub fn soft_value_iteration(mdp: &FiniteMdp, beta: f64, tol: f64) -> Result<QTable> {
    check_beta(beta)?;
    Ok(iterate_to_fixed_point(mdp, tol, |q| soft_bellman_op(mdp, q, beta).expect("shape and beta checked")).0)
}

/// `(1/2) E_D[(q - T^pi q)^2]`. The tabular class makes the projection the
/// identity, so this is the projected error as well.
pub fn exact_msbe(mdp: &FiniteMdp, policy: &Policy, stationary: &StationaryDistribution, q: &QTable) -> Result<f64> {
    let tq = bellman_op(mdp, policy, q)?;
    if stationary.n_pairs() != mdp.n_pairs() {
        return Err(Error::ShapeMismatch("stationary distribution does not match MDP".into()));
    }
    Ok(0.5
        * stationary
            .probs
            .iter()
            .zip(q.values.iter().zip(&tq.values))
            .map(|(d, (a, b))| d * (a - b) * (a - b))
            .sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_state(r: f64, gamma: f64) -> FiniteMdp {
        FiniteMdp::new(1, 1, gamma, vec![1.0], vec![r], 0.0, 1, vec![1.0]).unwrap()
    }

    fn swap_chain() -> FiniteMdp {
        FiniteMdp::new(2, 1, 0.9, vec![0.0, 1.0, 1.0, 0.0], vec![1.0, 0.0], 0.0, 1, vec![1.0, -1.0]).unwrap()
    }

    #[test]
    fn rejects_bad_rows_and_norms() {
        assert!(FiniteMdp::new(1, 1, 0.5, vec![0.9], vec![0.0], 0.0, 1, vec![1.0]).is_err());
        assert!(FiniteMdp::new(1, 1, 0.5, vec![1.0], vec![0.0], 0.0, 1, vec![1.5]).is_err());
        assert!(FiniteMdp::new(1, 1, 1.0, vec![1.0], vec![0.0], 0.0, 1, vec![1.0]).is_err());
        assert!(FiniteMdp::new(2, 1, 0.5, vec![1.5, -0.5, 0.0, 1.0], vec![0.0; 2], 0.0, 1, vec![0.0; 2]).is_err());
    }

    #[test]
    fn swap_chain_is_uniform() {
        let mdp = swap_chain();
        let d = stationary_distribution(&mdp, &Policy::uniform(2, 1)).unwrap();
        assert_eq!(d.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn doubly_stochastic_gives_uniform() {
        // 3 states, 2 actions; every column of the induced chain sums to 1.
        let p = [[0.2, 0.3, 0.5], [0.5, 0.2, 0.3], [0.3, 0.5, 0.2]];
        let mut t = Vec::new();
        for s in 0..3 {
            for _ in 0..2 {
                t.extend_from_slice(&p[s]);
            }
        }
        let mdp = FiniteMdp::new(3, 2, 0.5, t, vec![0.0; 6], 0.0, 1, vec![0.5; 6]).unwrap();
        let d = stationary_distribution(&mdp, &Policy::uniform(3, 2)).unwrap();
        for &v in d.probs() {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reducible_chain_rejected() {
        let mdp = FiniteMdp::new(2, 1, 0.5, vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 2], 0.0, 1, vec![0.0; 2]).unwrap();
        assert!(matches!(
            stationary_distribution(&mdp, &Policy::uniform(2, 1)),
            Err(Error::ReducibleChain { closed_classes: 2 })
        ));
    }

    #[test]
    fn periodic_chain_rejected() {
        // Period-2 swap with asymmetric start mass: the uniform start is still
        // a fixed point, so use a 3-cycle viewed through a 2-action split.
        let mdp = FiniteMdp::new(
            3,
            1,
            0.5,
            vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0],
            vec![0.0; 3],
            0.0,
            1,
            vec![0.0; 3],
        )
        .unwrap();
        // Uniform is stationary for a deterministic cycle.
        assert!(stationary_distribution(&mdp, &Policy::uniform(3, 1)).is_ok());
        let policy = Policy::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let bipartite = FiniteMdp::new(
            3,
            2,
            0.5,
            vec![
                0.0, 1.0, 0.0, 0.0, 1.0, 0.0, // s0 -> s1
                1.0, 0.0, 0.0, 0.0, 0.0, 1.0, // s1 -> s0 | s2
                0.0, 1.0, 0.0, 0.0, 1.0, 0.0, // s2 -> s1
            ],
            vec![0.0; 6],
            0.0,
            1,
            vec![0.0; 6],
        )
        .unwrap();
        // s1 alternates with {s0, s2}: period 2, and the uniform start is not
        // invariant because unused actions carry mass.
        let err = stationary_distribution(&bipartite, &policy);
        assert!(err.is_err());
    }

    #[test]
    fn single_state_q_is_geometric() {
        let mdp = single_state(1.0, 0.5);
        let q = exact_q(&mdp, &Policy::uniform(1, 1)).unwrap();
        assert!((q.get(0, 0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn gamma_zero_reduces_to_reward() {
        let mdp = FiniteMdp::random(3, 2, 0.0, 1.0, 2, 7).unwrap();
        let pi = Policy::for_mdp_uniform(&mdp);
        let q = exact_q(&mdp, &pi).unwrap();
        assert_eq!(q.values(), mdp.reward_table().values());
        let any = QTable::from_vec(3, 2, vec![3.0, -1.0, 2.0, 0.5, 9.0, 1.0]).unwrap();
        assert_eq!(bellman_op(&mdp, &pi, &any).unwrap(), mdp.reward_table());
        assert_eq!(
            exact_msbe(&mdp, &pi, &stationary_distribution(&mdp, &pi).unwrap(), &mdp.reward_table()).unwrap(),
            0.0
        );
        assert_eq!(value_iteration(&mdp, 1e-12), mdp.reward_table());
    }

    #[test]
    fn q_pi_is_fixed_point() {
        let mdp = FiniteMdp::random(4, 3, 0.9, 1.0, 3, 1).unwrap();
        let pi = Policy::for_mdp_uniform(&mdp);
        let q = exact_q(&mdp, &pi).unwrap();
        assert!(bellman_op(&mdp, &pi, &q).unwrap().sup_distance(&q) < 1e-10);
        let d = stationary_distribution(&mdp, &pi).unwrap();
        assert!(exact_msbe(&mdp, &pi, &d, &q).unwrap() < 1e-20);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mdp = FiniteMdp::random(3, 2, 0.9, 1.0, 2, 1).unwrap();
        let q = QTable::zeros(2, 2);
        assert!(bellman_op(&mdp, &Policy::for_mdp_uniform(&mdp), &q).is_err());
        assert!(bellman_optimality_op(&mdp, &q).is_err());
        assert!(soft_bellman_op(&mdp, &q, 1.0).is_err());
    }

    #[test]
    fn softmax_of_constant_is_constant() {
        assert!((softmax(&[2.5, 2.5, 2.5], 0.3) - 2.5).abs() < 1e-15);
        assert!(soft_value_iteration(&FiniteMdp::random(2, 2, 0.5, 1.0, 1, 0).unwrap(), 0.0, 1e-9).is_err());
    }

    #[test]
    fn softmax_two_action_closed_form() {
        for &(v, beta) in &[(1.0, 1.0), (3.0, 0.5), (0.2, 2.0), (40.0, 1.0)] {
            let direct: f64 = beta * ((1.0 + (v / beta as f64).exp()) / 2.0).ln();
            assert!((softmax(&[0.0, v], beta) - direct).abs() < 1e-12, "v={v} beta={beta}");
        }
    }

    #[test]
    fn softmax_small_temperature_bound() {
        let beta = 1e-3;
        let q = [0.3, 0.1, 0.29];
        let gap = (softmax(&q, beta) - 0.3).abs();
        assert!(gap <= beta * 3f64.ln());
    }

    #[test]
    fn value_iteration_contracts_geometrically() {
        let mdp = FiniteMdp::random(4, 2, 0.8, 1.0, 2, 3).unwrap();
        let (q, errors) = value_iteration_trace(&mdp, 1e-12);
        for w in errors.windows(2) {
            assert!(w[1] <= mdp.gamma() * w[0] + 1e-10);
        }
        assert!(bellman_optimality_op(&mdp, &q).unwrap().sup_distance(&q) <= 1e-12);
    }

    #[test]
    fn single_action_soft_iteration_is_policy_evaluation() {
        let mdp = FiniteMdp::random(4, 1, 0.7, 1.0, 2, 5).unwrap();
        let soft = soft_value_iteration(&mdp, 0.3, 1e-13).unwrap();
        let q = exact_q(&mdp, &Policy::for_mdp_uniform(&mdp)).unwrap();
        assert!(soft.sup_distance(&q) < 1e-11);
    }

    #[test]
    fn sampler_without_noise_returns_mean_reward() {
        let mdp = FiniteMdp::random(3, 2, 0.5, 1.0, 2, 9).unwrap();
        let pi = Policy::for_mdp_uniform(&mdp);
        let d = stationary_distribution(&mdp, &pi).unwrap();
        let mut smp = TransitionSampler::from_seed(&mdp, &pi, &d, 4).unwrap();
        for _ in 0..100 {
            let t = smp.sample();
            assert_eq!(t.r, mdp.reward_mean(t.s, t.a));
        }
    }

    #[test]
    fn single_state_sampler_noise_is_bounded() {
        let mdp = single_state(0.5, 0.5).with_reward_noise(0.25).unwrap();
        let pi = Policy::uniform(1, 1);
        let d = stationary_distribution(&mdp, &pi).unwrap();
        let mut smp = TransitionSampler::from_seed(&mdp, &pi, &d, 1).unwrap();
        for _ in 0..1000 {
            let t = smp.sample();
            assert_eq!((t.s, t.a, t.s_next, t.a_next), (0, 0, 0, 0));
            assert!((t.r - 0.5).abs() <= 0.25 && t.r.abs() <= mdp.reward_bound());
        }
    }

    #[test]
    fn json_with_seeded_embedding() {
        let json = r#"{
            "n_states": 2, "n_actions": 1, "gamma": 0.9,
            "transition": [[[0.0, 1.0]], [[1.0, 0.0]]],
            "reward_mean": [[1.0], [0.0]],
            "embedding_seed": 3, "embedding_dim": 4,
            "initial_distribution": [1.0, 0.0]
        }"#;
        let spec: MdpSpec = serde_json::from_str(json).unwrap();
        let mdp = FiniteMdp::from_spec(&spec).unwrap();
        assert_eq!(mdp.embed_dim(), 4);
        let n = mdp.embedding(1).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        let back = FiniteMdp::from_spec(&mdp.to_spec()).unwrap();
        assert_eq!(back, mdp);
    }
}
