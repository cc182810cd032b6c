//! Two-layer particle parameterization.
//!
//! A network of width `m` is a set of particles `theta_i = (w_i, b_i)` in
//! `R^D`, `D = d + 1`, and a scaling `alpha`:
//!
//! ```text
//! Q(x) = alpha / m * sum_i sigma(x; theta_i),   sigma(x; (w, b)) = sigma0(b) * sigma1(x; w)
//! ```
//!
//! The same particle set is read as the empirical measure of the particles,
//! so [`ParticleEnsemble`] doubles as the network and the measure.

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Odd output gate `sigma0(b)`. Returns the value and its first derivative.
pub trait OutputGate: Send + Sync + fmt::Debug {
    fn eval(&self, b: f64) -> (f64, f64);
}

/// Hidden feature `sigma1(x; w)`. Writes the gradient in `w` into `grad_w`
/// when given and returns the value.
pub trait HiddenUnit: Send + Sync + fmt::Debug {
    fn eval(&self, x: &[f64], w: &[f64], grad_w: Option<&mut [f64]>) -> f64;
}

/// `B0 * tanh(b)`.
#[derive(Debug, Clone, Copy)]
pub struct ScaledTanh {
    pub b0: f64,
}

impl OutputGate for ScaledTanh {
    fn eval(&self, b: f64) -> (f64, f64) {
        let t = b.tanh();
        (self.b0 * t, self.b0 * (1.0 - t * t))
    }
}

/// `sigmoid(w^T x)`.
#[derive(Debug, Clone, Copy)]
pub struct SigmoidUnit;

impl HiddenUnit for SigmoidUnit {
    fn eval(&self, x: &[f64], w: &[f64], grad_w: Option<&mut [f64]>) -> f64 {
        let z: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
        let s = sigmoid(z);
        if let Some(g) = grad_w {
            let ds = s * (1.0 - s);
            g.iter_mut().zip(x).for_each(|(gi, xi)| *gi = ds * xi);
        }
        s
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Constants with `|sigma| <= b0`, `||grad sigma|| <= b1 ||x||`,
/// `||hess sigma||_F <= b2 ||x||^2` on unit-norm inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationBounds {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActivationKind {
    /// `B0 * tanh(b) * sigmoid(w^T x)`.
    TanhSigmoid,
    Custom(String),
}

/// Activation `sigma(x; theta)` with its verified bound constants.
#[derive(Debug, Clone)]
pub struct ActivationSpec {
    kind: ActivationKind,
    gate: Arc<dyn OutputGate>,
    unit: Arc<dyn HiddenUnit>,
    input_dim: usize,
    bounds: ActivationBounds,
}

impl ActivationSpec {
    /// `B0 * tanh(b) * sigmoid(w^T x)` on inputs of dimension `input_dim`.
    ///
    /// With `t = tanh b`, `s = sigmoid(w^T x)` and `||x|| = 1`:
    /// - `grad_w = B0 t s(1-s) x` has norm at most `B0/4`, and
    ///   `d/db = B0 (1 - t^2) s` is at most `B0`, so `B1 = B0 (1/4 + 1)`.
    /// - Hessian blocks: `ww = B0 t s'' x x^T` with `|s''| <= 1/(6 sqrt 3) < 1/10`;
    ///   the two `wb` blocks `B0 (1-t^2) s(1-s) x` are each at most `B0/4`;
    ///   `bb = -2 B0 t (1-t^2) s` with `|2t(1-t^2)| <= 4/(3 sqrt 3) < 4/5`.
    ///   The triangle inequality gives `B2 = B0 (1/10 + 1/2 + 4/5)`.
    ///
    /// The `b` derivatives do not vanish with `x`; the `||x||`-scaled bounds
    /// hold on the unit sphere, where default embeddings live, and hold in the
    /// unscaled form `<= B1`, `<= B2` inside the ball.
    pub fn tanh_sigmoid(b0: f64, input_dim: usize) -> Self {
        Self {
            kind: ActivationKind::TanhSigmoid,
            gate: Arc::new(ScaledTanh { b0 }),
            unit: Arc::new(SigmoidUnit),
            input_dim,
            bounds: ActivationBounds { b0, b1: b0 * (0.25 + 1.0), b2: b0 * (0.1 + 0.5 + 0.8) },
        }
    }

    /// Canonical activation with `B0 = 1`.
    pub fn canonical(input_dim: usize) -> Self {
        Self::tanh_sigmoid(1.0, input_dim)
    }

    /// A user-supplied factored activation. The claimed bounds are checked by
    /// [`verify_bounds`] on `n_checks` random draws before the activation is returned.
    pub fn custom(
        name: impl Into<String>,
        gate: Arc<dyn OutputGate>,
        unit: Arc<dyn HiddenUnit>,
        input_dim: usize,
        bounds: ActivationBounds,
        n_checks: usize,
        seed: u64,
    ) -> Result<Self> {
        let spec = Self { kind: ActivationKind::Custom(name.into()), gate, unit, input_dim, bounds };
        let report = verify_bounds(&spec, n_checks, seed);
        if !report.passed() {
            return Err(Error::InvalidParameter(format!("activation fails bound suite: {report:?}")));
        }
        Ok(spec)
    }

    pub fn kind(&self) -> &ActivationKind {
        &self.kind
    }

    pub fn bounds(&self) -> ActivationBounds {
        self.bounds
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// `D = d + 1`.
    pub fn param_dim(&self) -> usize {
        self.input_dim + 1
    }

    /// `sigma(x; theta)` with `theta = (w, b)`, `b` last.
    pub fn value(&self, x: &[f64], theta: &[f64]) -> f64 {
        let (w, b) = theta.split_at(self.input_dim);
        self.gate.eval(b[0]).0 * self.unit.eval(x, w, None)
    }

    /// Writes `grad_theta sigma(x; theta)` into `grad` and returns the value.
    pub fn value_and_grad(&self, x: &[f64], theta: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.input_dim;
        let (w, b) = theta.split_at(d);
        let (g0, dg0) = self.gate.eval(b[0]);
        let (gw, gb) = grad.split_at_mut(d);
        let s1 = self.unit.eval(x, w, Some(gw));
        gw.iter_mut().for_each(|v| *v *= g0);
        gb[0] = dg0 * s1;
        g0 * s1
    }

    /// Values and gradients of one particle at every grid point; the gate is
    /// evaluated once. `grads` holds `grid.len()` rows of length `D`.
    pub fn grid_values_and_grads(&self, grid: &[&[f64]], theta: &[f64], values: &mut [f64], grads: &mut [f64]) {
        let d = self.input_dim;
        let (w, b) = theta.split_at(d);
        let (g0, dg0) = self.gate.eval(b[0]);
        for ((x, v), g) in grid.iter().zip(values.iter_mut()).zip(grads.chunks_mut(d + 1)) {
            let (gw, gb) = g.split_at_mut(d);
            let s1 = self.unit.eval(x, w, Some(gw));
            gw.iter_mut().for_each(|c| *c *= g0);
            gb[0] = dg0 * s1;
            *v = g0 * s1;
        }
    }

    pub fn grad(&self, x: &[f64], theta: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.param_dim()];
        self.value_and_grad(x, theta, &mut g);
        g
    }

    /// `sigma0(b)`; exposed for the oddness check.
    pub fn gate(&self, b: f64) -> f64 {
        self.gate.eval(b).0
    }
}

/// Outcome of the bound property suite.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoundReport {
    pub draws: usize,
    pub odd_violations: usize,
    pub value_violations: usize,
    pub grad_violations: usize,
    pub hessian_violations: usize,
    /// Worst relative error of the analytic gradient against central differences.
    pub max_grad_rel_error: f64,
    pub worst_grad_ratio: f64,
    pub worst_hessian_ratio: f64,
}

impl BoundReport {
    pub fn passed(&self) -> bool {
        self.odd_violations == 0
            && self.value_violations == 0
            && self.grad_violations == 0
            && self.hessian_violations == 0
            && self.max_grad_rel_error <= 1e-6
    }
}

/// Checks oddness of `sigma0`, the three activation bounds, and the analytic
/// gradient against central differences (step `1e-5`) on `n` draws with `x`
/// uniform on the unit sphere and `theta ~ N(0, 4 I)`. The Hessian is the
/// central difference of the analytic gradient.
pub fn verify_bounds(spec: &ActivationSpec, n: usize, seed: u64) -> BoundReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.input_dim;
    let dim = spec.param_dim();
    let b = spec.bounds;
    let h = 1e-5;
    let mut rep = BoundReport { draws: n, ..Default::default() };
    let mut g = vec![0.0; dim];
    let mut gp = vec![0.0; dim];
    let mut gm = vec![0.0; dim];
    for _ in 0..n {
        let x = random_unit_vector(&mut rng, d);
        let theta: Vec<f64> = (0..dim).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();

        let bb = theta[d];
        if (spec.gate(bb) + spec.gate(-bb)).abs() > 1e-14 * (1.0 + spec.gate(bb).abs()) {
            rep.odd_violations += 1;
        }
        let v = spec.value_and_grad(&x, &theta, &mut g);
        if v.abs() > b.b0 {
            rep.value_violations += 1;
        }
        let gn = norm(&g);
        rep.worst_grad_ratio = rep.worst_grad_ratio.max(gn / (b.b1 * xn));
        if gn > b.b1 * xn {
            rep.grad_violations += 1;
        }

        let mut tp = theta.clone();
        let mut fd = vec![0.0; dim];
        let mut hess_fro2 = 0.0;
        for j in 0..dim {
            tp[j] = theta[j] + h;
            let fp = spec.value_and_grad(&x, &tp, &mut gp);
            tp[j] = theta[j] - h;
            let fm = spec.value_and_grad(&x, &tp, &mut gm);
            tp[j] = theta[j];
            fd[j] = (fp - fm) / (2.0 * h);
            hess_fro2 += gp.iter().zip(&gm).map(|(a, c)| ((a - c) / (2.0 * h)).powi(2)).sum::<f64>();
        }
        let err = norm(&fd.iter().zip(&g).map(|(a, c)| a - c).collect::<Vec<_>>());
        rep.max_grad_rel_error = rep.max_grad_rel_error.max(err / gn.max(1e-8));
        let hn = hess_fro2.sqrt();
        rep.worst_hessian_ratio = rep.worst_hessian_ratio.max(hn / (b.b2 * xn * xn));
        if hn > b.b2 * xn * xn {
            rep.hessian_violations += 1;
        }
    }
    rep
}

pub(crate) fn random_unit_vector(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|c| c / n).collect();
        }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// `m` particles in `R^D` with output scaling `alpha`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    m: usize,
    dim: usize,
    alpha: f64,
    data: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn from_vec(m: usize, dim: usize, alpha: f64, data: Vec<f64>) -> Result<Self> {
        if m == 0 || dim == 0 {
            return Err(Error::InvalidParameter("ensemble needs m >= 1 and D >= 1".into()));
        }
        if data.len() != m * dim {
            return Err(Error::ShapeMismatch(format!("{} values for {m} x {dim}", data.len())));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("alpha = {alpha} must be positive")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ensemble entries".into()));
        }
        Ok(Self { m, dim, alpha, data })
    }

    pub fn width(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn particle_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn particles(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The ensemble with particles reordered as `perm[i] -> i`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let data = perm.iter().flat_map(|&j| self.particle(j).iter().copied()).collect();
        Self { data, ..*self }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }
}

/// Draws `theta_i ~ N(0, I_D)`. In antithetic mode particles come in
/// adjacent pairs `(w, b), (w, -b)`, which makes the network exactly zero
/// for any odd gate.
pub fn init_ensemble(m: usize, dim: usize, seed: u64, antithetic: bool, alpha: f64) -> Result<ParticleEnsemble> {
    init_ensemble_with(&mut ChaCha8Rng::seed_from_u64(seed), m, dim, antithetic, alpha)
}

pub fn init_ensemble_with(
    rng: &mut impl Rng,
    m: usize,
    dim: usize,
    antithetic: bool,
    alpha: f64,
) -> Result<ParticleEnsemble> {
    if antithetic && m % 2 != 0 {
        return Err(Error::InvalidParameter(format!("antithetic initialization needs even m, got {m}")));
    }
    let mut data = Vec::with_capacity(m * dim);
    if antithetic {
        for _ in 0..m / 2 {
            let p: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            data.extend_from_slice(&p);
            data.extend_from_slice(&p[..dim - 1]);
            data.push(-p[dim - 1]);
        }
    } else {
        data.extend((0..m * dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
    }
    ParticleEnsemble::from_vec(m, dim, alpha, data)
}

/// `alpha / m * sum_i sigma(x; theta_i)`, summed in particle order.
pub fn q_hat(spec: &ActivationSpec, x: &[f64], ensemble: &ParticleEnsemble) -> f64 {
    let sum: f64 = ensemble.particles().map(|p| spec.value(x, p)).sum();
    ensemble.alpha * sum / ensemble.m as f64
}

/// [`q_hat`] at every point of `grid`.
pub fn q_hat_grid(spec: &ActivationSpec, grid: &[&[f64]], ensemble: &ParticleEnsemble) -> Vec<f64> {
    grid.iter().map(|x| q_hat(spec, x, ensemble)).collect()
}

/// Gram matrix `K[x][x'] = 1/m sum_i grad sigma(x; theta_i) . grad sigma(x'; theta_i)`
/// over a fixed grid of embedded points.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    n: usize,
    entries: Vec<f64>,
    grid: Vec<f64>,
}

impl KernelMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Grid points, concatenated.
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn same_grid(&self, other: &KernelMatrix) -> bool {
        self.n == other.n && self.grid == other.grid
    }
}

pub fn kernel_matrix(spec: &ActivationSpec, ensemble: &ParticleEnsemble, grid: &[&[f64]]) -> Result<KernelMatrix> {
    let n = grid.len();
    if n == 0 {
        return Err(Error::InvalidParameter("kernel grid is empty".into()));
    }
    let dim = ensemble.dim();
    let mut grads = vec![0.0; n * dim];
    let mut acc = vec![0.0; n * n];
    for p in ensemble.particles() {
        for (x, g) in grid.iter().zip(grads.chunks_mut(dim)) {
            spec.value_and_grad(x, p, g);
        }
        for i in 0..n {
            let gi = &grads[i * dim..(i + 1) * dim];
            for j in i..n {
                let gj = &grads[j * dim..(j + 1) * dim];
                acc[i * n + j] += gi.iter().zip(gj).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    let m = ensemble.width() as f64;
    for i in 0..n {
        for j in i..n {
            let v = acc[i * n + j] / m;
            acc[i * n + j] = v;
            acc[j * n + i] = v;
        }
    }
    Ok(KernelMatrix { n, entries: acc, grid: grid.iter().flat_map(|x| x.iter().copied()).collect() })
}

/// A checkpointed ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub ensemble: ParticleEnsemble,
    pub seed: u64,
    pub step: usize,
}

/// Writes the checkpoint CSV: a `m,D,alpha,seed,step` header record, its
/// values, then one record of `D` values per particle.
pub fn write_snapshot<W: Write>(out: W, ensemble: &ParticleEnsemble, seed: u64, step: usize) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    w.write_record(["m", "D", "alpha", "seed", "step"])?;
    w.serialize((ensemble.m, ensemble.dim, ensemble.alpha, seed, step))?;
    for p in ensemble.particles() {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_snapshot<R: Read>(input: R) -> Result<Snapshot> {
    let mut r = csv::ReaderBuilder::new().flexible(true).has_headers(true).from_reader(input);
    let mut records = r.records();
    let head = records.next().ok_or_else(|| Error::Config("snapshot is missing its header values".into()))??;
    let (m, dim, alpha, seed, step): (usize, usize, f64, u64, usize) = head.deserialize(None)?;
    let mut data = Vec::with_capacity(m * dim);
    for rec in records {
        let row: Vec<f64> = rec?.deserialize(None)?;
        if row.len() != dim {
            return Err(Error::ShapeMismatch(format!("snapshot row of {} values, D = {dim}", row.len())));
        }
        data.extend(row);
    }
    Ok(Snapshot { ensemble: ParticleEnsemble::from_vec(m, dim, alpha, data)?, seed, step })
}
