//! Config-driven experiments. Each command is a pure function of the config
//! (including its seed) and writes CSV files into an output directory.

use std::fs;
use std::path::{Path, PathBuf};

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    cttd_integrate, etd_step, ip_integrate, run, stream_rng, td_step, DynamicsKind, MeanFieldReference, RunConfig,
    RunOutput, RunStatus, REFERENCE_WIDTH_CAP, REFERENCE_WIDTH_FACTOR, STREAM_INIT, STREAM_REFERENCE, STREAM_SAMPLER,
};
use crate::env::{stationary_distribution, FiniteMdp, MdpSpec, Policy, StationaryDistribution, TransitionSampler};
use crate::error::{Error, Result};
use crate::fit::{fit_inverse, fit_power_law};
use crate::metrics::{kappa_estimate, KappaMode, RunRecord};
use crate::network::{init_ensemble_with, write_snapshot, ActivationSpec, ParticleEnsemble};
use crate::ot::ensemble_sup_distance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Run,
    Coupling,
    AlphaSweep,
    MSweep,
    EpsilonSweep,
    KappaReport,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Run => "run",
            ExperimentKind::Coupling => "coupling",
            ExperimentKind::AlphaSweep => "alpha_sweep",
            ExperimentKind::MSweep => "m_sweep",
            ExperimentKind::EpsilonSweep => "epsilon_sweep",
            ExperimentKind::KappaReport => "kappa_report",
        }
    }

    /// Tag mixed into split seeds so experiments never share streams.
    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

/// Parameters of a generated MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomMdpConfig {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub reward_scale: f64,
    pub embed_dim: usize,
    pub seed: u64,
}

fn default_b0() -> f64 {
    1.0
}
fn default_one() -> usize {
    1
}
fn default_kappa_samples() -> usize {
    256
}
fn default_plateau() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: Option<ExperimentKind>,
    /// MDP JSON file, relative to the config file's directory.
    #[serde(default)]
    pub mdp_path: Option<PathBuf>,
    #[serde(default)]
    pub mdp: Option<MdpSpec>,
    #[serde(default)]
    pub random_mdp: Option<RandomMdpConfig>,
    /// Evaluated (TD) or exploration (Q-learning) policy, `[s][a]`; uniform if absent.
    #[serde(default)]
    pub policy: Option<Vec<Vec<f64>>>,
    /// Activation scale `B0`.
    #[serde(default = "default_b0")]
    pub b0: f64,
    pub run: RunConfig,
    #[serde(default = "default_one")]
    pub stride: usize,
    /// Seeds per grid point.
    #[serde(default = "default_one")]
    pub repetitions: usize,
    #[serde(default)]
    pub alpha_grid: Vec<f64>,
    #[serde(default)]
    pub m_grid: Vec<usize>,
    #[serde(default)]
    pub epsilon_grid: Vec<f64>,
    /// Use the same split seed at every grid point of a repetition.
    #[serde(default)]
    pub share_seeds_across_grid: bool,
    #[serde(default = "default_kappa_samples")]
    pub kappa_samples: usize,
    /// Trailing fraction of the records averaged into the plateau gap.
    #[serde(default = "default_plateau")]
    pub plateau_fraction: f64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json_str(&text, base)
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn build_mdp(&self) -> Result<FiniteMdp> {
        let sources = [self.mdp_path.is_some(), self.mdp.is_some(), self.random_mdp.is_some()];
        if sources.iter().filter(|s| **s).count() != 1 {
            return Err(Error::Config("give exactly one of mdp_path, mdp, random_mdp".into()));
        }
        if let Some(p) = &self.mdp_path {
            let full = self.base_dir.join(p);
            if !full.exists() {
                return Err(Error::Config(format!("MDP file {} does not exist", full.display())));
            }
            return FiniteMdp::load_json(&full).map_err(|e| Error::Config(format!("{}: {e}", full.display())));
        }
        if let Some(spec) = &self.mdp {
            return FiniteMdp::from_spec(spec).map_err(|e| Error::Config(e.to_string()));
        }
        let r = self.random_mdp.as_ref().expect("checked above");
        FiniteMdp::random(r.n_states, r.n_actions, r.gamma, r.reward_scale, r.embed_dim, r.seed)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn build_policy(&self, mdp: &FiniteMdp) -> Result<Policy> {
        match &self.policy {
            None => Ok(Policy::for_mdp_uniform(mdp)),
            Some(rows) => {
                if rows.len() != mdp.n_states() {
                    return Err(Error::Config(format!("policy has {} rows for {} states", rows.len(), mdp.n_states())));
                }
                Policy::new(mdp.n_states(), mdp.n_actions(), rows.concat()).map_err(|e| Error::Config(e.to_string()))
            }
        }
    }

    pub fn activation(&self, mdp: &FiniteMdp) -> Result<ActivationSpec> {
        if !(self.b0 > 0.0 && self.b0.is_finite()) {
            return Err(Error::Config(format!("b0 = {} must be positive", self.b0)));
        }
        Ok(ActivationSpec::tanh_sigmoid(self.b0, mdp.embed_dim()))
    }

    /// Checks everything that does not require running.
    pub fn validate(&self, kind: ExperimentKind) -> Result<()> {
        if let Some(k) = self.experiment {
            if k != kind {
                return Err(Error::Config(format!("config is for {}, command is {}", k.as_str(), kind.as_str())));
            }
        }
        let mdp = self.build_mdp()?;
        self.build_policy(&mdp)?;
        let spec = self.activation(&mdp)?;
        self.run.validate(&spec)?;
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        if !(self.plateau_fraction > 0.0 && self.plateau_fraction <= 1.0) {
            return Err(Error::Config("plateau_fraction must lie in (0, 1]".into()));
        }
        let positive = |name: &str, v: &[f64]| {
            if v.iter().all(|x| *x > 0.0 && x.is_finite()) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} entries must be positive")))
            }
        };
        positive("alpha_grid", &self.alpha_grid)?;
        positive("epsilon_grid", &self.epsilon_grid)?;
        if self.m_grid.iter().any(|m| *m == 0 || (self.run.antithetic && m % 2 != 0)) {
            return Err(Error::Config("m_grid entries must be >= 1 (and even when antithetic)".into()));
        }
        let need = |name: &str, empty: bool| {
            if empty {
                Err(Error::Config(format!("{} needs a nonempty {name}", kind.as_str())))
            } else {
                Ok(())
            }
        };
        match kind {
            ExperimentKind::AlphaSweep => need("alpha_grid", self.alpha_grid.is_empty())?,
            ExperimentKind::MSweep => need("m_grid", self.m_grid.is_empty())?,
            ExperimentKind::EpsilonSweep => need("epsilon_grid", self.epsilon_grid.is_empty())?,
            ExperimentKind::Coupling => {
                need("epsilon_grid or m_grid", self.epsilon_grid.is_empty() && self.m_grid.is_empty())?
            }
            ExperimentKind::KappaReport => {
                if self.kappa_samples < 2 {
                    return Err(Error::Config("kappa_samples must be >= 2".into()));
                }
            }
            ExperimentKind::Run => {}
        }
        Ok(())
    }
}

/// Counter-based seed split: word `2 (g 2^32 + r)` of ChaCha stream `tag`
/// keyed by the master seed.
pub fn split_seed(master: u64, tag: u64, grid_point: usize, repetition: usize) -> u64 {
    let mut rng = stream_rng(master, tag);
    rng.set_word_pos((((grid_point as u128) << 32) | repetition as u128) * 2);
    rng.next_u64()
}

/// Files written by a command and whether any run aborted.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub files: Vec<PathBuf>,
    pub blown_up: bool,
}

struct Setup {
    mdp: FiniteMdp,
    policy: Policy,
    stationary: StationaryDistribution,
    spec: ActivationSpec,
}

impl Setup {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let mdp = cfg.build_mdp()?;
        let policy = cfg.build_policy(&mdp)?;
        let spec = cfg.activation(&mdp)?;
        let stationary = stationary_distribution(&mdp, &policy)?;
        Ok(Self { mdp, policy, stationary, spec })
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: Option<&[&str]>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(header.is_none()).from_path(path)?;
    if let Some(h) = header {
        w.write_record(h)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct RunStatusFile {
    status: &'static str,
    dynamics: &'static str,
    seed: u64,
    steps_planned: usize,
    last_healthy_step: Option<usize>,
    delta: Option<f64>,
    min_gap: f64,
    min_gap_step: usize,
    initial_gap: f64,
}

fn status_fields(status: &RunStatus) -> (&'static str, Option<usize>, Option<f64>) {
    match status {
        RunStatus::Completed => ("completed", None, None),
        RunStatus::BlownUp { last_healthy_step, delta } => ("blown_up", Some(*last_healthy_step), Some(*delta)),
    }
}

/// Single run: `records.csv`, terminal `checkpoint.csv`, and `status.json`.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    cfg.validate(ExperimentKind::Run)?;
    let setup = Setup::new(cfg)?;
    fs::create_dir_all(out)?;
    let result = run(&cfg.run, &setup.mdp, &setup.policy, &setup.spec, cfg.stride)?;

    let records = out.join("records.csv");
    write_csv(&records, &result.records, Some(&RunRecord::HEADER))?;
    let checkpoint = out.join("checkpoint.csv");
    let (step, terminal) = result.trajectory.last().expect("initial snapshot");
    write_snapshot(fs::File::create(&checkpoint)?, terminal, cfg.run.seed, *step)?;

    let (status, last, delta) = status_fields(&result.status);
    let sidecar = RunStatusFile {
        status,
        dynamics: cfg.run.dynamics.as_str(),
        seed: cfg.run.seed,
        steps_planned: cfg.run.steps(),
        last_healthy_step: last,
        delta,
        min_gap: result.min_gap,
        min_gap_step: result.min_gap_step,
        initial_gap: result.initial_gap(),
    };
    let status_path = out.join("status.json");
    fs::write(&status_path, serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(ExperimentOutcome { files: vec![records, checkpoint, status_path], blown_up: status != "completed" })
}

/// One sup-norm distance of a coupling ladder.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CouplingRow {
    pub pair: &'static str,
    pub grid_param: &'static str,
    pub grid_value: f64,
    pub repetition: usize,
    pub seed: u64,
    pub distance: f64,
}

/// Log-log fit of the repetition-averaged distances of one pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CouplingFitRow {
    pub pair: &'static str,
    pub grid_param: &'static str,
    pub n_points: usize,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub r_squared: Option<f64>,
    /// `ok`, `skipped_zero` (all distances vanish), `insufficient`
    /// (fewer than 3 grid points) or `invalid` (some mean is zero).
    pub status: &'static str,
}

pub const PAIR_ETD_TD: &str = "etd_td";
pub const PAIR_CTTD_ETD: &str = "cttd_etd";
pub const PAIR_IP_CTTD: &str = "ip_cttd";

/// Runs TD, ETD and CTTD from a shared initialization over `floor(T/eps)`
/// steps and returns `(||ETD - TD||, ||CTTD - ETD||)`. CTTD uses RK4 with
/// `dt_internal` (default `eps / 8`).
pub fn epsilon_ladder_point(
    spec: &ActivationSpec,
    mdp: &FiniteMdp,
    policy: &Policy,
    stationary: &StationaryDistribution,
    run: &RunConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let theta0 =
        init_ensemble_with(&mut stream_rng(seed, STREAM_INIT), run.m, spec.param_dim(), run.antithetic, run.alpha)?;
    let (eta, eps, k) = (run.eta(), run.epsilon, run.steps());
    let mut sampler = TransitionSampler::new(mdp, policy, stationary, stream_rng(seed, STREAM_SAMPLER))?;
    let mut td = theta0.clone();
    let mut etd = theta0.clone();
    for step in 0..k {
        let tuple = sampler.sample();
        td = td_step(spec, &td, &tuple, mdp, eta, eps)
            .map_err(|_| Error::BlowUp { last_healthy_step: step, delta: f64::NAN })?;
        etd = etd_step(spec, &etd, mdp, policy, stationary, eta, eps)?;
    }
    let cttd = cttd_integrate(spec, &theta0, mdp, policy, stationary, eta, k as f64 * eps, run.dt_internal())?;
    Ok((ensemble_sup_distance(&etd, &td)?.value, ensemble_sup_distance(&cttd, &etd)?.value))
}

/// `||IP - CTTD||` at `T` from a shared width-`m` initialization; the IP
/// reference is an independent CTTD ensemble of width `min(64 m, 16384)`.
pub fn width_ladder_point(
    spec: &ActivationSpec,
    mdp: &FiniteMdp,
    policy: &Policy,
    stationary: &StationaryDistribution,
    run: &RunConfig,
    seed: u64,
) -> Result<f64> {
    let theta0 =
        init_ensemble_with(&mut stream_rng(seed, STREAM_INIT), run.m, spec.param_dim(), run.antithetic, run.alpha)?;
    let m_ref = (REFERENCE_WIDTH_FACTOR * run.m).min(REFERENCE_WIDTH_CAP);
    let ref0 = init_ensemble_with(
        &mut stream_rng(seed, STREAM_REFERENCE),
        m_ref,
        spec.param_dim(),
        run.antithetic,
        run.alpha,
    )?;
    let (eta, dt) = (run.eta(), run.dt_internal());
    let t = run.steps() as f64 * run.epsilon;
    let reference = MeanFieldReference::record_cttd(spec, &ref0, mdp, policy, stationary, eta, t, dt / 2.0)?;
    let ip = ip_integrate(spec, &theta0, &reference, mdp, policy, stationary, eta, 0.0, t, dt)?;
    let cttd = cttd_integrate(spec, &theta0, mdp, policy, stationary, eta, t, dt)?;
    Ok(ensemble_sup_distance(&ip, &cttd)?.value)
}

fn fit_pair(pair: &'static str, grid_param: &'static str, rows: &[CouplingRow]) -> CouplingFitRow {
    let mut xs: Vec<f64> = Vec::new();
    let mut means: Vec<f64> = Vec::new();
    for r in rows.iter().filter(|r| r.pair == pair) {
        match xs.iter().position(|x| *x == r.grid_value) {
            Some(i) => means[i] += r.distance,
            None => {
                xs.push(r.grid_value);
                means.push(r.distance);
            }
        }
    }
    for (i, x) in xs.iter().enumerate() {
        let n = rows.iter().filter(|r| r.pair == pair && r.grid_value == *x).count();
        means[i] /= n as f64;
    }
    let mut row = CouplingFitRow {
        pair,
        grid_param,
        n_points: xs.len(),
        slope: None,
        intercept: None,
        r_squared: None,
        status: "ok",
    };
    if means.iter().all(|m| *m == 0.0) {
        row.status = "skipped_zero";
    } else if xs.len() < 3 {
        row.status = "insufficient";
    } else {
        match fit_power_law(&xs, &means) {
            Ok(f) => {
                row.slope = Some(f.slope);
                row.intercept = Some(f.intercept);
                row.r_squared = Some(f.r_squared);
            }
            Err(_) => row.status = "invalid",
        }
    }
    row
}

/// Distances and fits of a coupling experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingResult {
    pub rows: Vec<CouplingRow>,
    pub fits: Vec<CouplingFitRow>,
}

impl CouplingResult {
    pub fn fit(&self, pair: &str) -> Option<&CouplingFitRow> {
        self.fits.iter().find(|f| f.pair == pair)
    }
}

fn point_seed(cfg: &ExperimentConfig, kind: ExperimentKind, g: usize, r: usize) -> u64 {
    let g = if cfg.share_seeds_across_grid { 0 } else { g };
    split_seed(cfg.run.seed, kind.tag(), g, r)
}

/// Runs the epsilon ladder over `epsilon_grid` and the width ladder over
/// `m_grid` without writing files.
pub fn coupling(cfg: &ExperimentConfig) -> Result<CouplingResult> {
    cfg.validate(ExperimentKind::Coupling)?;
    let setup = Setup::new(cfg)?;
    let reps = cfg.repetitions;
    let kind = ExperimentKind::Coupling;

    let eps_tasks: Vec<(usize, usize)> =
        (0..cfg.epsilon_grid.len()).flat_map(|g| (0..reps).map(move |r| (g, r))).collect();
    let eps_out: Vec<Result<(f64, f64)>> = eps_tasks
        .par_iter()
        .map(|&(g, r)| {
            let mut rc = cfg.run.clone();
            rc.epsilon = cfg.epsilon_grid[g];
            let seed = point_seed(cfg, kind, g, r);
            epsilon_ladder_point(&setup.spec, &setup.mdp, &setup.policy, &setup.stationary, &rc, seed)
        })
        .collect();

    let offset = cfg.epsilon_grid.len();
    let m_tasks: Vec<(usize, usize)> = (0..cfg.m_grid.len()).flat_map(|g| (0..reps).map(move |r| (g, r))).collect();
    let m_out: Vec<Result<f64>> = m_tasks
        .par_iter()
        .map(|&(g, r)| {
            let mut rc = cfg.run.clone();
            rc.m = cfg.m_grid[g];
            let seed = point_seed(cfg, kind, offset + g, r);
            width_ladder_point(&setup.spec, &setup.mdp, &setup.policy, &setup.stationary, &rc, seed)
        })
        .collect();

    let mut rows = Vec::new();
    let mut fits = Vec::new();
    let mut etd_cttd = Vec::new();
    for (&(g, r), res) in eps_tasks.iter().zip(eps_out) {
        let (a, b) = res?;
        let seed = point_seed(cfg, kind, g, r);
        let value = cfg.epsilon_grid[g];
        rows.push(CouplingRow {
            pair: PAIR_ETD_TD,
            grid_param: "epsilon",
            grid_value: value,
            repetition: r,
            seed,
            distance: a,
        });
        etd_cttd.push(CouplingRow {
            pair: PAIR_CTTD_ETD,
            grid_param: "epsilon",
            grid_value: value,
            repetition: r,
            seed,
            distance: b,
        });
    }
    rows.extend(etd_cttd);
    if !cfg.epsilon_grid.is_empty() {
        fits.push(fit_pair(PAIR_ETD_TD, "epsilon", &rows));
        fits.push(fit_pair(PAIR_CTTD_ETD, "epsilon", &rows));
    }
    for (&(g, r), res) in m_tasks.iter().zip(m_out) {
        rows.push(CouplingRow {
            pair: PAIR_IP_CTTD,
            grid_param: "m",
            grid_value: cfg.m_grid[g] as f64,
            repetition: r,
            seed: point_seed(cfg, kind, offset + g, r),
            distance: res?,
        });
    }
    if !cfg.m_grid.is_empty() {
        fits.push(fit_pair(PAIR_IP_CTTD, "m", &rows));
    }
    Ok(CouplingResult { rows, fits })
}

/// `coupling.csv` with every distance and `coupling_fit.csv` with the slopes.
pub fn cmd_coupling(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    let result = match coupling(cfg) {
        Err(Error::BlowUp { .. }) => return Ok(ExperimentOutcome { files: vec![], blown_up: true }),
        other => other?,
    };
    fs::create_dir_all(out)?;
    let a = out.join("coupling.csv");
    write_csv(&a, &result.rows, None)?;
    let b = out.join("coupling_fit.csv");
    write_csv(&b, &result.fits, None)?;
    Ok(ExperimentOutcome { files: vec![a, b], blown_up: false })
}

/// One run of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: &'static str,
    pub value: f64,
    pub repetition: usize,
    pub seed: u64,
    pub min_gap: f64,
    /// Mean optimality gap over the trailing `plateau_fraction` of records.
    pub plateau_gap: f64,
    pub terminal_gap: f64,
    pub terminal_w2_drift: f64,
    pub terminal_kernel_drift: f64,
    pub status: &'static str,
}

/// Repetition means at one grid value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummaryRow {
    pub param: &'static str,
    pub value: f64,
    pub runs: usize,
    pub mean_min_gap: f64,
    pub mean_plateau_gap: f64,
    pub mean_terminal_w2_drift: f64,
    pub mean_terminal_kernel_drift: f64,
    /// `alpha * mean_terminal_w2_drift`.
    pub w2_drift_times_alpha: f64,
}

/// Fit over the sweep summary: `a + b / alpha` for alpha sweeps, a
/// log-log power law otherwise, both on the plateau gap.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepFitRow {
    pub param: &'static str,
    pub model: &'static str,
    pub n_points: usize,
    pub coefficient: Option<f64>,
    pub intercept: Option<f64>,
    pub r_squared: Option<f64>,
    pub status: &'static str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummaryRow>,
    pub fit: SweepFitRow,
}

fn plateau(records: &[RunRecord], fraction: f64) -> f64 {
    let n = records.len();
    let take = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
    records[n - take..].iter().map(|r| r.optimality_gap).sum::<f64>() / take as f64
}

fn summarize(out: &RunOutput, fraction: f64) -> (f64, f64, f64, f64) {
    let last = out.records.last().expect("records hold the initial row");
    (plateau(&out.records, fraction), last.optimality_gap, last.w2_drift, last.kernel_drift_fro)
}

/// Runs `cfg.run` once per (grid value, repetition), varying one parameter.
pub fn sweep(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<SweepResult> {
    cfg.validate(kind)?;
    let setup = Setup::new(cfg)?;
    let (param, values): (&'static str, Vec<f64>) = match kind {
        ExperimentKind::AlphaSweep => ("alpha", cfg.alpha_grid.clone()),
        ExperimentKind::MSweep => ("m", cfg.m_grid.iter().map(|m| *m as f64).collect()),
        ExperimentKind::EpsilonSweep => ("epsilon", cfg.epsilon_grid.clone()),
        _ => return Err(Error::Config(format!("{} is not a sweep", kind.as_str()))),
    };
    let tasks: Vec<(usize, usize)> =
        (0..values.len()).flat_map(|g| (0..cfg.repetitions).map(move |r| (g, r))).collect();
    let outputs: Vec<Result<SweepRow>> = tasks
        .par_iter()
        .map(|&(g, r)| {
            let mut rc = cfg.run.clone();
            match kind {
                ExperimentKind::AlphaSweep => rc.alpha = values[g],
                ExperimentKind::MSweep => rc.m = cfg.m_grid[g],
                _ => rc.epsilon = values[g],
            }
            rc.seed = point_seed(cfg, kind, g, r);
            let out = run(&rc, &setup.mdp, &setup.policy, &setup.spec, cfg.stride)?;
            let (plateau_gap, terminal_gap, w2, kd) = summarize(&out, cfg.plateau_fraction);
            Ok(SweepRow {
                param,
                value: values[g],
                repetition: r,
                seed: rc.seed,
                min_gap: out.min_gap,
                plateau_gap,
                terminal_gap,
                terminal_w2_drift: w2,
                terminal_kernel_drift: kd,
                status: status_fields(&out.status).0,
            })
        })
        .collect();
    let rows: Vec<SweepRow> = outputs.into_iter().collect::<Result<_>>()?;

    let mut summary = Vec::new();
    for (g, &value) in values.iter().enumerate() {
        let group: Vec<&SweepRow> = rows.iter().zip(&tasks).filter(|(_, t)| t.0 == g).map(|(r, _)| r).collect();
        let n = group.len() as f64;
        let mean = |f: &dyn Fn(&SweepRow) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
        let alpha = if kind == ExperimentKind::AlphaSweep { value } else { cfg.run.alpha };
        let w2 = mean(&|r| r.terminal_w2_drift);
        summary.push(SweepSummaryRow {
            param,
            value,
            runs: group.len(),
            mean_min_gap: mean(&|r| r.min_gap),
            mean_plateau_gap: mean(&|r| r.plateau_gap),
            mean_terminal_w2_drift: w2,
            mean_terminal_kernel_drift: mean(&|r| r.terminal_kernel_drift),
            w2_drift_times_alpha: w2 * alpha,
        });
    }

    let xs: Vec<f64> = summary.iter().map(|s| s.value).collect();
    let ys: Vec<f64> = summary.iter().map(|s| s.mean_plateau_gap).collect();
    let model = if kind == ExperimentKind::AlphaSweep { "a_plus_b_over_alpha" } else { "power_law" };
    let mut fit = SweepFitRow {
        param,
        model,
        n_points: xs.len(),
        coefficient: None,
        intercept: None,
        r_squared: None,
        status: "ok",
    };
    let result = if kind == ExperimentKind::AlphaSweep {
        fit_inverse(&xs, &ys).map(|f| (f.slope, f.intercept, f.r_squared))
    } else {
        fit_power_law(&xs, &ys).map(|f| (f.slope, f.intercept, f.r_squared))
    };
    match result {
        Ok((c, i, r2)) => {
            fit.coefficient = Some(c);
            fit.intercept = Some(i);
            fit.r_squared = Some(r2);
        }
        Err(Error::Insufficient(_)) => fit.status = "insufficient",
        Err(_) => fit.status = "invalid",
    }
    Ok(SweepResult { rows, summary, fit })
}

/// `<name>.csv`, `<name>_summary.csv` and `<name>_fit.csv`.
pub fn cmd_sweep(cfg: &ExperimentConfig, kind: ExperimentKind, out: &Path) -> Result<ExperimentOutcome> {
    let result = sweep(cfg, kind)?;
    fs::create_dir_all(out)?;
    let name = kind.as_str();
    let a = out.join(format!("{name}.csv"));
    write_csv(&a, &result.rows, None)?;
    let b = out.join(format!("{name}_summary.csv"));
    write_csv(&b, &result.summary, None)?;
    let c = out.join(format!("{name}_fit.csv"));
    write_csv(&c, std::slice::from_ref(&result.fit), None)?;
    let blown_up = result.rows.iter().any(|r| r.status != "completed");
    Ok(ExperimentOutcome { files: vec![a, b, c], blown_up })
}

pub fn cmd_alpha_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    cmd_sweep(cfg, ExperimentKind::AlphaSweep, out)
}

pub fn cmd_m_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    cmd_sweep(cfg, ExperimentKind::MSweep, out)
}

pub fn cmd_epsilon_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    cmd_sweep(cfg, ExperimentKind::EpsilonSweep, out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KappaSummaryRow {
    pub kappa: f64,
    pub n_samples: usize,
    pub skipped: usize,
    pub seed: u64,
    pub mode: &'static str,
    pub beta: Option<f64>,
}

/// κ mode implied by the run's dynamics: softmax for soft Q, max otherwise.
pub fn kappa_mode(run: &RunConfig) -> KappaMode {
    match (run.dynamics, run.beta) {
        (DynamicsKind::SoftQ, Some(b)) => KappaMode::Soft(b),
        _ => KappaMode::Max,
    }
}

/// `kappa.csv` with every sampled pair and `kappa_summary.csv`.
pub fn cmd_kappa_report(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    cfg.validate(ExperimentKind::KappaReport)?;
    let setup = Setup::new(cfg)?;
    let mode = kappa_mode(&cfg.run);
    let report = kappa_estimate(&setup.spec, &setup.mdp, &setup.stationary, cfg.kappa_samples, cfg.run.seed, mode)?;
    fs::create_dir_all(out)?;
    let a = out.join("kappa.csv");
    write_csv(&a, &report.samples, None)?;
    let (mode_name, beta) = match mode {
        KappaMode::Max => ("max", None),
        KappaMode::Soft(b) => ("softmax", Some(b)),
    };
    let b = out.join("kappa_summary.csv");
    let row = KappaSummaryRow {
        kappa: report.kappa,
        n_samples: cfg.kappa_samples,
        skipped: report.skipped,
        seed: cfg.run.seed,
        mode: mode_name,
        beta,
    };
    write_csv(&b, &[row], None)?;
    Ok(ExperimentOutcome { files: vec![a, b], blown_up: false })
}

/// Dispatches to the command for `kind`.
pub fn execute(kind: ExperimentKind, cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    match kind {
        ExperimentKind::Run => cmd_run(cfg, out),
        ExperimentKind::Coupling => cmd_coupling(cfg, out),
        ExperimentKind::AlphaSweep | ExperimentKind::MSweep | ExperimentKind::EpsilonSweep => cmd_sweep(cfg, kind, out),
        ExperimentKind::KappaReport => cmd_kappa_report(cfg, out),
    }
}

/// Reads the ensemble written by [`cmd_run`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParticleEnsemble> {
    Ok(crate::network::read_snapshot(fs::File::open(path)?)?.ensemble)
}
