//! Distances between particle ensembles: exact W2 between equal-size
//! empirical measures, sliced W2, and the coupled sup norm.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{random_unit_vector, ParticleEnsemble};

/// Largest width accepted by the cubic assignment solver.
pub const EXACT_W2_MAX_M: usize = 512;
pub const DEFAULT_PROJECTIONS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceMethod {
    ExactAssignment,
    Sliced,
    SupNorm,
}

impl DistanceMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            DistanceMethod::ExactAssignment => "exact_assignment",
            DistanceMethod::Sliced => "sliced",
            DistanceMethod::SupNorm => "sup_norm",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceReport {
    pub value: f64,
    pub method: DistanceMethod,
    pub m: usize,
    /// Number of projections, sliced only.
    pub projections: Option<usize>,
    pub seed: Option<u64>,
}

fn check_dims(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("dimensions {} and {}", a.dim(), b.dim())));
    }
    Ok(())
}

fn check_same_shape(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<()> {
    check_dims(a, b)?;
    if a.width() != b.width() {
        return Err(Error::ShapeMismatch(format!("widths {} and {}", a.width(), b.width())));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact W2 between the empirical measures of two equal-size ensembles, by
/// minimum-cost perfect matching under squared Euclidean cost.
pub fn w2_exact(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<DistanceReport> {
    check_same_shape(a, b)?;
    let m = a.width();
    if m > EXACT_W2_MAX_M {
        return Err(Error::SolverCap { m, cap: EXACT_W2_MAX_M });
    }
    let cost: Vec<f64> = a.particles().flat_map(|p| b.particles().map(move |q| sq_dist(p, q))).collect();
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("W2 cost matrix".into()));
    }
    let assignment = min_cost_assignment(&cost, m);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i * m + j]).sum();
    Ok(DistanceReport {
        value: (total / m as f64).max(0.0).sqrt(),
        method: DistanceMethod::ExactAssignment,
        m,
        projections: None,
        seed: None,
    })
}

/// Minimum-cost perfect matching on a dense `n x n` cost matrix
/// (shortest augmenting paths with potentials, O(n^3)). Returns the column
/// assigned to each row.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based: row 0 / column 0 are the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[row_of[j] - 1] = j - 1;
    }
    out
}

/// Exact squared W2 between two equal-size point sets on the line.
pub fn w2_squared_1d(xs: &mut [f64], ys: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    xs.iter().zip(ys.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / xs.len() as f64
}

/// Sliced W2: root-mean of squared 1-D W2 along `projections` random unit
/// directions. Projection `l` draws its direction from stream `l` of `seed`.
pub fn w2_sliced(a: &ParticleEnsemble, b: &ParticleEnsemble, projections: usize, seed: u64) -> Result<DistanceReport> {
    check_same_shape(a, b)?;
    if projections == 0 {
        return Err(Error::InvalidParameter("sliced W2 needs at least one projection".into()));
    }
    let d = a.dim();
    let mut xs = vec![0.0; a.width()];
    let mut ys = vec![0.0; b.width()];
    let mut acc = 0.0;
    for l in 0..projections {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(l as u64);
        let dir = random_unit_vector(&mut rng, d);
        for (x, p) in xs.iter_mut().zip(a.particles()) {
            *x = p.iter().zip(&dir).map(|(c, u)| c * u).sum();
        }
        for (y, p) in ys.iter_mut().zip(b.particles()) {
            *y = p.iter().zip(&dir).map(|(c, u)| c * u).sum();
        }
        acc += w2_squared_1d(&mut xs, &mut ys);
    }
    Ok(DistanceReport {
        value: (acc / projections as f64).sqrt(),
        method: DistanceMethod::Sliced,
        m: a.width(),
        projections: Some(projections),
        seed: Some(seed),
    })
}

/// `max_i ||a_i - b_i||` for index-aligned ensembles.
pub fn ensemble_sup_distance(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<DistanceReport> {
    check_same_shape(a, b)?;
    let value = a.particles().zip(b.particles()).map(|(p, q)| sq_dist(p, q).sqrt()).fold(0.0, f64::max);
    Ok(DistanceReport { value, method: DistanceMethod::SupNorm, m: a.width(), projections: None, seed: None })
}

/// W2 between two ensembles: exact when the width permits, sliced otherwise.
pub fn w2_auto(a: &ParticleEnsemble, b: &ParticleEnsemble, seed: u64) -> Result<DistanceReport> {
    if a.width() <= EXACT_W2_MAX_M {
        w2_exact(a, b)
    } else {
        w2_sliced(a, b, DEFAULT_PROJECTIONS, seed)
    }
}
