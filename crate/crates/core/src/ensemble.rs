//! Unconstrained ensemble filters on the skeleton model: perturbed-observation EnKF and
//! serial EAKF, both with Gaspari-Cohn localization on the periodic grid.
//!
//! States are handled as stacked `(K, R, Q, A)` columns; an ensemble matrix has one
//! member per column.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::observation::{Observation, ObservationModel};
use crate::rng::StreamRng;
use crate::skeleton::{ModelState, SkeletonModel};

/// Added to the innovation covariance before inversion.
pub const INNOVATION_JITTER: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<ModelState>,
    pub time: f64,
}

impl Ensemble {
    pub fn new(members: Vec<ModelState>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::InvalidParams(format!(
                "ensemble needs at least 2 members, got {}",
                members.len()
            )));
        }
        let time = members[0].time;
        let n = members[0].n_grid();
        for m in &members {
            if m.n_grid() != n {
                return Err(Error::ShapeMismatch {
                    what: "ensemble member grid",
                    expected: n,
                    got: m.n_grid(),
                });
            }
            if m.time != time {
                return Err(Error::InvalidParams(format!(
                    "ensemble members disagree on time ({} vs {time})",
                    m.time
                )));
            }
        }
        Ok(Self { members, time })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn n_grid(&self) -> usize {
        self.members[0].n_grid()
    }

    /// State-by-member matrix of stacked member vectors.
    pub fn matrix(&self) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = self.members.iter().map(|m| DVector::from_vec(m.stacked())).collect();
        DMatrix::from_columns(&cols)
    }

    /// Rebuilds an ensemble from a state-by-member matrix, checking finiteness.
    pub fn from_matrix(x: &DMatrix<f64>, time: f64) -> Result<Self> {
        let mut members = Vec::with_capacity(x.ncols());
        for (i, col) in x.column_iter().enumerate() {
            if let Some(index) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::FilterDivergence { time, member: i, index });
            }
            members.push(ModelState::from_stacked(col.as_slice(), time)?);
        }
        Self::new(members)
    }

    pub fn mean_state(&self) -> ModelState {
        let mean = column_mean(&self.matrix());
        ModelState::from_stacked(mean.as_slice(), self.time).expect("stacked length")
    }

    /// Smallest `A + Abar` over members and grid points, with its location.
    pub fn min_activity(&self, a_bar: f64) -> (f64, usize, usize) {
        let mut best = (f64::INFINITY, 0, 0);
        for (i, m) in self.members.iter().enumerate() {
            for (j, a) in m.a_field.iter().enumerate() {
                if a + a_bar < best.0 {
                    best = (a + a_bar, i, j);
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationSpec {
    /// Half-width `c` in grid points; the taper vanishes beyond `2c`.
    pub cutoff: f64,
}

impl Default for LocalizationSpec {
    fn default() -> Self {
        Self { cutoff: 6.0 }
    }
}

impl LocalizationSpec {
    pub fn new(cutoff: f64) -> Result<Self> {
        if !(cutoff > 0.0) {
            return Err(Error::InvalidParams(format!(
                "localization cutoff must be positive, got {cutoff}"
            )));
        }
        Ok(Self { cutoff })
    }

    /// Grid offsets with nonzero taper, in increasing order.
    pub fn support_offsets(&self, n_grid: usize) -> Vec<i64> {
        let n = n_grid as i64;
        (-(n / 2) + 1..=n / 2)
            .filter(|&o| gaspari_cohn(o.unsigned_abs() as f64, self.cutoff) > 0.0)
            .collect()
    }
}

/// Fifth-order piecewise-rational compactly supported correlation function.
pub fn gaspari_cohn(distance: f64, cutoff: f64) -> f64 {
    let r = distance.abs() / cutoff;
    if r <= 1.0 {
        ((((-0.25 * r + 0.5) * r + 0.625) * r - 5.0 / 3.0) * r) * r + 1.0
    } else if r < 2.0 {
        ((((r / 12.0 - 0.5) * r + 0.625) * r + 5.0 / 3.0) * r - 5.0) * r + 4.0 - 2.0 / (3.0 * r)
    } else {
        0.0
    }
}

/// Shorter arc between grid points `i` and `j` on a ring of `n` points.
pub fn periodic_distance(i: usize, j: usize, n: usize) -> f64 {
    let d = i.abs_diff(j);
    d.min(n - d) as f64
}

/// `n_grid x n_grid` taper between grid points.
pub fn spatial_taper(n_grid: usize, loc: &LocalizationSpec) -> DMatrix<f64> {
    DMatrix::from_fn(n_grid, n_grid, |i, j| {
        gaspari_cohn(periodic_distance(i, j, n_grid), loc.cutoff)
    })
}

/// Taper on stacked states: the spatial taper repeated over every pair of variable blocks.
pub fn state_taper(n_grid: usize, loc: &LocalizationSpec) -> DMatrix<f64> {
    let t = spatial_taper(n_grid, loc);
    DMatrix::from_fn(4 * n_grid, 4 * n_grid, |i, j| t[(i % n_grid, j % n_grid)])
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub localized_covariance: DMatrix<f64>,
}

/// Sample mean and unbiased covariance of the columns of `x`.
pub fn sample_mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.ncols();
    let mean = column_mean(x);
    let mut anomalies = x.clone();
    for mut col in anomalies.column_iter_mut() {
        col -= &mean;
    }
    let mut cov = &anomalies * anomalies.transpose() / (n as f64 - 1.0);
    // Exact symmetry for downstream Cholesky factorizations.
    for i in 0..cov.nrows() {
        for j in 0..i {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

/// Mean of the columns; sums then divides so identical columns give their value exactly.
pub fn column_mean(x: &DMatrix<f64>) -> DVector<f64> {
    let mut sum = DVector::zeros(x.nrows());
    for col in x.column_iter() {
        sum += col;
    }
    sum / x.ncols() as f64
}

pub fn ensemble_stats(ensemble: &Ensemble, loc: &LocalizationSpec) -> EnsembleStats {
    let (mean, covariance) = sample_mean_cov(&ensemble.matrix());
    let taper = state_taper(ensemble.n_grid(), loc);
    let localized_covariance = covariance.component_mul(&taper);
    EnsembleStats {
        mean,
        covariance,
        localized_covariance,
    }
}

/// Advances every member `steps` model steps, each with its own noise stream.
pub fn forecast(ensemble: &Ensemble, model: &SkeletonModel, steps: usize, rngs: &mut [StreamRng]) -> Result<Ensemble> {
    if rngs.len() != ensemble.len() {
        return Err(Error::ShapeMismatch {
            what: "forecast noise streams",
            expected: ensemble.len(),
            got: rngs.len(),
        });
    }
    let n = ensemble.n_grid();
    let members = ensemble
        .members
        .par_iter()
        .zip(rngs.par_iter_mut())
        .map(|(member, rng)| {
            let mut state = member.clone();
            let mut noise = vec![0.0; n];
            for _ in 0..steps {
                for v in noise.iter_mut() {
                    *v = StandardNormal.sample(rng);
                }
                state = model.step(&state, &noise)?;
            }
            Ok(state)
        })
        .collect::<Result<Vec<_>>>()?;
    let time = members[0].time;
    Ok(Ensemble { members, time })
}

/// Multiplicative inflation of anomalies about the ensemble mean.
pub fn inflate(ensemble: &Ensemble, factor: f64) -> Result<Ensemble> {
    if factor == 1.0 {
        return Ok(ensemble.clone());
    }
    let mut x = ensemble.matrix();
    let mean = column_mean(&x);
    for mut col in x.column_iter_mut() {
        let anomaly = &col - &mean;
        col.copy_from(&(&mean + anomaly * factor));
    }
    Ensemble::from_matrix(&x, ensemble.time)
}

/// `K = P H^T (H P H^T + R + jitter I)^{-1}`.
pub fn kalman_gain(p: &DMatrix<f64>, h: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let pht = p * h.transpose();
    let mut s = h * &pht + r;
    for i in 0..s.nrows() {
        s[(i, i)] += INNOVATION_JITTER;
    }
    let chol = s
        .cholesky()
        .ok_or_else(|| Error::Covariance("innovation covariance is not positive definite".into()))?;
    // K^T = S^{-1} (P H^T)^T, with S symmetric.
    Ok(chol.solve(&pht.transpose()).transpose())
}

/// Perturbed-observation update of each column: `x_i += K (y_i - H x_i - offset)`.
pub fn enkf_update(
    x: &DMatrix<f64>,
    gain: &DMatrix<f64>,
    h: &DMatrix<f64>,
    offset: f64,
    perturbed: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut innovations = perturbed - h * x;
    innovations.add_scalar_mut(-offset);
    x + gain * innovations
}

/// Serial EAKF update of the columns of `x` for one scalar observation `y = h.x + offset`
/// with error variance `r`. `weights` tapers the regression onto each state element.
pub fn eakf_scalar_update(
    x: &mut DMatrix<f64>,
    h: &DVector<f64>,
    offset: f64,
    y: f64,
    r: f64,
    weights: Option<&[f64]>,
) {
    let n = x.ncols();
    let prior: Vec<f64> = x.column_iter().map(|c| c.dot(h) + offset).collect();
    let mean = prior.iter().sum::<f64>() / n as f64;
    let var = prior.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    if !(var > 0.0) {
        return;
    }
    let post_var = 1.0 / (1.0 / var + 1.0 / r);
    let post_mean = post_var * (mean / var + y / r);
    let shrink = (post_var / var).sqrt();
    let increments: Vec<f64> = prior.iter().map(|v| post_mean + shrink * (v - mean) - v).collect();
    for k in 0..x.nrows() {
        let w = weights.map_or(1.0, |w| w[k]);
        if w == 0.0 {
            continue;
        }
        let row_mean = x.row(k).sum() / n as f64;
        let cov = x
            .row(k)
            .iter()
            .zip(&prior)
            .map(|(xk, yk)| (xk - row_mean) * (yk - mean))
            .sum::<f64>()
            / (n as f64 - 1.0);
        let beta = w * cov / var;
        for (i, dy) in increments.iter().enumerate() {
            x[(k, i)] += beta * dy;
        }
    }
}

/// Serial EAKF analysis of every grid observation of `A + Abar`, in grid order.
pub fn eakf_analysis(
    ensemble: &Ensemble,
    obs: &Observation,
    obs_model: &ObservationModel,
    loc: &LocalizationSpec,
    a_bar: f64,
) -> Result<Ensemble> {
    let n = ensemble.n_grid();
    check_observation(ensemble, obs)?;
    let mut x = ensemble.matrix();
    let taper = spatial_taper(n, loc);
    let mut h = DVector::zeros(4 * n);
    let mut weights = vec![0.0; 4 * n];
    for j in 0..n {
        h.fill(0.0);
        h[3 * n + j] = 1.0;
        for (k, w) in weights.iter_mut().enumerate() {
            *w = taper[(k % n, j)];
        }
        eakf_scalar_update(
            &mut x,
            &h,
            a_bar,
            obs.values[j],
            obs_model.noise_variance,
            Some(&weights),
        );
    }
    Ensemble::from_matrix(&x, ensemble.time)
}

/// Observation operator on stacked states as a matrix: selects the `A` block.
pub fn observation_matrix(n_grid: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n_grid, 4 * n_grid, |i, j| if j == 3 * n_grid + i { 1.0 } else { 0.0 })
}

/// One perturbed copy `y + sqrt(r) xi` of the observation per member stream.
pub fn perturbed_observations(obs: &Observation, noise_variance: f64, rngs: &mut [StreamRng]) -> DMatrix<f64> {
    let sd = noise_variance.sqrt();
    let cols: Vec<DVector<f64>> = rngs
        .iter_mut()
        .map(|rng| {
            DVector::from_iterator(
                obs.values.len(),
                obs.values.iter().map(|&v| {
                    let xi: f64 = StandardNormal.sample(rng);
                    v + sd * xi
                }),
            )
        })
        .collect();
    DMatrix::from_columns(&cols)
}

/// Gain of the localized perturbed-observation EnKF for grid observations of `A`.
pub fn enkf_gain(stats: &EnsembleStats, noise_variance: f64) -> Result<DMatrix<f64>> {
    let n = stats.mean.len() / 4;
    let h = observation_matrix(n);
    let r = DMatrix::from_diagonal_element(n, n, noise_variance);
    kalman_gain(&stats.localized_covariance, &h, &r)
}

/// Perturbed-observation EnKF analysis with caller-supplied perturbed observations
/// (one column per member).
pub fn enkf_analysis(
    ensemble: &Ensemble,
    obs: &Observation,
    obs_model: &ObservationModel,
    loc: &LocalizationSpec,
    a_bar: f64,
    perturbed: &DMatrix<f64>,
) -> Result<Ensemble> {
    check_observation(ensemble, obs)?;
    check_perturbed(ensemble, perturbed)?;
    let stats = ensemble_stats(ensemble, loc);
    let gain = enkf_gain(&stats, obs_model.noise_variance)?;
    let h = observation_matrix(ensemble.n_grid());
    let xa = enkf_update(&ensemble.matrix(), &gain, &h, a_bar, perturbed);
    Ensemble::from_matrix(&xa, ensemble.time)
}

pub(crate) fn check_observation(ensemble: &Ensemble, obs: &Observation) -> Result<()> {
    if obs.values.len() != ensemble.n_grid() {
        return Err(Error::ShapeMismatch {
            what: "observation",
            expected: ensemble.n_grid(),
            got: obs.values.len(),
        });
    }
    if (obs.time - ensemble.time).abs() > 1e-9 * (1.0 + ensemble.time.abs()) {
        return Err(Error::InvalidParams(format!(
            "observation time {} does not match ensemble time {}",
            obs.time, ensemble.time
        )));
    }
    Ok(())
}

pub(crate) fn check_perturbed(ensemble: &Ensemble, perturbed: &DMatrix<f64>) -> Result<()> {
    if perturbed.ncols() != ensemble.len() || perturbed.nrows() != ensemble.n_grid() {
        return Err(Error::ShapeMismatch {
            what: "perturbed observations (rows x members)",
            expected: ensemble.n_grid() * ensemble.len(),
            got: perturbed.nrows() * perturbed.ncols(),
        });
    }
    Ok(())
}
