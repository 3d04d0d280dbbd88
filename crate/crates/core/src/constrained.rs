//! Constrained EnKF analysis.
//!
//! Each member minimizes the Kalman quadratic cost subject to an energy band on the
//! grid-mean energy and a lower bound on `A + Abar`. The problem is posed in whitened
//! coordinates `x = x_b + L z`, `L L^T = P_loc`, where the cost is
//! `J(z) = 1/2 z^T (I + B^T B / r) z + (H x_b - y)^T B z / r` with `B = H L`.
//!
//! Solve path per member:
//! 1. the unconstrained EnKF update, returned unchanged when feasible;
//! 2. otherwise the exact positivity-constrained minimizer (a dual QP over the bound rows);
//! 3. if the energy band is still violated, an augmented-Lagrangian loop on the band with
//!    Newton inner steps that keep the bound rows satisfied exactly.

use std::sync::{Arc, OnceLock};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::ensemble::{self, Ensemble, EnsembleStats, LocalizationSpec};
use crate::error::{Error, Result};
use crate::observation::{Observation, ObservationModel};
use crate::skeleton::{grid_mean_energy, grid_mean_energy_gradient, grid_mean_energy_hessian, ModelParams};

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;
const PENALTY_START: f64 = 1e4;
const PENALTY_MAX: f64 = 1e14;
const ARMIJO: f64 = 1e-4;
const INNER_MAX: usize = 40;
/// Relative distance within which an active bound is placed exactly on the floor.
const ACTIVE_SNAP: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintSpec {
    /// Band on grid-mean energy; infinite endpoints disable that side.
    pub energy_min: f64,
    pub energy_max: f64,
    /// Lower bound on `A + Abar`; `-inf` disables positivity.
    pub a_floor: f64,
    pub solver_tol: f64,
    /// Cap on Newton iterations summed over outer iterations.
    pub max_iters: usize,
}

impl Default for ConstraintSpec {
    fn default() -> Self {
        Self {
            energy_min: 0.015,
            energy_max: 0.08,
            a_floor: 1e-6,
            solver_tol: 1e-8,
            max_iters: 200,
        }
    }
}

impl ConstraintSpec {
    /// No constraints at all.
    pub fn vacuous() -> Self {
        Self {
            energy_min: f64::NEG_INFINITY,
            energy_max: f64::INFINITY,
            a_floor: f64::NEG_INFINITY,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.energy_min < self.energy_max) {
            return Err(Error::InvalidParams(format!(
                "energy band must satisfy min < max, got [{}, {}]",
                self.energy_min, self.energy_max
            )));
        }
        if self.energy_min.is_finite() && !(self.energy_min > 0.0) {
            return Err(Error::InvalidParams("energy_min must be positive".into()));
        }
        if !(self.a_floor > 0.0 || self.a_floor == f64::NEG_INFINITY) {
            return Err(Error::InvalidParams(format!(
                "a_floor must be positive (or -inf to disable), got {}",
                self.a_floor
            )));
        }
        if !(self.solver_tol > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidParams("solver_tol and max_iters must be positive".into()));
        }
        Ok(())
    }

    pub fn enforces_energy(&self) -> bool {
        self.energy_min.is_finite() || self.energy_max.is_finite()
    }

    pub fn enforces_positivity(&self) -> bool {
        self.a_floor.is_finite()
    }

    /// Signed distance of `energy` outside the band (0 inside).
    pub fn energy_violation(&self, energy: f64) -> f64 {
        (energy - self.energy_max).max(self.energy_min - energy).max(0.0)
    }
}

/// Per-cycle factorizations shared by every member's transformed problem.
pub struct CycleFactors {
    /// Lower-triangular `L` with `L L^T = P_loc + jitter I`.
    pub sqrt_cov: DMatrix<f64>,
    /// `H L`: observed rows of `L`, one per observation.
    pub observed_sqrt: DMatrix<f64>,
    /// Rows of `L` for the `A` block, on which the positivity bound acts.
    pub bound_sqrt: DMatrix<f64>,
    /// `I + B^T B / r`.
    pub quadratic_term: DMatrix<f64>,
    pub jitter: f64,
    pub noise_variance: f64,
    observed: Vec<usize>,
    quad_chol: Cholesky<f64, Dyn>,
    /// `Q^{-1} G^T` and `G Q^{-1} G^T` for the bound rows `G`.
    quad_inv_bound: DMatrix<f64>,
    bound_dual: DMatrix<f64>,
    energy_block: OnceLock<DMatrix<f64>>,
}

impl std::fmt::Debug for CycleFactors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CycleFactors")
            .field("dim", &self.sqrt_cov.nrows())
            .field("jitter", &self.jitter)
            .finish()
    }
}

/// Cholesky factor of `p + jitter I`, escalating jitter from `1e-10` to `1e-4` times the
/// mean diagonal.
pub fn jittered_cholesky(p: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let n = p.nrows();
    let scale = p.diagonal().sum() / n as f64;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Covariance(format!("covariance has mean variance {scale}")));
    }
    let mut jitter = JITTER_START * scale;
    while jitter <= JITTER_MAX * scale * (1.0 + 1e-12) {
        let mut m = p.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = m.cholesky() {
            return Ok((chol.l(), jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Covariance(format!(
        "Cholesky failed with jitter up to {:e}",
        JITTER_MAX * scale
    )))
}

impl CycleFactors {
    /// Factors for a localized covariance observed at state indices `observed` with
    /// error variance `noise_variance`. Bound rows are the last quarter of the state.
    pub fn new(p_loc: &DMatrix<f64>, observed: Vec<usize>, noise_variance: f64) -> Result<Self> {
        let dim = p_loc.nrows();
        let (l, jitter) = jittered_cholesky(p_loc)?;
        let observed_sqrt = l.select_rows(observed.iter());
        let nq = dim / 4;
        let bound_sqrt = l.select_rows((3 * nq..4 * nq).collect::<Vec<_>>().iter());
        let mut quadratic_term = observed_sqrt.transpose() * &observed_sqrt / noise_variance;
        for i in 0..dim {
            quadratic_term[(i, i)] += 1.0;
        }
        let quad_chol = quadratic_term
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Covariance("transformed Hessian not positive definite".into()))?;
        let quad_inv_bound = quad_chol.solve(&bound_sqrt.transpose());
        let bound_dual = &bound_sqrt * &quad_inv_bound;
        Ok(Self {
            sqrt_cov: l,
            observed_sqrt,
            bound_sqrt,
            quadratic_term,
            jitter,
            noise_variance,
            observed,
            quad_chol,
            quad_inv_bound,
            bound_dual,
            energy_block: OnceLock::new(),
        })
    }

    /// Factors for the skeleton model: observations of every `A` grid value.
    pub fn for_model(stats: &EnsembleStats, noise_variance: f64) -> Result<Self> {
        let n = stats.mean.len() / 4;
        Self::new(&stats.localized_covariance, (3 * n..4 * n).collect(), noise_variance)
    }

    pub fn dim(&self) -> usize {
        self.sqrt_cov.nrows()
    }

    /// `L^T D L` for the constant `(K, R, Q)` part `D` of the energy Hessian.
    fn energy_block(&self, params: &ModelParams) -> &DMatrix<f64> {
        self.energy_block.get_or_init(|| {
            let dim = self.dim();
            let n = dim / 4;
            let x0 = vec![0.0; dim];
            let (block, _) = grid_mean_energy_hessian(&x0, params);
            let l = &self.sqrt_cov;
            let mut dl = DMatrix::zeros(dim, dim);
            for b in 0..3 {
                for j in 0..n {
                    for (c, coef) in block[b].iter().enumerate() {
                        let src = l.row(c * n + j) * *coef;
                        let mut row = dl.row_mut(b * n + j);
                        row += src;
                    }
                }
            }
            l.transpose() * dl
        })
    }
}

/// Quadratic cost of one member in whitened coordinates.
#[derive(Debug, Clone)]
pub struct TransformedProblem {
    pub factors: Arc<CycleFactors>,
    pub background: DVector<f64>,
    /// `y - H x_b - offset` for this member's perturbed observation.
    pub innovation: DVector<f64>,
    /// `-B^T innovation / r`.
    pub linear_term: DVector<f64>,
}

pub fn build_cost(
    member: &DVector<f64>,
    factors: &Arc<CycleFactors>,
    perturbed_obs: &DVector<f64>,
    offset: f64,
) -> TransformedProblem {
    let predicted = DVector::from_iterator(
        factors.observed.len(),
        factors.observed.iter().map(|&k| member[k] + offset),
    );
    let innovation = perturbed_obs - predicted;
    let linear_term = -(factors.observed_sqrt.transpose() * &innovation) / factors.noise_variance;
    TransformedProblem {
        factors: Arc::clone(factors),
        background: member.clone(),
        innovation,
        linear_term,
    }
}

impl TransformedProblem {
    pub fn cost(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.factors.quadratic_term * z)) + self.linear_term.dot(z)
    }

    pub fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.factors.quadratic_term * z + &self.linear_term
    }

    pub fn reconstruct(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.background + &self.factors.sqrt_cov * z
    }

    pub fn unconstrained_minimizer(&self) -> DVector<f64> {
        self.factors.quad_chol.solve(&(-&self.linear_term))
    }
}

/// How a member's analysis was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolvePath {
    Unconstrained,
    BoundsOnly,
    EnergyBand,
}

#[derive(Debug, Clone)]
pub struct MemberSolution {
    pub state: DVector<f64>,
    pub path: SolvePath,
    pub iterations: usize,
    pub energy: Option<f64>,
    /// Multipliers of the upper and lower energy bounds.
    pub energy_multipliers: (f64, f64),
    pub bound_multipliers: DVector<f64>,
    /// Stationarity residual relative to the cost-gradient scale.
    pub kkt_residual: f64,
    /// Largest `multiplier * slack` product over all constraints.
    pub complementarity: f64,
    /// Augmented objective after each accepted inner step, tagged with the outer iteration.
    pub objective_trace: Vec<(usize, f64)>,
}

impl MemberSolution {
    fn positivity_ok(x: &DVector<f64>, lb: f64) -> bool {
        let n = x.len() / 4;
        x.rows(3 * n, n).iter().all(|&a| a >= lb)
    }
}

/// Minimizes `1/2 v^T M v - b^T v` over `v >= 0` (`M` positive definite) with a
/// Lawson-Hanson style active-set method.
pub fn nonnegative_qp(m: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = b.len();
    let mut v = DVector::zeros(n);
    let mut free = vec![false; n];
    let tol = 1e-13 * b.amax().max(f64::MIN_POSITIVE);
    for _ in 0..3 * n + 10 {
        let w = b - m * &v;
        let candidate = (0..n).filter(|&i| !free[i]).max_by(|&i, &j| w[i].total_cmp(&w[j]));
        match candidate {
            Some(i) if w[i] > tol => free[i] = true,
            _ => break,
        }
        for _ in 0..n + 1 {
            let idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
            let sub = m.select_rows(idx.iter()).select_columns(idx.iter());
            let rhs = DVector::from_iterator(idx.len(), idx.iter().map(|&i| b[i]));
            let sol = match sub.clone().cholesky() {
                Some(c) => c.solve(&rhs),
                None => sub.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(idx.len())),
            };
            if sol.iter().all(|&s| s > 0.0) {
                for (k, &i) in idx.iter().enumerate() {
                    v[i] = sol[k];
                }
                break;
            }
            // Step towards the subproblem solution until the first variable hits zero.
            let mut alpha = 1.0f64;
            let mut blocking = Vec::new();
            for (k, &i) in idx.iter().enumerate() {
                if sol[k] <= 0.0 {
                    let t = v[i] / (v[i] - sol[k]);
                    if t < alpha {
                        alpha = t;
                        blocking.clear();
                    }
                    if t <= alpha {
                        blocking.push(i);
                    }
                }
            }
            for (k, &i) in idx.iter().enumerate() {
                v[i] += alpha * (sol[k] - v[i]);
                if v[i] <= 0.0 {
                    v[i] = 0.0;
                    free[i] = false;
                }
            }
            for i in blocking {
                v[i] = 0.0;
                free[i] = false;
            }
        }
    }
    v
}

/// Energy-band data evaluated at one whitened point.
struct EnergyEval {
    value: f64,
    grad_z: DVector<f64>,
}

fn energy_at(problem: &TransformedProblem, params: &ModelParams, x: &DVector<f64>) -> Option<EnergyEval> {
    let value = grid_mean_energy(x.as_slice(), params)?;
    let gx = DVector::from_vec(grid_mean_energy_gradient(x.as_slice(), params));
    let grad_z = problem.factors.sqrt_cov.tr_mul(&gx);
    Some(EnergyEval { value, grad_z })
}

/// Augmented-Lagrangian penalty weights `max(0, mu + rho c)` for both band sides.
fn band_weights(c: &ConstraintSpec, e: f64, mu: (f64, f64), rho: f64) -> (f64, f64) {
    let up = if c.energy_max.is_finite() {
        (mu.0 + rho * (e - c.energy_max)).max(0.0)
    } else {
        0.0
    };
    let lo = if c.energy_min.is_finite() {
        (mu.1 + rho * (c.energy_min - e)).max(0.0)
    } else {
        0.0
    };
    (up, lo)
}

fn augmented_objective(
    problem: &TransformedProblem,
    c: &ConstraintSpec,
    z: &DVector<f64>,
    e: f64,
    mu: (f64, f64),
    rho: f64,
) -> f64 {
    let (su, sl) = band_weights(c, e, mu, rho);
    problem.cost(z) + (su * su - mu.0 * mu.0) / (2.0 * rho) + (sl * sl - mu.1 * mu.1) / (2.0 * rho)
}

/// Newton step on the bound rows: minimizes `1/2 p^T H p + g^T p` subject to
/// `G (z + p) >= rhs`. Returns the step and the bound multipliers.
fn bounded_newton_step(
    hess: DMatrix<f64>,
    g: &DVector<f64>,
    bound: &DMatrix<f64>,
    slack: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let chol = hess
        .cholesky()
        .ok_or_else(|| Error::Covariance("augmented Hessian not positive definite".into()))?;
    let p0 = chol.solve(&(-g));
    if bound.nrows() == 0 {
        return Ok((p0, DVector::zeros(0)));
    }
    let hinv_gt = chol.solve(&bound.transpose());
    let m = bound * &hinv_gt;
    // Violation of the bound rows after the free Newton step.
    let b = -(slack + bound * &p0);
    let nu = nonnegative_qp(&m, &b);
    Ok((p0 + hinv_gt * &nu, nu))
}

/// Solves one member's problem. `unconstrained` is the member's EnKF update; when given
/// and feasible it is returned unchanged.
pub fn constrained_analysis_member(
    problem: &TransformedProblem,
    constraints: &ConstraintSpec,
    params: &ModelParams,
    unconstrained: Option<&DVector<f64>>,
) -> Result<MemberSolution> {
    let f = &problem.factors;
    let dim = f.dim();
    let n = dim / 4;
    let positivity = constraints.enforces_positivity();
    let lb = if positivity {
        params.activity_floor_anomaly(constraints.a_floor)
    } else {
        f64::NEG_INFINITY
    };
    let energy_ok = |x: &DVector<f64>| -> (bool, Option<f64>) {
        if !constraints.enforces_energy() {
            return (true, grid_mean_energy(x.as_slice(), params));
        }
        match grid_mean_energy(x.as_slice(), params) {
            Some(e) => (constraints.energy_violation(e) == 0.0, Some(e)),
            None => (false, None),
        }
    };
    let grad_scale = problem.linear_term.amax().max(1.0);
    let nb = if positivity { n } else { 0 };

    if let Some(xu) = unconstrained {
        let (e_ok, energy) = energy_ok(xu);
        if e_ok && (!positivity || MemberSolution::positivity_ok(xu, lb)) {
            return Ok(MemberSolution {
                state: xu.clone(),
                path: SolvePath::Unconstrained,
                iterations: 0,
                energy,
                energy_multipliers: (0.0, 0.0),
                bound_multipliers: DVector::zeros(nb),
                kkt_residual: 0.0,
                complementarity: 0.0,
                objective_trace: Vec::new(),
            });
        }
    }

    // Bound rows G z >= rhs with rhs = lb - x_b[A].
    let rhs = if positivity {
        DVector::from_iterator(n, (0..n).map(|j| lb - problem.background[3 * n + j]))
    } else {
        DVector::zeros(0)
    };
    let bound = if positivity {
        f.bound_sqrt.clone()
    } else {
        DMatrix::zeros(0, dim)
    };

    let mut z = problem.unconstrained_minimizer();
    let mut nu = DVector::zeros(nb);
    if positivity {
        let b = &rhs - &bound * &z;
        nu = nonnegative_qp(&f.bound_dual, &b);
        z += &f.quad_inv_bound * &nu;
    }
    let x = problem.reconstruct(&z);
    let (e_ok, energy) = energy_ok(&x);
    if e_ok {
        let stationarity = problem.gradient(&z) - bound.tr_mul(&nu);
        let slack = &bound * &z - &rhs;
        return Ok(finish(
            problem,
            x,
            lb,
            SolvePath::BoundsOnly,
            0,
            energy,
            (0.0, 0.0),
            nu.clone(),
            stationarity.amax() / grad_scale,
            complementarity(&nu, &slack, (0.0, 0.0), energy, constraints),
            Vec::new(),
        ));
    }
    if energy.is_none() {
        // Only reachable with positivity disabled and a non-positive activity.
        return Err(Error::ConstrainedSolve {
            iterations: 0,
            energy_violation: f64::INFINITY,
            bound_violation: x
                .rows(3 * n, n)
                .iter()
                .map(|a| (-(a + params.a_bar)).max(0.0))
                .fold(0.0, f64::max),
            best: x.as_slice().to_vec(),
        });
    }

    // Augmented-Lagrangian loop on the energy band.
    let energy_block = f.energy_block(params).clone();
    let mut x = problem.reconstruct(&z);
    let mut ev = energy_at(problem, params, &x).expect("activity positive on feasible bounds");
    // Multiplier of the linearized band constraint without bounds:
    // the step -mu Q^{-1} grad E removes the violation to first order.
    let violation0 = constraints.energy_violation(ev.value);
    let curvature = ev.grad_z.dot(&f.quad_chol.solve(&ev.grad_z)).max(f64::MIN_POSITIVE);
    let mu0 = violation0 / curvature;
    let mut mu = if ev.value > constraints.energy_max {
        (mu0, 0.0)
    } else {
        (0.0, mu0)
    };
    let mut rho = (10.0 * mu0 / violation0).clamp(PENALTY_START, PENALTY_MAX);
    let mut iterations = 0;
    let mut trace = Vec::new();
    let mut prev_violation = f64::INFINITY;
    let mut kkt = f64::INFINITY;
    for outer in 0.. {
        // Inner Newton iterations for fixed (mu, rho).
        let mut phi = augmented_objective(problem, constraints, &z, ev.value, mu, rho);
        trace.push((outer, phi));
        for _ in 0..INNER_MAX {
            if iterations >= constraints.max_iters {
                break;
            }
            iterations += 1;
            let (su, sl) = band_weights(constraints, ev.value, mu, rho);
            let coef = su - sl;
            let g = problem.gradient(&z) + &ev.grad_z * coef;
            let mut hess = f.quadratic_term.clone();
            if su > 0.0 || sl > 0.0 {
                hess.ger(rho, &ev.grad_z, &ev.grad_z, 1.0);
            }
            if su > 0.0 {
                // Curvature of the convex energy; the lower side is left Gauss-Newton.
                let (_, diag_a) = grid_mean_energy_hessian(x.as_slice(), params);
                let mut scaled = f.bound_sqrt.clone();
                for (j, mut row) in scaled.row_iter_mut().enumerate() {
                    row *= diag_a[j];
                }
                hess += (&energy_block + f.bound_sqrt.tr_mul(&scaled)) * su;
            }
            let slack = &bound * &z - &rhs;
            let (p, nu_new) = bounded_newton_step(hess.clone(), &g, &bound, &slack)?;
            nu = nu_new;
            kkt = (&hess * &p).amax() / grad_scale;
            let slope = g.dot(&p);
            // Newton decrement below round-off of the objective.
            if -slope <= 1e-13 * (1.0 + phi.abs()) || p.amax() <= 1e-14 * (1.0 + z.amax()) {
                break;
            }
            let mut alpha = 1.0;
            let mut accepted = None;
            while alpha > 1e-12 {
                let zt = &z + &p * alpha;
                let xt = problem.reconstruct(&zt);
                if let Some(e) = grid_mean_energy(xt.as_slice(), params) {
                    let phit = augmented_objective(problem, constraints, &zt, e, mu, rho);
                    if phit <= phi + ARMIJO * alpha * slope {
                        accepted = Some((zt, xt, phit));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            let Some((zt, xt, phit)) = accepted else { break };
            let decrease = phi - phit;
            z = zt;
            x = xt;
            phi = phit;
            ev = energy_at(problem, params, &x).expect("activity positive on feasible bounds");
            trace.push((outer, phi));
            if decrease <= 1e-15 * (1.0 + phi.abs()) {
                break;
            }
        }
        let violation = constraints.energy_violation(ev.value);
        let (su, sl) = band_weights(constraints, ev.value, mu, rho);
        mu = (su, sl);
        let slackness = complementarity(&DVector::zeros(0), &DVector::zeros(0), mu, Some(ev.value), constraints);
        if violation <= constraints.solver_tol
            && slackness <= constraints.solver_tol
            && kkt <= constraints.solver_tol.sqrt()
        {
            break;
        }
        if iterations >= constraints.max_iters {
            let bound_violation = if positivity {
                (&rhs - &bound * &z).iter().fold(0.0f64, |m, &v| m.max(v))
            } else {
                0.0
            };
            return Err(Error::ConstrainedSolve {
                iterations,
                energy_violation: violation,
                bound_violation,
                best: x.as_slice().to_vec(),
            });
        }
        if violation > 0.25 * prev_violation && rho < PENALTY_MAX {
            rho *= 10.0;
        }
        prev_violation = violation;
    }
    let slack = &bound * &z - &rhs;
    let comp = complementarity(&nu, &slack, mu, Some(ev.value), constraints);
    Ok(finish(
        problem,
        x,
        lb,
        SolvePath::EnergyBand,
        iterations,
        Some(ev.value),
        mu,
        nu,
        kkt,
        comp,
        trace,
    ))
}

fn complementarity(
    nu: &DVector<f64>,
    slack: &DVector<f64>,
    mu: (f64, f64),
    energy: Option<f64>,
    c: &ConstraintSpec,
) -> f64 {
    let mut worst = nu
        .iter()
        .zip(slack.iter())
        .map(|(a, s)| (a * s).abs())
        .fold(0.0, f64::max);
    if let Some(e) = energy {
        if c.energy_max.is_finite() {
            worst = worst.max((mu.0 * (c.energy_max - e)).abs());
        }
        if c.energy_min.is_finite() {
            worst = worst.max((mu.1 * (e - c.energy_min)).abs());
        }
    }
    worst
}

#[allow(clippy::too_many_arguments)]
fn finish(
    problem: &TransformedProblem,
    mut x: DVector<f64>,
    lb: f64,
    path: SolvePath,
    iterations: usize,
    energy: Option<f64>,
    energy_multipliers: (f64, f64),
    bound_multipliers: DVector<f64>,
    kkt_residual: f64,
    complementarity: f64,
    objective_trace: Vec<(usize, f64)>,
) -> MemberSolution {
    let n = problem.factors.dim() / 4;
    // Round-off below the floor is clipped, and active bounds are snapped onto it.
    let active = |j: usize| bound_multipliers.len() == n && bound_multipliers[j] > 0.0;
    for (j, a) in x.rows_mut(3 * n, n).iter_mut().enumerate() {
        if *a < lb || (active(j) && *a - lb <= ACTIVE_SNAP * lb.abs().max(1.0)) {
            *a = lb;
        }
    }
    MemberSolution {
        state: x,
        path,
        iterations,
        energy,
        energy_multipliers,
        bound_multipliers,
        kkt_residual,
        complementarity,
        objective_trace,
    }
}

#[derive(Debug, Clone)]
pub struct ConstrainedAnalysis {
    pub ensemble: Ensemble,
    pub solutions: Vec<MemberSolution>,
}

/// Constrained analysis of every member with its own perturbed observation (one column
/// of `perturbed` per member).
pub fn constrained_analysis(
    ensemble: &Ensemble,
    obs: &Observation,
    obs_model: &ObservationModel,
    loc: &LocalizationSpec,
    constraints: &ConstraintSpec,
    params: &ModelParams,
    perturbed: &DMatrix<f64>,
) -> Result<ConstrainedAnalysis> {
    constraints.validate()?;
    ensemble::check_observation(ensemble, obs)?;
    ensemble::check_perturbed(ensemble, perturbed)?;
    let stats = ensemble::ensemble_stats(ensemble, loc);
    let gain = ensemble::enkf_gain(&stats, obs_model.noise_variance)?;
    let h = ensemble::observation_matrix(ensemble.n_grid());
    let xb = ensemble.matrix();
    let xu = ensemble::enkf_update(&xb, &gain, &h, params.a_bar, perturbed);

    let factors: OnceLock<Result<Arc<CycleFactors>>> = OnceLock::new();
    let get_factors = || {
        factors
            .get_or_init(|| CycleFactors::for_model(&stats, obs_model.noise_variance).map(Arc::new))
            .clone()
    };
    let results: Vec<Result<MemberSolution>> = (0..ensemble.len())
        .into_par_iter()
        .map(|i| {
            let xu_i = xu.column(i).into_owned();
            if let Some(quick) = unconstrained_if_feasible(&xu_i, constraints, params) {
                return Ok(quick);
            }
            let f = get_factors()?;
            let problem = build_cost(
                &xb.column(i).into_owned(),
                &f,
                &perturbed.column(i).into_owned(),
                params.a_bar,
            );
            constrained_analysis_member(&problem, constraints, params, Some(&xu_i))
        })
        .collect();
    let mut solutions = Vec::with_capacity(results.len());
    let mut failed = Vec::new();
    let mut first = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => solutions.push(s),
            Err(e) => {
                failed.push(i);
                first.get_or_insert(e);
            }
        }
    }
    if let Some(first) = first {
        return Err(Error::EnsembleSolve {
            members: failed,
            first: Box::new(first),
        });
    }
    let cols: Vec<DVector<f64>> = solutions.iter().map(|s| s.state.clone()).collect();
    let ensemble = Ensemble::from_matrix(&DMatrix::from_columns(&cols), ensemble.time)?;
    Ok(ConstrainedAnalysis { ensemble, solutions })
}

/// Feasibility shortcut that avoids building the transformed problem.
fn unconstrained_if_feasible(xu: &DVector<f64>, c: &ConstraintSpec, params: &ModelParams) -> Option<MemberSolution> {
    let n = xu.len() / 4;
    let positivity = c.enforces_positivity();
    if positivity {
        let lb = params.activity_floor_anomaly(c.a_floor);
        if !MemberSolution::positivity_ok(xu, lb) {
            return None;
        }
    }
    let energy = grid_mean_energy(xu.as_slice(), params);
    if c.enforces_energy() && !energy.is_some_and(|e| c.energy_violation(e) == 0.0) {
        return None;
    }
    Some(MemberSolution {
        state: xu.clone(),
        path: SolvePath::Unconstrained,
        iterations: 0,
        energy,
        energy_multipliers: (0.0, 0.0),
        bound_multipliers: DVector::zeros(if positivity { n } else { 0 }),
        kkt_residual: 0.0,
        complementarity: 0.0,
        objective_trace: Vec::new(),
    })
}
