//! Meridionally truncated stochastic skeleton model of the MJO.
//!
//! Four prognostic fields live on a periodic equatorial belt of `n_grid` points:
//! Kelvin wave `K`, Rossby wave `R`, moisture anomaly `Q` and the convective-activity
//! anomaly `A` (the full activity is `A + Abar`).
//!
//! ```text
//! K_t + K_x       = (S_theta - Hbar a) / 2
//! R_t - R_x / 3   = (S_theta - Hbar a) / 3
//! Q_t + Qt (K_x - R_x / 3) = (Qt / 6 - 1) (Hbar a - S_q)
//! A_t             = Gamma a Q + sqrt(Gamma |Q| a) dW,      a = A + Abar
//! ```
//!
//! One step is a first-order splitting: exact Fourier advection of `K` (speed +1) and
//! `R` (speed -1/3), an explicit Euler update of the forcing and coupling terms, then
//! Euler-Maruyama for the activity with a positivity clamp.

use std::f64::consts::PI;

use nalgebra::{Matrix4, Vector4};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::spectral::Spectral;

/// Lower bound on `A + Abar` applied by the integrator.
pub const ACTIVITY_FLOOR: f64 = 1e-6;

/// Planetary wavenumbers kept by the MJO diagnostic.
pub const MJO_WAVENUMBERS: [usize; 3] = [1, 2, 3];

pub const HOMOGENEOUS_SOURCE: f64 = 0.022;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub gamma: f64,
    pub q_tilde: f64,
    pub h_bar: f64,
    pub a_bar: f64,
    pub s_theta: Vec<f64>,
    pub s_q: Vec<f64>,
    pub domain_length: f64,
    pub n_grid: usize,
    pub dt: f64,
}

impl ModelParams {
    /// Spatially homogeneous configuration: 64 points on L = 8/3, dt = 0.001,
    /// Gamma = 1.66, Qt = 0.9, Hbar = 0.22, Abar = 0.1, S = Abar Hbar = 0.022.
    pub fn homogeneous() -> Self {
        let n_grid = 64;
        let (h_bar, a_bar) = (0.22, 0.1);
        // Balanced exactly in floating point so the rest state is a fixed point.
        let source = a_bar * h_bar;
        Self {
            gamma: 1.66,
            q_tilde: 0.9,
            h_bar,
            a_bar,
            s_theta: vec![source; n_grid],
            s_q: vec![source; n_grid],
            domain_length: 8.0 / 3.0,
            n_grid,
            dt: 0.001,
        }
    }

    /// Same as [`ModelParams::homogeneous`] with warm-pool sources.
    pub fn warm_pool() -> Self {
        let mut p = Self::homogeneous();
        let (s_theta, s_q) = warm_pool_sources(&p);
        p.s_theta = s_theta;
        p.s_q = s_q;
        p
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if !(self.q_tilde > 0.0 && self.q_tilde < 1.0) {
            return bad(format!("q_tilde must lie in (0, 1), got {}", self.q_tilde));
        }
        if !(self.gamma >= 0.0) {
            return bad(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if !(self.h_bar >= 0.0) {
            return bad(format!("h_bar must be non-negative, got {}", self.h_bar));
        }
        if !(self.a_bar > 0.0) {
            return bad(format!("a_bar must be positive, got {}", self.a_bar));
        }
        if self.n_grid < 4 || !self.n_grid.is_multiple_of(2) {
            return bad(format!("n_grid must be even and >= 4, got {}", self.n_grid));
        }
        if !(self.dt > 0.0) || !(self.domain_length > 0.0) {
            return bad("dt and domain_length must be positive".into());
        }
        if self.s_theta.len() != self.n_grid || self.s_q.len() != self.n_grid {
            return bad("source vectors must have length n_grid".into());
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        self.domain_length / self.n_grid as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        j as f64 * self.dx()
    }

    /// Grid mean of `s_theta`; the source constant of the energy.
    pub fn source_mean(&self) -> f64 {
        self.s_theta.iter().sum::<f64>() / self.n_grid as f64
    }

    /// Smallest anomaly `A` with `A + a_bar >= floor` in floating point.
    pub fn activity_floor_anomaly(&self, floor: f64) -> f64 {
        let mut lo = floor - self.a_bar;
        while lo + self.a_bar < floor {
            lo = lo.next_up();
        }
        lo
    }

    pub fn state_dim(&self) -> usize {
        4 * self.n_grid
    }
}

/// Warm-pool sources `0.022 (1 - 0.6 cos(2 pi x / L))`, identical for heating and moisture.
pub fn warm_pool_sources(params: &ModelParams) -> (Vec<f64>, Vec<f64>) {
    let l = params.domain_length;
    let s: Vec<f64> = (0..params.n_grid)
        .map(|j| HOMOGENEOUS_SOURCE * (1.0 - 0.6 * (2.0 * PI * params.x(j) / l).cos()))
        .collect();
    (s.clone(), s)
}

/// One of the four prognostic fields, in stacking order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    K,
    R,
    Q,
    A,
}

impl Var {
    pub const ALL: [Var; 4] = [Var::K, Var::R, Var::Q, Var::A];

    pub fn block(self) -> usize {
        match self {
            Var::K => 0,
            Var::R => 1,
            Var::Q => 2,
            Var::A => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Var::K => "K",
            Var::R => "R",
            Var::Q => "Q",
            Var::A => "A",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub k_field: Vec<f64>,
    pub r_field: Vec<f64>,
    pub q_field: Vec<f64>,
    pub a_field: Vec<f64>,
    pub time: f64,
}

impl ModelState {
    pub fn rest(n_grid: usize, time: f64) -> Self {
        Self {
            k_field: vec![0.0; n_grid],
            r_field: vec![0.0; n_grid],
            q_field: vec![0.0; n_grid],
            a_field: vec![0.0; n_grid],
            time,
        }
    }

    pub fn n_grid(&self) -> usize {
        self.k_field.len()
    }

    pub fn field(&self, var: Var) -> &[f64] {
        match var {
            Var::K => &self.k_field,
            Var::R => &self.r_field,
            Var::Q => &self.q_field,
            Var::A => &self.a_field,
        }
    }

    pub fn field_mut(&mut self, var: Var) -> &mut Vec<f64> {
        match var {
            Var::K => &mut self.k_field,
            Var::R => &mut self.r_field,
            Var::Q => &mut self.q_field,
            Var::A => &mut self.a_field,
        }
    }

    /// Stacked `(K, R, Q, A)` vector of length `4 n_grid`.
    pub fn stacked(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(4 * self.n_grid());
        for var in Var::ALL {
            out.extend_from_slice(self.field(var));
        }
        out
    }

    pub fn from_stacked(x: &[f64], time: f64) -> Result<Self> {
        if !x.len().is_multiple_of(4) || x.is_empty() {
            return Err(Error::ShapeMismatch {
                what: "stacked state",
                expected: 4 * (x.len() / 4).max(1),
                got: x.len(),
            });
        }
        let n = x.len() / 4;
        Ok(Self {
            k_field: x[..n].to_vec(),
            r_field: x[n..2 * n].to_vec(),
            q_field: x[2 * n..3 * n].to_vec(),
            a_field: x[3 * n..].to_vec(),
            time,
        })
    }

    /// `Z = Q - Qt (K + R)`.
    pub fn z_field(&self, q_tilde: f64) -> Vec<f64> {
        (0..self.n_grid())
            .map(|j| self.q_field[j] - q_tilde * (self.k_field[j] + self.r_field[j]))
            .collect()
    }

    pub fn min_activity(&self, a_bar: f64) -> f64 {
        self.a_field.iter().map(|&a| a + a_bar).fold(f64::INFINITY, f64::min)
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        let n = self.n_grid();
        Var::ALL
            .iter()
            .find_map(|&v| self.field(v).iter().position(|x| !x.is_finite()).map(|j| j % n))
    }
}

/// Integrator for the truncated model; holds the FFT plan and per-step phase factors.
#[derive(Debug, Clone)]
pub struct SkeletonModel {
    params: ModelParams,
    spectral: Spectral,
    kelvin_shift: Vec<Complex64>,
    rossby_shift: Vec<Complex64>,
    derivative: Vec<Complex64>,
    floor_anomaly: f64,
}

impl SkeletonModel {
    pub fn new(params: ModelParams) -> Result<Self> {
        params.validate()?;
        let spectral = Spectral::new(params.n_grid, params.domain_length);
        let kelvin_shift = spectral.advection_factors(1.0, params.dt);
        let rossby_shift = spectral.advection_factors(-1.0 / 3.0, params.dt);
        let derivative = spectral.derivative_factors();
        let floor_anomaly = params.activity_floor_anomaly(ACTIVITY_FLOOR);
        Ok(Self {
            params,
            spectral,
            kelvin_shift,
            rossby_shift,
            derivative,
            floor_anomaly,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn spectral(&self) -> &Spectral {
        &self.spectral
    }

    /// Advances `state` by one `dt`. `noise` holds one standard-normal draw per grid point.
    pub fn step(&self, state: &ModelState, noise: &[f64]) -> Result<ModelState> {
        let p = &self.params;
        let n = p.n_grid;
        if state.n_grid() != n {
            return Err(Error::ShapeMismatch {
                what: "model state",
                expected: n,
                got: state.n_grid(),
            });
        }
        if noise.len() != n {
            return Err(Error::ShapeMismatch {
                what: "noise vector",
                expected: n,
                got: noise.len(),
            });
        }
        if let Some(index) = state.first_non_finite() {
            return Err(Error::IntegrationFailure {
                time: state.time,
                index,
            });
        }
        for (index, &a) in state.a_field.iter().enumerate() {
            let value = a + p.a_bar;
            if value <= 0.0 {
                return Err(Error::NonPositiveActivity {
                    time: state.time,
                    index,
                    value,
                });
            }
        }

        let dt = p.dt;
        let mut k = self.spectral.apply(&state.k_field, &self.kelvin_shift);
        let mut r = self.spectral.apply(&state.r_field, &self.rossby_shift);
        let k_x = self.spectral.apply(&k, &self.derivative);
        let r_x = self.spectral.apply(&r, &self.derivative);

        let mut q = state.q_field.clone();
        let mut a_new = state.a_field.clone();
        let sqrt_dt = dt.sqrt();
        let moist_coupling = p.q_tilde / 6.0 - 1.0;
        for j in 0..n {
            let a = state.a_field[j] + p.a_bar;
            let heating = p.s_theta[j] - p.h_bar * a;
            k[j] += 0.5 * dt * heating;
            r[j] += dt * heating / 3.0;
            q[j] += dt * (-p.q_tilde * (k_x[j] - r_x[j] / 3.0) + moist_coupling * (p.h_bar * a - p.s_q[j]));

            let drift = p.gamma * a * q[j];
            let diffusion = (p.gamma * q[j].abs() * a).sqrt();
            let mut next = state.a_field[j] + dt * drift + diffusion * sqrt_dt * noise[j];
            if next + p.a_bar < ACTIVITY_FLOOR {
                next = self.floor_anomaly;
            }
            a_new[j] = next;
        }

        let out = ModelState {
            k_field: k,
            r_field: r,
            q_field: q,
            a_field: a_new,
            time: state.time + dt,
        };
        if let Some(index) = out.first_non_finite() {
            return Err(Error::IntegrationFailure { time: out.time, index });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyDiagnostic {
    pub pointwise: Vec<f64>,
    pub grid_mean: f64,
}

fn energy_constants(params: &ModelParams) -> Result<(f64, f64)> {
    if !(params.gamma > 0.0) {
        return Err(Error::InvalidParams("energy requires gamma > 0".to_string()));
    }
    let moist = params.q_tilde / (1.0 - params.q_tilde);
    let convective = params.source_mean() / (params.gamma * params.q_tilde);
    Ok((moist, convective))
}

#[inline]
fn point_energy(k: f64, r: f64, q: f64, a: f64, q_tilde: f64, moist: f64, convective: f64) -> f64 {
    let m = q / q_tilde - k - r;
    k * k + 0.375 * r * r + 0.5 * moist * m * m + convective * (a - a.ln())
}

/// Truncated energy
/// `E = K^2 + 3/8 R^2 + 1/2 Qt/(1-Qt) (Q/Qt - K - R)^2 + S/(Gamma Qt) (a - ln a)`
/// with `S` the grid mean of `s_theta`.
pub fn total_energy(state: &ModelState, params: &ModelParams) -> Result<EnergyDiagnostic> {
    let (moist, convective) = energy_constants(params)?;
    let n = state.n_grid();
    let mut pointwise = Vec::with_capacity(n);
    for j in 0..n {
        let a = state.a_field[j] + params.a_bar;
        if !(a > 0.0) {
            return Err(Error::NonPositiveActivity {
                time: state.time,
                index: j,
                value: a,
            });
        }
        pointwise.push(point_energy(
            state.k_field[j],
            state.r_field[j],
            state.q_field[j],
            a,
            params.q_tilde,
            moist,
            convective,
        ));
    }
    let grid_mean = pointwise.iter().sum::<f64>() / n as f64;
    Ok(EnergyDiagnostic { pointwise, grid_mean })
}

/// Grid-mean energy of a stacked `(K, R, Q, A)` vector; `None` if some `a <= 0`.
pub fn grid_mean_energy(x: &[f64], params: &ModelParams) -> Option<f64> {
    let (moist, convective) = energy_constants(params).ok()?;
    let n = x.len() / 4;
    let mut sum = 0.0;
    for j in 0..n {
        let a = x[3 * n + j] + params.a_bar;
        if !(a > 0.0) {
            return None;
        }
        sum += point_energy(x[j], x[n + j], x[2 * n + j], a, params.q_tilde, moist, convective);
    }
    Some(sum / n as f64)
}

/// Gradient of the grid-mean energy with respect to the stacked state.
pub fn grid_mean_energy_gradient(x: &[f64], params: &ModelParams) -> Vec<f64> {
    let (moist, convective) = energy_constants(params).expect("gamma > 0");
    let n = x.len() / 4;
    let inv_n = 1.0 / n as f64;
    let qt = params.q_tilde;
    let mut g = vec![0.0; x.len()];
    for j in 0..n {
        let (k, r, q) = (x[j], x[n + j], x[2 * n + j]);
        let a = x[3 * n + j] + params.a_bar;
        let m = q / qt - k - r;
        g[j] = (2.0 * k - moist * m) * inv_n;
        g[n + j] = (0.75 * r - moist * m) * inv_n;
        g[2 * n + j] = moist * m / qt * inv_n;
        g[3 * n + j] = convective * (1.0 - 1.0 / a) * inv_n;
    }
    g
}

/// Hessian of the grid-mean energy: the `(K, R, Q)` 3x3 block shared by every grid point
/// and the per-point `A` diagonal.
pub fn grid_mean_energy_hessian(x: &[f64], params: &ModelParams) -> ([[f64; 3]; 3], Vec<f64>) {
    let (moist, convective) = energy_constants(params).expect("gamma > 0");
    let n = x.len() / 4;
    let inv_n = 1.0 / n as f64;
    let qt = params.q_tilde;
    let c = moist;
    let block = [
        [(2.0 + c) * inv_n, c * inv_n, -c / qt * inv_n],
        [c * inv_n, (0.75 + c) * inv_n, -c / qt * inv_n],
        [-c / qt * inv_n, -c / qt * inv_n, c / (qt * qt) * inv_n],
    ];
    let diag_a = (0..n)
        .map(|j| {
            let a = x[3 * n + j] + params.a_bar;
            convective / (a * a) * inv_n
        })
        .collect();
    (block, diag_a)
}

/// Linearization of the noise-free, source-free dynamics around rest at angular
/// wavenumber `k`, acting on Fourier amplitudes of `(K, R, Q, A)`.
pub fn linear_operator(params: &ModelParams, k: f64) -> Matrix4<Complex64> {
    let i = Complex64::new(0.0, 1.0);
    let re = |v: f64| Complex64::new(v, 0.0);
    let (qt, hb) = (params.q_tilde, params.h_bar);
    Matrix4::new(
        -i * k,
        re(0.0),
        re(0.0),
        re(-0.5 * hb),
        re(0.0),
        i * (k / 3.0),
        re(0.0),
        re(-hb / 3.0),
        -i * (k * qt),
        i * (k * qt / 3.0),
        re(0.0),
        re((qt / 6.0 - 1.0) * hb),
        re(0.0),
        re(0.0),
        re(params.gamma * params.a_bar),
        re(0.0),
    )
}

/// Eigen-decomposition of one wavenumber's linear operator with the MJO branch selected.
#[derive(Debug, Clone)]
pub struct MjoMode {
    pub wavenumber: usize,
    /// Eigenvalues `-i omega`.
    pub eigenvalues: Vector4<Complex64>,
    /// Eigenvectors as columns; the MJO column is normalized to a unit `A` component.
    pub eigenvectors: Matrix4<Complex64>,
    pub inverse: Matrix4<Complex64>,
    pub mjo_index: usize,
}

impl MjoMode {
    pub fn frequency(&self) -> f64 {
        -self.eigenvalues[self.mjo_index].im
    }
}

fn eigen_decompose(m: &Matrix4<Complex64>) -> Option<(Vector4<Complex64>, Matrix4<Complex64>)> {
    let (unitary, upper) = m.schur().unpack();
    let mut values = Vector4::zeros();
    let mut vectors = Matrix4::zeros();
    for col in 0..4 {
        let lambda = upper[(col, col)];
        values[col] = lambda;
        // Back-substitution on the triangular factor with y[col] = 1.
        let mut y = Vector4::<Complex64>::zeros();
        y[col] = Complex64::new(1.0, 0.0);
        for row in (0..col).rev() {
            let mut acc = Complex64::new(0.0, 0.0);
            for t in row + 1..=col {
                acc += upper[(row, t)] * y[t];
            }
            let denom = upper[(row, row)] - lambda;
            if denom.norm() < 1e-14 {
                return None;
            }
            y[row] = -acc / denom;
        }
        let v = unitary * y;
        vectors.set_column(col, &v);
    }
    Some((values, vectors))
}

/// Projects states onto the MJO eigenmode of the linear skeleton dynamics at the
/// planetary wavenumbers 1-3.
#[derive(Debug, Clone)]
pub struct MjoProjector {
    spectral: Spectral,
    modes: Vec<MjoMode>,
}

impl MjoProjector {
    pub fn new(params: &ModelParams) -> Result<Self> {
        params.validate()?;
        let spectral = Spectral::new(params.n_grid, params.domain_length);
        let mut modes = Vec::new();
        for &m in MJO_WAVENUMBERS.iter().filter(|&&m| m < params.n_grid / 2) {
            let k = spectral.wavenumber(m);
            let op = linear_operator(params, k);
            let (values, mut vectors) =
                eigen_decompose(&op).ok_or_else(|| Error::InvalidParams(format!("defective spectrum at m={m}")))?;
            // Eastward phase (omega > 0) with the lowest frequency.
            let mjo_index = (0..4)
                .filter(|&c| -values[c].im > 0.0)
                .min_by(|&a, &b| values[a].im.abs().total_cmp(&values[b].im.abs()))
                .ok_or_else(|| Error::InvalidParams(format!("no eastward mode at m={m}")))?;
            let a_comp = vectors[(3, mjo_index)];
            if a_comp.norm() < 1e-14 {
                return Err(Error::InvalidParams(format!(
                    "MJO mode at m={m} has no convective component"
                )));
            }
            for row in 0..4 {
                vectors[(row, mjo_index)] /= a_comp;
            }
            let inverse = vectors
                .try_inverse()
                .ok_or_else(|| Error::InvalidParams(format!("singular eigenvector matrix at m={m}")))?;
            modes.push(MjoMode {
                wavenumber: m,
                eigenvalues: values,
                eigenvectors: vectors,
                inverse,
                mjo_index,
            });
        }
        Ok(Self { spectral, modes })
    }

    pub fn modes(&self) -> &[MjoMode] {
        &self.modes
    }

    /// Complex MJO amplitudes per retained wavenumber (normalized FFT coefficients).
    pub fn amplitudes(&self, state: &ModelState) -> Vec<Complex64> {
        let n = state.n_grid() as f64;
        let coeffs: Vec<Vec<Complex64>> = Var::ALL
            .iter()
            .map(|&v| self.spectral.forward(state.field(v)))
            .collect();
        self.modes
            .iter()
            .map(|mode| {
                let u = Vector4::from_fn(|row, _| coeffs[row][mode.wavenumber] / n);
                (mode.inverse.row(mode.mjo_index) * u)[(0, 0)]
            })
            .collect()
    }

    /// The MJO part of `state`: all four fields reconstructed from the retained MJO amplitudes.
    pub fn mjo_component(&self, state: &ModelState) -> ModelState {
        let n = state.n_grid();
        let amps = self.amplitudes(state);
        let mut out = ModelState::rest(n, state.time);
        for (mode, amp) in self.modes.iter().zip(&amps) {
            for var in Var::ALL {
                let coeff = mode.eigenvectors[(var.block(), mode.mjo_index)] * amp;
                let field = out.field_mut(var);
                for (j, f) in field.iter_mut().enumerate() {
                    let phase = Complex64::from_polar(1.0, 2.0 * PI * (mode.wavenumber * j) as f64 / n as f64);
                    *f += 2.0 * (coeff * phase).re;
                }
            }
        }
        out
    }

    /// MJO field: the convective-activity part of the MJO component.
    pub fn diagnostic(&self, state: &ModelState) -> Vec<f64> {
        let n = state.n_grid();
        let amps = self.amplitudes(state);
        let mut out = vec![0.0; n];
        for (mode, amp) in self.modes.iter().zip(&amps) {
            for (j, f) in out.iter_mut().enumerate() {
                let phase = Complex64::from_polar(1.0, 2.0 * PI * (mode.wavenumber * j) as f64 / n as f64);
                *f += 2.0 * (amp * phase).re;
            }
        }
        out
    }
}

/// Convenience wrapper building a projector per call.
pub fn mjo_diagnostic(state: &ModelState, params: &ModelParams) -> Result<Vec<f64>> {
    Ok(MjoProjector::new(params)?.diagnostic(state))
}
