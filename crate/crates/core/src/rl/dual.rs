//! Energy-band violation of a predicted field and the projected multiplier recurrence.

use crate::error::{Error, Result};
use crate::rl::features::from_action_field;
use crate::skeleton::{grid_mean_energy, grid_mean_energy_gradient, ModelParams};

/// Added to the band distance before inversion.
pub const FLOOR_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualState {
    pub lambda: f64,
    pub alpha_lambda: f64,
    pub beta: f64,
    pub energy_min: f64,
    pub energy_max: f64,
    /// Reference tolerance in `1/dE - 1/eps_ref`; half the band width by default.
    pub eps_ref: f64,
}

impl Default for DualState {
    fn default() -> Self {
        Self::with_band(0.015, 0.08)
    }
}

impl DualState {
    pub fn with_band(energy_min: f64, energy_max: f64) -> Self {
        Self {
            lambda: 1.0,
            alpha_lambda: 0.01,
            beta: 0.001,
            energy_min,
            energy_max,
            eps_ref: 0.5 * (energy_max - energy_min),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda >= 0.0
            && self.alpha_lambda >= 0.0
            && (0.0..1.0).contains(&self.beta)
            && self.energy_min <= self.energy_max
            && self.eps_ref > 0.0
            && self.eps_ref.is_finite();
        if !ok {
            return Err(Error::InvalidParams(format!("invalid dual state {self:?}")));
        }
        Ok(())
    }

    /// Distance of `energy` to the band; zero inside.
    pub fn band_distance(&self, energy: f64) -> f64 {
        (energy - self.energy_max).max(0.0) + (self.energy_min - energy).max(0.0)
    }

    /// `1 / (distance + FLOOR_EPS) - 1 / eps_ref`; positive means satisfied.
    pub fn zeta(&self, distance: f64) -> f64 {
        1.0 / (distance + FLOOR_EPS) - 1.0 / self.eps_ref
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintViolation {
    pub energy: f64,
    pub distance: f64,
    pub zeta: f64,
    /// Derivative of `distance` with respect to the stacked `(K, R, Z, A)` field.
    pub gradient: Vec<f64>,
}

/// Evaluates the band violation of a stacked `(K, R, Z, A)` field.
pub fn constraint_violation(actions: &[f64], params: &ModelParams, dual: &DualState) -> Result<ConstraintViolation> {
    let n = params.n_grid;
    if actions.len() != 4 * n {
        return Err(Error::ShapeMismatch {
            what: "action field",
            expected: 4 * n,
            got: actions.len(),
        });
    }
    let state = from_action_field(actions, params.q_tilde, 0.0)?;
    let x = state.stacked();
    let energy = grid_mean_energy(&x, params).ok_or_else(|| {
        let (index, value) = (0..n)
            .map(|j| (j, x[3 * n + j] + params.a_bar))
            .fold((0, f64::INFINITY), |m, v| if v.1 < m.1 { v } else { m });
        Error::NonPositiveActivity {
            time: state.time,
            index,
            value,
        }
    })?;
    let distance = dual.band_distance(energy);
    let sign = if energy > dual.energy_max {
        1.0
    } else if energy < dual.energy_min {
        -1.0
    } else {
        0.0
    };
    let mut gradient = vec![0.0; 4 * n];
    if sign != 0.0 {
        let g = grid_mean_energy_gradient(&x, params);
        // Q = Z + Qtilde (K + R)
        for j in 0..n {
            let dq = g[2 * n + j];
            gradient[j] = sign * (g[j] + params.q_tilde * dq);
            gradient[n + j] = sign * (g[n + j] + params.q_tilde * dq);
            gradient[2 * n + j] = sign * dq;
            gradient[3 * n + j] = sign * g[3 * n + j];
        }
    }
    Ok(ConstraintViolation {
        energy,
        distance,
        zeta: dual.zeta(distance),
        gradient,
    })
}

/// `lambda' = max(0, lambda - alpha zeta - beta lambda)`.
pub fn dual_update(dual: &DualState, zeta: f64) -> DualState {
    DualState {
        lambda: (dual.lambda - dual.alpha_lambda * zeta - dual.beta * dual.lambda).max(0.0),
        ..*dual
    }
}

/// `-mse - lambda max(0, -zeta)`: only violations are penalized.
pub fn penalized_reward(mse: f64, dual: &DualState, zeta: f64) -> f64 {
    -mse - dual.lambda * (-zeta).max(0.0)
}
