//! Synthetic observations of the full convective activity `A + Abar` with mean-one
//! multiplicative lognormal noise.

use crate::error::{Error, Result};
use crate::skeleton::ModelState;

/// Hours in one nondimensional time unit (two months).
pub const HOURS_PER_TIME_UNIT: f64 = 1440.0;
pub const DEFAULT_NOISE_VARIANCE: f64 = 0.0063;
pub const DEFAULT_INTERVAL_HOURS: f64 = 28.8;

const LOG_SIGMA_BRACKET: (f64, f64) = (1e-4, 2.0);

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    pub noise_variance: f64,
    pub interval_steps: usize,
    pub log_sigma: f64,
}

impl ObservationModel {
    pub fn new(noise_variance: f64, interval_steps: usize, log_sigma: f64) -> Result<Self> {
        if !(noise_variance > 0.0) || interval_steps == 0 || !(log_sigma > 0.0) {
            return Err(Error::InvalidParams(format!(
                "observation model needs positive variance, interval and log_sigma \
                 (got {noise_variance}, {interval_steps}, {log_sigma})"
            )));
        }
        Ok(Self {
            noise_variance,
            interval_steps,
            log_sigma,
        })
    }

    /// Calibrates `log_sigma` against a climatology of `A + Abar`.
    pub fn calibrated(noise_variance: f64, interval_steps: usize, climatology: &[f64]) -> Result<Self> {
        let log_sigma = calibrate_log_sigma(climatology, noise_variance)?;
        Self::new(noise_variance, interval_steps, log_sigma)
    }

    /// Interval between observations in nondimensional time.
    pub fn interval(&self, dt: f64) -> f64 {
        self.interval_steps as f64 * dt
    }
}

/// Model steps between observations recorded every `interval_hours`.
pub fn schedule_steps(interval_hours: f64, dt: f64) -> Result<usize> {
    let steps = interval_hours / (dt * HOURS_PER_TIME_UNIT);
    let rounded = steps.round();
    if rounded < 1.0 || (steps - rounded).abs() > 1e-9 * rounded.max(1.0) {
        return Err(Error::InvalidParams(format!(
            "observation interval {interval_hours} h is not a whole number of steps of dt={dt}"
        )));
    }
    Ok(rounded as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub values: Vec<f64>,
    pub time: f64,
}

/// `values[j] = (A_j + Abar) exp(sigma xi_j - sigma^2 / 2)`.
pub fn observe(truth: &ModelState, a_bar: f64, model: &ObservationModel, noise: &[f64]) -> Result<Observation> {
    let n = truth.n_grid();
    if noise.len() != n {
        return Err(Error::ShapeMismatch {
            what: "observation noise",
            expected: n,
            got: noise.len(),
        });
    }
    let s = model.log_sigma;
    let values = truth
        .a_field
        .iter()
        .zip(noise)
        .map(|(&a, &xi)| (a + a_bar) * (s * xi - 0.5 * s * s).exp())
        .collect();
    Ok(Observation {
        values,
        time: truth.time,
    })
}

/// Additive error variance `E[a^2] (exp(sigma^2) - 1)` of the mean-one multiplicative model.
pub fn error_variance(mean_square: f64, log_sigma: f64) -> f64 {
    mean_square * (log_sigma * log_sigma).exp_m1()
}

/// Finds `log_sigma` whose additive error variance over `climatology` equals
/// `target_variance`, by bisection over `[1e-4, 2]`.
pub fn calibrate_log_sigma(climatology: &[f64], target_variance: f64) -> Result<f64> {
    if climatology.is_empty() {
        return Err(Error::Calibration("empty climatology".into()));
    }
    if climatology.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Calibration("climatology must be positive and finite".into()));
    }
    if !(target_variance > 0.0) {
        return Err(Error::Calibration(format!(
            "target variance must be positive, got {target_variance}"
        )));
    }
    let mean_square = climatology.iter().map(|v| v * v).sum::<f64>() / climatology.len() as f64;
    let (mut lo, mut hi) = LOG_SIGMA_BRACKET;
    let f = |s: f64| error_variance(mean_square, s) - target_variance;
    if f(lo) > 0.0 || f(hi) < 0.0 {
        return Err(Error::Calibration(format!(
            "target variance {target_variance} unattainable for log_sigma in [{lo}, {hi}] \
             (mean square {mean_square})"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Observation operator on a stacked `(K, R, Q, A)` vector: the `A` block plus `Abar`.
pub fn observation_operator(x: &[f64], a_bar: f64) -> Vec<f64> {
    let n = x.len() / 4;
    x[3 * n..].iter().map(|a| a + a_bar).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normals, stream, Purpose};

    fn truth(a: &[f64]) -> ModelState {
        let mut s = ModelState::rest(a.len(), 0.5);
        s.a_field = a.to_vec();
        s
    }

    #[test]
    fn degenerate_noise_returns_truth() {
        let t = truth(&[0.0, 0.1, -0.05, 0.3]);
        let m = ObservationModel::new(0.0063, 20, 1e-300).unwrap();
        let obs = observe(&t, 0.1, &m, &[1.0, -2.0, 0.5, 3.0]).unwrap();
        for (o, a) in obs.values.iter().zip(&t.a_field) {
            assert_eq!(*o, a + 0.1);
        }
        assert_eq!(obs.time, 0.5);
    }

    #[test]
    fn zero_noise_is_mean_shifted() {
        let t = truth(&[0.0, 0.2, 0.4, -0.09]);
        let m = ObservationModel::new(0.0063, 20, 0.3).unwrap();
        let obs = observe(&t, 0.1, &m, &[0.0; 4]).unwrap();
        for (o, a) in obs.values.iter().zip(&t.a_field) {
            assert!((o - (a + 0.1) * (-0.045f64).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn calibrated_noise_hits_target_variance() {
        let level = 0.3;
        let clim = vec![level; 10];
        let sigma = calibrate_log_sigma(&clim, 0.0063).unwrap();
        let m = ObservationModel::new(0.0063, 20, sigma).unwrap();
        let n = 100_000;
        let t = truth(&vec![level - 0.1; n]);
        let xi = standard_normals(&mut stream(11, Purpose::Test, 0), n);
        let obs = observe(&t, 0.1, &m, &xi).unwrap();
        let err: Vec<f64> = obs.values.iter().map(|v| v - level).collect();
        let mean = err.iter().sum::<f64>() / n as f64;
        let var = err.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var / 0.0063 - 1.0).abs() < 0.05, "variance {var}");
        let ratio = obs.values.iter().map(|v| v / level).sum::<f64>() / n as f64;
        assert!((ratio - 1.0).abs() < 0.01, "mean ratio {ratio}");
        assert!(obs.values.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn small_sigma_expansion() {
        let c = 2.0;
        let target = 1e-6;
        let s = calibrate_log_sigma(&[c; 3], target).unwrap();
        assert!((s - target.sqrt() / c).abs() < 1e-3 * s);
        let s2 = calibrate_log_sigma(&[2.0 * c; 3], target).unwrap();
        assert!((s2 / s - 0.5).abs() < 1e-3);
    }

    #[test]
    fn calibration_rejects_bad_inputs() {
        assert!(calibrate_log_sigma(&[0.2], 0.0).is_err());
        assert!(calibrate_log_sigma(&[], 0.1).is_err());
        assert!(calibrate_log_sigma(&[0.2, -0.1], 0.1).is_err());
        assert!(matches!(calibrate_log_sigma(&[1e-3], 1.0), Err(Error::Calibration(_))));
    }

    #[test]
    fn operator_selects_activity() {
        let n = 8;
        let mut x = vec![0.0; 4 * n];
        assert_eq!(observation_operator(&x, 0.1), vec![0.1; n]);
        x[2] = 1.0;
        assert_eq!(observation_operator(&x, 0.1), vec![0.1; n]);
        let mut s = ModelState::rest(n, 0.0);
        s.a_field = (0..n).map(|j| 0.01 * j as f64).collect();
        let expected: Vec<f64> = s.a_field.iter().map(|a| a + 0.1).collect();
        assert_eq!(observation_operator(&s.stacked(), 0.1), expected);
    }

    #[test]
    fn schedule_arithmetic() {
        assert_eq!(schedule_steps(DEFAULT_INTERVAL_HOURS, 0.001).unwrap(), 20);
        assert!((0.001 * HOURS_PER_TIME_UNIT - 1.44).abs() < 1e-12);
        assert!(schedule_steps(1.0, 0.001).is_err());
    }
}
