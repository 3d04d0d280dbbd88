//! Real periodic fields on a uniform grid, transformed with a cached FFT plan.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Clone)]
pub struct Spectral {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    wavenumbers: Vec<f64>,
}

impl std::fmt::Debug for Spectral {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectral").field("n", &self.n).finish()
    }
}

impl Spectral {
    pub fn new(n: usize, domain_length: f64) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let wavenumbers = (0..n)
            .map(|j| 2.0 * PI * signed_mode(j, n) as f64 / domain_length)
            .collect();
        Self {
            n,
            forward,
            inverse,
            wavenumbers,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    /// Angular wavenumber of FFT bin `j`.
    pub fn wavenumber(&self, j: usize) -> f64 {
        self.wavenumbers[j]
    }

    pub fn is_nyquist(&self, j: usize) -> bool {
        self.n.is_multiple_of(2) && j == self.n / 2
    }

    /// Unnormalized forward transform.
    pub fn forward(&self, field: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        buf
    }

    /// Inverse transform including the 1/n factor; returns the real part.
    pub fn inverse(&self, mut coeffs: Vec<Complex64>) -> Vec<f64> {
        self.inverse.process(&mut coeffs);
        let scale = 1.0 / self.n as f64;
        coeffs.iter().map(|c| c.re * scale).collect()
    }

    /// Multiplies bin `j` by `factors[j]`. The Nyquist bin only keeps the real part of
    /// its factor so the field stays real.
    pub fn apply(&self, field: &[f64], factors: &[Complex64]) -> Vec<f64> {
        let mut coeffs = self.forward(field);
        for (j, (c, f)) in coeffs.iter_mut().zip(factors).enumerate() {
            if self.is_nyquist(j) {
                *c *= f.re;
            } else {
                *c *= f;
            }
        }
        self.inverse(coeffs)
    }

    /// Phase factors `exp(-i k c dt)` for exact advection at speed `c` over `dt`.
    pub fn advection_factors(&self, speed: f64, dt: f64) -> Vec<Complex64> {
        self.wavenumbers
            .iter()
            .map(|&k| Complex64::from_polar(1.0, -k * speed * dt))
            .collect()
    }

    /// Factors `i k`, with the Nyquist bin zeroed.
    pub fn derivative_factors(&self) -> Vec<Complex64> {
        (0..self.n)
            .map(|j| {
                if self.is_nyquist(j) {
                    Complex64::new(0.0, 0.0)
                } else {
                    Complex64::new(0.0, self.wavenumbers[j])
                }
            })
            .collect()
    }
}

/// Signed mode number of FFT bin `j` (`0, 1, .., n/2, -(n/2-1), .., -1`).
pub fn signed_mode(j: usize, n: usize) -> i64 {
    if j <= n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivative_of_sine_is_cosine() {
        let n = 32;
        let l = 8.0 / 3.0;
        let sp = Spectral::new(n, l);
        let k = 2.0 * PI / l;
        let f: Vec<f64> = (0..n).map(|j| (k * j as f64 * l / n as f64).sin()).collect();
        let df = sp.apply(&f, &sp.derivative_factors());
        for j in 0..n {
            let x = j as f64 * l / n as f64;
            assert!((df[j] - k * (k * x).cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip() {
        let sp = Spectral::new(16, 1.0);
        let f: Vec<f64> = (0..16).map(|j| (j as f64 * 0.37).sin() + 0.1 * j as f64).collect();
        let g = sp.inverse(sp.forward(&f));
        for (a, b) in f.iter().zip(&g) {
            assert!((a - b).abs() < 1e-13);
        }
    }
}
