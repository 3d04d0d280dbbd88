//! Skill scores against the truth and energy-band occupancy.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SkillSeries {
    pub times: Vec<f64>,
    pub rmse: Vec<f64>,
    pub corr: Vec<f64>,
}

impl SkillSeries {
    pub fn push(&mut self, time: f64, truth: &[f64], estimate: &[f64]) -> Result<()> {
        let rmse = rmse_at(truth, estimate)?;
        let corr = corr_at(truth, estimate)?;
        self.times.push(time);
        self.rmse.push(rmse);
        self.corr.push(corr);
        Ok(())
    }

    pub fn mean_rmse(&self) -> f64 {
        self.rmse.iter().sum::<f64>() / self.rmse.len() as f64
    }

    pub fn mean_corr(&self) -> f64 {
        self.corr.iter().sum::<f64>() / self.corr.len() as f64
    }
}

fn check_pair(truth: &[f64], estimate: &[f64]) -> Result<()> {
    if truth.len() != estimate.len() {
        return Err(Error::ShapeMismatch {
            what: "skill fields",
            expected: truth.len(),
            got: estimate.len(),
        });
    }
    if truth.len() < 2 {
        return Err(Error::DegenerateField(format!(
            "need at least 2 points, got {}",
            truth.len()
        )));
    }
    Ok(())
}

/// Mean and population standard deviation.
fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Root-mean-square error normalized by the standard deviation of the truth field.
pub fn rmse_at(truth: &[f64], estimate: &[f64]) -> Result<f64> {
    check_pair(truth, estimate)?;
    let (_, sd) = moments(truth);
    if !(sd > 0.0) {
        return Err(Error::DegenerateField("truth field has zero spread".into()));
    }
    let mse = truth.iter().zip(estimate).map(|(t, e)| (t - e) * (t - e)).sum::<f64>() / truth.len() as f64;
    Ok(mse.sqrt() / sd)
}

/// Pearson correlation over grid points.
pub fn corr_at(truth: &[f64], estimate: &[f64]) -> Result<f64> {
    check_pair(truth, estimate)?;
    let (mt, st) = moments(truth);
    let (me, se) = moments(estimate);
    if !(st > 0.0 && se > 0.0) {
        return Err(Error::DegenerateField("correlation of a constant field".into()));
    }
    let cov = truth
        .iter()
        .zip(estimate)
        .map(|(t, e)| (t - mt) * (e - me))
        .sum::<f64>()
        / truth.len() as f64;
    Ok((cov / (st * se)).clamp(-1.0, 1.0))
}

/// Fraction of energies inside `[lo, hi]`, with `tol` slack on both ends. NaN counts
/// as outside.
pub fn energy_occupancy<'a>(energies: impl IntoIterator<Item = &'a f64>, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    let (mut inside, mut total) = (0usize, 0usize);
    for &e in energies {
        total += 1;
        if e >= lo - tol && e <= hi + tol {
            inside += 1;
        }
    }
    if total == 0 {
        return Err(Error::InvalidParams("empty energy trace".into()));
    }
    Ok(inside as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave() -> Vec<f64> {
        (0..64)
            .map(|j| (j as f64 * 0.3).sin() + 0.2 * (j as f64 * 1.1).cos())
            .collect()
    }

    #[test]
    fn perfect_estimate() {
        let t = wave();
        assert_eq!(rmse_at(&t, &t).unwrap(), 0.0);
        assert!((corr_at(&t, &t).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        assert!((corr_at(&t, &neg).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_shift_and_zero_estimate() {
        let t = wave();
        let (mean, sd) = moments(&t);
        let shifted: Vec<f64> = t.iter().map(|v| v + 0.3).collect();
        assert!((rmse_at(&t, &shifted).unwrap() - 0.3 / sd).abs() < 1e-12);
        let centred: Vec<f64> = t.iter().map(|v| v - mean).collect();
        assert!((rmse_at(&centred, &vec![0.0; 64]).unwrap() - 1.0).abs() < 1e-12);
        let affine: Vec<f64> = t.iter().map(|v| 2.5 * v - 4.0).collect();
        assert!((corr_at(&t, &affine).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_fields_are_errors() {
        assert!(rmse_at(&[1.0; 5], &[1.0; 5]).is_err());
        assert!(corr_at(&wave(), &[2.0; 64]).is_err());
        assert!(rmse_at(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn occupancy_counts() {
        assert_eq!(energy_occupancy(&[0.02, 0.05], 0.015, 0.08, 0.0).unwrap(), 1.0);
        assert_eq!(energy_occupancy(&[0.1, 0.001], 0.015, 0.08, 0.0).unwrap(), 0.0);
        assert_eq!(
            energy_occupancy(&[0.02, 0.1, 0.05, f64::NAN], 0.015, 0.08, 0.0).unwrap(),
            0.5
        );
        assert!(energy_occupancy(&[], 0.0, 1.0, 0.0).is_err());
    }
}
