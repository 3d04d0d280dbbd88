//! Exact constraint-augmented Bellman backups on small finite MDPs.

use rand::Rng;

use crate::error::{Error, Result};

/// Finite MDP with a per-(state, action) reward and constraint-violation value.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transition[(s * n_actions + a) * n_states + s']`
    pub transition: Vec<f64>,
    pub reward: Vec<f64>,
    pub violation: Vec<f64>,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        violation: Vec<f64>,
    ) -> Result<Self> {
        let sa = n_states * n_actions;
        if sa == 0 || transition.len() != sa * n_states || reward.len() != sa || violation.len() != sa {
            return Err(Error::InvalidParams("inconsistent MDP table sizes".into()));
        }
        for row in transition.chunks(n_states) {
            let total: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidParams("transition rows must be distributions".into()));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            violation,
        })
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize) -> Self {
        let sa = n_states * n_actions;
        let mut transition = Vec::with_capacity(sa * n_states);
        for _ in 0..sa {
            let w: Vec<f64> = (0..n_states).map(|_| rng.random::<f64>() + 1e-3).collect();
            let total: f64 = w.iter().sum();
            transition.extend(w.iter().map(|v| v / total));
        }
        let reward = (0..sa).map(|_| rng.random_range(-1.0..1.0)).collect();
        let violation = (0..sa).map(|_| rng.random_range(-5.0..5.0)).collect();
        Self {
            n_states,
            n_actions,
            transition,
            reward,
            violation,
        }
    }
}

/// `(T V)(s) = max_a { r(s,a) - lambda zeta(s,a) + gamma sum_s' p(s'|s,a) V(s') }`.
pub fn constrained_bellman(mdp: &TabularMdp, lambda: f64, gamma: f64, v: &[f64]) -> Vec<f64> {
    (0..mdp.n_states)
        .map(|s| {
            (0..mdp.n_actions)
                .map(|a| {
                    let i = s * mdp.n_actions + a;
                    let p = &mdp.transition[i * mdp.n_states..(i + 1) * mdp.n_states];
                    let ev: f64 = p.iter().zip(v).map(|(p, v)| p * v).sum();
                    mdp.reward[i] - lambda * mdp.violation[i] + gamma * ev
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionCheck {
    pub t1: Vec<f64>,
    pub t2: Vec<f64>,
    /// `|T V1 - T V2|_inf / |V1 - V2|_inf`, defined as 0 when `V1 = V2`.
    pub ratio: f64,
}

fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn tabular_bellman_oracle(
    mdp: &TabularMdp,
    lambda: f64,
    gamma: f64,
    v1: &[f64],
    v2: &[f64],
) -> Result<ContractionCheck> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidParams(format!("discount {gamma} outside (0, 1)")));
    }
    if v1.len() != mdp.n_states || v2.len() != mdp.n_states {
        return Err(Error::ShapeMismatch {
            what: "value table",
            expected: mdp.n_states,
            got: v1.len().min(v2.len()),
        });
    }
    let t1 = constrained_bellman(mdp, lambda, gamma, v1);
    let t2 = constrained_bellman(mdp, lambda, gamma, v2);
    let dv = sup_distance(v1, v2);
    let ratio = if dv == 0.0 { 0.0 } else { sup_distance(&t1, &t2) / dv };
    Ok(ContractionCheck { t1, t2, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn equal_values_report_zero() {
        let mdp = TabularMdp::random(&mut stream(1, Purpose::Test, 0), 4, 2);
        let v = vec![0.3; 4];
        assert_eq!(tabular_bellman_oracle(&mdp, 1.0, 0.9, &v, &v).unwrap().ratio, 0.0);
    }

    #[test]
    fn random_trials_contract() {
        let mut rng = stream(2, Purpose::Test, 0);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let mdp = TabularMdp::random(&mut rng, 5, 3);
            let lambda = rng.random_range(0.0..10.0);
            let v1: Vec<f64> = (0..5).map(|_| rng.random_range(-10.0..10.0)).collect();
            let v2: Vec<f64> = (0..5).map(|_| rng.random_range(-10.0..10.0)).collect();
            worst = worst.max(tabular_bellman_oracle(&mdp, lambda, 0.9, &v1, &v2).unwrap().ratio);
        }
        assert!(worst <= 0.9, "ratio {worst}");
    }

    #[test]
    fn zero_multiplier_is_standard_backup() {
        // Two states, one action each: deterministic swap with rewards 1 and 2.
        let mdp = TabularMdp::new(2, 1, vec![0.0, 1.0, 1.0, 0.0], vec![1.0, 2.0], vec![7.0, -3.0]).unwrap();
        assert_eq!(constrained_bellman(&mdp, 0.0, 0.5, &[4.0, 6.0]), vec![4.0, 4.0]);
        assert_eq!(constrained_bellman(&mdp, 1.0, 0.5, &[4.0, 6.0]), vec![-3.0, 7.0]);
    }
}
