//! Autoregressive ensemble inference: every agent advances its own member from its own
//! previous predictions and the shared observation stream.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::forward_batch;
use crate::observation::Observation;
use crate::rl::dataset::{stacked_field, Normalization};
use crate::rl::features::{from_action_field, raw_features, ActionBounds, FeatureLayout, ACTION_DIM};
use crate::rl::train::{decode, Agent};
use crate::skeleton::{grid_mean_energy, ModelParams, ModelState};

/// Variables carried by [`EnsembleBand`], in order.
pub const BAND_VARIABLES: [&str; 5] = ["K", "R", "Q", "A", "Z"];

/// Ensemble mean and total spread (across-agent variance plus mean per-agent policy
/// variance) of each variable in [`BAND_VARIABLES`], stacked by variable.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleBand {
    pub time: f64,
    pub mean: Vec<f64>,
    pub spread: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub times: Vec<f64>,
    /// `members[t][i]`: agent `i`'s predicted state at `times[t]`.
    pub members: Vec<Vec<ModelState>>,
    pub bands: Vec<EnsembleBand>,
    /// `energies[t][i]`; NaN never occurs because actions are clamped.
    pub energies: Vec<Vec<f64>>,
    /// Normalized feature entries clipped at the range limit.
    pub clipped_features: usize,
}

fn band_of(states: &[ModelState], policy_var: &[[f64; ACTION_DIM]], q_tilde: f64, time: f64) -> EnsembleBand {
    let n = states[0].n_grid();
    let m = states.len() as f64;
    let fields: Vec<Vec<f64>> = states
        .iter()
        .map(|s| {
            let mut x = s.stacked();
            x.extend(s.z_field(q_tilde));
            x
        })
        .collect();
    let dim = fields[0].len();
    let mut mean = vec![0.0; dim];
    for f in &fields {
        for (a, b) in mean.iter_mut().zip(f) {
            *a += b;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0; dim];
    if states.len() > 1 {
        for f in &fields {
            for ((v, x), mu) in var.iter_mut().zip(f).zip(&mean) {
                *v += (x - mu) * (x - mu);
            }
        }
        var.iter_mut().for_each(|v| *v /= m - 1.0);
    }
    // Policy variance of (K, R, Q, A, Z) from independent (K, R, Z, A) components.
    let mut pv = [0.0; 5];
    for s in policy_var {
        let [k, r, z, a] = *s;
        pv[0] += k / m;
        pv[1] += r / m;
        pv[2] += (z + q_tilde * q_tilde * (k + r)) / m;
        pv[3] += a / m;
        pv[4] += z / m;
    }
    let spread = var.iter().enumerate().map(|(i, v)| (v + pv[i / n]).sqrt()).collect();
    EnsembleBand { time, mean, spread }
}

/// Runs every agent through `observations`, starting from its member's three most
/// recent analyses `initial[i] = [t - 2 dt_a, t - dt_a, t]`. `observations[k]` is used
/// to predict the state at its own time.
#[allow(clippy::too_many_arguments)]
pub fn infer(
    agents: &[Agent],
    norm: &Normalization,
    bounds: &ActionBounds,
    layout: &FeatureLayout,
    initial: &[[ModelState; 3]],
    observations: &[Observation],
    params: &ModelParams,
    delta_t: f64,
) -> Result<Inference> {
    if agents.len() != initial.len() || agents.is_empty() {
        return Err(Error::ShapeMismatch {
            what: "agents and initial histories",
            expected: initial.len(),
            got: agents.len(),
        });
    }
    let mut prev_time = initial[0][2].time;
    for o in observations {
        if (o.time - prev_time - delta_t).abs() > 1e-6 * delta_t {
            return Err(Error::InvalidParams(format!(
                "observation at t={} does not follow t={} by {delta_t}",
                o.time, prev_time
            )));
        }
        prev_time = o.time;
    }
    let policy_var: Vec<[f64; ACTION_DIM]> = agents
        .iter()
        .map(|a| {
            let s = a.params.spread();
            std::array::from_fn(|d| (s[d] * norm.targets.half_range(d)).powi(2))
        })
        .collect();
    let mut histories: Vec<[ModelState; 3]> = initial.to_vec();
    let mut out = Inference {
        times: Vec::with_capacity(observations.len()),
        members: Vec::with_capacity(observations.len()),
        bands: Vec::with_capacity(observations.len()),
        energies: Vec::with_capacity(observations.len()),
        clipped_features: 0,
    };
    for obs in observations {
        let step: Vec<Result<(ModelState, usize)>> = agents
            .par_iter()
            .zip(histories.par_iter())
            .map(|(agent, h)| {
                let mut f = raw_features(layout, [&h[0], &h[1], &h[2]], obs, params, delta_t)?;
                let clipped = norm.features.normalize(&mut f)?;
                let pred = decode(&forward_batch(&agent.params, &f)?, norm, bounds)?;
                let state = from_action_field(&stacked_field(&pred.actions), params.q_tilde, obs.time)?;
                Ok((state, clipped))
            })
            .collect();
        let mut states = Vec::with_capacity(agents.len());
        for r in step {
            let (s, c) = r?;
            out.clipped_features += c;
            states.push(s);
        }
        let energies = states
            .iter()
            .map(|s| grid_mean_energy(&s.stacked(), params).unwrap_or(f64::NAN))
            .collect();
        out.bands.push(band_of(&states, &policy_var, params.q_tilde, obs.time));
        for (h, s) in histories.iter_mut().zip(&states) {
            h.rotate_left(1);
            h[2] = s.clone();
        }
        out.times.push(obs.time);
        out.members.push(states);
        out.energies.push(energies);
    }
    Ok(out)
}
