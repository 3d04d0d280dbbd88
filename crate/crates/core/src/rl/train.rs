//! Per-agent primal-dual training: a penalized regression step on each minibatch of
//! time slices, followed by the multiplier update on the refreshed predictions.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{
    forward_batch, loss_and_gradient, optimizer_step, Adam, AdamState, Batch, LossWeights, NetworkSpec, Penalty,
    PolicyParams,
};
use crate::rl::dataset::{stacked_field, Normalization, TrainingSet};
use crate::rl::dual::{constraint_violation, dual_update, ConstraintViolation, DualState};
use crate::rl::features::{clamp_action, ActionBounds, ACTION_DIM};
use crate::rng::{stream, Purpose};
use crate::skeleton::ModelParams;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub slices_per_batch: usize,
    pub optimizer: Adam,
    pub loss_weights: LossWeights,
    pub dual: DualState,
    /// When false the multiplier stays at zero and no penalty is applied.
    pub constrained: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 40,
            slices_per_batch: 4,
            optimizer: Adam::default(),
            loss_weights: LossWeights::default(),
            dual: DualState::default(),
            constrained: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.slices_per_batch == 0 || !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::InvalidParams(
                "training needs positive epochs, batch size and learning rate".into(),
            ));
        }
        if self.epochs >= 1 << 16 {
            return Err(Error::InvalidParams("at most 65535 epochs".into()));
        }
        self.dual.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub member: usize,
    pub params: PolicyParams,
    pub dual: DualState,
    pub optimizer_state: AdamState,
    pub epochs_done: usize,
}

impl Agent {
    pub fn init(member: usize, input_dim: usize, config: &TrainConfig) -> Result<Self> {
        let spec = NetworkSpec::new(input_dim, ACTION_DIM, config.hidden.clone())?;
        let mut rng = stream(config.seed, Purpose::AgentInit, member as u32);
        let params = PolicyParams::glorot(&spec, &mut rng);
        let dual = if config.constrained {
            config.dual
        } else {
            DualState {
                lambda: 0.0,
                ..config.dual
            }
        };
        Ok(Self {
            member,
            optimizer_state: AdamState::new(spec.param_count()),
            params,
            dual,
            epochs_done: 0,
        })
    }
}

/// Per-epoch means over minibatches, and the multiplier at the end of each epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AgentTrace {
    pub epoch: Vec<usize>,
    pub loss: Vec<f64>,
    pub mse: Vec<f64>,
    pub distance: Vec<f64>,
    pub lambda: Vec<f64>,
}

/// Decoded predictions of a batch of whole slices.
pub struct SlicePredictions {
    /// Clamped physical `(K, R, Z, A)` columns.
    pub actions: DMatrix<f64>,
    /// Per entry: 1 where the clamp is inactive.
    pub pass: DMatrix<f64>,
}

pub fn decode(normalized: &DMatrix<f64>, norm: &Normalization, bounds: &ActionBounds) -> Result<SlicePredictions> {
    let mut raw = normalized.clone();
    norm.targets.denormalize(&mut raw)?;
    let clamped = clamp_action(raw.as_slice(), bounds);
    let actions = DMatrix::from_column_slice(raw.nrows(), raw.ncols(), &clamped);
    let pass = raw.zip_map(&actions, |r, c| if r == c { 1.0 } else { 0.0 });
    Ok(SlicePredictions { actions, pass })
}

/// Band violation of each `n`-column slice of decoded predictions.
pub fn slice_violations(
    actions: &DMatrix<f64>,
    n: usize,
    params: &ModelParams,
    dual: &DualState,
) -> Result<Vec<ConstraintViolation>> {
    (0..actions.ncols() / n)
        .map(|s| constraint_violation(&stacked_field(&actions.columns(s * n, n).into_owned()), params, dual))
        .collect()
}

/// Mean band distance over slices mapped through `zeta`.
pub fn batch_zeta(violations: &[ConstraintViolation], dual: &DualState) -> f64 {
    let mean = violations.iter().map(|v| v.distance).sum::<f64>() / violations.len() as f64;
    dual.zeta(mean)
}

fn gather(set: &TrainingSet, slices: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = set.n_grid;
    let mut x = DMatrix::zeros(set.features.nrows(), slices.len() * n);
    let mut y = DMatrix::zeros(set.targets.nrows(), slices.len() * n);
    for (k, &s) in slices.iter().enumerate() {
        x.columns_mut(k * n, n).copy_from(&set.features.columns(s * n, n));
        y.columns_mut(k * n, n).copy_from(&set.targets.columns(s * n, n));
    }
    (x, y)
}

/// Derivative of the mean slice distance with respect to the normalized outputs.
fn penalty_gradient(
    violations: &[ConstraintViolation],
    pred: &SlicePredictions,
    norm: &Normalization,
    n: usize,
) -> (f64, DMatrix<f64>) {
    let s = violations.len() as f64;
    let value = violations.iter().map(|v| v.distance).sum::<f64>() / s;
    let mut g = DMatrix::zeros(pred.actions.nrows(), pred.actions.ncols());
    for (k, v) in violations.iter().enumerate() {
        for j in 0..n {
            for d in 0..ACTION_DIM {
                let c = k * n + j;
                g[(d, c)] = v.gradient[d * n + j] * norm.targets.half_range(d) * pred.pass[(d, c)] / s;
            }
        }
    }
    (value, g)
}

/// Continues training `agent` for `config.epochs` more epochs.
pub fn train_agent(
    mut agent: Agent,
    set: &TrainingSet,
    norm: &Normalization,
    bounds: &ActionBounds,
    params: &ModelParams,
    config: &TrainConfig,
) -> Result<(Agent, AgentTrace)> {
    config.validate()?;
    if set.n_slices() == 0 {
        return Err(Error::InvalidParams(format!(
            "agent {} has no training slices",
            agent.member
        )));
    }
    let n = set.n_grid;
    let mut trace = AgentTrace::default();
    let mut order: Vec<usize> = (0..set.n_slices()).collect();
    for _ in 0..config.epochs {
        let epoch = agent.epochs_done;
        let index = ((agent.member as u32) << 16) | (epoch as u32 & 0xffff);
        // Each epoch permutes the identity so resumed runs see the same order.
        order.iter_mut().enumerate().for_each(|(k, o)| *o = k);
        order.shuffle(&mut stream(config.seed, Purpose::AgentShuffle, index));
        let (mut loss_sum, mut mse_sum, mut dist_sum) = (0.0, 0.0, 0.0);
        let batches = order.chunks(config.slices_per_batch);
        let n_batches = batches.len();
        for (b, chunk) in batches.enumerate() {
            let diverged = Error::Training {
                agent: agent.member,
                epoch,
                batch: b,
            };
            let (x, y) = gather(set, chunk);
            let mut penalty_grad = None;
            if config.constrained {
                let pred = decode(&forward_batch(&agent.params, &x)?, norm, bounds)?;
                let v = slice_violations(&pred.actions, n, params, &agent.dual)?;
                penalty_grad = Some(penalty_gradient(&v, &pred, norm, n));
            }
            let batch = Batch {
                features: &x,
                targets: &y,
                penalty: penalty_grad.as_ref().map(|(value, g)| Penalty {
                    lambda: agent.dual.lambda,
                    value: *value,
                    output_gradient: g,
                }),
            };
            let (report, grad) = match loss_and_gradient(&agent.params, &batch, &config.loss_weights) {
                Err(Error::NonFiniteLoss) => return Err(diverged),
                other => other?,
            };
            optimizer_step(&mut agent.params, &grad, &mut agent.optimizer_state, &config.optimizer)?;
            if agent.params.values().iter().any(|v| !v.is_finite()) {
                return Err(diverged);
            }
            loss_sum += report.loss;
            mse_sum += report.mse;
            if config.constrained {
                let pred = decode(&forward_batch(&agent.params, &x)?, norm, bounds)?;
                let v = slice_violations(&pred.actions, n, params, &agent.dual)?;
                dist_sum += v.iter().map(|v| v.distance).sum::<f64>() / v.len() as f64;
                agent.dual = dual_update(&agent.dual, batch_zeta(&v, &agent.dual));
            }
        }
        agent.epochs_done += 1;
        trace.epoch.push(epoch);
        trace.loss.push(loss_sum / n_batches as f64);
        trace.mse.push(mse_sum / n_batches as f64);
        trace.distance.push(dist_sum / n_batches as f64);
        trace.lambda.push(agent.dual.lambda);
    }
    Ok((agent, trace))
}

/// Trains every agent on its own member's set; agents run concurrently and fail
/// independently.
pub fn train(
    agents: Vec<Agent>,
    sets: &[TrainingSet],
    norm: &Normalization,
    bounds: &ActionBounds,
    params: &ModelParams,
    config: &TrainConfig,
) -> Result<Vec<Result<(Agent, AgentTrace)>>> {
    if agents.len() != sets.len() {
        return Err(Error::ShapeMismatch {
            what: "agents and training sets",
            expected: sets.len(),
            got: agents.len(),
        });
    }
    Ok(agents
        .into_par_iter()
        .zip(sets.par_iter())
        .map(|(agent, set)| train_agent(agent, set, norm, bounds, params, config))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    pub stationarity: f64,
    pub feasibility_gap: f64,
    pub multiplier: f64,
    pub slackness: f64,
}

/// Lagrangian gradient norm on `set`, feasibility gap `-zeta` (non-positive when the
/// constraint holds), the multiplier and their product.
pub fn kkt_residuals(
    agent: &Agent,
    set: &TrainingSet,
    norm: &Normalization,
    bounds: &ActionBounds,
    params: &ModelParams,
    weights: &LossWeights,
) -> Result<KktReport> {
    let n = set.n_grid;
    let dual = &agent.dual;
    let pred = decode(&forward_batch(&agent.params, &set.features)?, norm, bounds)?;
    let v = slice_violations(&pred.actions, n, params, dual)?;
    let (value, g) = penalty_gradient(&v, &pred, norm, n);
    let batch = Batch {
        features: &set.features,
        targets: &set.targets,
        penalty: Some(Penalty {
            lambda: dual.lambda,
            value,
            output_gradient: &g,
        }),
    };
    let (_, grad) = loss_and_gradient(&agent.params, &batch, weights)?;
    let feasibility_gap = -batch_zeta(&v, dual);
    Ok(KktReport {
        stationarity: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
        feasibility_gap,
        multiplier: dual.lambda,
        slackness: dual.lambda * feasibility_gap,
    })
}
