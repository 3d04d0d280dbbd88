//! Imitation dataset assembled from a constrained-filter analysis archive.

use nalgebra::DMatrix;

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::observation::Observation;
use crate::rl::features::{raw_features, to_action_field, FeatureLayout, Normalizer, ACTION_DIM};
use crate::skeleton::ModelParams;

/// One member at one target time: raw features and `(K, R, Z, A)` targets as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub time: f64,
    pub features: DMatrix<f64>,
    pub targets: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemberData {
    pub member: usize,
    pub slices: Vec<Slice>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub layout: FeatureLayout,
    pub delta_t: f64,
    pub members: Vec<MemberData>,
}

/// Feature and target maps shared by all agents.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub features: Normalizer,
    pub targets: Normalizer,
}

/// Builds one slice per member for every analysis time with two predecessors and a
/// successor. `analyses[k]` is the analysis that assimilated `observations[k]`.
pub fn build_dataset(
    analyses: &[Ensemble],
    observations: &[Observation],
    params: &ModelParams,
    layout: &FeatureLayout,
    delta_t: f64,
) -> Result<Dataset> {
    if analyses.len() != observations.len() {
        return Err(Error::ShapeMismatch {
            what: "analysis and observation archives",
            expected: analyses.len(),
            got: observations.len(),
        });
    }
    if analyses.len() < 4 {
        return Err(Error::InvalidParams(format!(
            "dataset needs at least 4 consecutive analyses, got {}",
            analyses.len()
        )));
    }
    let n_members = analyses[0].len();
    if analyses.iter().any(|e| e.len() != n_members) {
        return Err(Error::InvalidParams("ensemble size changes across the archive".into()));
    }
    for (e, o) in analyses.iter().zip(observations) {
        if (e.time - o.time).abs() > 1e-9 * e.time.abs().max(1.0) {
            return Err(Error::InvalidParams(format!(
                "analysis at t={} paired with observation at t={}",
                e.time, o.time
            )));
        }
    }
    let mut members = Vec::with_capacity(n_members);
    for i in 0..n_members {
        let mut slices = Vec::with_capacity(analyses.len() - 3);
        for k in 2..analyses.len() - 1 {
            let history = [
                &analyses[k - 2].members[i],
                &analyses[k - 1].members[i],
                &analyses[k].members[i],
            ];
            let features = raw_features(layout, history, &observations[k + 1], params, delta_t)?;
            let target = to_action_field(&analyses[k + 1].members[i], params.q_tilde);
            slices.push(Slice {
                time: analyses[k + 1].time,
                features,
                targets: pointwise_targets(&target, layout.n_grid),
            });
        }
        members.push(MemberData { member: i, slices });
    }
    Ok(Dataset {
        layout: layout.clone(),
        delta_t,
        members,
    })
}

/// Rearranges a stacked `(K, R, Z, A)` field into `ACTION_DIM x n` columns.
pub fn pointwise_targets(field: &[f64], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(ACTION_DIM, n, |v, j| field[v * n + j])
}

/// Inverse of [`pointwise_targets`].
pub fn stacked_field(columns: &DMatrix<f64>) -> Vec<f64> {
    let n = columns.ncols();
    let mut x = vec![0.0; ACTION_DIM * n];
    for (j, col) in columns.column_iter().enumerate() {
        for v in 0..ACTION_DIM {
            x[v * n + j] = col[v];
        }
    }
    x
}

impl Dataset {
    pub fn fit_normalization(&self) -> Result<Normalization> {
        let slices = || self.members.iter().flat_map(|m| &m.slices);
        Ok(Normalization {
            features: Normalizer::fit(slices().map(|s| &s.features))?,
            targets: Normalizer::fit(slices().map(|s| &s.targets))?,
        })
    }
}

/// Normalized, concatenated slices of one member.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub n_grid: usize,
    pub times: Vec<f64>,
    pub features: DMatrix<f64>,
    pub targets: DMatrix<f64>,
}

impl TrainingSet {
    pub fn new(data: &MemberData, norm: &Normalization) -> Result<Self> {
        let first = data
            .slices
            .first()
            .ok_or_else(|| Error::InvalidParams(format!("member {} has no slices", data.member)))?;
        let n = first.features.ncols();
        let s = data.slices.len();
        let mut features = DMatrix::zeros(first.features.nrows(), s * n);
        let mut targets = DMatrix::zeros(ACTION_DIM, s * n);
        for (k, slice) in data.slices.iter().enumerate() {
            if slice.features.ncols() != n || slice.features.nrows() != first.features.nrows() {
                return Err(Error::ShapeMismatch {
                    what: "dataset slice",
                    expected: n,
                    got: slice.features.ncols(),
                });
            }
            features.columns_mut(k * n, n).copy_from(&slice.features);
            targets.columns_mut(k * n, n).copy_from(&slice.targets);
        }
        norm.features.normalize(&mut features)?;
        norm.targets.normalize(&mut targets)?;
        Ok(Self {
            n_grid: n,
            times: data.slices.iter().map(|s| s.time).collect(),
            features,
            targets,
        })
    }

    pub fn n_slices(&self) -> usize {
        self.times.len()
    }
}
