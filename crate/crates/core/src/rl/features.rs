//! Pointwise agent inputs and the affine maps between physical and normalized units.

use nalgebra::DMatrix;

use crate::ensemble::LocalizationSpec;
use crate::error::{Error, Result};
use crate::observation::Observation;
use crate::skeleton::{ModelParams, ModelState};

/// Normalized values are clipped to this magnitude.
pub const CLIP: f64 = 1.5;
/// `(K, R, Z, A)` per grid point.
pub const ACTION_DIM: usize = 4;
pub const ACTION_NAMES: [&str; ACTION_DIM] = ["K", "R", "Z", "A"];

/// Column layout: current `(K, R, Z, A)`, observed `A + Abar` over the taper support,
/// two tendencies of `(K, R, Z, A)`, target time, grid index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayout {
    pub n_grid: usize,
    pub offsets: Vec<i64>,
}

impl FeatureLayout {
    pub fn new(n_grid: usize, loc: &LocalizationSpec) -> Self {
        Self {
            n_grid,
            offsets: loc.support_offsets(n_grid),
        }
    }

    pub fn len(&self) -> usize {
        ACTION_DIM + self.offsets.len() + 2 * ACTION_DIM + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = ACTION_NAMES.iter().map(|s| s.to_string()).collect();
        names.extend(self.offsets.iter().map(|o| format!("obs{o:+}")));
        for lag in 0..2 {
            names.extend(ACTION_NAMES.iter().map(|v| format!("d{v}{lag}")));
        }
        names.push("target_time".into());
        names.push("grid_index".into());
        names
    }
}

/// Stacked `(K, R, Z, A)` of a state.
pub fn to_action_field(state: &ModelState, q_tilde: f64) -> Vec<f64> {
    let mut x = Vec::with_capacity(4 * state.n_grid());
    x.extend(&state.k_field);
    x.extend(&state.r_field);
    x.extend(state.z_field(q_tilde));
    x.extend(&state.a_field);
    x
}

/// Inverse of [`to_action_field`]: `Q = Z + Qtilde (K + R)`.
pub fn from_action_field(x: &[f64], q_tilde: f64, time: f64) -> Result<ModelState> {
    let n = x.len() / 4;
    let mut stacked = x.to_vec();
    for j in 0..n {
        stacked[2 * n + j] = x[2 * n + j] + q_tilde * (x[j] + x[n + j]);
    }
    ModelState::from_stacked(&stacked, time)
}

/// Raw features of every grid point as columns (`layout.len() x n_grid`).
///
/// `history` holds the analyses at `t - 2 dt_a, t - dt_a, t`; `obs` is taken at the
/// target time `t + dt_a`.
pub fn raw_features(
    layout: &FeatureLayout,
    history: [&ModelState; 3],
    obs: &Observation,
    params: &ModelParams,
    delta_t: f64,
) -> Result<DMatrix<f64>> {
    let n = layout.n_grid;
    for s in history {
        if s.n_grid() != n {
            return Err(Error::ShapeMismatch {
                what: "feature history",
                expected: n,
                got: s.n_grid(),
            });
        }
    }
    if obs.values.len() != n {
        return Err(Error::ShapeMismatch {
            what: "feature observation",
            expected: n,
            got: obs.values.len(),
        });
    }
    let [x2, x1, x0] = history.map(|s| to_action_field(s, params.q_tilde));
    let mut f = DMatrix::zeros(layout.len(), n);
    for j in 0..n {
        let mut col = f.column_mut(j);
        let mut r = 0;
        for v in 0..ACTION_DIM {
            col[r] = x0[v * n + j];
            r += 1;
        }
        for &o in &layout.offsets {
            col[r] = obs.values[(j as i64 + o).rem_euclid(n as i64) as usize];
            r += 1;
        }
        for (newer, older) in [(&x0, &x1), (&x1, &x2)] {
            for v in 0..ACTION_DIM {
                col[r] = (newer[v * n + j] - older[v * n + j]) / delta_t;
                r += 1;
            }
        }
        col[r] = obs.time;
        col[r + 1] = j as f64;
    }
    Ok(f)
}

/// Per-row min-max map onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Normalizer {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Normalizer {
    pub fn unfitted() -> Self {
        Self::default()
    }

    pub fn from_bounds(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::ShapeMismatch {
                what: "normalizer bounds",
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if lo
            .iter()
            .zip(&hi)
            .any(|(l, h)| !(l.is_finite() && h.is_finite() && l <= h))
        {
            return Err(Error::InvalidParams(
                "normalizer bounds must be finite with lo <= hi".into(),
            ));
        }
        Ok(Self { lo, hi })
    }

    /// Fits on the rows of every matrix in `data`.
    pub fn fit<'a>(data: impl IntoIterator<Item = &'a DMatrix<f64>>) -> Result<Self> {
        let mut lo: Vec<f64> = Vec::new();
        let mut hi: Vec<f64> = Vec::new();
        for m in data {
            if lo.is_empty() {
                lo = vec![f64::INFINITY; m.nrows()];
                hi = vec![f64::NEG_INFINITY; m.nrows()];
            }
            if m.nrows() != lo.len() {
                return Err(Error::ShapeMismatch {
                    what: "normalizer data",
                    expected: lo.len(),
                    got: m.nrows(),
                });
            }
            for col in m.column_iter() {
                for (k, &v) in col.iter().enumerate() {
                    lo[k] = lo[k].min(v);
                    hi[k] = hi[k].max(v);
                }
            }
        }
        if lo.is_empty() || lo.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("normalizer needs nonempty finite data".into()));
        }
        Self::from_bounds(lo, hi)
    }

    pub fn is_fitted(&self) -> bool {
        !self.lo.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    /// Physical units per normalized unit in row `k`.
    pub fn half_range(&self, k: usize) -> f64 {
        0.5 * (self.hi[k] - self.lo[k])
    }

    fn check(&self, rows: usize) -> Result<()> {
        if !self.is_fitted() {
            return Err(Error::UnfittedNormalizer);
        }
        if rows != self.dim() {
            return Err(Error::ShapeMismatch {
                what: "normalized rows",
                expected: self.dim(),
                got: rows,
            });
        }
        Ok(())
    }

    /// Maps in place and clips to `±CLIP`; returns how many entries were clipped.
    /// Constant rows map to 0.
    pub fn normalize(&self, m: &mut DMatrix<f64>) -> Result<usize> {
        self.check(m.nrows())?;
        let mut clipped = 0;
        for mut col in m.column_iter_mut() {
            for (k, v) in col.iter_mut().enumerate() {
                let width = self.hi[k] - self.lo[k];
                let u = if width > 0.0 {
                    2.0 * (*v - self.lo[k]) / width - 1.0
                } else {
                    0.0
                };
                if u.abs() > CLIP {
                    clipped += 1;
                }
                *v = u.clamp(-CLIP, CLIP);
            }
        }
        Ok(clipped)
    }

    pub fn denormalize(&self, m: &mut DMatrix<f64>) -> Result<()> {
        self.check(m.nrows())?;
        for mut col in m.column_iter_mut() {
            for (k, v) in col.iter_mut().enumerate() {
                *v = self.denormalize_one(k, *v);
            }
        }
        Ok(())
    }

    pub fn denormalize_one(&self, k: usize, u: f64) -> f64 {
        self.lo[k] + (u + 1.0) * self.half_range(k)
    }
}

/// Hard action box in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ActionBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::InvalidParams(
                "action bounds need lower < upper elementwise".into(),
            ));
        }
        Ok(Self { lower, upper })
    }

    /// Denormalized `±CLIP` box of the target map, with the `A` floor replaced by the
    /// positivity bound `A + Abar >= a_floor`.
    pub fn from_targets(targets: &Normalizer, params: &ModelParams, a_floor: f64) -> Result<Self> {
        if targets.dim() != ACTION_DIM {
            return Err(Error::ShapeMismatch {
                what: "target normalizer",
                expected: ACTION_DIM,
                got: targets.dim(),
            });
        }
        let mut lower: Vec<f64> = (0..ACTION_DIM).map(|k| targets.denormalize_one(k, -CLIP)).collect();
        let mut upper: Vec<f64> = (0..ACTION_DIM).map(|k| targets.denormalize_one(k, CLIP)).collect();
        lower[3] = params.activity_floor_anomaly(a_floor);
        // A constant target row leaves an empty box; give it unit width.
        for k in 0..ACTION_DIM {
            if !(lower[k] < upper[k]) {
                upper[k] = lower[k] + 1.0;
            }
        }
        Self::new(lower, upper)
    }
}

/// Elementwise clip of `ACTION_DIM`-row columns into the box.
pub fn clamp_action(raw: &[f64], bounds: &ActionBounds) -> Vec<f64> {
    let d = bounds.lower.len();
    raw.iter()
        .enumerate()
        .map(|(i, v)| v.clamp(bounds.lower[i % d], bounds.upper[i % d]))
        .collect()
}
