//! Feed-forward policy network with a state-independent diagonal Gaussian head,
//! hand-written backpropagation and an Adam optimizer.
//!
//! Parameters live in one flat vector so the optimizer, gradient checks and
//! checkpoints all share a layout: for each layer the weight matrix (column-major,
//! `out x in`) followed by its bias, then one log-spread per output.

use nalgebra::{DMatrix, DMatrixView, DVectorView};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidParams(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, output_dim: usize, hidden: Vec<usize>) -> Result<Self> {
        let spec = Self {
            input_dim,
            output_dim,
            hidden,
            activation: Activation::Tanh,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Two tanh layers of width 64.
    pub fn policy(input_dim: usize, output_dim: usize) -> Result<Self> {
        Self::new(input_dim, output_dim, vec![64, 64])
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidParams(format!(
                "network needs positive dims and a nonempty hidden list (got {} -> {:?} -> {})",
                self.input_dim, self.hidden, self.output_dim
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| (i + 1) * o).sum::<usize>() + self.output_dim
    }

    fn offsets(&self) -> Vec<usize> {
        let mut off = vec![0];
        for (i, o) in self.layer_dims() {
            off.push(off.last().unwrap() + (i + 1) * o);
        }
        off
    }
}

pub const LOG_SPREAD_INIT: f64 = -1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    spec: NetworkSpec,
    values: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(spec: &NetworkSpec, log_spread: f64) -> Self {
        let n = spec.param_count();
        let mut values = vec![0.0; n];
        values[n - spec.output_dim..].fill(log_spread);
        Self {
            spec: spec.clone(),
            values,
        }
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn glorot<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Self {
        let mut p = Self::zeros(spec, LOG_SPREAD_INIT);
        let off = spec.offsets();
        for (l, (i, o)) in spec.layer_dims().into_iter().enumerate() {
            let limit = (6.0 / (i + o) as f64).sqrt();
            for w in &mut p.values[off[l]..off[l] + i * o] {
                *w = rng.random_range(-limit..limit);
            }
        }
        p
    }

    pub fn from_values(spec: &NetworkSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if values.len() != spec.param_count() {
            return Err(Error::ShapeMismatch {
                what: "policy parameters",
                expected: spec.param_count(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("policy parameters must be finite".into()));
        }
        Ok(Self {
            spec: spec.clone(),
            values,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn log_spread(&self) -> &[f64] {
        &self.values[self.values.len() - self.spec.output_dim..]
    }

    pub fn spread(&self) -> Vec<f64> {
        self.log_spread().iter().map(|s| s.exp()).collect()
    }

    pub fn layer(&self, l: usize) -> (DMatrixView<'_, f64>, DVectorView<'_, f64>) {
        let (i, o) = self.spec.layer_dims()[l];
        let start = self.spec.offsets()[l];
        (
            DMatrixView::from_slice(&self.values[start..start + i * o], o, i),
            DVectorView::from_slice(&self.values[start + i * o..start + (i + 1) * o], o),
        )
    }
}

/// Per-layer inputs and post-activation outputs kept for the backward pass.
struct Trace {
    inputs: Vec<DMatrix<f64>>,
    output: DMatrix<f64>,
}

/// `tanh` through one `exp` where `1 - 2 / (e^{2x} + 1)` has no cancellation.
fn fast_tanh(x: f64) -> f64 {
    let a = x.abs();
    if a < 0.5 * std::f64::consts::LN_2 {
        tanh_convergent(x)
    } else if a > 20.0 {
        1.0f64.copysign(x)
    } else {
        (1.0 - 2.0 / ((2.0 * a).exp() + 1.0)).copysign(x)
    }
}

/// Eighth convergent of the Lambert continued fraction, `x * B / A`; within a
/// few ulps of `tanh` for `|x| < ln 2 / 2` and free of branches.
fn tanh_convergent(x: f64) -> f64 {
    let x2 = x * x;
    let (mut a0, mut a1, mut b0, mut b1) = (1.0, 1.0, 0.0, 1.0);
    for k in [3.0, 5.0, 7.0, 9.0, 11.0, 13.0, 15.0, 17.0] {
        (a0, a1) = (a1, k * a1 + x2 * a0);
        (b0, b1) = (b1, k * b1 + x2 * b0);
    }
    x * b1 / a1
}

fn affine(w: DMatrixView<f64>, b: DVectorView<f64>, h: &DMatrix<f64>, hidden: bool) -> DMatrix<f64> {
    let mut z = w * h;
    for mut col in z.column_iter_mut() {
        col += b;
    }
    if hidden {
        z.apply(|v| *v = fast_tanh(*v));
    }
    z
}

fn forward_trace(params: &PolicyParams, features: &DMatrix<f64>) -> Trace {
    let layers = params.spec.layer_dims().len();
    let mut inputs = Vec::with_capacity(layers);
    let mut h = features.clone();
    for l in 0..layers {
        let (w, b) = params.layer(l);
        let z = affine(w, b, &h, l + 1 < layers);
        inputs.push(std::mem::replace(&mut h, z));
    }
    Trace { inputs, output: h }
}

fn check_features(params: &PolicyParams, features: &DMatrix<f64>) -> Result<()> {
    if features.nrows() != params.spec.input_dim {
        return Err(Error::ShapeMismatch {
            what: "policy features",
            expected: params.spec.input_dim,
            got: features.nrows(),
        });
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParams("policy features must be finite".into()));
    }
    Ok(())
}

/// Mean head for a batch of feature columns (`input_dim x B` to `output_dim x B`).
pub fn forward_batch(params: &PolicyParams, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_features(params, features)?;
    let layers = params.spec.layer_dims().len();
    let (w, b) = params.layer(0);
    let mut h = affine(w, b, features, layers > 1);
    for l in 1..layers {
        let (w, b) = params.layer(l);
        h = affine(w, b, &h, l + 1 < layers);
    }
    Ok(h)
}

/// Returns `(mean, spread)` for one feature vector.
pub fn forward(params: &PolicyParams, features: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let x = DMatrix::from_column_slice(features.len(), 1, features);
    let mean = forward_batch(params, &x)?;
    Ok((mean.as_slice().to_vec(), params.spread()))
}

/// Caller-supplied constraint term: adds `lambda * value` to the loss, with
/// `output_gradient` the derivative of `value` with respect to the mean outputs.
#[derive(Debug, Clone, Copy)]
pub struct Penalty<'a> {
    pub lambda: f64,
    pub value: f64,
    pub output_gradient: &'a DMatrix<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: &'a DMatrix<f64>,
    pub targets: &'a DMatrix<f64>,
    pub penalty: Option<Penalty<'a>>,
}

/// Weight of the Gaussian negative log-likelihood term that trains the spread.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub spread_nll: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { spread_nll: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub mse: f64,
    pub nll: f64,
    pub penalty: f64,
}

/// `loss = mse + w * nll + lambda * penalty`, where both `mse` and `nll` (without
/// the constant) are averaged over samples and outputs.
pub fn loss_and_gradient(
    params: &PolicyParams,
    batch: &Batch,
    weights: &LossWeights,
) -> Result<(LossReport, Vec<f64>)> {
    check_features(params, batch.features)?;
    let spec = &params.spec;
    let b = batch.features.ncols();
    if b == 0 {
        return Err(Error::InvalidParams("empty batch".into()));
    }
    if batch.targets.shape() != (spec.output_dim, b) {
        return Err(Error::ShapeMismatch {
            what: "policy targets",
            expected: spec.output_dim * b,
            got: batch.targets.len(),
        });
    }
    if let Some(p) = &batch.penalty {
        if p.output_gradient.shape() != (spec.output_dim, b) {
            return Err(Error::ShapeMismatch {
                what: "penalty output gradient",
                expected: spec.output_dim * b,
                got: p.output_gradient.len(),
            });
        }
    }

    let trace = forward_trace(params, batch.features);
    let resid = &trace.output - batch.targets;
    let scale = 1.0 / (b * spec.output_dim) as f64;
    let mse = resid.norm_squared() * scale;

    let mut grad = vec![0.0; params.values.len()];
    let log_spread = params.log_spread().to_vec();
    let inv_var: Vec<f64> = log_spread.iter().map(|s| (-2.0 * s).exp()).collect();
    let mut nll = 0.0;
    let spread_off = grad.len() - spec.output_dim;
    for (k, row) in resid.row_iter().enumerate() {
        let ss = row.norm_squared();
        nll += 0.5 * ss * inv_var[k] + b as f64 * log_spread[k];
        grad[spread_off + k] = weights.spread_nll * scale * (b as f64 - ss * inv_var[k]);
    }
    nll *= scale;

    // d loss / d mean outputs
    let mut delta = resid.clone();
    for (k, mut row) in delta.row_iter_mut().enumerate() {
        row *= scale * (2.0 + weights.spread_nll * inv_var[k]);
    }
    let mut penalty = 0.0;
    if let Some(p) = &batch.penalty {
        penalty = p.value;
        delta += p.output_gradient * p.lambda;
    }

    let loss = mse + weights.spread_nll * nll + batch.penalty.map_or(0.0, |p| p.lambda * p.value);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }

    let offsets = spec.offsets();
    let dims = spec.layer_dims();
    for l in (0..dims.len()).rev() {
        let (i, o) = dims[l];
        let input = &trace.inputs[l];
        let dw = &delta * input.transpose();
        let start = offsets[l];
        grad[start..start + i * o].copy_from_slice(dw.as_slice());
        for (g, row) in grad[start + i * o..start + (i + 1) * o]
            .iter_mut()
            .zip(delta.row_iter())
        {
            *g = row.sum();
        }
        if l > 0 {
            let (w, _) = params.layer(l);
            let mut back = w.transpose() * &delta;
            // input of layer l is tanh output of layer l - 1
            back.zip_apply(input, |d, h| *d *= 1.0 - h * h);
            delta = back;
        }
    }
    Ok((
        LossReport {
            loss,
            mse,
            nll,
            penalty,
        },
        grad,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam step in place.
pub fn optimizer_step(params: &mut PolicyParams, grad: &[f64], state: &mut AdamState, opt: &Adam) -> Result<()> {
    let n = params.values.len();
    if grad.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::ShapeMismatch {
            what: "optimizer gradient",
            expected: n,
            got: grad.len(),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    for (((p, &g), m), v) in params.values.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
        *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
        *p -= opt.learning_rate * (*m / c1) / ((*v / c2).sqrt() + opt.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn random_batch(seed: u64, spec: &NetworkSpec, b: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let mut rng = stream(seed, Purpose::Test, 1);
        let x = DMatrix::from_fn(spec.input_dim, b, |_, _| rng.random_range(-1.5..1.5));
        let y = DMatrix::from_fn(spec.output_dim, b, |_, _| rng.random_range(-1.0..1.0));
        let c = DMatrix::from_fn(spec.output_dim, b, |_, _| rng.random_range(-1.0..1.0));
        (x, y, c)
    }

    #[test]
    fn fast_tanh_matches_std() {
        let mut worst: f64 = 0.0;
        for i in -400_000..=400_000 {
            let x = i as f64 * 1e-4;
            let (a, b) = (fast_tanh(x), x.tanh());
            if b != 0.0 {
                worst = worst.max(((a - b) / b).abs());
            }
        }
        assert!(worst < 1e-15, "relative error {worst:e}");
        assert_eq!(fast_tanh(0.0), 0.0);
        assert_eq!(fast_tanh(-50.0), -1.0);
        assert_eq!(fast_tanh(f64::INFINITY), 1.0);
    }

    #[test]
    fn mean_path_matches_trace() {
        let spec = NetworkSpec::new(5, 3, vec![7, 6]).unwrap();
        let p = PolicyParams::glorot(&spec, &mut stream(3, Purpose::Test, 2));
        let (x, _, _) = random_batch(4, &spec, 9);
        assert_eq!(forward_batch(&p, &x).unwrap(), forward_trace(&p, &x).output);
    }

    #[test]
    fn zero_params_give_zero_mean() {
        let spec = NetworkSpec::new(3, 2, vec![4]).unwrap();
        let p = PolicyParams::zeros(&spec, -0.5);
        let (mean, spread) = forward(&p, &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(mean, vec![0.0, 0.0]);
        assert_eq!(spread, vec![(-0.5f64).exp(); 2]);
        assert!(forward(&p, &[1.0]).is_err());
    }

    #[test]
    fn hidden_activations_saturate_inside_unit_interval() {
        let spec = NetworkSpec::new(2, 1, vec![5]).unwrap();
        let p = PolicyParams::glorot(&spec, &mut stream(3, Purpose::Test, 0));
        let trace = forward_trace(&p, &DMatrix::from_column_slice(2, 1, &[1e6, -1e6]));
        assert!(trace.inputs[1].iter().all(|h| h.abs() <= 1.0));
    }

    #[test]
    fn identity_like_weights_pass_input_through() {
        // With tiny weights tanh is linear; scale back up in the output layer.
        let spec = NetworkSpec::new(2, 2, vec![2]).unwrap();
        let eps = 1e-6;
        let mut v = vec![0.0; spec.param_count()];
        v[0] = eps;
        v[3] = eps;
        v[6] = 1.0 / eps;
        v[9] = 1.0 / eps;
        let p = PolicyParams::from_values(&spec, v).unwrap();
        let (mean, _) = forward(&p, &[0.3, -0.7]).unwrap();
        assert!((mean[0] - 0.3).abs() < 1e-9 && (mean[1] + 0.7).abs() < 1e-9);
    }

    #[test]
    fn forward_is_pure() {
        let spec = NetworkSpec::new(4, 3, vec![6, 5]).unwrap();
        let p = PolicyParams::glorot(&spec, &mut stream(5, Purpose::Test, 0));
        let a = forward(&p, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let b = forward(&p, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exact_fit_has_zero_loss_and_gradient() {
        let spec = NetworkSpec::new(3, 2, vec![4]).unwrap();
        let p = PolicyParams::glorot(&spec, &mut stream(1, Purpose::Test, 0));
        let (x, _, _) = random_batch(2, &spec, 5);
        let y = forward_batch(&p, &x).unwrap();
        let batch = Batch {
            features: &x,
            targets: &y,
            penalty: None,
        };
        let (r, g) = loss_and_gradient(&p, &batch, &LossWeights { spread_nll: 0.0 }).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_linear_loss_by_hand() {
        // Hidden unit with tiny weight stays linear: y ~= w_out * eps * x.
        let spec = NetworkSpec::new(1, 1, vec![1]).unwrap();
        let eps = 1e-7;
        let w = 0.8 / eps;
        let p = PolicyParams::from_values(&spec, vec![eps, 0.0, w, 0.0, 0.0]).unwrap();
        let x = DMatrix::from_element(1, 1, 1.0);
        let y = DMatrix::zeros(1, 1);
        let batch = Batch {
            features: &x,
            targets: &y,
            penalty: None,
        };
        let (r, g) = loss_and_gradient(&p, &batch, &LossWeights { spread_nll: 0.0 }).unwrap();
        assert!((r.loss - 0.64).abs() < 1e-9);
        // d loss / d(effective weight) = 2 * 0.8, via the output weight's chain factor eps
        assert!((g[2] / eps - 1.6).abs() < 1e-9);
    }

    fn fd_check(seed: u64) -> f64 {
        let mut rng = stream(seed, Purpose::Test, 7);
        let input = rng.random_range(1..5);
        let output = rng.random_range(1..4);
        let hidden: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(1..6)).collect();
        let spec = NetworkSpec::new(input, output, hidden).unwrap();
        let mut p = PolicyParams::glorot(&spec, &mut rng);
        for s in p.values_mut().iter_mut().rev().take(output) {
            *s = rng.random_range(-1.0..0.5);
        }
        let (x, y, c) = random_batch(seed, &spec, 4);
        let lambda = rng.random_range(0.0..2.0);
        let weights = LossWeights::default();
        // Linear penalty c . mean so the supplied gradient is exact.
        let loss = |p: &PolicyParams| {
            let mean = forward_batch(p, &x).unwrap();
            let value = mean.dot(&c);
            let batch = Batch {
                features: &x,
                targets: &y,
                penalty: Some(Penalty {
                    lambda,
                    value,
                    output_gradient: &c,
                }),
            };
            loss_and_gradient(p, &batch, &weights).unwrap()
        };
        let (_, g) = loss(&p);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for k in 0..g.len() {
            let v = p.values[k];
            p.values[k] = v + h;
            let up = loss(&p).0.loss;
            p.values[k] = v - h;
            let dn = loss(&p).0.loss;
            p.values[k] = v;
            let fd = (up - dn) / (2.0 * h);
            worst = worst.max((fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-3));
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let worst = (0..100).map(fd_check).fold(0.0, f64::max);
        assert!(worst < 1e-5, "relative error {worst}");
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let spec = NetworkSpec::new(2, 1, vec![3]).unwrap();
        let mut p = PolicyParams::glorot(&spec, &mut stream(2, Purpose::Test, 0));
        let before = p.clone();
        let mut st = AdamState::new(spec.param_count());
        st.m.fill(1.0);
        let g = vec![0.0; spec.param_count()];
        optimizer_step(&mut p, &g, &mut st, &Adam::default()).unwrap();
        assert!(st.m.iter().all(|&m| (m - 0.9).abs() < 1e-15));
        // The decayed first moment still moves parameters; a fresh state does not.
        let mut q = before.clone();
        let mut fresh = AdamState::new(spec.param_count());
        optimizer_step(&mut q, &g, &mut fresh, &Adam::default()).unwrap();
        assert_eq!(q, before);
        assert_ne!(p, before);
    }

    #[test]
    fn adam_constant_gradient_steps_at_learning_rate() {
        let spec = NetworkSpec::new(1, 1, vec![1]).unwrap();
        let mut p = PolicyParams::zeros(&spec, 0.0);
        let mut st = AdamState::new(spec.param_count());
        let opt = Adam::new(1e-3);
        let g = vec![0.37, -5.0, 1e-3, 2.0, 0.0];
        for _ in 0..1000 {
            let before = p.values.clone();
            optimizer_step(&mut p, &g, &mut st, &opt).unwrap();
            for ((a, b), gi) in p.values.iter().zip(&before).zip(&g) {
                if *gi != 0.0 {
                    let step = b - a;
                    assert!((step * gi.signum() - 1e-3).abs() <= 1e-3 * (1e-8 / gi.abs() + 1e-10));
                }
            }
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let spec = NetworkSpec::new(3, 2, vec![4]).unwrap();
        let run = || {
            let mut p = PolicyParams::glorot(&spec, &mut stream(9, Purpose::Test, 0));
            let (x, y, _) = random_batch(9, &spec, 8);
            let mut st = AdamState::new(spec.param_count());
            for _ in 0..20 {
                let batch = Batch {
                    features: &x,
                    targets: &y,
                    penalty: None,
                };
                let (_, g) = loss_and_gradient(&p, &batch, &LossWeights::default()).unwrap();
                optimizer_step(&mut p, &g, &mut st, &Adam::default()).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
