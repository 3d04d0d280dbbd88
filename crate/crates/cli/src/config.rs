//! Flat `key = value` experiment configuration with a typed schema.
//!
//! Every key has a default; unknown keys, duplicates and ill-typed values are
//! rejected. The canonical rendering (all keys, schema order) is what gets hashed
//! into the manifest and the agent checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use mjoda_core::constrained::ConstraintSpec;
use mjoda_core::ensemble::LocalizationSpec;
use mjoda_core::nn::{Adam, LossWeights};
use mjoda_core::observation::{schedule_steps, HOURS_PER_TIME_UNIT};
use mjoda_core::rl::{DualState, TrainConfig};
use mjoda_core::skeleton::{warm_pool_sources, ModelParams};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Forcing {
    Homogeneous,
    WarmPool,
}

impl Forcing {
    pub fn name(self) -> &'static str {
        match self {
            Forcing::Homogeneous => "homogeneous",
            Forcing::WarmPool => "warm_pool",
        }
    }

    /// Accepts both `warm_pool` and the flag spelling `warm-pool`.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "homogeneous" => Some(Forcing::Homogeneous),
            "warm_pool" | "warm-pool" => Some(Forcing::WarmPool),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub forcing: Forcing,
    pub gamma: f64,
    pub q_tilde: f64,
    pub h_bar: f64,
    pub a_bar: f64,
    pub source: f64,
    pub n_grid: usize,
    pub domain_length: f64,
    pub dt: f64,
    pub truth_init_a_std: f64,
    pub truth_init_q_std: f64,
    pub ensemble_size: usize,
    pub localization_cutoff: f64,
    pub inflation: f64,
    pub energy_min: f64,
    pub energy_max: f64,
    pub activity_floor: f64,
    pub solver_tol: f64,
    pub solver_max_iters: usize,
    pub obs_noise_variance: f64,
    pub obs_interval_hours: f64,
    pub spinup_days: f64,
    pub run_days: f64,
    pub rl_epochs: usize,
    pub rl_hidden: Vec<usize>,
    pub rl_learning_rate: f64,
    pub rl_slices_per_batch: usize,
    pub rl_spread_nll_weight: f64,
    pub rl_lambda_init: f64,
    pub rl_alpha_lambda: f64,
    pub rl_beta: f64,
    pub rl_eps_ref: f64,
    pub rl_constrained: bool,
    pub eval_days: Vec<f64>,
    pub energy_tolerance: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let p = ModelParams::homogeneous();
        let c = ConstraintSpec::default();
        Self {
            seed: 1,
            forcing: Forcing::Homogeneous,
            gamma: p.gamma,
            q_tilde: p.q_tilde,
            h_bar: p.h_bar,
            a_bar: p.a_bar,
            source: p.source_mean(),
            n_grid: p.n_grid,
            domain_length: p.domain_length,
            dt: p.dt,
            truth_init_a_std: 0.02,
            truth_init_q_std: 0.01,
            ensemble_size: 50,
            localization_cutoff: LocalizationSpec::default().cutoff,
            inflation: 1.0,
            energy_min: c.energy_min,
            energy_max: c.energy_max,
            activity_floor: c.a_floor,
            solver_tol: c.solver_tol,
            solver_max_iters: c.max_iters,
            obs_noise_variance: 0.0063,
            obs_interval_hours: 28.8,
            spinup_days: 100.0,
            run_days: 400.0,
            rl_epochs: 40,
            rl_hidden: vec![64, 64],
            rl_learning_rate: 1e-3,
            rl_slices_per_batch: 4,
            rl_spread_nll_weight: LossWeights::default().spread_nll,
            rl_lambda_init: 1.0,
            rl_alpha_lambda: 0.01,
            rl_beta: 0.001,
            rl_eps_ref: 0.5 * (c.energy_max - c.energy_min),
            rl_constrained: true,
            eval_days: vec![200.0, 300.0, 400.0],
            energy_tolerance: 1e-6,
        }
    }
}

fn parse_f64(key: &str, v: &str) -> CliResult<f64> {
    v.parse::<f64>()
        .map_err(|_| CliError::Config(format!("{key}: expected a number, got {v:?}")))
}

fn parse_usize(key: &str, v: &str) -> CliResult<usize> {
    v.parse::<usize>()
        .map_err(|_| CliError::Config(format!("{key}: expected a non-negative integer, got {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> CliResult<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(CliError::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_list<T>(key: &str, v: &str, item: impl Fn(&str, &str) -> CliResult<T>) -> CliResult<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| item(key, s.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Keys in canonical order.
pub const KEYS: &[&str] = &[
    "seed",
    "forcing",
    "gamma",
    "q_tilde",
    "h_bar",
    "a_bar",
    "source",
    "n_grid",
    "domain_length",
    "dt",
    "truth_init_a_std",
    "truth_init_q_std",
    "ensemble_size",
    "localization_cutoff",
    "inflation",
    "energy_min",
    "energy_max",
    "activity_floor",
    "solver_tol",
    "solver_max_iters",
    "obs_noise_variance",
    "obs_interval_hours",
    "spinup_days",
    "run_days",
    "rl_epochs",
    "rl_hidden",
    "rl_learning_rate",
    "rl_slices_per_batch",
    "rl_spread_nll_weight",
    "rl_lambda_init",
    "rl_alpha_lambda",
    "rl_beta",
    "rl_eps_ref",
    "rl_constrained",
    "eval_days",
    "energy_tolerance",
];

/// Keys that fix the meaning of a trained agent; inference refuses checkpoints whose
/// hash over these differs from the current configuration.
const MODEL_KEYS: &[&str] = &[
    "forcing",
    "gamma",
    "q_tilde",
    "h_bar",
    "a_bar",
    "source",
    "n_grid",
    "domain_length",
    "dt",
    "ensemble_size",
    "localization_cutoff",
    "energy_min",
    "energy_max",
    "activity_floor",
    "obs_interval_hours",
    "rl_hidden",
];

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(CliError::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> CliResult<()> {
        match key {
            "seed" => {
                self.seed = v
                    .parse()
                    .map_err(|_| CliError::Config(format!("seed: expected an unsigned integer, got {v:?}")))?
            }
            "forcing" => {
                self.forcing = Forcing::parse(v)
                    .ok_or_else(|| CliError::Config(format!("forcing: expected homogeneous or warm_pool, got {v:?}")))?
            }
            "gamma" => self.gamma = parse_f64(key, v)?,
            "q_tilde" => self.q_tilde = parse_f64(key, v)?,
            "h_bar" => self.h_bar = parse_f64(key, v)?,
            "a_bar" => self.a_bar = parse_f64(key, v)?,
            "source" => self.source = parse_f64(key, v)?,
            "n_grid" => self.n_grid = parse_usize(key, v)?,
            "domain_length" => self.domain_length = parse_f64(key, v)?,
            "dt" => self.dt = parse_f64(key, v)?,
            "truth_init_a_std" => self.truth_init_a_std = parse_f64(key, v)?,
            "truth_init_q_std" => self.truth_init_q_std = parse_f64(key, v)?,
            "ensemble_size" => self.ensemble_size = parse_usize(key, v)?,
            "localization_cutoff" => self.localization_cutoff = parse_f64(key, v)?,
            "inflation" => self.inflation = parse_f64(key, v)?,
            "energy_min" => self.energy_min = parse_f64(key, v)?,
            "energy_max" => self.energy_max = parse_f64(key, v)?,
            "activity_floor" => self.activity_floor = parse_f64(key, v)?,
            "solver_tol" => self.solver_tol = parse_f64(key, v)?,
            "solver_max_iters" => self.solver_max_iters = parse_usize(key, v)?,
            "obs_noise_variance" => self.obs_noise_variance = parse_f64(key, v)?,
            "obs_interval_hours" => self.obs_interval_hours = parse_f64(key, v)?,
            "spinup_days" => self.spinup_days = parse_f64(key, v)?,
            "run_days" => self.run_days = parse_f64(key, v)?,
            "rl_epochs" => self.rl_epochs = parse_usize(key, v)?,
            "rl_hidden" => self.rl_hidden = parse_list(key, v, parse_usize)?,
            "rl_learning_rate" => self.rl_learning_rate = parse_f64(key, v)?,
            "rl_slices_per_batch" => self.rl_slices_per_batch = parse_usize(key, v)?,
            "rl_spread_nll_weight" => self.rl_spread_nll_weight = parse_f64(key, v)?,
            "rl_lambda_init" => self.rl_lambda_init = parse_f64(key, v)?,
            "rl_alpha_lambda" => self.rl_alpha_lambda = parse_f64(key, v)?,
            "rl_beta" => self.rl_beta = parse_f64(key, v)?,
            "rl_eps_ref" => self.rl_eps_ref = parse_f64(key, v)?,
            "rl_constrained" => self.rl_constrained = parse_bool(key, v)?,
            "eval_days" => self.eval_days = parse_list(key, v, parse_f64)?,
            "energy_tolerance" => self.energy_tolerance = parse_f64(key, v)?,
            _ => return Err(CliError::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    fn value(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "forcing" => self.forcing.name().to_string(),
            "gamma" => self.gamma.to_string(),
            "q_tilde" => self.q_tilde.to_string(),
            "h_bar" => self.h_bar.to_string(),
            "a_bar" => self.a_bar.to_string(),
            "source" => self.source.to_string(),
            "n_grid" => self.n_grid.to_string(),
            "domain_length" => self.domain_length.to_string(),
            "dt" => self.dt.to_string(),
            "truth_init_a_std" => self.truth_init_a_std.to_string(),
            "truth_init_q_std" => self.truth_init_q_std.to_string(),
            "ensemble_size" => self.ensemble_size.to_string(),
            "localization_cutoff" => self.localization_cutoff.to_string(),
            "inflation" => self.inflation.to_string(),
            "energy_min" => self.energy_min.to_string(),
            "energy_max" => self.energy_max.to_string(),
            "activity_floor" => self.activity_floor.to_string(),
            "solver_tol" => self.solver_tol.to_string(),
            "solver_max_iters" => self.solver_max_iters.to_string(),
            "obs_noise_variance" => self.obs_noise_variance.to_string(),
            "obs_interval_hours" => self.obs_interval_hours.to_string(),
            "spinup_days" => self.spinup_days.to_string(),
            "run_days" => self.run_days.to_string(),
            "rl_epochs" => self.rl_epochs.to_string(),
            "rl_hidden" => join(&self.rl_hidden),
            "rl_learning_rate" => self.rl_learning_rate.to_string(),
            "rl_slices_per_batch" => self.rl_slices_per_batch.to_string(),
            "rl_spread_nll_weight" => self.rl_spread_nll_weight.to_string(),
            "rl_lambda_init" => self.rl_lambda_init.to_string(),
            "rl_alpha_lambda" => self.rl_alpha_lambda.to_string(),
            "rl_beta" => self.rl_beta.to_string(),
            "rl_eps_ref" => self.rl_eps_ref.to_string(),
            "rl_constrained" => self.rl_constrained.to_string(),
            "eval_days" => join(&self.eval_days),
            "energy_tolerance" => self.energy_tolerance.to_string(),
            _ => unreachable!("key list and accessor out of sync: {key}"),
        }
    }

    /// Every key with its value, in schema order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        KEYS.iter().map(|&k| (k, self.value(k))).collect()
    }

    /// Canonical text; parsing it yields `self` back.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    pub fn hash(&self) -> String {
        hex_sha256(self.render().as_bytes())
    }

    /// Hash over the keys a trained agent depends on.
    pub fn model_hash(&self) -> String {
        let mut text = String::new();
        for &k in MODEL_KEYS {
            writeln!(text, "{k} = {}", self.value(k)).unwrap();
        }
        hex_sha256(text.as_bytes())
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.model_params()?;
        self.constraints()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.localization()?;
        if self.ensemble_size < 2 {
            return bad(format!("ensemble_size must be at least 2, got {}", self.ensemble_size));
        }
        if self.ensemble_size >= 1 << 16 {
            return bad("ensemble_size must be below 65536".into());
        }
        if !(self.inflation >= 1.0) {
            return bad(format!("inflation must be >= 1, got {}", self.inflation));
        }
        if !(self.obs_noise_variance > 0.0) {
            return bad("obs_noise_variance must be positive".into());
        }
        schedule_steps(self.obs_interval_hours, self.dt).map_err(|e| CliError::Config(e.to_string()))?;
        if !(self.spinup_days >= 0.0) || !(self.run_days >= self.spinup_days) {
            return bad(format!(
                "need 0 <= spinup_days <= run_days, got {} and {}",
                self.spinup_days, self.run_days
            ));
        }
        if !(self.truth_init_a_std >= 0.0 && self.truth_init_q_std >= 0.0) {
            return bad("initial anomaly amplitudes must be non-negative".into());
        }
        if self.rl_hidden.is_empty() || self.rl_hidden.contains(&0) {
            return bad("rl_hidden must list positive layer widths".into());
        }
        if !(self.energy_tolerance >= 0.0) {
            return bad("energy_tolerance must be non-negative".into());
        }
        if self.eval_days.iter().any(|d| !d.is_finite()) {
            return bad("eval_days must be finite".into());
        }
        self.train_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn model_params(&self) -> CliResult<ModelParams> {
        let mut p = ModelParams::homogeneous();
        p.gamma = self.gamma;
        p.q_tilde = self.q_tilde;
        p.h_bar = self.h_bar;
        p.a_bar = self.a_bar;
        p.n_grid = self.n_grid;
        p.domain_length = self.domain_length;
        p.dt = self.dt;
        p.s_theta = vec![self.source; self.n_grid];
        p.s_q = p.s_theta.clone();
        if self.forcing == Forcing::WarmPool {
            let (s_theta, s_q) = warm_pool_sources(&p);
            p.s_theta = s_theta;
            p.s_q = s_q;
        }
        p.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(p)
    }

    pub fn constraints(&self) -> ConstraintSpec {
        ConstraintSpec {
            energy_min: self.energy_min,
            energy_max: self.energy_max,
            a_floor: self.activity_floor,
            solver_tol: self.solver_tol,
            max_iters: self.solver_max_iters,
        }
    }

    pub fn localization(&self) -> CliResult<LocalizationSpec> {
        LocalizationSpec::new(self.localization_cutoff).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Model steps per assimilation interval.
    pub fn interval_steps(&self) -> usize {
        schedule_steps(self.obs_interval_hours, self.dt).expect("validated")
    }

    /// Length of one assimilation interval in days.
    pub fn interval_days(&self) -> f64 {
        self.obs_interval_hours / 24.0
    }

    pub fn interval_time(&self) -> f64 {
        self.interval_steps() as f64 * self.dt
    }

    /// Whole intervals discarded before the first analysis.
    pub fn spinup_cycles(&self) -> usize {
        (self.spinup_days / self.interval_days()).round() as usize
    }

    /// Assimilation cycles after the spin-up.
    pub fn assimilation_cycles(&self) -> usize {
        let total = (self.run_days / self.interval_days()).round() as usize;
        total.saturating_sub(self.spinup_cycles())
    }

    /// Converts model days to nondimensional time.
    pub fn days_to_time(&self, days: f64) -> f64 {
        days * 24.0 / HOURS_PER_TIME_UNIT
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut dual = DualState::with_band(self.energy_min, self.energy_max);
        dual.lambda = self.rl_lambda_init;
        dual.alpha_lambda = self.rl_alpha_lambda;
        dual.beta = self.rl_beta;
        dual.eps_ref = self.rl_eps_ref;
        TrainConfig {
            hidden: self.rl_hidden.clone(),
            epochs: self.rl_epochs,
            slices_per_batch: self.rl_slices_per_batch,
            optimizer: Adam::new(self.rl_learning_rate),
            loss_weights: LossWeights {
                spread_nll: self.rl_spread_nll_weight,
            },
            dual,
            constrained: self.rl_constrained,
            seed: self.seed,
        }
    }
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
