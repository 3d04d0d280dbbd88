//! Pipeline stages. Each reads its inputs from the output directory, writes its
//! artifacts there and records itself in the manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde_json::json;

use mjoda_core::constrained::{constrained_analysis, SolvePath};
use mjoda_core::ensemble::{eakf_analysis, enkf_analysis, forecast, inflate, perturbed_observations, Ensemble};
use mjoda_core::evaluation::{corr_at, energy_occupancy, rmse_at};
use mjoda_core::observation::{observe, Observation, ObservationModel};
use mjoda_core::rl::features::{ActionBounds, ACTION_DIM, ACTION_NAMES};
use mjoda_core::rl::infer::BAND_VARIABLES;
use mjoda_core::rl::{
    build_dataset, infer, train, Agent, AgentTrace, Dataset, FeatureLayout, MemberData, Slice, TrainingSet,
};
use mjoda_core::rng::{standard_normals, stream, Purpose, StreamRng};
use mjoda_core::skeleton::{grid_mean_energy, MjoProjector, ModelParams, ModelState, SkeletonModel, Var};

use crate::checkpoint::{read_agent, read_normalization, write_agent, write_normalization};
use crate::config::{hex_sha256, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::io::{fmt_f64, io_err, BinaryFile, CsvTable, CsvWriter};
use crate::manifest::{run_stage, RunManifest, StageContext};

pub const TRUTH_CSV: &str = "truth.csv";
pub const TRUTH_BIN: &str = "truth.dnce";
pub const OBS_CSV: &str = "observations.csv";
pub const DATASET_CSV: &str = "dataset.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LAMBDA_TRACE_CSV: &str = "lambda_trace.csv";
pub const LOSS_TRACE_CSV: &str = "loss_trace.csv";
pub const RL_INFERENCE_CSV: &str = "rl_inference.csv";
pub const RL_MEAN_CSV: &str = "rl_mean.csv";
pub const RL_ENERGY_CSV: &str = "rl_energy.csv";
pub const RL_MEMBERS_BIN: &str = "rl_members.dnce";
pub const SKILL_DIR: &str = "skill";
pub const EVALUATION_JSON: &str = "evaluation.json";
pub const PLOTS_DIR: &str = "plots";

const STATE_COLUMNS: [&str; 6] = ["time", "grid_index", "K", "R", "Q", "A"];
const TRUTH_KIND: &[u8; 4] = b"TRTH";
const ENSEMBLE_KIND: &[u8; 4] = b"ENSM";
/// Evaluated fields: the MJO diagnostic and the four model variables.
pub const SKILL_VARIABLES: [&str; 5] = ["MJO", "K", "R", "Q", "A"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Enkf,
    Eakf,
    Cenkf,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Enkf, Method::Eakf, Method::Cenkf];

    pub fn name(self) -> &'static str {
        match self {
            Method::Enkf => "enkf",
            Method::Eakf => "eakf",
            Method::Cenkf => "cenkf",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

pub fn filter_file(method: Method, what: &str) -> String {
    match what {
        "ensemble" => format!("filter_{}_ensemble.dnce", method.name()),
        _ => format!("filter_{}_{what}.csv", method.name()),
    }
}

/// sha256 over the little-endian bytes of both source vectors.
pub fn source_hash(p: &ModelParams) -> String {
    let bytes: Vec<u8> = p.s_theta.iter().chain(&p.s_q).flat_map(|v| v.to_le_bytes()).collect();
    hex_sha256(&bytes)
}

fn base_meta(cfg: &ExperimentConfig, p: &ModelParams) -> Vec<(String, String)> {
    vec![
        ("config_hash".into(), cfg.hash()),
        ("seed".into(), cfg.seed.to_string()),
        ("forcing".into(), cfg.forcing.name().into()),
        ("source_hash".into(), source_hash(p)),
        ("n_grid".into(), p.n_grid.to_string()),
    ]
}

fn times_match(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(1.0)
}

fn state_rows(w: &mut CsvWriter, s: &ModelState) -> CliResult<()> {
    for j in 0..s.n_grid() {
        w.row(&[
            fmt_f64(s.time),
            j.to_string(),
            fmt_f64(s.k_field[j]),
            fmt_f64(s.r_field[j]),
            fmt_f64(s.q_field[j]),
            fmt_f64(s.a_field[j]),
        ])?;
    }
    Ok(())
}

/// Reads a `(time, grid_index, K, R, Q, A)` file back into states.
pub fn read_state_csv(path: &Path, n_grid: usize) -> CliResult<Vec<ModelState>> {
    let t = CsvTable::read(path)?;
    t.expect_header(&STATE_COLUMNS)?;
    if t.rows.len() % n_grid != 0 {
        return Err(CliError::format(
            path,
            format!("{} rows is not a multiple of n_grid", t.rows.len()),
        ));
    }
    let mut out = Vec::with_capacity(t.rows.len() / n_grid);
    for chunk in 0..t.rows.len() / n_grid {
        let mut s = ModelState::rest(n_grid, t.f64_at(chunk * n_grid, 0)?);
        for j in 0..n_grid {
            let r = chunk * n_grid + j;
            if t.usize_at(r, 1)? != j || t.f64_at(r, 0)? != s.time {
                return Err(CliError::format(
                    path,
                    format!("row {} out of (time, grid_index) order", r + 1),
                ));
            }
            s.k_field[j] = t.f64_at(r, 2)?;
            s.r_field[j] = t.f64_at(r, 3)?;
            s.q_field[j] = t.f64_at(r, 4)?;
            s.a_field[j] = t.f64_at(r, 5)?;
        }
        out.push(s);
    }
    Ok(out)
}

fn write_states_bin(
    path: &Path,
    kind: &[u8; 4],
    meta: &[(String, String)],
    times: &[f64],
    states: Vec<f64>,
    members: usize,
    dim: usize,
) -> CliResult<()> {
    let mut b = BinaryFile::new(kind);
    for (k, v) in meta {
        b.set_meta(k, v);
    }
    b.push("times", &[times.len()], times.to_vec());
    b.push("states", &[times.len(), members, dim], states);
    b.write(path)
}

/// Truth states at the end of spin-up and at every assimilation time.
pub fn read_truth(out: &Path) -> CliResult<Vec<ModelState>> {
    let path = out.join(TRUTH_BIN);
    let b = BinaryFile::read(&path, TRUTH_KIND)?;
    let times = &b.section("times")?.data;
    let states = b.section("states")?;
    let dim = *states.dims.last().unwrap_or(&0);
    if dim == 0 || states.data.len() != times.len() * dim {
        return Err(CliError::format(&path, "inconsistent truth dimensions"));
    }
    times
        .iter()
        .zip(states.data.chunks_exact(dim))
        .map(|(&t, x)| Ok(ModelState::from_stacked(x, t)?))
        .collect()
}

/// Ensemble archive: one entry per analysis time, the initial ensemble first.
pub fn read_archive(path: &Path) -> CliResult<Vec<Ensemble>> {
    let b = BinaryFile::read(path, ENSEMBLE_KIND)?;
    let times = &b.section("times")?.data;
    let states = b.section("states")?;
    if states.dims.len() != 3 || states.dims[0] != times.len() {
        return Err(CliError::format(path, "inconsistent archive dimensions"));
    }
    let (members, dim) = (states.dims[1], states.dims[2]);
    times
        .iter()
        .zip(states.data.chunks_exact(members * dim))
        .map(|(&t, block)| {
            let m = block
                .chunks_exact(dim)
                .map(|x| ModelState::from_stacked(x, t))
                .collect::<mjoda_core::Result<Vec<_>>>()?;
            Ok(Ensemble { members: m, time: t })
        })
        .collect()
}

fn write_archive(path: &Path, meta: &[(String, String)], archive: &[Ensemble]) -> CliResult<()> {
    let members = archive.first().map_or(0, Ensemble::len);
    let dim = archive.first().map_or(0, |e| 4 * e.n_grid());
    let times: Vec<f64> = archive.iter().map(|e| e.time).collect();
    let data: Vec<f64> = archive
        .iter()
        .flat_map(|e| e.members.iter().flat_map(|m| m.stacked()))
        .collect();
    write_states_bin(path, ENSEMBLE_KIND, meta, &times, data, members, dim)
}

pub fn read_observations(out: &Path) -> CliResult<(Vec<Observation>, ObservationModel)> {
    let path = out.join(OBS_CSV);
    let t = CsvTable::read(&path)?;
    t.expect_header(&["time", "grid_index", "value"])?;
    let n: usize = parse_meta(&t, "n_grid")?;
    let model = ObservationModel::new(
        parse_meta(&t, "noise_variance")?,
        parse_meta(&t, "interval_steps")?,
        parse_meta(&t, "log_sigma")?,
    )?;
    if t.rows.len() % n != 0 {
        return Err(CliError::format(&path, "row count is not a multiple of n_grid"));
    }
    let mut obs = Vec::new();
    for chunk in 0..t.rows.len() / n {
        let time = t.f64_at(chunk * n, 0)?;
        let mut values = Vec::with_capacity(n);
        for j in 0..n {
            let r = chunk * n + j;
            if t.usize_at(r, 1)? != j || t.f64_at(r, 0)? != time {
                return Err(CliError::format(
                    &path,
                    format!("row {} out of (time, grid_index) order", r + 1),
                ));
            }
            values.push(t.f64_at(r, 2)?);
        }
        obs.push(Observation { values, time });
    }
    Ok((obs, model))
}

fn parse_meta<T: std::str::FromStr>(t: &CsvTable, key: &str) -> CliResult<T> {
    let v = t.meta(key)?;
    v.parse()
        .map_err(|_| CliError::format(&t.path, format!("metadata {key}={v:?} is malformed")))
}

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Io(format!("missing input {} ({what})", path.display())))
    }
}

/// Small Gaussian `A` and `Q` anomalies about the rest state.
fn perturbed_rest(cfg: &ExperimentConfig, rng: &mut StreamRng, time: f64) -> ModelState {
    let n = cfg.n_grid;
    let xi = standard_normals(rng, 2 * n);
    let mut s = ModelState::rest(n, time);
    for j in 0..n {
        s.a_field[j] = cfg.truth_init_a_std * xi[j];
        s.q_field[j] = cfg.truth_init_q_std * xi[n + j];
    }
    s
}

fn run_steps(model: &SkeletonModel, mut s: ModelState, steps: usize, rng: &mut StreamRng) -> CliResult<ModelState> {
    let n = s.n_grid();
    for _ in 0..steps {
        let xi = standard_normals(rng, n);
        s = model.step(&s, &xi)?;
    }
    Ok(s)
}

pub fn simulate_truth(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    run_stage(out, cfg, "simulate-truth", |ctx| {
        let p = cfg.model_params()?;
        let model = SkeletonModel::new(p.clone())?;
        let steps = cfg.interval_steps();
        let cycles = cfg.assimilation_cycles();
        let mut rng = stream(cfg.seed, Purpose::TruthNoise, 0);
        let init = perturbed_rest(cfg, &mut stream(cfg.seed, Purpose::TruthNoise, 1), 0.0);
        let mut s = run_steps(&model, init, cfg.spinup_cycles() * steps, &mut rng)?;

        let csv_path = ctx.path(TRUTH_CSV);
        let mut meta = base_meta(cfg, &p);
        meta.push(("interval_steps".into(), steps.to_string()));
        meta.push(("spinup_cycles".into(), cfg.spinup_cycles().to_string()));
        meta.push(("start_time".into(), fmt_f64(s.time)));
        let mut w = CsvWriter::create(&csv_path, &meta, &STATE_COLUMNS)?;
        ctx.produced(&csv_path);
        let mut states = vec![s.clone()];
        let mut failure = None;
        for _ in 0..cycles {
            match run_steps(&model, s.clone(), steps, &mut rng) {
                Ok(next) => {
                    s = next;
                    state_rows(&mut w, &s)?;
                    states.push(s.clone());
                }
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        w.finish()?;
        let times: Vec<f64> = states.iter().map(|s| s.time).collect();
        let data: Vec<f64> = states.iter().flat_map(ModelState::stacked).collect();
        let bin = ctx.path(TRUTH_BIN);
        write_states_bin(&bin, TRUTH_KIND, &meta, &times, data, 1, p.state_dim())?;
        ctx.produced(&bin);
        ctx.note("assimilation_times", states.len() - 1);
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    })
}

pub fn observe_truth(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    run_stage(out, cfg, "observe", |ctx| {
        require(&out.join(TRUTH_BIN), "run simulate-truth first")?;
        let p = cfg.model_params()?;
        let truth = read_truth(out)?;
        let climatology: Vec<f64> = truth
            .iter()
            .flat_map(|s| s.a_field.iter().map(|a| a + p.a_bar))
            .collect();
        let model = ObservationModel::calibrated(cfg.obs_noise_variance, cfg.interval_steps(), &climatology)?;
        let mut rng = stream(cfg.seed, Purpose::ObservationNoise, 0);
        let path = ctx.path(OBS_CSV);
        let mut meta = base_meta(cfg, &p);
        meta.push(("noise_variance".into(), fmt_f64(model.noise_variance)));
        meta.push(("interval_steps".into(), model.interval_steps.to_string()));
        meta.push(("log_sigma".into(), fmt_f64(model.log_sigma)));
        let mut w = CsvWriter::create(&path, &meta, &["time", "grid_index", "value"])?;
        ctx.produced(&path);
        for s in &truth[1..] {
            let xi = standard_normals(&mut rng, p.n_grid);
            let o = observe(s, p.a_bar, &model, &xi)?;
            for (j, v) in o.values.iter().enumerate() {
                w.row(&[fmt_f64(o.time), j.to_string(), fmt_f64(*v)])?;
            }
        }
        w.finish()?;
        ctx.note("log_sigma", model.log_sigma);
        Ok(())
    })
}

/// Climatological initial ensemble: member `i` is a free run of the spin-up length
/// from its own perturbed rest state, relabelled to the first analysis time.
pub fn initial_ensemble(cfg: &ExperimentConfig, model: &SkeletonModel, t0: f64) -> CliResult<Ensemble> {
    let steps = cfg.spinup_cycles() * cfg.interval_steps();
    let members = (0..cfg.ensemble_size as u32)
        .map(|i| {
            let mut rng = stream(cfg.seed, Purpose::InitialEnsemble, i);
            let init = perturbed_rest(cfg, &mut rng, 0.0);
            let mut s = run_steps(model, init, steps, &mut rng)?;
            s.time = t0;
            Ok(s)
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(Ensemble::new(members)?)
}

fn perturbed_for_cycle(cfg: &ExperimentConfig, obs: &Observation, cycle: usize, noise_variance: f64) -> DMatrix<f64> {
    let mut rngs: Vec<StreamRng> = (0..cfg.ensemble_size)
        .map(|i| {
            stream(
                cfg.seed,
                Purpose::PerturbedObservation,
                ((cycle as u32) << 16) | i as u32,
            )
        })
        .collect();
    perturbed_observations(obs, noise_variance, &mut rngs)
}

/// Where an analysis left the admissible state space.
#[derive(Debug, Clone, PartialEq)]
pub struct Breach {
    pub time: f64,
    pub member: usize,
    pub grid_index: usize,
    pub value: f64,
}

fn first_breach(e: &Ensemble, a_bar: f64) -> Option<Breach> {
    for (i, m) in e.members.iter().enumerate() {
        if let Some(j) = m.first_non_finite() {
            return Some(Breach {
                time: e.time,
                member: i,
                grid_index: j,
                value: f64::NAN,
            });
        }
    }
    let (value, member, grid_index) = e.min_activity(a_bar);
    (value <= 0.0).then_some(Breach {
        time: e.time,
        member,
        grid_index,
        value,
    })
}

struct FilterWriters {
    mean: CsvWriter,
    spread: CsvWriter,
    energy: CsvWriter,
}

impl FilterWriters {
    fn record(&mut self, e: &Ensemble, p: &ModelParams, paths: &[SolvePath]) -> CliResult<()> {
        state_rows(&mut self.mean, &e.mean_state())?;
        state_rows(&mut self.spread, &spread_state(e))?;
        for (i, m) in e.members.iter().enumerate() {
            let energy = grid_mean_energy(&m.stacked(), p).unwrap_or(f64::NAN);
            let path = paths.get(i).map_or("none", |s| solve_path_name(*s));
            self.energy.row(&[
                fmt_f64(e.time),
                i.to_string(),
                fmt_f64(energy),
                fmt_f64(m.min_activity(p.a_bar)),
                path.to_string(),
            ])?;
        }
        Ok(())
    }

    fn flush(&mut self) -> CliResult<()> {
        self.mean.flush()?;
        self.spread.flush()?;
        self.energy.flush()
    }
}

fn solve_path_name(s: SolvePath) -> &'static str {
    match s {
        SolvePath::Unconstrained => "unconstrained",
        SolvePath::BoundsOnly => "bounds",
        SolvePath::EnergyBand => "energy",
    }
}

/// Per-point sample standard deviation across members.
pub fn spread_state(e: &Ensemble) -> ModelState {
    let x = e.matrix();
    let m = x.ncols() as f64;
    let sd: Vec<f64> = x
        .row_iter()
        .map(|r| {
            let mu = r.sum() / m;
            (r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
        })
        .collect();
    ModelState::from_stacked(&sd, e.time).expect("4n rows")
}

/// Summary of a filter run.
#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub cycles_completed: usize,
    pub analysis_seconds_per_step: f64,
}

pub fn run_filter(cfg: &ExperimentConfig, out: &Path, method: Method) -> CliResult<FilterOutcome> {
    let stage = format!("run-filter-{}", method.name());
    run_stage(out, cfg, &stage, |ctx| run_filter_body(cfg, ctx, method))
}

fn run_filter_body(cfg: &ExperimentConfig, ctx: &mut StageContext, method: Method) -> CliResult<FilterOutcome> {
    let out = ctx.out.clone();
    require(&out.join(TRUTH_BIN), "run simulate-truth first")?;
    require(&out.join(OBS_CSV), "run observe first")?;
    let p = cfg.model_params()?;
    let model = SkeletonModel::new(p.clone())?;
    let loc = cfg.localization()?;
    let cons = cfg.constraints();
    let (obs, om) = read_observations(&out)?;
    if obs.len() >= 1 << 16 {
        return Err(CliError::Config("at most 65535 assimilation cycles".into()));
    }
    let t0 = read_truth(&out)?[0].time;
    let mut meta = base_meta(cfg, &p);
    meta.push(("method".into(), method.name().into()));

    let mut paths = Vec::new();
    let mut open = |what: &str, header: &[&str]| -> CliResult<CsvWriter> {
        let path = out.join(filter_file(method, what));
        paths.push(path.clone());
        CsvWriter::create(&path, &meta, header)
    };
    let mut writers = FilterWriters {
        mean: open("mean", &STATE_COLUMNS)?,
        spread: open("spread", &STATE_COLUMNS)?,
        energy: open("energy", &["time", "member", "energy", "min_activity", "solve_path"])?,
    };
    for path in &paths {
        ctx.produced(path);
    }

    let mut ens = initial_ensemble(cfg, &model, t0)?;
    let mut archive = vec![ens.clone()];
    let mut rngs: Vec<StreamRng> = (0..cfg.ensemble_size as u32)
        .map(|i| stream(cfg.seed, Purpose::ForecastNoise, i))
        .collect();
    let mut analysis_seconds = 0.0;
    let mut path_counts = [0usize; 3];
    let mut failure: Option<CliError> = None;
    for (c, o) in obs.iter().enumerate() {
        let fc = match forecast(&ens, &model, cfg.interval_steps(), &mut rngs) {
            Ok(f) => f,
            Err(e) => {
                failure = Some(CliError::Divergence(format!(
                    "{} forecast from t={} failed: {e}",
                    method.name(),
                    ens.time
                )));
                break;
            }
        };
        if !times_match(fc.time, o.time) {
            return Err(CliError::format(
                &out.join(OBS_CSV),
                format!(
                    "observation at t={} does not follow the forecast time {}",
                    o.time, fc.time
                ),
            ));
        }
        let fc = inflate(&fc, cfg.inflation)?;
        let start = Instant::now();
        let (analysis, solve_paths) = match method {
            Method::Enkf => {
                let pert = perturbed_for_cycle(cfg, o, c, om.noise_variance);
                (enkf_analysis(&fc, o, &om, &loc, p.a_bar, &pert)?, Vec::new())
            }
            Method::Eakf => (eakf_analysis(&fc, o, &om, &loc, p.a_bar)?, Vec::new()),
            Method::Cenkf => {
                let pert = perturbed_for_cycle(cfg, o, c, om.noise_variance);
                let r = constrained_analysis(&fc, o, &om, &loc, &cons, &p, &pert)?;
                (r.ensemble, r.solutions.iter().map(|s| s.path).collect())
            }
        };
        analysis_seconds += start.elapsed().as_secs_f64();
        for s in &solve_paths {
            path_counts[*s as usize] += 1;
        }
        writers.record(&analysis, &p, &solve_paths)?;
        writers.flush()?;
        let breach = first_breach(&analysis, p.a_bar);
        archive.push(analysis.clone());
        ens = analysis;
        if let Some(b) = breach {
            ctx.note("breach_time", b.time);
            ctx.note("breach_member", b.member);
            ctx.note("breach_grid_index", b.grid_index);
            ctx.note(
                "breach_value",
                if b.value.is_finite() {
                    json!(b.value)
                } else {
                    json!("non-finite")
                },
            );
            failure = Some(CliError::Divergence(format!(
                "{} analysis at t={} left the admissible states: A+Abar={} at member {}, grid index {}",
                method.name(),
                b.time,
                b.value,
                b.member,
                b.grid_index
            )));
            break;
        }
    }
    writers.flush()?;
    let cycles_completed = archive.len() - 1;
    let archive_path = out.join(filter_file(method, "ensemble"));
    write_archive(&archive_path, &meta, &archive)?;
    ctx.produced(&archive_path);
    let per_step = analysis_seconds / cycles_completed.max(1) as f64;
    ctx.note("cycles_completed", cycles_completed);
    ctx.note("analysis_seconds_per_step", per_step);
    if method == Method::Cenkf {
        ctx.note(
            "solve_paths",
            json!({"unconstrained": path_counts[0], "bounds": path_counts[1], "energy": path_counts[2]}),
        );
    }
    if let Some(e) = failure {
        return Err(e);
    }
    if method == Method::Cenkf {
        write_dataset(cfg, ctx, &archive, &obs)?;
    }
    Ok(FilterOutcome {
        cycles_completed,
        analysis_seconds_per_step: per_step,
    })
}

fn layout(cfg: &ExperimentConfig) -> CliResult<FeatureLayout> {
    Ok(FeatureLayout::new(cfg.n_grid, &cfg.localization()?))
}

fn dataset_header(layout: &FeatureLayout) -> Vec<String> {
    let mut h = vec!["member".to_string(), "time".into(), "grid_index".into()];
    h.extend(layout.names());
    h.extend(ACTION_NAMES.iter().map(|n| format!("target_{n}")));
    h
}

/// Writes the imitation dataset from a constrained-filter archive.
fn write_dataset(
    cfg: &ExperimentConfig,
    ctx: &mut StageContext,
    archive: &[Ensemble],
    obs: &[Observation],
) -> CliResult<()> {
    let p = cfg.model_params()?;
    let layout = layout(cfg)?;
    let ds = build_dataset(&archive[1..], obs, &p, &layout, cfg.interval_time())?;
    let path = ctx.path(DATASET_CSV);
    let mut meta = base_meta(cfg, &p);
    meta.push(("model_hash".into(), cfg.model_hash()));
    meta.push(("delta_t".into(), fmt_f64(ds.delta_t)));
    meta.push(("feature_count".into(), layout.len().to_string()));
    let header = dataset_header(&layout);
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut w = CsvWriter::create(&path, &meta, &header_refs)?;
    ctx.produced(&path);
    let mut row = Vec::with_capacity(header.len());
    for m in &ds.members {
        for s in &m.slices {
            for j in 0..layout.n_grid {
                row.clear();
                row.push(m.member.to_string());
                row.push(fmt_f64(s.time));
                row.push(j.to_string());
                row.extend(s.features.column(j).iter().map(|v| fmt_f64(*v)));
                row.extend(s.targets.column(j).iter().map(|v| fmt_f64(*v)));
                w.row(&row)?;
            }
        }
    }
    w.finish()?;
    ctx.note("dataset_slices", ds.members.first().map_or(0, |m| m.slices.len()));
    Ok(())
}

pub fn make_dataset(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    run_stage(out, cfg, "make-dataset", |ctx| {
        let archive_path = out.join(filter_file(Method::Cenkf, "ensemble"));
        require(&archive_path, "run run-filter --method cenkf first")?;
        let archive = read_archive(&archive_path)?;
        let (obs, _) = read_observations(out)?;
        if archive.len() != obs.len() + 1 {
            return Err(CliError::format(
                &archive_path,
                format!(
                    "archive has {} analyses for {} observation times",
                    archive.len() - 1,
                    obs.len()
                ),
            ));
        }
        write_dataset(cfg, ctx, &archive, &obs)
    })
}

pub fn read_dataset(cfg: &ExperimentConfig, path: &Path) -> CliResult<Dataset> {
    let layout = layout(cfg)?;
    let t = CsvTable::read(path)?;
    let header = dataset_header(&layout);
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    if t.header != header {
        t.expect_header(&header_refs)?;
        return Err(CliError::format(path, "unexpected trailing columns"));
    }
    let model_hash = t.meta("model_hash")?;
    if model_hash != cfg.model_hash() {
        return Err(CliError::Config(format!(
            "dataset {} was built under a different model configuration",
            path.display()
        )));
    }
    let delta_t: f64 = parse_meta(&t, "delta_t")?;
    let (n, f) = (layout.n_grid, layout.len());
    if t.rows.len() % n != 0 {
        return Err(CliError::format(path, "row count is not a multiple of n_grid"));
    }
    let mut members: Vec<MemberData> = Vec::new();
    for chunk in 0..t.rows.len() / n {
        let r0 = chunk * n;
        let member = t.usize_at(r0, 0)?;
        let time = t.f64_at(r0, 1)?;
        let mut features = DMatrix::zeros(f, n);
        let mut targets = DMatrix::zeros(ACTION_DIM, n);
        for j in 0..n {
            let r = r0 + j;
            if t.usize_at(r, 0)? != member || t.f64_at(r, 1)? != time || t.usize_at(r, 2)? != j {
                return Err(CliError::format(
                    path,
                    format!("row {} out of (member, time, grid_index) order", r + 1),
                ));
            }
            for k in 0..f {
                features[(k, j)] = t.f64_at(r, 3 + k)?;
            }
            for k in 0..ACTION_DIM {
                targets[(k, j)] = t.f64_at(r, 3 + f + k)?;
            }
        }
        let slice = Slice {
            time,
            features,
            targets,
        };
        match members.last_mut() {
            Some(m) if m.member == member => m.slices.push(slice),
            _ => {
                if member != members.len() {
                    return Err(CliError::format(path, format!("member {member} out of order")));
                }
                members.push(MemberData {
                    member,
                    slices: vec![slice],
                })
            }
        }
    }
    if members.is_empty() {
        return Err(CliError::format(path, "dataset is empty"));
    }
    if members.iter().any(|m| m.slices.len() != members[0].slices.len()) {
        return Err(CliError::format(path, "members have different slice counts"));
    }
    Ok(Dataset {
        layout,
        delta_t,
        members,
    })
}

pub fn agent_path(out: &Path, member: usize) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("agent_{member:04}.dnce"))
}

pub fn normalization_path(out: &Path) -> PathBuf {
    out.join(CHECKPOINT_DIR).join("normalization.dnce")
}

/// Training summary.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agents: usize,
    pub epochs_done: usize,
    pub final_lambda: Vec<f64>,
}

pub fn train_rl(cfg: &ExperimentConfig, out: &Path, resume: bool) -> CliResult<TrainOutcome> {
    run_stage(out, cfg, "train-rl", |ctx| {
        let data_path = out.join(DATASET_CSV);
        require(&data_path, "run run-filter --method cenkf or make-dataset first")?;
        let p = cfg.model_params()?;
        let tc = cfg.train_config();
        let ds = read_dataset(cfg, &data_path)?;
        if ds.members[0].slices.len() < 3 {
            return Err(CliError::Config(
                "training needs at least 3 consecutive dataset times".into(),
            ));
        }
        if ds.members.len() != cfg.ensemble_size {
            return Err(CliError::Config(format!(
                "dataset has {} members, config expects {}",
                ds.members.len(),
                cfg.ensemble_size
            )));
        }
        let (norm, bounds, agents, old_traces) = if resume {
            let (norm, bounds) = read_normalization(&normalization_path(out), cfg)?;
            let agents = (0..ds.members.len())
                .map(|i| read_agent(&agent_path(out, i), cfg))
                .collect::<CliResult<Vec<Agent>>>()?;
            let old = (
                read_rows(&out.join(LAMBDA_TRACE_CSV))?,
                read_rows(&out.join(LOSS_TRACE_CSV))?,
            );
            (norm, bounds, agents, Some(old))
        } else {
            let norm = ds.fit_normalization()?;
            let bounds = ActionBounds::from_targets(&norm.targets, &p, cfg.activity_floor)?;
            let agents = (0..ds.members.len())
                .map(|i| Agent::init(i, ds.layout.len(), &tc))
                .collect::<mjoda_core::Result<Vec<_>>>()?;
            (norm, bounds, agents, None)
        };
        if agents.iter().any(|a| a.epochs_done + tc.epochs >= 1 << 16) {
            return Err(CliError::Config("at most 65535 epochs in total".into()));
        }
        let sets = ds
            .members
            .iter()
            .map(|m| TrainingSet::new(m, &norm))
            .collect::<mjoda_core::Result<Vec<_>>>()?;
        let start = Instant::now();
        let results = train(agents, &sets, &norm, &bounds, &p, &tc)?;
        ctx.note("train_seconds", start.elapsed().as_secs_f64());
        let mut trained = Vec::with_capacity(results.len());
        for r in results {
            trained.push(r?);
        }

        std::fs::create_dir_all(out.join(CHECKPOINT_DIR)).map_err(|e| io_err(&out.join(CHECKPOINT_DIR), e))?;
        let np = normalization_path(out);
        write_normalization(&np, cfg, &norm, &bounds)?;
        ctx.produced(&np);
        for (agent, _) in &trained {
            let path = agent_path(out, agent.member);
            write_agent(&path, cfg, agent, &norm, &bounds)?;
            ctx.produced(&path);
        }
        let (old_lambda, old_loss) = old_traces.unwrap_or_default();
        let meta = base_meta(cfg, &p);
        let lp = ctx.path(LAMBDA_TRACE_CSV);
        let mut lw = CsvWriter::create(&lp, &meta, &["agent", "epoch", "lambda"])?;
        let loss_path = ctx.path(LOSS_TRACE_CSV);
        let mut sw = CsvWriter::create(&loss_path, &meta, &["agent", "epoch", "loss", "mse", "distance"])?;
        ctx.produced(&lp);
        ctx.produced(&loss_path);
        write_traces(&mut lw, &mut sw, &trained, &old_lambda, &old_loss)?;
        lw.finish()?;
        sw.finish()?;
        let final_lambda: Vec<f64> = trained.iter().map(|(a, _)| a.dual.lambda).collect();
        ctx.note("constrained", tc.constrained);
        ctx.note(
            "mean_final_lambda",
            final_lambda.iter().sum::<f64>() / final_lambda.len() as f64,
        );
        Ok(TrainOutcome {
            agents: trained.len(),
            epochs_done: trained[0].0.epochs_done,
            final_lambda,
        })
    })
}

fn read_rows(path: &Path) -> CliResult<Vec<Vec<String>>> {
    require(path, "trace from the run being resumed")?;
    Ok(CsvTable::read(path)?.rows)
}

/// Rows grouped by agent: earlier traces first, then the new epochs.
fn write_traces(
    lw: &mut CsvWriter,
    sw: &mut CsvWriter,
    trained: &[(Agent, AgentTrace)],
    old_lambda: &[Vec<String>],
    old_loss: &[Vec<String>],
) -> CliResult<()> {
    for (agent, trace) in trained {
        let id = agent.member.to_string();
        for r in old_lambda.iter().filter(|r| r[0] == id) {
            lw.row(r)?;
        }
        for r in old_loss.iter().filter(|r| r[0] == id) {
            sw.row(r)?;
        }
        for k in 0..trace.epoch.len() {
            let epoch = trace.epoch[k].to_string();
            lw.row(&[id.clone(), epoch.clone(), fmt_f64(trace.lambda[k])])?;
            sw.row(&[
                id.clone(),
                epoch,
                fmt_f64(trace.loss[k]),
                fmt_f64(trace.mse[k]),
                fmt_f64(trace.distance[k]),
            ])?;
        }
    }
    Ok(())
}

/// Inference summary.
#[derive(Debug, Clone)]
pub struct InferOutcome {
    pub steps: usize,
    pub seconds_per_step: f64,
    pub occupancy: f64,
    pub min_activity: f64,
}

pub fn infer_rl(cfg: &ExperimentConfig, out: &Path) -> CliResult<InferOutcome> {
    run_stage(out, cfg, "infer-rl", |ctx| {
        let p = cfg.model_params()?;
        let np = normalization_path(out);
        require(&np, "run train-rl first")?;
        let (norm, bounds) = read_normalization(&np, cfg)?;
        let agents = (0..cfg.ensemble_size)
            .map(|i| read_agent(&agent_path(out, i), cfg))
            .collect::<CliResult<Vec<Agent>>>()?;
        let archive_path = out.join(filter_file(Method::Cenkf, "ensemble"));
        require(&archive_path, "inference starts from the constrained-filter analyses")?;
        let archive = read_archive(&archive_path)?;
        let (obs, _) = read_observations(out)?;
        if archive.len() < 4 || obs.len() < 4 {
            return Err(CliError::Config(
                "inference needs at least four assimilation times".into(),
            ));
        }
        let initial: Vec<[ModelState; 3]> = (0..agents.len())
            .map(|i| [1, 2, 3].map(|k| archive[k].members[i].clone()))
            .collect();
        let layout = layout(cfg)?;
        let start = Instant::now();
        let inf = infer(
            &agents,
            &norm,
            &bounds,
            &layout,
            &initial,
            &obs[3..],
            &p,
            cfg.interval_time(),
        )?;
        let per_step = start.elapsed().as_secs_f64() / inf.times.len().max(1) as f64;
        write_inference(cfg, ctx, &p, &inf)?;
        let occupancy = energy_occupancy(
            inf.energies.iter().flatten(),
            cfg.energy_min,
            cfg.energy_max,
            cfg.energy_tolerance,
        )?;
        let min_activity = inf
            .members
            .iter()
            .flatten()
            .map(|m| m.min_activity(p.a_bar))
            .fold(f64::INFINITY, f64::min);
        ctx.note("inference_seconds_per_step", per_step);
        ctx.note("energy_occupancy", occupancy);
        ctx.note("min_activity", min_activity);
        ctx.note("clipped_features", inf.clipped_features);
        Ok(InferOutcome {
            steps: inf.times.len(),
            seconds_per_step: per_step,
            occupancy,
            min_activity,
        })
    })
}

fn write_inference(
    cfg: &ExperimentConfig,
    ctx: &mut StageContext,
    p: &ModelParams,
    inf: &mjoda_core::rl::Inference,
) -> CliResult<()> {
    let meta = base_meta(cfg, p);
    let n = p.n_grid;
    let path = ctx.path(RL_INFERENCE_CSV);
    let mut w = CsvWriter::create(&path, &meta, &["time", "grid_index", "variable", "mean", "lo", "hi"])?;
    ctx.produced(&path);
    let mean_path = ctx.path(RL_MEAN_CSV);
    let mut mw = CsvWriter::create(&mean_path, &meta, &STATE_COLUMNS)?;
    ctx.produced(&mean_path);
    for band in &inf.bands {
        for j in 0..n {
            for (v, name) in BAND_VARIABLES.iter().enumerate() {
                let (m, s) = (band.mean[v * n + j], band.spread[v * n + j]);
                w.row(&[
                    fmt_f64(band.time),
                    j.to_string(),
                    name.to_string(),
                    fmt_f64(m),
                    fmt_f64(m - 2.0 * s),
                    fmt_f64(m + 2.0 * s),
                ])?;
            }
        }
        state_rows(&mut mw, &ModelState::from_stacked(&band.mean[..4 * n], band.time)?)?;
    }
    w.finish()?;
    mw.finish()?;
    let ep = ctx.path(RL_ENERGY_CSV);
    let mut ew = CsvWriter::create(&ep, &meta, &["time", "agent", "energy", "min_activity"])?;
    ctx.produced(&ep);
    for (t, members) in inf.members.iter().enumerate() {
        for (i, m) in members.iter().enumerate() {
            ew.row(&[
                fmt_f64(inf.times[t]),
                i.to_string(),
                fmt_f64(inf.energies[t][i]),
                fmt_f64(m.min_activity(p.a_bar)),
            ])?;
        }
    }
    ew.finish()?;
    let archive: Vec<Ensemble> = inf
        .members
        .iter()
        .zip(&inf.times)
        .map(|(m, &t)| Ensemble {
            members: m.clone(),
            time: t,
        })
        .collect();
    let bp = ctx.path(RL_MEMBERS_BIN);
    write_archive(&bp, &meta, &archive)?;
    ctx.produced(&bp);
    Ok(())
}

/// Estimate trajectories available for evaluation, by method label.
fn estimates(out: &Path, n_grid: usize) -> CliResult<Vec<(String, Vec<ModelState>)>> {
    let mut found = Vec::new();
    for m in Method::ALL {
        let path = out.join(filter_file(m, "mean"));
        if path.exists() {
            found.push((m.name().to_string(), read_state_csv(&path, n_grid)?));
        }
    }
    let rl = out.join(RL_MEAN_CSV);
    if rl.exists() {
        found.push(("rl".to_string(), read_state_csv(&rl, n_grid)?));
    }
    Ok(found)
}

fn skill_field(var: &str, s: &ModelState, proj: &MjoProjector) -> Vec<f64> {
    match var {
        "MJO" => proj.diagnostic(s),
        "K" => s.field(Var::K).to_vec(),
        "R" => s.field(Var::R).to_vec(),
        "Q" => s.field(Var::Q).to_vec(),
        "A" => s.field(Var::A).to_vec(),
        _ => unreachable!("unknown skill variable {var}"),
    }
}

/// Normalized RMSE and correlation; NaN where the truth field is constant.
fn skill_pair(truth: &[f64], est: &[f64]) -> (f64, f64) {
    (
        rmse_at(truth, est).unwrap_or(f64::NAN),
        corr_at(truth, est).unwrap_or(f64::NAN),
    )
}

fn mean_finite(v: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = v
        .filter(|x| x.is_finite())
        .fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    if c == 0 {
        f64::NAN
    } else {
        s / c as f64
    }
}

/// Evaluation summary per method: mean RMSE and correlation of each skill variable.
#[derive(Debug, Clone)]
pub struct EvaluationReport {
    pub methods: Vec<MethodSkill>,
    pub json: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct MethodSkill {
    pub method: String,
    /// `(variable, mean rmse, mean corr)` in [`SKILL_VARIABLES`] order.
    pub scores: Vec<(String, f64, f64)>,
    pub times: Vec<f64>,
}

impl EvaluationReport {
    pub fn method(&self, name: &str) -> Option<&MethodSkill> {
        self.methods.iter().find(|m| m.method == name)
    }
}

impl MethodSkill {
    pub fn score(&self, var: &str) -> (f64, f64) {
        self.scores
            .iter()
            .find(|s| s.0 == var)
            .map(|s| (s.1, s.2))
            .unwrap_or((f64::NAN, f64::NAN))
    }
}

/// Scores every available estimate against the truth. With `common_times`, only
/// times present in every estimate are scored, so methods are compared on the same
/// grid.
pub fn evaluate(cfg: &ExperimentConfig, out: &Path, common_times: bool) -> CliResult<EvaluationReport> {
    run_stage(out, cfg, "evaluate", |ctx| {
        require(&out.join(TRUTH_BIN), "run simulate-truth first")?;
        let p = cfg.model_params()?;
        let proj = MjoProjector::new(&p)?;
        let truth = read_truth(out)?;
        let ests = estimates(out, p.n_grid)?;
        if ests.is_empty() {
            return Err(CliError::Io(format!("no estimates to evaluate in {}", out.display())));
        }
        let truth_index = |t: f64| truth.iter().position(|s| times_match(s.time, t));
        for (name, states) in &ests {
            if let Some(s) = states.iter().find(|s| truth_index(s.time).is_none()) {
                return Err(CliError::Config(format!(
                    "{name} estimate at t={} has no truth state at that time",
                    s.time
                )));
            }
        }
        let keep = |t: f64| !common_times || ests.iter().all(|(_, st)| st.iter().any(|s| times_match(s.time, t)));

        let skill_dir = out.join(SKILL_DIR);
        std::fs::create_dir_all(&skill_dir).map_err(|e| io_err(&skill_dir, e))?;
        let meta = base_meta(cfg, &p);
        let mut methods = Vec::new();
        for (name, states) in &ests {
            let states: Vec<&ModelState> = states.iter().filter(|s| keep(s.time)).collect();
            let mut scores = Vec::new();
            for var in SKILL_VARIABLES {
                let path = skill_dir.join(format!("{name}_{var}.csv"));
                let mut w = CsvWriter::create(&path, &meta, &["time", "rmse", "corr"])?;
                ctx.produced(&path);
                let mut pairs = Vec::with_capacity(states.len());
                for s in &states {
                    let tr = &truth[truth_index(s.time).expect("checked")];
                    let (r, c) = skill_pair(&skill_field(var, tr, &proj), &skill_field(var, s, &proj));
                    w.row(&[fmt_f64(s.time), fmt_f64(r), fmt_f64(c)])?;
                    pairs.push((r, c));
                }
                w.finish()?;
                scores.push((
                    var.to_string(),
                    mean_finite(pairs.iter().map(|p| p.0)),
                    mean_finite(pairs.iter().map(|p| p.1)),
                ));
            }
            methods.push(MethodSkill {
                method: name.clone(),
                scores,
                times: states.iter().map(|s| s.time).collect(),
            });
        }

        let summary_path = skill_dir.join("summary.csv");
        let mut sw = CsvWriter::create(
            &summary_path,
            &meta,
            &["method", "variable", "day", "time", "rmse", "corr"],
        )?;
        ctx.produced(&summary_path);
        let half = 0.5 * cfg.interval_time();
        for &day in &cfg.eval_days {
            let target = cfg.days_to_time(day);
            let tr = truth
                .iter()
                .skip(1)
                .min_by(|a, b| (a.time - target).abs().total_cmp(&(b.time - target).abs()))
                .filter(|s| (s.time - target).abs() <= half)
                .ok_or_else(|| {
                    CliError::Config(format!(
                        "evaluation time day {day} (t={target}) is absent from the truth trajectory"
                    ))
                })?;
            let mut any = false;
            for (name, states) in &ests {
                let Some(s) = states.iter().find(|s| times_match(s.time, tr.time)) else {
                    continue;
                };
                any = true;
                for var in SKILL_VARIABLES {
                    let (r, c) = skill_pair(&skill_field(var, tr, &proj), &skill_field(var, s, &proj));
                    sw.row(&[
                        name.clone(),
                        var.into(),
                        fmt_f64(day),
                        fmt_f64(tr.time),
                        fmt_f64(r),
                        fmt_f64(c),
                    ])?;
                }
            }
            if !any {
                return Err(CliError::Config(format!(
                    "evaluation time day {day} (t={}) is absent from every estimate",
                    tr.time
                )));
            }
        }
        sw.finish()?;

        let json = evaluation_json(cfg, out, &methods)?;
        let jp = out.join(EVALUATION_JSON);
        std::fs::write(&jp, serde_json::to_string_pretty(&json).expect("json") + "\n").map_err(|e| io_err(&jp, e))?;
        ctx.produced(&jp);
        Ok(EvaluationReport { methods, json })
    })
}

/// Energies `(time, member, energy, min_activity)` of a filter or inference run.
pub fn read_energies(path: &Path) -> CliResult<Vec<(f64, usize, f64, f64)>> {
    let t = CsvTable::read(path)?;
    let (ct, cm, ce, ca) = (
        t.column("time")?,
        t.column(&t.header[1])?,
        t.column("energy")?,
        t.column("min_activity")?,
    );
    (0..t.rows.len())
        .map(|r| Ok((t.f64_at(r, ct)?, t.usize_at(r, cm)?, t.f64_at(r, ce)?, t.f64_at(r, ca)?)))
        .collect()
}

fn evaluation_json(cfg: &ExperimentConfig, out: &Path, methods: &[MethodSkill]) -> CliResult<serde_json::Value> {
    let mut skill = serde_json::Map::new();
    for m in methods {
        let scores: serde_json::Map<String, serde_json::Value> = m
            .scores
            .iter()
            .map(|(v, r, c)| {
                (
                    v.clone(),
                    json!({"mean_rmse": finite_or_null(*r), "mean_corr": finite_or_null(*c)}),
                )
            })
            .collect();
        skill.insert(m.method.clone(), json!({"times": m.times.len(), "scores": scores}));
    }
    let mut occupancy = serde_json::Map::new();
    let mut energy_files: Vec<(String, PathBuf)> = Method::ALL
        .iter()
        .map(|m| (m.name().to_string(), out.join(filter_file(*m, "energy"))))
        .collect();
    energy_files.push(("rl".into(), out.join(RL_ENERGY_CSV)));
    for (name, path) in energy_files {
        if !path.exists() {
            continue;
        }
        let rows = read_energies(&path)?;
        let occ = energy_occupancy(
            rows.iter().map(|r| &r.2),
            cfg.energy_min,
            cfg.energy_max,
            cfg.energy_tolerance,
        )
        .unwrap_or(f64::NAN);
        let min_a = rows.iter().map(|r| r.3).fold(f64::INFINITY, f64::min);
        occupancy.insert(
            name,
            json!({"fraction_in_band": finite_or_null(occ), "min_activity": finite_or_null(min_a), "rows": rows.len()}),
        );
    }
    let manifest = RunManifest::load_or_new(out, cfg)?;
    let note = |stage: &str, key: &str| {
        manifest
            .stages
            .get(stage)
            .and_then(|s| s.notes.get(key))
            .and_then(|v| v.as_f64())
    };
    let analysis = note("run-filter-cenkf", "analysis_seconds_per_step");
    let inference = note("infer-rl", "inference_seconds_per_step");
    let speedup = match (analysis, inference) {
        (Some(a), Some(i)) if i > 0.0 => Some(a / i),
        _ => None,
    };
    Ok(json!({
        "energy_band": [cfg.energy_min, cfg.energy_max],
        "energy_tolerance": cfg.energy_tolerance,
        "skill": skill,
        "occupancy": occupancy,
        "timing": {
            "cenkf_analysis_seconds_per_step": analysis,
            "rl_inference_seconds_per_step": inference,
            "speedup": speedup,
        },
    }))
}

fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else {
        serde_json::Value::Null
    }
}

/// Writes the plot-ready tables: trajectories with bands, Hovmoller fields and energies.
pub fn export_plots_data(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    run_stage(out, cfg, "export-plots-data", |ctx| {
        require(&out.join(TRUTH_BIN), "run simulate-truth first")?;
        let p = cfg.model_params()?;
        let proj = MjoProjector::new(&p)?;
        let truth = read_truth(out)?;
        let dir = out.join(PLOTS_DIR);
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let mut meta = base_meta(cfg, &p);
        meta.push(("energy_min".into(), fmt_f64(cfg.energy_min)));
        meta.push(("energy_max".into(), fmt_f64(cfg.energy_max)));

        let ts_path = dir.join("timeseries.csv");
        let mut ts = CsvWriter::create(
            &ts_path,
            &meta,
            &["method", "time", "grid_index", "variable", "mean", "lo", "hi"],
        )?;
        let hv_path = dir.join("hovmoller.csv");
        let mut hv = CsvWriter::create(&hv_path, &meta, &["method", "time", "grid_index", "variable", "value"])?;
        let en_path = dir.join("energy.csv");
        let mut en = CsvWriter::create(&en_path, &meta, &["method", "time", "member", "energy"])?;
        for path in [&ts_path, &hv_path, &en_path] {
            ctx.produced(path);
        }

        for s in &truth[1..] {
            let fields = plot_fields(s, &p, &proj);
            for (name, f) in &fields {
                for (j, v) in f.iter().enumerate() {
                    let v = fmt_f64(*v);
                    ts.row(&[
                        "truth".into(),
                        fmt_f64(s.time),
                        j.to_string(),
                        name.to_string(),
                        v.clone(),
                        v.clone(),
                        v.clone(),
                    ])?;
                    hv.row(&["truth".into(), fmt_f64(s.time), j.to_string(), name.to_string(), v])?;
                }
            }
            let e = grid_mean_energy(&s.stacked(), &p).unwrap_or(f64::NAN);
            en.row(&["truth".into(), fmt_f64(s.time), "0".into(), fmt_f64(e)])?;
        }

        let mut archives: Vec<(String, PathBuf)> = Method::ALL
            .iter()
            .map(|m| (m.name().to_string(), out.join(filter_file(*m, "ensemble"))))
            .collect();
        archives.push(("rl".into(), out.join(RL_MEMBERS_BIN)));
        for (name, path) in archives {
            if !path.exists() {
                continue;
            }
            let archive = read_archive(&path)?;
            let skip = usize::from(name != "rl");
            for e in archive.iter().skip(skip) {
                let per_member: Vec<Vec<(&str, Vec<f64>)>> =
                    e.members.iter().map(|m| plot_fields(m, &p, &proj)).collect();
                for (v, (var, _)) in per_member[0].iter().enumerate() {
                    for j in 0..p.n_grid {
                        let vals: Vec<f64> = per_member.iter().map(|f| f[v].1[j]).collect();
                        let k = vals.len() as f64;
                        let mean = vals.iter().sum::<f64>() / k;
                        let sd = (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
                        ts.row(&[
                            name.clone(),
                            fmt_f64(e.time),
                            j.to_string(),
                            var.to_string(),
                            fmt_f64(mean),
                            fmt_f64(mean - 2.0 * sd),
                            fmt_f64(mean + 2.0 * sd),
                        ])?;
                        hv.row(&[
                            name.clone(),
                            fmt_f64(e.time),
                            j.to_string(),
                            var.to_string(),
                            fmt_f64(mean),
                        ])?;
                    }
                }
                for (i, m) in e.members.iter().enumerate() {
                    let energy = grid_mean_energy(&m.stacked(), &p).unwrap_or(f64::NAN);
                    en.row(&[name.clone(), fmt_f64(e.time), i.to_string(), fmt_f64(energy)])?;
                }
            }
        }
        ts.finish()?;
        hv.finish()?;
        en.finish()?;
        Ok(())
    })
}

fn plot_fields(s: &ModelState, p: &ModelParams, proj: &MjoProjector) -> Vec<(&'static str, Vec<f64>)> {
    vec![
        ("K", s.k_field.clone()),
        ("R", s.r_field.clone()),
        ("Z", s.z_field(p.q_tilde)),
        ("A", s.a_field.clone()),
        ("MJO", proj.diagnostic(s)),
    ]
}

/// Every stage in order, with the constrained filter as the reference analysis.
pub fn full_pipeline(cfg: &ExperimentConfig, out: &Path) -> CliResult<EvaluationReport> {
    simulate_truth(cfg, out)?;
    observe_truth(cfg, out)?;
    run_filter(cfg, out, Method::Cenkf)?;
    train_rl(cfg, out, false)?;
    infer_rl(cfg, out)?;
    let report = evaluate(cfg, out, true)?;
    export_plots_data(cfg, out)?;
    Ok(report)
}
