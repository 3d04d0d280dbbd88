//! Agent checkpoints and the shared normalization map, both in the binary container.
//!
//! An agent file holds the network parameters in layer order, the optimizer moments,
//! the multiplier with its recurrence hyperparameters, and a copy of the
//! normalization map and action bounds so that each file is self-contained.

use std::path::Path;

use mjoda_core::nn::{Activation, AdamState, NetworkSpec, PolicyParams};
use mjoda_core::rl::{ActionBounds, Agent, DualState, Normalization, Normalizer};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::io::BinaryFile;

const AGENT_KIND: &[u8; 4] = b"AGNT";
const NORM_KIND: &[u8; 4] = b"NORM";

fn push_normalization(b: &mut BinaryFile, norm: &Normalization, bounds: &ActionBounds) {
    let f = norm.features.dim();
    let t = norm.targets.dim();
    b.push("feature_lo", &[f], norm.features.lo().to_vec());
    b.push("feature_hi", &[f], norm.features.hi().to_vec());
    b.push("target_lo", &[t], norm.targets.lo().to_vec());
    b.push("target_hi", &[t], norm.targets.hi().to_vec());
    b.push("bounds_lower", &[bounds.lower.len()], bounds.lower.clone());
    b.push("bounds_upper", &[bounds.upper.len()], bounds.upper.clone());
}

fn take_normalization(b: &BinaryFile) -> CliResult<(Normalization, ActionBounds)> {
    let v = |name: &str| b.section(name).map(|s| s.data.clone());
    let norm = Normalization {
        features: Normalizer::from_bounds(v("feature_lo")?, v("feature_hi")?)?,
        targets: Normalizer::from_bounds(v("target_lo")?, v("target_hi")?)?,
    };
    let bounds = ActionBounds::new(v("bounds_lower")?, v("bounds_upper")?)?;
    Ok((norm, bounds))
}

fn check_hash(b: &BinaryFile, cfg: &ExperimentConfig, path: &Path) -> CliResult<()> {
    let stored = b.meta("model_hash")?;
    if stored != cfg.model_hash() {
        return Err(CliError::Config(format!(
            "checkpoint {} does not match the configuration (model hash {stored} vs {})",
            path.display(),
            cfg.model_hash()
        )));
    }
    Ok(())
}

pub fn write_normalization(
    path: &Path,
    cfg: &ExperimentConfig,
    norm: &Normalization,
    bounds: &ActionBounds,
) -> CliResult<()> {
    let mut b = BinaryFile::new(NORM_KIND);
    b.set_meta("model_hash", cfg.model_hash());
    push_normalization(&mut b, norm, bounds);
    b.write(path)
}

pub fn read_normalization(path: &Path, cfg: &ExperimentConfig) -> CliResult<(Normalization, ActionBounds)> {
    let b = BinaryFile::read(path, NORM_KIND)?;
    check_hash(&b, cfg, path)?;
    take_normalization(&b)
}

pub fn write_agent(
    path: &Path,
    cfg: &ExperimentConfig,
    agent: &Agent,
    norm: &Normalization,
    bounds: &ActionBounds,
) -> CliResult<()> {
    let spec = agent.params.spec();
    let mut b = BinaryFile::new(AGENT_KIND);
    b.set_meta("model_hash", cfg.model_hash());
    b.set_meta("member", agent.member);
    b.set_meta("epochs_done", agent.epochs_done);
    b.set_meta("input_dim", spec.input_dim);
    b.set_meta("output_dim", spec.output_dim);
    b.set_meta(
        "hidden",
        spec.hidden
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(","),
    );
    b.set_meta("activation", spec.activation.name());
    b.set_meta("adam_t", agent.optimizer_state.t);
    let n = agent.params.values().len();
    b.push("params", &[n], agent.params.values().to_vec());
    b.push("adam_m", &[n], agent.optimizer_state.m.clone());
    b.push("adam_v", &[n], agent.optimizer_state.v.clone());
    let d = &agent.dual;
    b.push(
        "dual",
        &[6],
        vec![d.lambda, d.alpha_lambda, d.beta, d.energy_min, d.energy_max, d.eps_ref],
    );
    push_normalization(&mut b, norm, bounds);
    b.write(path)
}

fn meta_num<T: std::str::FromStr>(b: &BinaryFile, key: &str, path: &Path) -> CliResult<T> {
    let v = b.meta(key)?;
    v.parse()
        .map_err(|_| CliError::format(path, format!("metadata {key}={v:?} is malformed")))
}

pub fn read_agent(path: &Path, cfg: &ExperimentConfig) -> CliResult<Agent> {
    if !path.exists() {
        return Err(CliError::Io(format!("missing checkpoint {}", path.display())));
    }
    let b = BinaryFile::read(path, AGENT_KIND)?;
    check_hash(&b, cfg, path)?;
    let hidden = b
        .meta("hidden")?
        .split(',')
        .map(|s| s.parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| CliError::format(path, "malformed hidden layer list"))?;
    let mut spec = NetworkSpec::new(
        meta_num(&b, "input_dim", path)?,
        meta_num(&b, "output_dim", path)?,
        hidden,
    )?;
    spec.activation = Activation::parse(b.meta("activation")?)?;
    let params = PolicyParams::from_values(&spec, b.section("params")?.data.clone())?;
    let (m, v) = (b.section("adam_m")?.data.clone(), b.section("adam_v")?.data.clone());
    if m.len() != params.values().len() || v.len() != m.len() {
        return Err(CliError::format(
            path,
            "optimizer state does not match the parameter count",
        ));
    }
    let d = &b.section("dual")?.data;
    if d.len() != 6 {
        return Err(CliError::format(path, "dual section must hold 6 values"));
    }
    let dual = DualState {
        lambda: d[0],
        alpha_lambda: d[1],
        beta: d[2],
        energy_min: d[3],
        energy_max: d[4],
        eps_ref: d[5],
    };
    Ok(Agent {
        member: meta_num(&b, "member", path)?,
        params,
        dual,
        optimizer_state: AdamState {
            m,
            v,
            t: meta_num(&b, "adam_t", path)?,
        },
        epochs_done: meta_num(&b, "epochs_done", path)?,
    })
}
