//! Flat `key = value` run configuration with dotted sections.
//!
//! The format is a plain text file of `key = value` lines. Blank lines and
//! lines starting with `#` are skipped; a ` #` after a value starts a
//! trailing comment. Keys use dots for grouping (`learner.K = 400`) and no
//! nesting beyond that. Every parse or validation error names the offending
//! key.

use std::path::PathBuf;
use std::str::FromStr;

use varac::envs::{EnvSpec, Family};
use varac::learner::{LearnerConfig, RunMode};
use varac::{Error, Result};

/// Where the run's MDP comes from: a JSON file on disk or a generated
/// family instance.
#[derive(Debug, Clone)]
pub enum EnvSource {
    Path(PathBuf),
    Spec(EnvSpec),
}

/// Saddle-oracle settings for a run.
#[derive(Debug, Clone)]
pub struct OracleConfig {
    pub enabled: bool,
    pub lambda_res: f64,
    pub y_res: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            lambda_res: 0.01,
            y_res: 0.01,
        }
    }
}

/// Fully parsed run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub env: EnvSource,
    pub learner: LearnerConfig,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    pub oracle: OracleConfig,
    /// Raw key/value pairs in file order, echoed into run summaries.
    pub raw: Vec<(String, String)>,
}

fn key_err(key: &str, message: impl Into<String>) -> Error {
    Error::SchemaViolation {
        field: key.to_string(),
        message: message.into(),
    }
}

/// Splits a config file into ordered key/value pairs, rejecting malformed
/// lines and duplicate keys.
fn tokenize(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = match raw_line.find(" #") {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        };
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(key_err(
                &format!("line {}", idx + 1),
                format!("expected `key = value`, got {raw_line:?}"),
            ));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(key_err(
                &format!("line {}", idx + 1),
                "empty key before `=`",
            ));
        }
        if pairs.iter().any(|(k, _)| *k == key) {
            return Err(key_err(&key, "duplicate key"));
        }
        pairs.push((key, value));
    }
    Ok(pairs)
}

fn parse_scalar<T: FromStr>(key: &str, value: &str, kind: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| key_err(key, format!("expected {kind}, got {value:?}")))
}

fn parse_mode(key: &str, value: &str) -> Result<RunMode> {
    match value {
        "exact" => Ok(RunMode::Exact),
        "tabular" => Ok(RunMode::Tabular),
        "dnn" => Ok(RunMode::Dnn),
        other => Err(key_err(
            key,
            format!("expected one of exact|tabular|dnn, got {other:?}"),
        )),
    }
}

fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(key_err(key, format!("expected on|off, got {other:?}"))),
    }
}

/// Comma-separated seed list, e.g. `0,1,2`.
pub fn parse_seeds(value: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = value
        .split(',')
        .map(|part| parse_scalar::<u64>("seeds", part.trim(), "an unsigned integer"))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(key_err("seeds", "at least one seed required"));
    }
    Ok(seeds)
}

/// Default state/action counts when only the family is named.
pub fn family_default_shape(family: Family) -> (usize, usize) {
    match family {
        Family::Portfolio => (3, 2),
        Family::Random => (5, 2),
        Family::Gridworld => (8, 2),
    }
}

/// Parses the full run configuration. Unknown keys are errors.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let pairs = tokenize(text)?;
    let mut learner = LearnerConfig::default();
    let mut env_path: Option<PathBuf> = None;
    let mut family: Option<Family> = None;
    let mut n_states: Option<usize> = None;
    let mut n_actions: Option<usize> = None;
    let mut env_seed = 0u64;
    let mut mix: Option<f64> = None;
    let mut reward_scale: Option<f64> = None;
    let mut seeds = vec![0u64];
    let mut out_dir: Option<PathBuf> = None;
    let mut oracle = OracleConfig::default();

    for (key, value) in &pairs {
        let v = value.as_str();
        match key.as_str() {
            "env.path" => env_path = Some(PathBuf::from(v)),
            "env.family" => {
                family = Some(
                    Family::from_str(v).map_err(|e| key_err(key, e.to_string()))?,
                )
            }
            "env.n_states" => n_states = Some(parse_scalar(key, v, "an unsigned integer")?),
            "env.n_actions" => n_actions = Some(parse_scalar(key, v, "an unsigned integer")?),
            "env.seed" => env_seed = parse_scalar(key, v, "an unsigned integer")?,
            "env.mix" => mix = Some(parse_scalar(key, v, "a float")?),
            "env.reward_scale" => reward_scale = Some(parse_scalar(key, v, "a float")?),
            "learner.K" => learner.k_outer = parse_scalar(key, v, "an unsigned integer")?,
            "learner.T" => learner.t_inner = parse_scalar(key, v, "an unsigned integer")?,
            "learner.beta" => learner.beta = parse_scalar(key, v, "a float")?,
            "learner.gamma" => learner.gamma = parse_scalar(key, v, "a float")?,
            "learner.N" => learner.n_cap = parse_scalar(key, v, "a float")?,
            "learner.alpha" => learner.alpha = parse_scalar(key, v, "a float")?,
            "learner.zeta" => learner.zeta = Some(parse_scalar(key, v, "a float")?),
            "learner.delta" => learner.delta = Some(parse_scalar(key, v, "a float")?),
            "learner.mode" => learner.mode = parse_mode(key, v)?,
            "learner.burn_in" => learner.burn_in = parse_scalar(key, v, "an unsigned integer")?,
            "learner.actor.width" => {
                learner.actor_net.width = parse_scalar(key, v, "an unsigned integer")?
            }
            "learner.actor.depth" => {
                learner.actor_net.depth = parse_scalar(key, v, "an unsigned integer")?
            }
            "learner.actor.radius" => learner.actor_net.radius = parse_scalar(key, v, "a float")?,
            "learner.critic_q.width" => {
                learner.critic_q_net.width = parse_scalar(key, v, "an unsigned integer")?
            }
            "learner.critic_q.depth" => {
                learner.critic_q_net.depth = parse_scalar(key, v, "an unsigned integer")?
            }
            "learner.critic_q.radius" => {
                learner.critic_q_net.radius = parse_scalar(key, v, "a float")?
            }
            "learner.critic_w.width" => {
                learner.critic_w_net.width = parse_scalar(key, v, "an unsigned integer")?
            }
            "learner.critic_w.depth" => {
                learner.critic_w_net.depth = parse_scalar(key, v, "an unsigned integer")?
            }
            "learner.critic_w.radius" => {
                learner.critic_w_net.radius = parse_scalar(key, v, "a float")?
            }
            "seeds" => seeds = parse_seeds(v)?,
            "out_dir" => out_dir = Some(PathBuf::from(v)),
            "oracle" => oracle.enabled = parse_switch(key, v)?,
            "oracle.lambda_res" => oracle.lambda_res = parse_scalar(key, v, "a float")?,
            "oracle.y_res" => oracle.y_res = parse_scalar(key, v, "a float")?,
            other => return Err(key_err(other, "unknown key")),
        }
    }

    let env = match (env_path, family) {
        (Some(_), Some(_)) => {
            return Err(key_err(
                "env.path",
                "set either env.path or env.family, not both",
            ))
        }
        (Some(path), None) => EnvSource::Path(path),
        (None, Some(family)) => {
            let (dn, dm) = family_default_shape(family);
            let mut spec = EnvSpec::new(
                family,
                n_states.unwrap_or(dn),
                n_actions.unwrap_or(dm),
                env_seed,
            );
            if let Some(mix) = mix {
                spec.mix = mix;
            }
            if let Some(scale) = reward_scale {
                spec.reward_scale = scale;
            }
            EnvSource::Spec(spec)
        }
        (None, None) => {
            return Err(key_err("env.family", "missing (set env.family or env.path)"))
        }
    };
    if oracle.lambda_res <= 0.0 || oracle.y_res <= 0.0 {
        return Err(key_err(
            "oracle.lambda_res",
            "grid resolutions must be positive",
        ));
    }
    learner.validate()?;
    Ok(RunConfig {
        env,
        learner,
        seeds,
        out_dir,
        oracle,
        raw: pairs,
    })
}
