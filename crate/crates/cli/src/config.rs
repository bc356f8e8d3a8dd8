//! Run configuration: JSON file, dotted-key flag overrides (flags win over
//! the file; the OHIO_SEED environment variable overrides the file seed but
//! yields to an explicit --seed flag), and a stable config hash.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ohio_core::envs::{
    AnyEnv, LinearEnv, LinearEnvConfig, NonlinearEnv, NonlinearEnvConfig, RoutingConfig,
    RoutingEnv, SupplyChainConfig, SupplyChainEnv,
};
use ohio_core::learn::LearnerConfig;
use ohio_core::relabel::{NetworkInverseMethod, RelabelConfig};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvSection {
    Linear(LinearEnvConfig),
    Nonlinear(NonlinearEnvConfig),
    SupplyChain(SupplyChainConfig),
    Routing(RoutingConfig),
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection::Linear(LinearEnvConfig::default())
    }
}

impl EnvSection {
    pub fn build(&self) -> Result<AnyEnv, CliError> {
        Ok(match self {
            EnvSection::Linear(c) => AnyEnv::Linear(LinearEnv::new(c.clone())?),
            EnvSection::Nonlinear(c) => AnyEnv::Nonlinear(NonlinearEnv::new(c.clone())?),
            EnvSection::SupplyChain(c) => AnyEnv::SupplyChain(SupplyChainEnv::new(c.clone())?),
            EnvSection::Routing(c) => AnyEnv::Routing(RoutingEnv::new(c.clone())?),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySection {
    HierarchicalExpert {
        #[serde(default = "default_noise")]
        noise_std: f64,
        /// Steps between fresh high-level decisions while collecting.
        #[serde(default = "default_macro_len")]
        macro_len: usize,
        #[serde(default = "default_true")]
        log_actions: bool,
    },
    RandomLowLevel {
        #[serde(default = "default_magnitude")]
        magnitude: f64,
    },
    OrderUpTo {
        warehouse_level: f64,
        store_levels: Vec<f64>,
    },
    /// Random high-level targets routed through the LP (network
    /// environments).
    RandomNetwork {},
    DirichletDispersion {},
    ProportionalHeuristic {
        #[serde(default = "default_window")]
        window: usize,
    },
}

fn default_noise() -> f64 {
    0.3
}
fn default_macro_len() -> usize {
    5
}
fn default_true() -> bool {
    true
}
fn default_magnitude() -> f64 {
    1.0
}
fn default_window() -> usize {
    6
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection::HierarchicalExpert {
            noise_std: default_noise(),
            macro_len: default_macro_len(),
            log_actions: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsSpec {
    /// The environment's own (or per-window linearized) dynamics.
    Exact,
    /// Least-squares fit from the raw dataset (requires logged actions).
    Fit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RelabelSection {
    #[serde(flatten)]
    pub relabel: RelabelConfig,
    #[serde(default = "default_dynamics")]
    pub dynamics: DynamicsSpec,
    /// Multipliers applied to the tracking costs at relabel time (and at
    /// deployment when the same section drives evaluation).
    #[serde(default = "default_one")]
    pub cost_scale_q: f64,
    #[serde(default = "default_one")]
    pub cost_scale_r: f64,
    #[serde(default = "default_network_method")]
    pub network_method: NetworkInverseMethod,
}

fn default_dynamics() -> DynamicsSpec {
    DynamicsSpec::Exact
}
fn default_one() -> f64 {
    1.0
}
fn default_network_method() -> NetworkInverseMethod {
    NetworkInverseMethod::FlowBalance
}

impl Default for RelabelSection {
    fn default() -> Self {
        Self {
            relabel: RelabelConfig::default(),
            dynamics: DynamicsSpec::Exact,
            cost_scale_q: 1.0,
            cost_scale_r: 1.0,
            network_method: NetworkInverseMethod::FlowBalance,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    #[serde(default = "default_eval_episodes")]
    pub episodes: usize,
    /// Reference mean return for normalized scores.
    #[serde(default)]
    pub reference: Option<f64>,
}

fn default_eval_episodes() -> usize {
    50
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { episodes: default_eval_episodes(), reference: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default)]
    pub env: EnvSection,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub relabel: RelabelSection,
    #[serde(default)]
    pub learn: LearnerConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_episodes() -> usize {
    50
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            episodes: default_episodes(),
            env: EnvSection::default(),
            policy: PolicySection::default(),
            relabel: RelabelSection::default(),
            learn: LearnerConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    /// Resolve a config from an optional file, the OHIO_SEED environment
    /// value, and dotted-key overrides (last one wins).
    pub fn resolve(
        file: Option<&std::path::Path>,
        env_seed: Option<u64>,
        overrides: &[(String, String)],
    ) -> Result<Self, CliError> {
        let mut value: serde_json::Value = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
            }
            None => serde_json::json!({}),
        };
        if let Some(seed) = env_seed {
            value["seed"] = serde_json::json!(seed);
        }
        // Tagged sections need their kind before field-level overrides can
        // land on them.
        if value.get("env").and_then(|v| v.get("kind")).is_none() {
            value["env"] = serde_json::to_value(EnvSection::default()).expect("serializable");
        }
        if value.get("policy").and_then(|v| v.get("kind")).is_none() {
            value["policy"] = serde_json::to_value(PolicySection::default()).expect("serializable");
        }
        for (key, raw) in overrides {
            // Convenience alias from the documented flag names.
            let key = if key == "relabel.method" { "relabel.inversion.method" } else { key };
            // Switching a tagged section's kind drops its stale fields so
            // the new variant starts from its own defaults.
            if let Some(section) = key.strip_suffix(".kind") {
                if !section.contains('.') && value[section]["kind"] != serde_json::json!(raw) {
                    value[section] = serde_json::json!({});
                }
            }
            apply_override(&mut value, key, raw)?;
        }
        let config: RunConfig = serde_json::from_value(value)
            .map_err(|e| CliError::Data(format!("invalid config: {e}")))?;
        Ok(config)
    }

    /// Stable hash of the serialized config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Set `value[key-path] = parsed(raw)`, creating intermediate objects. Raw
/// values parse as JSON when possible and fall back to strings, so
/// `--env.kind linear` and `--learn.lr 0.001` both work.
pub fn apply_override(
    value: &mut serde_json::Value,
    key: &str,
    raw: &str,
) -> Result<(), CliError> {
    let parsed: serde_json::Value = match serde_json::from_str(raw) {
        Ok(v) => v,
        Err(_) => serde_json::Value::String(raw.to_string()),
    };
    let mut cursor = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::Usage(format!("bad override key '{key}'")));
        }
        if i + 1 == parts.len() {
            cursor[part] = parsed;
            return Ok(());
        }
        if !cursor[part].is_object() {
            cursor[part] = serde_json::json!({});
        }
        cursor = &mut cursor[part];
    }
    unreachable!("loop always returns")
}
