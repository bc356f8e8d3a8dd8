//! Pipeline commands behind the CLI: collect raw trajectories, relabel them
//! into high-level datasets, train offline policies, and evaluate them.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use ohio_core::control::fit_linear_dynamics;
use ohio_core::envs::{AnyEnv, GoalEnv};
use ohio_core::learn::{
    awr_train, bc_train, evaluate_policy, Algorithm, HeadKind, HighLevelPolicy, Mlp, Normalizer,
    TrainedPolicy,
};
use ohio_core::policies::{
    collect_goal_expert, collect_goal_random, collect_routing, collect_supply_chain, GoalSetter,
    RoutingActor, RoutingBehavior, SupplyChainActor, SupplyChainBehavior,
};
use ohio_core::relabel::{
    relabel_dataset, relabel_network_dataset, GoalRelabelModel, NetworkEnvRef, RelabelReport,
};
use ohio_core::types::{validate_trajectory, HighActionKind, Transition};
use ohio_core::SeededRng;

use crate::config::{DynamicsSpec, EnvSection, PolicySection, RunConfig};
use crate::dataset::{
    read_samples, read_transitions, write_json, write_jsonl, Manifest, RelabeledRecord,
    TransitionRecord,
};
use crate::CliError;

/// Collect a raw dataset and write it with its manifest
/// (`<out>.manifest.json`).
pub fn cmd_collect(config: &RunConfig, out: &Path) -> Result<Manifest, CliError> {
    let mut rng = SeededRng::new(config.seed);
    let env = config.env.build()?;
    let transitions: Vec<Transition> = match (&env, &config.policy) {
        (AnyEnv::Linear(e), PolicySection::HierarchicalExpert { noise_std, macro_len, log_actions }) => {
            collect_goal_expert(e, config.episodes, *noise_std, *macro_len, *log_actions, &mut rng)?
        }
        (AnyEnv::Nonlinear(e), PolicySection::HierarchicalExpert { noise_std, macro_len, log_actions }) => {
            collect_goal_expert(e, config.episodes, *noise_std, *macro_len, *log_actions, &mut rng)?
        }
        (AnyEnv::Linear(e), PolicySection::RandomLowLevel { magnitude }) => {
            collect_goal_random(e, config.episodes, *magnitude, &mut rng)?
        }
        (AnyEnv::Nonlinear(e), PolicySection::RandomLowLevel { magnitude }) => {
            collect_goal_random(e, config.episodes, *magnitude, &mut rng)?
        }
        (AnyEnv::SupplyChain(e), PolicySection::OrderUpTo { warehouse_level, store_levels }) => {
            let behavior = SupplyChainBehavior::OrderUpTo {
                warehouse_level: *warehouse_level,
                store_levels: store_levels.clone(),
            };
            collect_supply_chain(e, &behavior, config.episodes, &mut rng)?
        }
        (AnyEnv::SupplyChain(e), PolicySection::RandomNetwork {})
        | (AnyEnv::SupplyChain(e), PolicySection::RandomLowLevel { .. }) => {
            collect_supply_chain(e, &SupplyChainBehavior::Random, config.episodes, &mut rng)?
        }
        (AnyEnv::Routing(e), PolicySection::DirichletDispersion {}) => {
            collect_routing(e, &RoutingBehavior::Dispersion, config.episodes, &mut rng)?
        }
        (AnyEnv::Routing(e), PolicySection::ProportionalHeuristic { window }) => {
            collect_routing(e, &RoutingBehavior::Proportional { window: *window }, config.episodes, &mut rng)?
        }
        _ => {
            return Err(CliError::Usage(format!(
                "policy {:?} is not a collector for env '{}'",
                policy_name(&config.policy),
                env.kind_name()
            )))
        }
    };
    validate_trajectory(&transitions).map_err(|e| CliError::Data(e.to_string()))?;
    let records: Vec<TransitionRecord> =
        transitions.iter().map(TransitionRecord::from_transition).collect();
    write_jsonl(out, &records)?;
    let manifest = Manifest {
        config_hash: config.hash(),
        seed: config.seed,
        count: records.len(),
        env_kind: env.kind_name().to_string(),
        episodes: config.episodes,
    };
    write_json(&manifest_path(out), &manifest)?;
    Ok(manifest)
}

pub fn manifest_path(out: &Path) -> std::path::PathBuf {
    let mut name = out.as_os_str().to_os_string();
    name.push(".manifest.json");
    name.into()
}

pub fn report_path(out: &Path) -> std::path::PathBuf {
    let mut name = out.as_os_str().to_os_string();
    name.push(".report.json");
    name.into()
}

pub fn curve_path(out: &Path) -> std::path::PathBuf {
    let mut name = out.as_os_str().to_os_string();
    name.push(".curve.csv");
    name.into()
}

fn policy_name(policy: &PolicySection) -> &'static str {
    match policy {
        PolicySection::HierarchicalExpert { .. } => "hierarchical_expert",
        PolicySection::RandomLowLevel { .. } => "random_low_level",
        PolicySection::OrderUpTo { .. } => "order_up_to",
        PolicySection::RandomNetwork {} => "random_network",
        PolicySection::DirichletDispersion {} => "dirichlet_dispersion",
        PolicySection::ProportionalHeuristic { .. } => "proportional_heuristic",
    }
}

/// JSON report written next to the relabeled dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelabelReportFile {
    pub retention_rate: f64,
    pub mean_inv_loss: f64,
    pub max_inv_loss: f64,
    pub method: String,
    pub windows: usize,
    pub retained: usize,
    pub dropped: usize,
    pub timing_ms: u128,
}

impl RelabelReportFile {
    fn new(report: &RelabelReport, timing_ms: u128) -> Self {
        Self {
            retention_rate: report.retained as f64 / report.windows.max(1) as f64,
            mean_inv_loss: report.mean_inv_loss,
            max_inv_loss: report.max_inv_loss,
            method: report.method.clone(),
            windows: report.windows,
            retained: report.retained,
            dropped: report.dropped,
            timing_ms,
        }
    }
}

/// Relabel a raw dataset into (s, u, r, s', inv_loss) records plus a report
/// (`<out>.report.json`).
pub fn cmd_relabel(config: &RunConfig, input: &Path, out: &Path) -> Result<RelabelReportFile, CliError> {
    let started = std::time::Instant::now();
    let raw = read_transitions(input)?;
    validate_trajectory(&raw).map_err(|e| CliError::Data(e.to_string()))?;
    let env = config.env.build()?;
    let section = &config.relabel;

    let (samples, report) = match &env {
        AnyEnv::Linear(e) => {
            let q: Vec<f64> = e.config.q_diag.iter().map(|v| v * section.cost_scale_q).collect();
            let r: Vec<f64> = e.config.r_diag.iter().map(|v| v * section.cost_scale_r).collect();
            match section.dynamics {
                DynamicsSpec::Exact => {
                    let dyn_ = e.dynamics().clone();
                    let dynamics_fn = move |_: &DVector<f64>| Ok(dyn_.clone());
                    let model = GoalRelabelModel {
                        dynamics_fn: &dynamics_fn,
                        q_diag: q,
                        r_diag: r,
                        phys_dim: e.phys_dim(),
                        scale: e.goal_scale(),
                        reward_fn: None,
                    };
                    relabel_dataset(&raw, &model, &section.relabel, &SeededRng::new(config.seed))?
                }
                DynamicsSpec::Fit => {
                    let fitted = fit_linear_dynamics(&raw).map_err(|e| CliError::Data(e.to_string()))?;
                    // The fit runs on full observations; inversion needs the
                    // physical block only.
                    let phys = e.phys_dim();
                    let dyn_ = ohio_core::control::LinearDynamics::new(
                        fitted.a.view((0, 0), (phys, phys)).into_owned(),
                        fitted.b.rows(0, phys).into_owned(),
                        fitted.c.rows(0, phys).into_owned(),
                    )
                    .map_err(|e| CliError::Data(e.to_string()))?;
                    let dynamics_fn = move |_: &DVector<f64>| Ok(dyn_.clone());
                    let model = GoalRelabelModel {
                        dynamics_fn: &dynamics_fn,
                        q_diag: q,
                        r_diag: r,
                        phys_dim: phys,
                        scale: e.goal_scale(),
                        reward_fn: None,
                    };
                    relabel_dataset(&raw, &model, &section.relabel, &SeededRng::new(config.seed))?
                }
            }
        }
        AnyEnv::Nonlinear(e) => {
            let q: Vec<f64> = e.config.q_diag.iter().map(|v| v * section.cost_scale_q).collect();
            let r: Vec<f64> = e.config.r_diag.iter().map(|v| v * section.cost_scale_r).collect();
            let dynamics_fn = |phys: &DVector<f64>| e.dynamics_at(phys);
            let model = GoalRelabelModel {
                dynamics_fn: &dynamics_fn,
                q_diag: q,
                r_diag: r,
                phys_dim: e.phys_dim(),
                scale: e.goal_scale(),
                reward_fn: None,
            };
            relabel_dataset(&raw, &model, &section.relabel, &SeededRng::new(config.seed))?
        }
        AnyEnv::SupplyChain(e) => {
            relabel_network_dataset(&raw, &NetworkEnvRef::SupplyChain(e), section.network_method)?
        }
        AnyEnv::Routing(e) => {
            relabel_network_dataset(&raw, &NetworkEnvRef::Routing(e), section.network_method)?
        }
    };

    let records: Vec<RelabeledRecord> = samples.iter().map(RelabeledRecord::from_sample).collect();
    write_jsonl(out, &records)?;
    let file_report = RelabelReportFile::new(&report, started.elapsed().as_millis());
    write_json(&report_path(out), &file_report)?;
    Ok(file_report)
}

/// Serialized model checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub sizes: Vec<usize>,
    pub head: String,
    pub action_kind: String,
    pub params: Vec<f64>,
    pub obs_mean: Vec<f64>,
    pub obs_std: Vec<f64>,
    pub out_mean: Option<Vec<f64>>,
    pub out_std: Option<Vec<f64>>,
    pub seed: u64,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn from_policy(policy: &TrainedPolicy, seed: u64, config_hash: String) -> Self {
        Self {
            sizes: policy.net.sizes.clone(),
            head: match policy.net.head {
                HeadKind::Linear => "linear".into(),
                HeadKind::Softmax => "softmax".into(),
            },
            action_kind: match policy.kind {
                HighActionKind::GoalState => "goal_state".into(),
                HighActionKind::Distribution => "distribution".into(),
                HighActionKind::MixedProductionDistribution => {
                    "mixed_production_distribution".into()
                }
            },
            params: policy.net.params_flat(),
            obs_mean: policy.obs_norm.mean.clone(),
            obs_std: policy.obs_norm.std.clone(),
            out_mean: policy.out_norm.as_ref().map(|n| n.mean.clone()),
            out_std: policy.out_norm.as_ref().map(|n| n.std.clone()),
            seed,
            config_hash,
        }
    }

    pub fn into_policy(self) -> Result<TrainedPolicy, CliError> {
        let head = match self.head.as_str() {
            "linear" => HeadKind::Linear,
            "softmax" => HeadKind::Softmax,
            other => return Err(CliError::Data(format!("unknown head '{other}'"))),
        };
        let kind = match self.action_kind.as_str() {
            "goal_state" => HighActionKind::GoalState,
            "distribution" => HighActionKind::Distribution,
            "mixed_production_distribution" => HighActionKind::MixedProductionDistribution,
            other => return Err(CliError::Data(format!("unknown action kind '{other}'"))),
        };
        let mut net = Mlp::new(&self.sizes, head, &mut SeededRng::new(0));
        if net.params_flat().len() != self.params.len() {
            return Err(CliError::Data(format!(
                "checkpoint has {} parameters but architecture wants {}",
                self.params.len(),
                net.params_flat().len()
            )));
        }
        net.set_params_flat(&self.params);
        let out_norm = match (self.out_mean, self.out_std) {
            (Some(mean), Some(std)) => Some(Normalizer { mean, std }),
            _ => None,
        };
        Ok(TrainedPolicy {
            net,
            kind,
            obs_norm: Normalizer { mean: self.obs_mean, std: self.obs_std },
            out_norm,
        })
    }
}

/// Train on a relabeled dataset; writes the checkpoint and a training-curve
/// CSV (`<model>.curve.csv`).
pub fn cmd_train(config: &RunConfig, dataset: &Path, model_out: &Path) -> Result<(), CliError> {
    let samples = read_samples(dataset)?;
    let mut learn_config = config.learn.clone();
    learn_config.seed = config.seed;
    let (policy, curve) = match learn_config.algorithm {
        Algorithm::Bc => bc_train(&samples, &learn_config),
        Algorithm::Awr => awr_train(&samples, &learn_config),
    }
    .map_err(CliError::from_learn)?;
    let checkpoint = Checkpoint::from_policy(&policy, config.seed, config.hash());
    write_json(model_out, &checkpoint)?;
    let mut csv = String::from("epoch,loss,mean_weight\n");
    for (epoch, loss, weight) in &curve {
        csv.push_str(&format!("{epoch},{loss},{weight}\n"));
    }
    std::fs::write(curve_path(model_out), csv)
        .map_err(|e| CliError::Io(format!("{}: {e}", curve_path(model_out).display())))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResults {
    pub mean_return: f64,
    pub std_return: f64,
    pub normalized_score: Option<f64>,
    pub episodes: usize,
    pub seed: u64,
    pub config_hash: String,
    pub reference: Option<f64>,
}

/// Evaluate a checkpoint in its environment and write a results JSON.
pub fn cmd_eval(config: &RunConfig, model: &Path, out: &Path) -> Result<EvalResults, CliError> {
    let checkpoint: Checkpoint = crate::dataset::read_json(model)?;
    let policy = checkpoint.into_policy()?;
    let env = config.env.build()?;
    if policy.net.input_dim() != env.obs_dim() {
        return Err(CliError::Data(format!(
            "model expects obs dim {} but env '{}' produces {}",
            policy.net.input_dim(),
            env.kind_name(),
            env.obs_dim()
        )));
    }
    let report = evaluate_policy(
        &policy,
        &env,
        config.eval.episodes,
        config.seed,
        config.eval.reference,
    )
    .map_err(CliError::from_learn)?;
    let results = EvalResults {
        mean_return: report.mean_return,
        std_return: report.std_return,
        normalized_score: report.normalized,
        episodes: report.episodes,
        seed: config.seed,
        config_hash: config.hash(),
        reference: config.eval.reference,
    };
    write_json(out, &results)?;
    Ok(results)
}

/// Evaluate the configured behavior policy itself (used to compute
/// references).
pub fn behavior_reference(config: &RunConfig, episodes: usize) -> Result<f64, CliError> {
    let env = config.env.build()?;
    let report = match (&env, &config.policy) {
        (AnyEnv::Linear(e), PolicySection::HierarchicalExpert { noise_std, .. }) => {
            let setter = GoalSetter { phys_dim: e.phys_dim(), noise_std: *noise_std };
            evaluate_policy(&setter, &env, episodes, config.seed, None)
        }
        (AnyEnv::Nonlinear(e), PolicySection::HierarchicalExpert { noise_std, .. }) => {
            let setter = GoalSetter { phys_dim: e.phys_dim(), noise_std: *noise_std };
            evaluate_policy(&setter, &env, episodes, config.seed, None)
        }
        (AnyEnv::SupplyChain(e), PolicySection::OrderUpTo { warehouse_level, store_levels }) => {
            let actor = SupplyChainActor {
                env: e,
                behavior: SupplyChainBehavior::OrderUpTo {
                    warehouse_level: *warehouse_level,
                    store_levels: store_levels.clone(),
                },
            };
            evaluate_policy(&actor, &env, episodes, config.seed, None)
        }
        (AnyEnv::Routing(e), PolicySection::ProportionalHeuristic { window }) => {
            let actor = RoutingActor { env: e, behavior: RoutingBehavior::Proportional { window: *window } };
            evaluate_policy(&actor, &env, episodes, config.seed, None)
        }
        (AnyEnv::Routing(e), PolicySection::DirichletDispersion {}) => {
            let actor = RoutingActor { env: e, behavior: RoutingBehavior::Dispersion };
            evaluate_policy(&actor, &env, episodes, config.seed, None)
        }
        _ => {
            return Err(CliError::Usage(
                "no behavior reference for this env/policy combination".into(),
            ))
        }
    }
    .map_err(CliError::from_learn)?;
    Ok(report.mean_return)
}

/// Evaluate an arbitrary policy object against an env section (shared by
/// the acceptance suite).
pub fn eval_policy_in(
    env_section: &EnvSection,
    policy: &dyn HighLevelPolicy,
    episodes: usize,
    seed: u64,
) -> Result<ohio_core::learn::EvalReport, CliError> {
    let env = env_section.build()?;
    evaluate_policy(policy, &env, episodes, seed, None).map_err(CliError::from_learn)
}
