//! Windowed dataset relabeling: slice raw trajectories into abstraction
//! windows, recover the high-level action behind each window with the
//! inversion module (or the observed-state baseline), aggregate rewards,
//! filter by inversion loss, and emit offline-RL-ready samples.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::control::{riccati_gains, CostMatrices, LinearDynamics};
use crate::envs::{EnvError, RoutingEnv, SupplyChainEnv};
use crate::inversion::{
    invert_lqr_horizon_analytic, invert_numeric_state, invert_regularized_analytic,
    InversionConfig, InversionError, InversionMethod, UScale,
};
use crate::lp::{duality_inverse, flow_balance_inverse, LpError, SuboptimalityForm};
use crate::rng::SeededRng;
use crate::types::{HighAction, RelabeledSample, Transition, TypeError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RelabelError {
    #[error("observed rewards requested but transition (ep {episode}, t {t}) has none")]
    MissingRewardSource { episode: i64, t: i64 },
    #[error("every window was filtered out (threshold {threshold})")]
    EmptyOutput { threshold: f64 },
    #[error("dataset too short for a single {t_abs}-step window")]
    NoWindows { t_abs: usize },
    #[error(transparent)]
    Inversion(#[from] InversionError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error(transparent)]
    Control(#[from] crate::control::ControlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RelabelBaseline {
    /// Invert the low-level policy.
    Ohio,
    /// Use the observed window-terminal state as the high-level action.
    ObservedState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RewardSource {
    Observed,
    Model,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RelabelConfig {
    pub inversion: InversionConfig,
    pub t_abs: usize,
    pub reward_source: RewardSource,
    pub loss_threshold: f64,
    pub baseline: RelabelBaseline,
    /// Stride-1 windows for data augmentation instead of the default
    /// non-overlapping stride.
    pub overlapping: bool,
}

impl Default for RelabelConfig {
    fn default() -> Self {
        Self {
            inversion: InversionConfig::default(),
            t_abs: 5,
            reward_source: RewardSource::Observed,
            loss_threshold: 0.2,
            baseline: RelabelBaseline::Ohio,
            overlapping: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RelabelReport {
    pub windows: usize,
    pub retained: usize,
    pub dropped: usize,
    pub mean_inv_loss: f64,
    pub max_inv_loss: f64,
    pub method: String,
}

/// Everything the goal-environment relabeler needs to know about the low
/// level: per-window dynamics, the tracking costs its gains derive from,
/// the physical-state slice of the observation, and the action scaling box.
pub struct GoalRelabelModel<'a> {
    pub dynamics_fn: &'a (dyn Fn(&DVector<f64>) -> Result<LinearDynamics, EnvError> + Sync),
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub phys_dim: usize,
    pub scale: UScale,
    /// Reward model r(obs_window_start, action, next_phys); required when
    /// `reward_source` is `Model`.
    pub reward_fn: Option<&'a (dyn Fn(&[f64], &DVector<f64>, &DVector<f64>) -> f64 + Sync)>,
}

struct Window<'a> {
    episode: i64,
    t0: i64,
    transitions: &'a [Transition],
}

fn windows_of(raw: &[Transition], t_abs: usize, overlapping: bool) -> Vec<Window<'_>> {
    let mut out = Vec::new();
    let stride = if overlapping { 1 } else { t_abs };
    let mut i = 0;
    while i < raw.len() {
        // Episode segment starting at i.
        let ep = raw[i].episode;
        let mut j = i;
        while j < raw.len() && raw[j].episode == ep {
            j += 1;
        }
        let mut k = i;
        while k + t_abs <= j {
            out.push(Window { episode: ep, t0: raw[k].t, transitions: &raw[k..k + t_abs] });
            k += stride;
        }
        i = j;
    }
    out
}

fn window_reward(
    window: &Window<'_>,
    model: &GoalRelabelModel<'_>,
    config: &RelabelConfig,
    u: &DVector<f64>,
    dyn_: &LinearDynamics,
    gains: &crate::control::GainSchedule,
) -> Result<f64, RelabelError> {
    match config.reward_source {
        RewardSource::Observed => {
            let mut total = 0.0;
            for tr in window.transitions {
                total += tr.r.ok_or(RelabelError::MissingRewardSource {
                    episode: tr.episode,
                    t: tr.t,
                })?;
            }
            Ok(total)
        }
        RewardSource::Model => {
            let reward_fn = model.reward_fn.ok_or(RelabelError::MissingRewardSource {
                episode: window.episode,
                t: window.t0,
            })?;
            let obs0 = window.transitions[0].s.values();
            let mut x = DVector::from_column_slice(&obs0[..model.phys_dim]);
            let mut total = 0.0;
            for k in 0..config.t_abs {
                let a = &gains.ks[k] * (&x - u);
                let x_next = dyn_.step_mean(&x, &a);
                total += reward_fn(obs0, &a, &x_next);
                x = x_next;
            }
            Ok(total)
        }
    }
}

/// Relabel goal-environment trajectories. Windows are aligned to episode
/// starts with stride `t_abs` (trailing partial windows are discarded),
/// inverted concurrently with per-window derived seeds, and emitted in
/// (episode, t) order.
pub fn relabel_dataset(
    raw: &[Transition],
    model: &GoalRelabelModel<'_>,
    config: &RelabelConfig,
    rng: &SeededRng,
) -> Result<(Vec<RelabeledSample>, RelabelReport), RelabelError> {
    let windows = windows_of(raw, config.t_abs, config.overlapping);
    if windows.is_empty() {
        return Err(RelabelError::NoWindows { t_abs: config.t_abs });
    }

    // Filtering happens in scaled coordinates; losses are reported raw.
    let scale_sq = {
        let dims = model.scale.dim() as f64;
        let mean_half_width: f64 = model
            .scale
            .lo
            .iter()
            .zip(&model.scale.hi)
            .map(|(l, h)| (h - l) / 2.0)
            .sum::<f64>()
            / dims;
        mean_half_width * mean_half_width
    };

    let results: Vec<Result<(i64, i64, RelabeledSample), RelabelError>> = windows
        .par_iter()
        .map(|window| {
            let obs0 = window.transitions[0].s.values();
            let phys0 = DVector::from_column_slice(&obs0[..model.phys_dim]);
            let targets: Vec<DVector<f64>> = window
                .transitions
                .iter()
                .map(|tr| DVector::from_column_slice(&tr.s_next.values()[..model.phys_dim]))
                .collect();
            let terminal = targets.last().expect("nonempty window").clone();

            let dyn_ = (model.dynamics_fn)(&phys0)?;
            let n = dyn_.state_dim();
            let m = dyn_.action_dim();
            let cost = CostMatrices::tracking(
                nalgebra::DMatrix::from_partial_diagonal(n, n, &model.q_diag),
                nalgebra::DMatrix::from_partial_diagonal(m, m, &model.r_diag),
            );
            let gains = riccati_gains(&dyn_, &cost, config.t_abs)?;
            let dyns = vec![dyn_.clone(); config.t_abs];

            let result = if config.baseline == RelabelBaseline::ObservedState {
                crate::inversion::InversionResult {
                    u_hat: HighAction::goal(terminal.iter().copied().collect())
                        .expect("finite state"),
                    loss: 0.0,
                    iterations: 0,
                    converged: true,
                    rank_deficient: false,
                    scale: None,
                }
            } else {
                match config.inversion.method {
                    InversionMethod::AnalyticOneStep | InversionMethod::AnalyticHorizon => {
                        invert_lqr_horizon_analytic(&dyns, &gains, &phys0, &terminal)
                    }
                    InversionMethod::AnalyticRegularized => {
                        invert_regularized_analytic(&dyns, &gains, &phys0, &terminal, &config.inversion)?
                    }
                    InversionMethod::GradientDescent | InversionMethod::Cem => {
                        let policy = |t: usize, x: &DVector<f64>, u: &DVector<f64>| {
                            &gains.ks[t] * (x - u)
                        };
                        let mut window_rng =
                            rng.child(window.episode as u64 * 1_000_003 + window.t0 as u64);
                        let first = invert_numeric_state(
                            &policy,
                            &dyn_,
                            &phys0,
                            &targets,
                            &model.scale,
                            &config.inversion,
                            &mut window_rng,
                        )?;
                        // A gradient-descent run stuck above the filter
                        // threshold gets one CEM retry.
                        if config.inversion.method == InversionMethod::GradientDescent
                            && first.loss / scale_sq > config.loss_threshold
                        {
                            let cem_config = InversionConfig {
                                method: InversionMethod::Cem,
                                ..config.inversion.clone()
                            };
                            let retry = invert_numeric_state(
                                &policy,
                                &dyn_,
                                &phys0,
                                &targets,
                                &model.scale,
                                &cem_config,
                                &mut window_rng,
                            )?;
                            if retry.loss < first.loss {
                                retry
                            } else {
                                first
                            }
                        } else {
                            first
                        }
                    }
                }
            };

            let u = result.u_hat.as_dvector();
            let reward = window_reward(window, model, config, &u, &dyn_, &gains)?;
            let sample = RelabeledSample::new(
                window.transitions[0].s.clone(),
                result.u_hat,
                reward,
                window.transitions.last().expect("nonempty").s_next.clone(),
                result.loss,
            )?;
            Ok((window.episode, window.t0, sample))
        })
        .collect();

    let mut labeled = Vec::with_capacity(results.len());
    for r in results {
        labeled.push(r?);
    }
    labeled.sort_by_key(|(ep, t0, _)| (*ep, *t0));

    let losses: Vec<f64> = labeled.iter().map(|(_, _, s)| s.inv_loss).collect();
    let mean_inv_loss = losses.iter().sum::<f64>() / losses.len() as f64;
    let max_inv_loss = losses.iter().cloned().fold(0.0_f64, f64::max);
    let windows_count = labeled.len();

    let samples: Vec<RelabeledSample> = labeled
        .into_iter()
        .filter(|(_, _, s)| s.inv_loss / scale_sq <= config.loss_threshold)
        .map(|(_, _, s)| s)
        .collect();
    if samples.is_empty() {
        return Err(RelabelError::EmptyOutput { threshold: config.loss_threshold });
    }
    let report = RelabelReport {
        windows: windows_count,
        retained: samples.len(),
        dropped: windows_count - samples.len(),
        mean_inv_loss,
        max_inv_loss,
        method: format!("{:?}/{:?}", config.baseline, config.inversion.method),
    };
    Ok((samples, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NetworkInverseMethod {
    FlowBalance,
    Duality,
}

/// Environment handle for network relabeling.
pub enum NetworkEnvRef<'a> {
    SupplyChain(&'a SupplyChainEnv),
    Routing(&'a RoutingEnv),
}

/// Relabel network trajectories step by step: reconstruct the per-node
/// targets from the logged flows (conservation or duality), copy the
/// observed reward, and report the suboptimality gap as the inversion loss.
pub fn relabel_network_dataset(
    raw: &[Transition],
    env: &NetworkEnvRef<'_>,
    method: NetworkInverseMethod,
) -> Result<(Vec<RelabeledSample>, RelabelReport), RelabelError> {
    let mut samples = Vec::with_capacity(raw.len());
    let mut losses = Vec::with_capacity(raw.len());
    for tr in raw {
        let reward = tr.r.ok_or(RelabelError::MissingRewardSource {
            episode: tr.episode,
            t: tr.t,
        })?;
        let action = tr.a.as_ref().ok_or(RelabelError::MissingRewardSource {
            episode: tr.episode,
            t: tr.t,
        })?;
        let (u, loss) = match env {
            NetworkEnvRef::SupplyChain(sc) => {
                let inventories = &tr.s.values()[sc.obs_inventory_range()];
                let flows = &action.values()[..sc.store_count()];
                let production = action.values()[sc.store_count()];
                let net = crate::lp::NetworkProblem::one_warehouse(
                    inventories[0],
                    (sc.config.storage_caps[0], sc.config.production_cap),
                    &inventories[1..],
                    &sc.config.storage_caps[1..],
                    sc.config.transport_cost,
                );
                match method {
                    NetworkInverseMethod::FlowBalance => {
                        let targets = flow_balance_inverse(&net, flows)?;
                        let mut values = vec![production];
                        for &s in &net.stores() {
                            values.push(targets[s]);
                        }
                        (HighAction::mixed(values)?, 0.0)
                    }
                    NetworkInverseMethod::Duality => {
                        let direct = flow_balance_inverse(&net, flows)?;
                        let mut theta0 = vec![production];
                        for &s in &net.stores() {
                            theta0.push(direct[s]);
                        }
                        let demand = &tr.s.values()[sc.obs_demand_range()];
                        let backorders = &tr.s.values()[sc.obs_backorder_range()];
                        let consumption: Vec<f64> = (0..sc.store_count())
                            .map(|i| (demand[i] + backorders[i]).min(inventories[i + 1]))
                            .collect();
                        let form = SuboptimalityForm::supply_chain(&net, &consumption, &theta0);
                        let mut x_star: Vec<f64> = flows.to_vec();
                        x_star.push(production);
                        let out = duality_inverse(&form, &DVector::from_column_slice(&x_star))?;
                        (
                            HighAction::mixed(out.theta.iter().copied().collect())?,
                            out.epsilon,
                        )
                    }
                }
            }
            NetworkEnvRef::Routing(rt) => {
                let idle = &tr.s.values()[rt.obs_idle_range()];
                let demand = &tr.s.values()[rt.obs_demand_range()];
                let matching = rt.match_passengers(idle, demand);
                let net = rt.network(&matching.idle_after);
                let flows = action.values();
                match method {
                    NetworkInverseMethod::FlowBalance => {
                        let targets = flow_balance_inverse(&net, flows)?;
                        (counts_to_distribution(&targets), 0.0)
                    }
                    NetworkInverseMethod::Duality => {
                        let direct = flow_balance_inverse(&net, flows)?;
                        let form = SuboptimalityForm::rebalancing(&net, &direct);
                        let out = duality_inverse(&form, &DVector::from_column_slice(flows))?;
                        let counts: Vec<f64> = out.theta.iter().copied().collect();
                        (counts_to_distribution(&counts), out.epsilon)
                    }
                }
            }
        };
        losses.push(loss);
        samples.push(RelabeledSample::new(tr.s.clone(), u, reward, tr.s_next.clone(), loss.max(0.0))?);
    }
    if samples.is_empty() {
        return Err(RelabelError::NoWindows { t_abs: 1 });
    }
    let mean_inv_loss = losses.iter().sum::<f64>() / losses.len() as f64;
    let max_inv_loss = losses.iter().cloned().fold(0.0_f64, f64::max);
    let report = RelabelReport {
        windows: samples.len(),
        retained: samples.len(),
        dropped: 0,
        mean_inv_loss,
        max_inv_loss,
        method: format!("Network/{method:?}"),
    };
    Ok((samples, report))
}

fn counts_to_distribution(counts: &[f64]) -> HighAction {
    let clipped: Vec<f64> = counts.iter().map(|&c| c.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if total <= 0.0 {
        let n = counts.len();
        return HighAction::distribution(vec![1.0 / n as f64; n]).expect("uniform");
    }
    HighAction::distribution(clipped.iter().map(|c| c / total).collect()).expect("simplex")
}
