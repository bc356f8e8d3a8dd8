//! Desk-scale simulators: linear and nonlinear goal reaching driven by an
//! LQR low level, plus supply-chain and vehicle-routing networks driven by
//! LP low levels.

pub mod goal;
pub mod routing;
pub mod supply_chain;

pub use goal::{GoalEnv, GoalEnvState, LinearEnv, LinearEnvConfig, LqrLowLevel, NonlinearEnv, NonlinearEnvConfig};
pub use routing::{RoutingConfig, RoutingEnv, RoutingState};
pub use supply_chain::{SupplyChainConfig, SupplyChainEnv, SupplyChainState};

use crate::rng::SeededRng;
use crate::types::{HighAction, StateVec};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("action out of bounds: {0}")]
    ActionOutOfBounds(String),
    #[error("constraint violation: {0}")]
    ConstraintViolation(String),
    #[error("high action incompatible with environment: {0}")]
    IncompatibleAction(String),
    #[error(transparent)]
    Control(#[from] crate::control::ControlError),
    #[error(transparent)]
    Lp(#[from] crate::lp::LpError),
}

/// Uniform handle over the four environments for the pipeline and the
/// evaluation harness.
pub enum AnyEnv {
    Linear(LinearEnv),
    Nonlinear(NonlinearEnv),
    SupplyChain(SupplyChainEnv),
    Routing(RoutingEnv),
}

pub enum AnyState {
    Goal(GoalEnvState),
    SupplyChain(SupplyChainState),
    Routing(RoutingState),
}

impl AnyEnv {
    pub fn reset(&self, rng: &mut SeededRng) -> AnyState {
        match self {
            AnyEnv::Linear(env) => AnyState::Goal(env.reset(rng)),
            AnyEnv::Nonlinear(env) => AnyState::Goal(env.reset(rng)),
            AnyEnv::SupplyChain(env) => AnyState::SupplyChain(env.reset(rng)),
            AnyEnv::Routing(env) => AnyState::Routing(env.reset(rng)),
        }
    }

    pub fn observe(&self, state: &AnyState) -> StateVec {
        match (self, state) {
            (AnyEnv::Linear(env), AnyState::Goal(s)) => env.observe(s),
            (AnyEnv::Nonlinear(env), AnyState::Goal(s)) => env.observe(s),
            (AnyEnv::SupplyChain(env), AnyState::SupplyChain(s)) => env.observe(s),
            (AnyEnv::Routing(env), AnyState::Routing(s)) => env.observe(s),
            _ => unreachable!("state/env mismatch"),
        }
    }

    /// One high-level decision: `t_abs` tracking steps for goal
    /// environments, one LP solve plus one network step otherwise. Returns
    /// the cumulative (undiscounted) reward over the window.
    pub fn hierarchical_step(
        &self,
        state: &AnyState,
        u: &HighAction,
        rng: &mut SeededRng,
    ) -> Result<(AnyState, f64), EnvError> {
        match (self, state) {
            (AnyEnv::Linear(env), AnyState::Goal(s)) => {
                let low = env.low_level_for(s)?;
                let (s2, r) = goal::hierarchical_step(env, s, u, &low, env.t_abs(), rng)?;
                Ok((AnyState::Goal(s2), r))
            }
            (AnyEnv::Nonlinear(env), AnyState::Goal(s)) => {
                let low = env.low_level_for(s)?;
                let (s2, r) = goal::hierarchical_step(env, s, u, &low, env.t_abs(), rng)?;
                Ok((AnyState::Goal(s2), r))
            }
            (AnyEnv::SupplyChain(env), AnyState::SupplyChain(s)) => {
                let (s2, r) = env.hierarchical_step(s, u, rng)?;
                Ok((AnyState::SupplyChain(s2), r))
            }
            (AnyEnv::Routing(env), AnyState::Routing(s)) => {
                let (s2, r) = env.hierarchical_step(s, u, rng)?;
                Ok((AnyState::Routing(s2), r))
            }
            _ => unreachable!("state/env mismatch"),
        }
    }

    /// Number of high-level decisions per episode.
    pub fn macro_steps(&self) -> usize {
        match self {
            AnyEnv::Linear(env) => env.episode_len() / env.t_abs(),
            AnyEnv::Nonlinear(env) => env.episode_len() / env.t_abs(),
            AnyEnv::SupplyChain(env) => env.config.episode_len,
            AnyEnv::Routing(env) => env.config.episode_len,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            AnyEnv::Linear(env) => env.obs_dim(),
            AnyEnv::Nonlinear(env) => env.obs_dim(),
            AnyEnv::SupplyChain(env) => env.obs_dim(),
            AnyEnv::Routing(env) => env.obs_dim(),
        }
    }

    /// Dimension of the high-level action this environment consumes.
    pub fn high_action_dim(&self) -> usize {
        match self {
            AnyEnv::Linear(env) => env.phys_dim(),
            AnyEnv::Nonlinear(env) => env.phys_dim(),
            AnyEnv::SupplyChain(env) => 1 + env.store_count(),
            AnyEnv::Routing(env) => env.config.n_stations,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            AnyEnv::Linear(_) => "linear",
            AnyEnv::Nonlinear(_) => "nonlinear",
            AnyEnv::SupplyChain(_) => "supply_chain",
            AnyEnv::Routing(_) => "routing",
        }
    }
}

/// Largest-remainder rounding preserving the (rounded) total.
pub fn largest_remainder_round(values: &[f64], total: f64) -> Vec<f64> {
    let total = total.round();
    let floors: Vec<f64> = values.iter().map(|v| v.floor().max(0.0)).collect();
    let mut remainder = total - floors.iter().sum::<f64>();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = values[a] - values[a].floor();
        let rb = values[b] - values[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut out = floors;
    let mut idx = 0;
    while remainder >= 0.5 && !order.is_empty() {
        out[order[idx % order.len()]] += 1.0;
        remainder -= 1.0;
        idx += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_preserves_total() {
        let out = largest_remainder_round(&[1.4, 2.3, 0.3], 4.0);
        assert_eq!(out.iter().sum::<f64>(), 4.0);
        assert_eq!(out, vec![2.0, 2.0, 0.0]);
    }

    #[test]
    fn largest_remainder_handles_exact_integers() {
        let out = largest_remainder_round(&[1.0, 2.0, 3.0], 6.0);
        assert_eq!(out, vec![1.0, 2.0, 3.0]);
    }
}
