//! Station-level vehicle routing: Poisson trip demand between stations,
//! greedy per-station passenger matching, and LP-based rebalancing of the
//! remaining idle fleet toward a commanded distribution.
//!
//! Observation layout (fixed order):
//! [idle counts (N) | current OD demand (N*N, origin-major)
//!  | origin demand forecast (N x K, station-major)
//!  | pipeline arrivals per future step (N x max travel time,
//!    station-major)].

use super::{largest_remainder_round, EnvError};
use crate::lp::{rebalancing_policy, NetworkProblem};
use crate::rng::SeededRng;
use crate::types::{HighAction, HighActionKind, StateVec};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RoutingConfig {
    pub n_stations: usize,
    pub fleet: usize,
    /// Base Poisson rate per directed pair, origin-major, zero diagonal.
    pub base_rates: Vec<f64>,
    /// Period of the sinusoidal demand modulation in steps.
    pub rate_period: usize,
    /// Trip prices per directed pair, origin-major.
    pub prices: Vec<f64>,
    /// Travel costs per directed pair (also charged to rebalancing moves).
    pub costs: Vec<f64>,
    /// Travel times in whole steps, >= 1.
    pub travel_times: Vec<usize>,
    pub episode_len: usize,
    pub forecast_steps: usize,
    pub forecast_noise_frac: f64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        let n = 4;
        let mut base_rates = vec![0.0; n * n];
        let mut prices = vec![0.0; n * n];
        let mut costs = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                // Asymmetric demand so rebalancing pays off.
                base_rates[i * n + j] = if (i + j) % 2 == 1 { 0.9 } else { 0.3 };
                costs[i * n + j] = 1.0;
                prices[i * n + j] = 4.0;
            }
        }
        Self {
            n_stations: n,
            fleet: 20,
            base_rates,
            rate_period: 20,
            prices,
            costs,
            travel_times: vec![1; n * n],
            episode_len: 30,
            forecast_steps: 6,
            forecast_noise_frac: 0.1,
        }
    }
}

impl RoutingConfig {
    fn validate(&self) -> Result<(), EnvError> {
        let n2 = self.n_stations * self.n_stations;
        if self.n_stations < 2 {
            return Err(EnvError::InvalidConfig("need at least two stations".into()));
        }
        if self.fleet == 0 {
            return Err(EnvError::InvalidConfig("fleet must be positive".into()));
        }
        if [self.base_rates.len(), self.prices.len(), self.costs.len(), self.travel_times.len()]
            .iter()
            .any(|&l| l != n2)
        {
            return Err(EnvError::InvalidConfig("pairwise tables must be n*n".into()));
        }
        if self.base_rates.iter().any(|&r| r < 0.0) {
            return Err(EnvError::InvalidConfig("rates must be nonnegative".into()));
        }
        if (0..self.n_stations).any(|i| {
            (0..self.n_stations).any(|j| i != j && self.travel_times[i * self.n_stations + j] == 0)
        }) {
            return Err(EnvError::InvalidConfig("travel times must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState {
    pub idle: Vec<f64>,
    /// Arrivals per station; entry k arrives after k + 1 steps. Covers both
    /// serving and rebalancing vehicles.
    pub pipelines: Vec<Vec<f64>>,
    /// Demand realized for the current step, origin-major N*N.
    pub demand: Vec<f64>,
    pub t: usize,
}

impl RoutingState {
    pub fn in_transit(&self) -> f64 {
        self.pipelines.iter().map(|p| p.iter().sum::<f64>()).sum()
    }
}

pub struct RoutingEnv {
    pub config: RoutingConfig,
}

/// Result of the greedy per-station matching: trips served per pair and
/// the idle vehicles left afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    pub served: Vec<f64>,
    pub idle_after: Vec<f64>,
}

impl RoutingEnv {
    pub fn new(config: RoutingConfig) -> Result<Self, EnvError> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn max_travel_time(&self) -> usize {
        *self.config.travel_times.iter().max().expect("nonempty")
    }

    pub fn obs_dim(&self) -> usize {
        let n = self.config.n_stations;
        n + n * n + n * self.config.forecast_steps + n * self.max_travel_time()
    }

    /// Time-varying Poisson rate for a directed pair.
    pub fn rate(&self, from: usize, to: usize, t: usize) -> f64 {
        let n = self.config.n_stations;
        let base = self.config.base_rates[from * n + to];
        let phase = 2.0 * std::f64::consts::PI
            * (t as f64 + from as f64 * self.config.rate_period as f64 / n as f64)
            / self.config.rate_period as f64;
        base * (1.0 + 0.5 * phase.cos())
    }

    fn realize_demand(&self, t: usize, rng: &mut SeededRng) -> Vec<f64> {
        let n = self.config.n_stations;
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    d[i * n + j] = rng.poisson(self.rate(i, j, t)) as f64;
                }
            }
        }
        d
    }

    pub fn reset(&self, rng: &mut SeededRng) -> RoutingState {
        let n = self.config.n_stations;
        // Spread the fleet as evenly as integer counts allow.
        let share = self.config.fleet as f64 / n as f64;
        let idle = largest_remainder_round(&vec![share; n], self.config.fleet as f64);
        let max_tau = *self.config.travel_times.iter().max().unwrap();
        let demand = self.realize_demand(0, rng);
        RoutingState { idle, pipelines: vec![vec![0.0; max_tau]; n], demand, t: 0 }
    }

    pub fn observe(&self, state: &RoutingState) -> StateVec {
        let n = self.config.n_stations;
        let mut values = Vec::with_capacity(self.obs_dim());
        values.extend(&state.idle);
        values.extend(&state.demand);
        for station in 0..n {
            for k in 1..=self.config.forecast_steps {
                values.push(self.forecast_noisy(station, state.t + k, state.t));
            }
        }
        for station in 0..n {
            values.extend(&state.pipelines[station]);
        }
        StateVec::new(values).expect("finite observation")
    }

    /// Unbiased per-origin demand forecast (sum of outgoing rates plus
    /// reproducible seeded noise).
    fn forecast_noisy(&self, station: usize, future_t: usize, now_t: usize) -> f64 {
        let n = self.config.n_stations;
        let mean: f64 = (0..n).filter(|&j| j != station).map(|j| self.rate(station, j, future_t)).sum();
        if self.config.forecast_noise_frac <= 0.0 {
            return mean;
        }
        let key = (station as u64) ^ ((future_t as u64) << 16) ^ ((now_t as u64) << 40);
        let mut rng = SeededRng::new(0x0d_f04e_ca5e ^ key);
        (mean * (1.0 + self.config.forecast_noise_frac * rng.normal())).max(0.0)
    }

    /// Greedy matching: each station serves outgoing requests up to its
    /// idle count, ties broken by destination index.
    pub fn match_passengers(&self, idle: &[f64], demand: &[f64]) -> Matching {
        let n = self.config.n_stations;
        let mut served = vec![0.0; n * n];
        let mut idle_after = idle.to_vec();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let take = demand[i * n + j].min(idle_after[i]);
                served[i * n + j] = take;
                idle_after[i] -= take;
            }
        }
        Matching { served, idle_after }
    }

    /// Network snapshot over post-matching idle counts.
    pub fn network(&self, idle_after: &[f64]) -> NetworkProblem {
        let n = self.config.n_stations;
        NetworkProblem::routing(idle_after, &|i, j| self.config.costs[i * n + j])
    }

    /// Desired idle counts from a distribution action, rounded by largest
    /// remainder over the currently idle total.
    pub fn desired_counts(&self, u: &HighAction, idle_total: f64) -> Result<Vec<f64>, EnvError> {
        if u.kind() != HighActionKind::Distribution || u.dim() != self.config.n_stations {
            return Err(EnvError::IncompatibleAction(format!(
                "expected distribution over {} stations, got {:?}/{}",
                self.config.n_stations,
                u.kind(),
                u.dim()
            )));
        }
        let raw: Vec<f64> = u.values().iter().map(|p| p * idle_total).collect();
        Ok(largest_remainder_round(&raw, idle_total))
    }

    /// Advance one step given the rebalancing flows (origin-major dense
    /// edge list over the post-matching network). Serving and rebalancing
    /// vehicles both enter the travel pipeline.
    pub fn step(
        &self,
        state: &RoutingState,
        matching: &Matching,
        rebalance_flows: &[f64],
        net: &NetworkProblem,
        rng: &mut SeededRng,
    ) -> Result<(RoutingState, f64), EnvError> {
        let n = self.config.n_stations;
        let tol = 1e-7;
        if rebalance_flows.len() != net.edges.len() {
            return Err(EnvError::IncompatibleAction("flow vector length mismatch".into()));
        }
        if rebalance_flows.iter().any(|&f| f < -tol) {
            return Err(EnvError::ConstraintViolation("negative rebalancing flow".into()));
        }
        for i in 0..n {
            let out = net.outflow(i, rebalance_flows);
            if out > matching.idle_after[i] + tol {
                return Err(EnvError::ConstraintViolation(format!(
                    "station {i} rebalances {out} with only {} idle",
                    matching.idle_after[i]
                )));
            }
        }

        let mut reward = 0.0;
        let mut next = state.clone();
        next.idle = matching.idle_after.clone();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let s = matching.served[i * n + j];
                if s > 0.0 {
                    reward += s * (self.config.prices[i * n + j] - self.config.costs[i * n + j]);
                    let tau = self.config.travel_times[i * n + j];
                    next.pipelines[j][tau - 1] += s;
                }
            }
        }
        for (k, e) in net.edges.iter().enumerate() {
            let f = rebalance_flows[k];
            if f > 0.0 {
                reward -= f * e.cost;
                let tau = self.config.travel_times[e.from * n + e.to];
                next.pipelines[e.to][tau - 1] += f;
                next.idle[e.from] -= f;
            }
        }

        for station in 0..n {
            let arriving = next.pipelines[station][0];
            next.pipelines[station].remove(0);
            next.pipelines[station].push(0.0);
            next.idle[station] += arriving;
        }
        next.t += 1;
        next.demand = self.realize_demand(next.t, rng);
        Ok((next, reward))
    }

    /// One high-level decision: match, rebalance toward the commanded
    /// distribution through the LP, then advance.
    pub fn hierarchical_step(
        &self,
        state: &RoutingState,
        u: &HighAction,
        rng: &mut SeededRng,
    ) -> Result<(RoutingState, f64), EnvError> {
        let matching = self.match_passengers(&state.idle, &state.demand);
        let idle_total: f64 = matching.idle_after.iter().sum();
        let desired = self.desired_counts(u, idle_total)?;
        let net = self.network(&matching.idle_after);
        let mut flows = rebalancing_policy(&net, &desired)?;
        flows = round_flows_per_source(&net, &flows);
        self.step(state, &matching, &flows, &net, rng)
    }

    pub fn obs_idle_range(&self) -> std::ops::Range<usize> {
        0..self.config.n_stations
    }

    pub fn obs_demand_range(&self) -> std::ops::Range<usize> {
        let n = self.config.n_stations;
        n..n + n * n
    }
}

/// Largest-remainder rounding of flows grouped by source node, so integer
/// outflow never exceeds integer inventory.
pub fn round_flows_per_source(net: &NetworkProblem, flows: &[f64]) -> Vec<f64> {
    let mut out = flows.to_vec();
    for node in 0..net.node_count() {
        let edge_ids: Vec<usize> =
            (0..net.edges.len()).filter(|&k| net.edges[k].from == node).collect();
        if edge_ids.is_empty() {
            continue;
        }
        let values: Vec<f64> = edge_ids.iter().map(|&k| flows[k]).collect();
        let total: f64 = values.iter().sum::<f64>().floor();
        let rounded = largest_remainder_round(&values, total);
        for (pos, &k) in edge_ids.iter().enumerate() {
            out[k] = rounded[pos];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> RoutingEnv {
        RoutingEnv::new(RoutingConfig::default()).unwrap()
    }

    #[test]
    fn reset_conserves_fleet() {
        let env = env();
        let state = env.reset(&mut SeededRng::new(0));
        let total: f64 = state.idle.iter().sum::<f64>() + state.in_transit();
        assert_eq!(total, 20.0);
        assert_eq!(state.idle, vec![5.0; 4]);
    }

    #[test]
    fn fleet_conserved_over_episode() {
        let env = env();
        let mut rng = SeededRng::new(21);
        let mut state = env.reset(&mut rng);
        let u = HighAction::distribution(vec![0.25; 4]).unwrap();
        for _ in 0..env.config.episode_len {
            let (next, _) = env.hierarchical_step(&state, &u, &mut rng).unwrap();
            let total = next.idle.iter().sum::<f64>() + next.in_transit();
            assert!((total - 20.0).abs() < 1e-9, "fleet drifted to {total}");
            assert!(next.idle.iter().all(|&v| v >= -1e-9));
            state = next;
        }
    }

    #[test]
    fn reward_hand_example() {
        // Serve 2 passengers at (p - c) = 3 each, rebalance 1 vehicle at
        // cost 1: r = 5.
        let mut config = RoutingConfig::default();
        config.base_rates = vec![0.0; 16];
        for v in config.prices.iter_mut() {
            *v = 4.0;
        }
        let env = RoutingEnv::new(config).unwrap();
        let mut state = env.reset(&mut SeededRng::new(0));
        state.demand = vec![0.0; 16];
        state.demand[1] = 2.0; // 0 -> 1
        let matching = env.match_passengers(&state.idle, &state.demand);
        assert_eq!(matching.served[1], 2.0);
        let net = env.network(&matching.idle_after);
        let mut flows = vec![0.0; net.edges.len()];
        let k = net.edges.iter().position(|e| e.from == 2 && e.to == 3).unwrap();
        flows[k] = 1.0;
        let (_, r) = env.step(&state, &matching, &flows, &net, &mut SeededRng::new(1)).unwrap();
        assert!((r - 5.0).abs() < 1e-12, "r = {r}");
    }

    #[test]
    fn matching_is_greedy_by_destination_index() {
        let mut config = RoutingConfig::default();
        config.fleet = 4;
        let env = RoutingEnv::new(config).unwrap();
        // Station 0 has 1 idle vehicle but 2 requests; destination 1 wins.
        let idle = vec![1.0, 0.0, 0.0, 0.0];
        let mut demand = vec![0.0; 16];
        demand[1] = 1.0;
        demand[2] = 1.0;
        let m = env.match_passengers(&idle, &demand);
        assert_eq!(m.served[1], 1.0);
        assert_eq!(m.served[2], 0.0);
        assert_eq!(m.idle_after[0], 0.0);
    }

    #[test]
    fn bypass_overdraft_rejected() {
        let env = env();
        let state = env.reset(&mut SeededRng::new(2));
        let matching = env.match_passengers(&state.idle, &vec![0.0; 16]);
        let net = env.network(&matching.idle_after);
        let mut flows = vec![0.0; net.edges.len()];
        flows[0] = 100.0;
        assert!(matches!(
            env.step(&state, &matching, &flows, &net, &mut SeededRng::new(3)),
            Err(EnvError::ConstraintViolation(_))
        ));
    }

    #[test]
    fn demand_rates_nonnegative_and_periodic() {
        let env = env();
        for t in 0..40 {
            for i in 0..4 {
                for j in 0..4 {
                    if i != j {
                        assert!(env.rate(i, j, t) >= 0.0);
                    }
                }
            }
        }
        assert!((env.rate(0, 1, 0) - env.rate(0, 1, env.config.rate_period)).abs() < 1e-12);
    }

    #[test]
    fn distribution_action_rounds_to_counts() {
        let env = env();
        let u = HighAction::distribution(vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let counts = env.desired_counts(&u, 9.0).unwrap();
        assert_eq!(counts.iter().sum::<f64>(), 9.0);
        assert!(counts[0] >= 4.0 && counts[1] >= 4.0);
    }
}
