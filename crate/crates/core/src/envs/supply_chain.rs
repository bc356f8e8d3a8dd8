//! One-warehouse, N-store inventory network. Demand follows a seasonal
//! cosine with uniform noise; orders route through the distribution LP so
//! storage and production capacities hold by construction.
//!
//! Observation layout (fixed order):
//! [inventories (1 + S) | backorders (S) | current demand (S)
//!  | demand forecast (S x K, store-major)
//!  | pipeline arrivals per future step ((1 + S) x lead, node-major)].

use super::{largest_remainder_round, EnvError};
use crate::lp::{supplychain_policy, NetworkProblem, SupplyChainPlan};
use crate::rng::SeededRng;
use crate::types::{HighAction, HighActionKind, StateVec};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SupplyChainConfig {
    pub d_max: Vec<f64>,
    pub d_var: Vec<f64>,
    pub freq: Vec<f64>,
    pub shift: Vec<f64>,
    /// Shipment travel time in steps (pipeline length).
    pub travel_time: usize,
    pub production_time: usize,
    /// Storage capacities, warehouse first.
    pub storage_caps: Vec<f64>,
    /// Per-node storage cost, warehouse first.
    pub storage_costs: Vec<f64>,
    pub production_cost: f64,
    pub production_cap: f64,
    pub transport_cost: f64,
    pub price: f64,
    pub backorder_cost: f64,
    pub episode_len: usize,
    pub forecast_steps: usize,
    pub forecast_noise_frac: f64,
    /// Initial inventories as a fraction of storage capacity.
    pub init_fill: f64,
}

impl Default for SupplyChainConfig {
    fn default() -> Self {
        Self::one_w_three_s()
    }
}

impl SupplyChainConfig {
    /// Three-store network.
    pub fn one_w_three_s() -> Self {
        Self {
            d_max: vec![5.0, 15.0, 20.0],
            d_var: vec![2.0, 2.0, 2.0],
            freq: vec![2.0, 4.0, 6.0],
            shift: vec![1.0, 3.0, 6.0],
            travel_time: 1,
            production_time: 1,
            storage_caps: vec![50.0, 15.0, 15.0, 15.0],
            storage_costs: vec![0.1, 0.5, 0.5, 0.5],
            production_cost: 5.0,
            production_cap: 25.0,
            transport_cost: 0.5,
            price: 15.0,
            backorder_cost: 1.5,
            episode_len: 30,
            forecast_steps: 6,
            forecast_noise_frac: 0.1,
            init_fill: 0.5,
        }
    }

    /// Ten-store network.
    pub fn one_w_ten_s() -> Self {
        Self {
            d_max: vec![5.0, 5.0, 5.0, 5.0, 10.0, 10.0, 10.0, 18.0, 18.0, 18.0],
            d_var: vec![2.0; 10],
            freq: vec![2.0, 4.0, 6.0, 2.0, 4.0, 6.0, 2.0, 4.0, 6.0, 3.0],
            shift: vec![1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 6.0, 6.0, 6.0, 2.0],
            travel_time: 1,
            production_time: 1,
            storage_caps: {
                let mut caps = vec![80.0];
                caps.extend(vec![15.0; 10]);
                caps
            },
            storage_costs: {
                let mut costs = vec![0.005];
                costs.extend(vec![2.0; 10]);
                costs
            },
            production_cost: 5.0,
            production_cap: 60.0,
            transport_cost: 0.5,
            price: 15.0,
            backorder_cost: 1.5,
            episode_len: 30,
            forecast_steps: 6,
            forecast_noise_frac: 0.1,
            init_fill: 0.5,
        }
    }

    pub fn store_count(&self) -> usize {
        self.d_max.len()
    }

    fn validate(&self) -> Result<(), EnvError> {
        let s = self.store_count();
        if s == 0 {
            return Err(EnvError::InvalidConfig("need at least one store".into()));
        }
        if self.storage_caps.len() != s + 1 || self.storage_costs.len() != s + 1 {
            return Err(EnvError::InvalidConfig("capacities/costs must cover warehouse + stores".into()));
        }
        if [self.d_var.len(), self.freq.len(), self.shift.len()].iter().any(|&l| l != s) {
            return Err(EnvError::InvalidConfig("per-store parameter lengths disagree".into()));
        }
        if self.episode_len == 0 || self.travel_time == 0 || self.production_time == 0 {
            return Err(EnvError::InvalidConfig("episode length and lead times must be >= 1".into()));
        }
        if self.storage_caps.iter().any(|&c| c <= 0.0) || self.production_cap <= 0.0 {
            return Err(EnvError::InvalidConfig("capacities must be positive".into()));
        }
        if [self.production_cost, self.transport_cost, self.backorder_cost]
            .iter()
            .chain(self.storage_costs.iter())
            .any(|&c| c < 0.0)
        {
            return Err(EnvError::InvalidConfig("costs must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupplyChainState {
    /// Warehouse first, then stores.
    pub inventories: Vec<f64>,
    pub backorders: Vec<f64>,
    /// Per-node arrival pipeline; entry k arrives after k + 1 steps.
    pub pipelines: Vec<Vec<f64>>,
    /// Demand realized for the current step (stores).
    pub demand: Vec<f64>,
    pub t: usize,
}

impl SupplyChainState {
    pub fn in_transit_to(&self, node: usize) -> f64 {
        self.pipelines[node].iter().sum()
    }
}

pub struct SupplyChainEnv {
    pub config: SupplyChainConfig,
}

impl SupplyChainEnv {
    pub fn new(config: SupplyChainConfig) -> Result<Self, EnvError> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn store_count(&self) -> usize {
        self.config.store_count()
    }

    pub fn node_count(&self) -> usize {
        self.store_count() + 1
    }

    pub fn pipeline_len(&self) -> usize {
        self.config.travel_time.max(self.config.production_time)
    }

    pub fn obs_dim(&self) -> usize {
        let s = self.store_count();
        (1 + s) + s + s + s * self.config.forecast_steps + (1 + s) * self.pipeline_len()
    }

    /// Deterministic seasonal mean of store demand at step t (noise mean
    /// included).
    pub fn demand_mean(&self, store: usize, t: usize) -> f64 {
        let c = &self.config;
        let phase = c.freq[store] * std::f64::consts::PI * (2.0 * c.shift[store] + t as f64)
            / c.episode_len as f64;
        c.d_max[store] / 2.0 * (1.0 + phase.cos()) + c.d_var[store] / 2.0
    }

    fn realize_demand(&self, t: usize, rng: &mut SeededRng) -> Vec<f64> {
        let c = &self.config;
        (0..self.store_count())
            .map(|i| {
                let phase = c.freq[i] * std::f64::consts::PI * (2.0 * c.shift[i] + t as f64)
                    / c.episode_len as f64;
                let noise = if c.d_var[i] > 0.0 { rng.uniform_in(0.0, c.d_var[i]) } else { 0.0 };
                (c.d_max[i] / 2.0 * (1.0 + phase.cos()) + noise).floor().max(0.0)
            })
            .collect()
    }

    pub fn reset(&self, rng: &mut SeededRng) -> SupplyChainState {
        let c = &self.config;
        let inventories: Vec<f64> =
            c.storage_caps.iter().map(|cap| (cap * c.init_fill).round()).collect();
        let pipe_len = c.travel_time.max(c.production_time);
        let demand = self.realize_demand(0, rng);
        SupplyChainState {
            inventories,
            backorders: vec![0.0; self.store_count()],
            pipelines: vec![vec![0.0; pipe_len]; self.node_count()],
            demand,
            t: 0,
        }
    }

    pub fn observe(&self, state: &SupplyChainState) -> StateVec {
        let c = &self.config;
        let mut values = Vec::with_capacity(self.obs_dim());
        values.extend(&state.inventories);
        values.extend(&state.backorders);
        values.extend(&state.demand);
        for store in 0..self.store_count() {
            for k in 1..=c.forecast_steps {
                values.push(self.forecast_noisy(store, state.t + k, state.t));
            }
        }
        for node in 0..self.node_count() {
            values.extend(&state.pipelines[node]);
        }
        StateVec::new(values).expect("finite observation")
    }

    /// Unbiased forecast: seasonal mean plus seeded Gaussian noise keyed on
    /// (step asked about, step asked from, store), so repeated observations
    /// are reproducible.
    fn forecast_noisy(&self, store: usize, future_t: usize, now_t: usize) -> f64 {
        let mean = self.demand_mean(store, future_t);
        if self.config.forecast_noise_frac <= 0.0 {
            return mean;
        }
        let key = (store as u64) ^ ((future_t as u64) << 16) ^ ((now_t as u64) << 40);
        let mut rng = SeededRng::new(0x5eed_f04e_u64 ^ key);
        (mean * (1.0 + self.config.forecast_noise_frac * rng.normal())).max(0.0)
    }

    /// Expected sales this step: demand plus backlog, capped by stock.
    pub fn consumption(&self, state: &SupplyChainState) -> Vec<f64> {
        (0..self.store_count())
            .map(|i| (state.demand[i] + state.backorders[i]).min(state.inventories[i + 1]))
            .collect()
    }

    /// Network snapshot used by the LP policy and the inverses.
    pub fn network(&self, state: &SupplyChainState) -> NetworkProblem {
        let c = &self.config;
        NetworkProblem::one_warehouse(
            state.inventories[0],
            (c.storage_caps[0], c.production_cap),
            &state.inventories[1..],
            &c.storage_caps[1..],
            c.transport_cost,
        )
    }

    /// Route a high action (desired production then desired store
    /// inventories) through the distribution LP.
    pub fn plan_for(
        &self,
        state: &SupplyChainState,
        u: &HighAction,
    ) -> Result<SupplyChainPlan, EnvError> {
        if u.kind() != HighActionKind::MixedProductionDistribution
            || u.dim() != 1 + self.store_count()
        {
            return Err(EnvError::IncompatibleAction(format!(
                "expected production + {} store targets, got {:?}/{}",
                self.store_count(),
                u.kind(),
                u.dim()
            )));
        }
        let values = u.values();
        let desired_w = [values[0].max(0.0)];
        let desired_q: Vec<f64> = values[1..].iter().map(|v| v.max(0.0)).collect();
        let consumption = self.consumption(state);
        let net = self.network(state);
        let mut plan = supplychain_policy(&net, &desired_w, &desired_q, &consumption)?;
        // Integral data keeps LP vertices integral, so rounding is a no-op
        // on clean runs; it still guards against float drift.
        plan.flows = largest_remainder_round(&plan.flows, plan.flows.iter().sum::<f64>());
        plan.production[0] = plan.production[0].round().clamp(0.0, self.config.production_cap);
        Ok(plan)
    }

    /// Advance one step under the given shipments and production order.
    /// Validates the hard constraints so that bypassing the LP with raw
    /// flows is detectable.
    pub fn step(
        &self,
        state: &SupplyChainState,
        flows: &[f64],
        production: f64,
        rng: &mut SeededRng,
    ) -> Result<(SupplyChainState, f64), EnvError> {
        let c = &self.config;
        let s_count = self.store_count();
        if flows.len() != s_count {
            return Err(EnvError::IncompatibleAction(format!(
                "expected {} store flows, got {}",
                s_count,
                flows.len()
            )));
        }
        let consumption = self.consumption(state);
        let tol = 1e-7;
        if flows.iter().any(|&f| f < -tol) || production < -tol {
            return Err(EnvError::ConstraintViolation("negative flow or production".into()));
        }
        let outflow: f64 = flows.iter().sum();
        if outflow > state.inventories[0] + tol {
            return Err(EnvError::ConstraintViolation(format!(
                "warehouse ships {} with only {} on hand",
                outflow, state.inventories[0]
            )));
        }
        if production > c.production_cap + tol {
            return Err(EnvError::ConstraintViolation(format!(
                "production {} exceeds capacity {}",
                production, c.production_cap
            )));
        }
        if state.inventories[0] + production - outflow > c.production_cap + tol {
            return Err(EnvError::ConstraintViolation(
                "post-production warehouse level exceeds capacity".into(),
            ));
        }
        for i in 0..s_count {
            let incoming = flows[i] + state.in_transit_to(i + 1);
            if incoming + state.inventories[i + 1] - consumption[i] > c.storage_caps[i + 1] + tol {
                return Err(EnvError::ConstraintViolation(format!(
                    "store {i} would exceed storage capacity"
                )));
            }
        }

        // Reward uses step-start quantities.
        let mut reward = 0.0;
        for i in 0..s_count {
            let q = state.inventories[i + 1];
            let d = state.demand[i];
            reward += c.price * d.min(q);
            reward -= c.backorder_cost * (d - q).max(0.0);
            reward -= 1.5 * c.price * (q - c.storage_caps[i + 1]).max(0.0);
        }
        for node in 0..self.node_count() {
            reward -= c.storage_costs[node] * state.inventories[node];
        }
        reward -= c.production_cost * production;
        reward -= c.transport_cost * flows.iter().sum::<f64>();

        // Sales and backorder bookkeeping.
        let mut next = state.clone();
        for i in 0..s_count {
            let request = state.demand[i] + state.backorders[i];
            let sold = request.min(state.inventories[i + 1]);
            next.inventories[i + 1] -= sold;
            next.backorders[i] = request - sold;
        }
        next.inventories[0] -= outflow;

        // Enqueue shipments and production, then advance every pipeline.
        for i in 0..s_count {
            next.pipelines[i + 1][c.travel_time - 1] += flows[i];
        }
        next.pipelines[0][c.production_time - 1] += production;
        for node in 0..self.node_count() {
            let arriving = next.pipelines[node][0];
            next.pipelines[node].remove(0);
            next.pipelines[node].push(0.0);
            next.inventories[node] += arriving;
        }

        next.t += 1;
        next.demand = self.realize_demand(next.t, rng);
        Ok((next, reward))
    }

    /// One high-level decision: LP solve followed by one network step.
    pub fn hierarchical_step(
        &self,
        state: &SupplyChainState,
        u: &HighAction,
        rng: &mut SeededRng,
    ) -> Result<(SupplyChainState, f64), EnvError> {
        let plan = self.plan_for(state, u)?;
        self.step(state, &plan.flows, plan.production[0], rng)
    }

    /// Index ranges of the observation layout.
    pub fn obs_inventory_range(&self) -> std::ops::Range<usize> {
        0..self.node_count()
    }

    pub fn obs_backorder_range(&self) -> std::ops::Range<usize> {
        let n = self.node_count();
        n..n + self.store_count()
    }

    pub fn obs_demand_range(&self) -> std::ops::Range<usize> {
        let n = self.node_count() + self.store_count();
        n..n + self.store_count()
    }

    /// Pipeline block of the observation: `pipeline_len` slots per node,
    /// node-major.
    pub fn obs_pipeline_range(&self) -> std::ops::Range<usize> {
        let start = self.node_count()
            + 2 * self.store_count()
            + self.store_count() * self.config.forecast_steps;
        start..start + self.node_count() * self.pipeline_len()
    }

    /// Total in-transit stock per node, read out of an observation.
    pub fn in_transit_from_obs(&self, obs: &[f64]) -> Vec<f64> {
        let block = &obs[self.obs_pipeline_range()];
        block.chunks(self.pipeline_len()).map(|c| c.iter().sum()).collect()
    }
}
