//! Goal-reaching environments: the linear double integrator and a nonlinear
//! 2-D point mass with cubic velocity drag. Observations concatenate the
//! physical state with the episode goal; the built-in low level is a
//! finite-horizon LQR tracking law.

use nalgebra::{DMatrix, DVector};

use super::EnvError;
use crate::control::{linearize_fd, riccati_gains, CostMatrices, GainSchedule, LinearDynamics};
use crate::inversion::UScale;
use crate::rng::SeededRng;
use crate::types::{BoxBounds, HighAction, HighActionKind, StateVec};

/// LQR tracking low level a = K_t (s - u), clamped to the action bounds
/// when the environment has any.
#[derive(Debug, Clone)]
pub struct LqrLowLevel {
    pub gains: GainSchedule,
    pub bounds: Option<BoxBounds>,
}

impl LqrLowLevel {
    pub fn action(&self, t: usize, phys: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let k = &self.gains.ks[t.min(self.gains.horizon - 1)];
        let mut a = k * (phys - u);
        if let Some(b) = &self.bounds {
            let mut values: Vec<f64> = a.iter().copied().collect();
            b.clamp(&mut values);
            a = DVector::from_vec(values);
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoalEnvState {
    pub phys: DVector<f64>,
    pub goal: DVector<f64>,
    pub t: usize,
}

/// Common surface of the two goal environments.
pub trait GoalEnv {
    fn phys_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn episode_len(&self) -> usize;
    fn t_abs(&self) -> usize;
    fn bounds(&self) -> Option<&BoxBounds>;
    fn reset(&self, rng: &mut SeededRng) -> GoalEnvState;
    fn observe(&self, state: &GoalEnvState) -> StateVec;
    /// One physics step with reward exp(-||s' - goal||^2) - 0.01 ||a||^2.
    fn step(
        &self,
        state: &GoalEnvState,
        a: &DVector<f64>,
        rng: &mut SeededRng,
    ) -> Result<(GoalEnvState, f64), EnvError>;
    /// Tracking gains valid for the next abstraction window.
    fn low_level_for(&self, state: &GoalEnvState) -> Result<LqrLowLevel, EnvError>;
    /// Dynamics used by relabeling, linearized at the window start when the
    /// environment is nonlinear.
    fn dynamics_at(&self, phys: &DVector<f64>) -> Result<LinearDynamics, EnvError>;
    /// Scaling box for numeric inversion of goal actions.
    fn goal_scale(&self) -> UScale;
}

pub(crate) fn goal_reward(phys_next: &DVector<f64>, goal: &DVector<f64>, a: &DVector<f64>) -> f64 {
    (-(phys_next - goal).norm_squared()).exp() - 0.01 * a.norm_squared()
}

/// Run `t_abs` low-level tracking steps toward the goal-state action `u`.
pub fn hierarchical_step<E: GoalEnv>(
    env: &E,
    state: &GoalEnvState,
    u: &HighAction,
    low: &LqrLowLevel,
    t_abs: usize,
    rng: &mut SeededRng,
) -> Result<(GoalEnvState, f64), EnvError> {
    if u.kind() != HighActionKind::GoalState || u.dim() != env.phys_dim() {
        return Err(EnvError::IncompatibleAction(format!(
            "expected goal-state action of dim {}, got {:?}/{}",
            env.phys_dim(),
            u.kind(),
            u.dim()
        )));
    }
    let target = u.as_dvector();
    let mut cur = state.clone();
    let mut total = 0.0;
    for k in 0..t_abs {
        let a = low.action(k, &cur.phys, &target);
        let (next, r) = env.step(&cur, &a, rng)?;
        cur = next;
        total += r;
    }
    Ok((cur, total))
}

/// Double integrator with configurable tracking costs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LinearEnvConfig {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub noise_std: f64,
    /// Goal sampling box over the physical state (position target; the
    /// velocity component of the box is usually degenerate at 0).
    pub goal_lo: Vec<f64>,
    pub goal_hi: Vec<f64>,
    pub start_lo: Vec<f64>,
    pub start_hi: Vec<f64>,
    pub episode_len: usize,
    pub t_abs: usize,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
}

impl Default for LinearEnvConfig {
    fn default() -> Self {
        Self {
            a: vec![vec![1.0, 0.5], vec![0.0, 1.0]],
            b: vec![vec![0.125], vec![0.5]],
            c: vec![0.0, 0.0],
            noise_std: 0.0,
            goal_lo: vec![-3.0, 0.0],
            goal_hi: vec![3.0, 0.0],
            start_lo: vec![-3.0, -0.5],
            start_hi: vec![3.0, 0.5],
            episode_len: 40,
            t_abs: 5,
            q_diag: vec![4.0, 1.0],
            r_diag: vec![0.2],
        }
    }
}

pub struct LinearEnv {
    pub config: LinearEnvConfig,
    dynamics: LinearDynamics,
    gains: GainSchedule,
}

impl LinearEnv {
    pub fn new(config: LinearEnvConfig) -> Result<Self, EnvError> {
        let n = config.a.len();
        if n == 0 || config.a.iter().any(|row| row.len() != n) {
            return Err(EnvError::InvalidConfig("A must be square".into()));
        }
        if config.b.len() != n || config.b[0].is_empty() {
            return Err(EnvError::InvalidConfig("B must have n rows".into()));
        }
        if config.episode_len == 0 || config.t_abs == 0 || config.episode_len % config.t_abs != 0 {
            return Err(EnvError::InvalidConfig(
                "episode length must be a positive multiple of the abstraction".into(),
            ));
        }
        let m = config.b[0].len();
        let a = DMatrix::from_fn(n, n, |i, j| config.a[i][j]);
        let b = DMatrix::from_fn(n, m, |i, j| config.b[i][j]);
        let c = DVector::from_column_slice(&config.c);
        let dynamics = LinearDynamics::new(a, b, c).map_err(EnvError::Control)?;
        let cost = CostMatrices::tracking(
            DMatrix::from_partial_diagonal(n, n, &config.q_diag),
            DMatrix::from_partial_diagonal(m, m, &config.r_diag),
        );
        let gains = riccati_gains(&dynamics, &cost, config.t_abs)?;
        Ok(Self { config, dynamics, gains })
    }

    pub fn dynamics(&self) -> &LinearDynamics {
        &self.dynamics
    }

    pub fn gains(&self) -> &GainSchedule {
        &self.gains
    }

    pub fn obs_dim(&self) -> usize {
        2 * self.phys_dim()
    }
}

fn sample_box(lo: &[f64], hi: &[f64], rng: &mut SeededRng) -> DVector<f64> {
    DVector::from_fn(lo.len(), |i, _| {
        if hi[i] > lo[i] {
            rng.uniform_in(lo[i], hi[i])
        } else {
            lo[i]
        }
    })
}

impl GoalEnv for LinearEnv {
    fn phys_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.dynamics.action_dim()
    }

    fn episode_len(&self) -> usize {
        self.config.episode_len
    }

    fn t_abs(&self) -> usize {
        self.config.t_abs
    }

    fn bounds(&self) -> Option<&BoxBounds> {
        None
    }

    fn reset(&self, rng: &mut SeededRng) -> GoalEnvState {
        let phys = sample_box(&self.config.start_lo, &self.config.start_hi, rng);
        let goal = sample_box(&self.config.goal_lo, &self.config.goal_hi, rng);
        GoalEnvState { phys, goal, t: 0 }
    }

    fn observe(&self, state: &GoalEnvState) -> StateVec {
        let mut values: Vec<f64> = state.phys.iter().copied().collect();
        values.extend(state.goal.iter());
        StateVec::new(values).expect("finite state")
    }

    fn step(
        &self,
        state: &GoalEnvState,
        a: &DVector<f64>,
        rng: &mut SeededRng,
    ) -> Result<(GoalEnvState, f64), EnvError> {
        let mut phys = self.dynamics.step_mean(&state.phys, a);
        if self.config.noise_std > 0.0 {
            for v in phys.iter_mut() {
                *v += rng.normal_scaled(0.0, self.config.noise_std);
            }
        }
        let r = goal_reward(&phys, &state.goal, a);
        Ok((GoalEnvState { phys, goal: state.goal.clone(), t: state.t + 1 }, r))
    }

    fn low_level_for(&self, _state: &GoalEnvState) -> Result<LqrLowLevel, EnvError> {
        Ok(LqrLowLevel { gains: self.gains.clone(), bounds: None })
    }

    fn dynamics_at(&self, _phys: &DVector<f64>) -> Result<LinearDynamics, EnvError> {
        Ok(self.dynamics.clone())
    }

    fn goal_scale(&self) -> UScale {
        let pad = 1.0;
        let lo: Vec<f64> =
            self.config.goal_lo.iter().zip(&self.config.start_lo).map(|(g, s)| g.min(*s) - pad).collect();
        let hi: Vec<f64> =
            self.config.goal_hi.iter().zip(&self.config.start_hi).map(|(g, s)| g.max(*s) + pad).collect();
        UScale::new(lo, hi)
    }
}

/// 2-D point mass: velocity drag force -kappa * v^3 per component, bounded
/// thrust, same discretization as the linear system so kappa = 0 reduces to
/// two decoupled double integrators.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NonlinearEnvConfig {
    pub kappa: f64,
    pub dt: f64,
    pub thrust_max: f64,
    pub goal_lo: Vec<f64>,
    pub goal_hi: Vec<f64>,
    pub start_lo: Vec<f64>,
    pub start_hi: Vec<f64>,
    pub noise_std: f64,
    pub episode_len: usize,
    pub t_abs: usize,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub fd_eps: f64,
}

impl Default for NonlinearEnvConfig {
    fn default() -> Self {
        Self {
            kappa: 0.15,
            dt: 0.5,
            thrust_max: 2.0,
            goal_lo: vec![-2.0, -2.0, 0.0, 0.0],
            goal_hi: vec![2.0, 2.0, 0.0, 0.0],
            start_lo: vec![-2.0, -2.0, -0.3, -0.3],
            start_hi: vec![2.0, 2.0, 0.3, 0.3],
            noise_std: 0.0,
            episode_len: 40,
            t_abs: 5,
            q_diag: vec![4.0, 4.0, 1.0, 1.0],
            r_diag: vec![0.2, 0.2],
            fd_eps: 1e-5,
        }
    }
}

pub struct NonlinearEnv {
    pub config: NonlinearEnvConfig,
    bounds: BoxBounds,
}

impl NonlinearEnv {
    pub fn new(config: NonlinearEnvConfig) -> Result<Self, EnvError> {
        if config.kappa < 0.0 || config.dt <= 0.0 {
            return Err(EnvError::InvalidConfig("kappa >= 0 and dt > 0 required".into()));
        }
        if config.episode_len == 0 || config.t_abs == 0 || config.episode_len % config.t_abs != 0 {
            return Err(EnvError::InvalidConfig(
                "episode length must be a positive multiple of the abstraction".into(),
            ));
        }
        let bounds = BoxBounds::symmetric(2, config.thrust_max);
        Ok(Self { config, bounds })
    }

    pub fn obs_dim(&self) -> usize {
        8
    }

    /// Deterministic step map (positions then velocities).
    pub fn step_map(&self, phys: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
        let dt = self.config.dt;
        let kappa = self.config.kappa;
        let (px, py, vx, vy) = (phys[0], phys[1], phys[2], phys[3]);
        let ax = a[0] - kappa * vx * vx * vx;
        let ay = a[1] - kappa * vy * vy * vy;
        DVector::from_column_slice(&[
            px + dt * vx + 0.5 * dt * dt * ax,
            py + dt * vy + 0.5 * dt * dt * ay,
            vx + dt * ax,
            vy + dt * ay,
        ])
    }
}

impl GoalEnv for NonlinearEnv {
    fn phys_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn episode_len(&self) -> usize {
        self.config.episode_len
    }

    fn t_abs(&self) -> usize {
        self.config.t_abs
    }

    fn bounds(&self) -> Option<&BoxBounds> {
        Some(&self.bounds)
    }

    fn reset(&self, rng: &mut SeededRng) -> GoalEnvState {
        let phys = sample_box(&self.config.start_lo, &self.config.start_hi, rng);
        let goal = sample_box(&self.config.goal_lo, &self.config.goal_hi, rng);
        GoalEnvState { phys, goal, t: 0 }
    }

    fn observe(&self, state: &GoalEnvState) -> StateVec {
        let mut values: Vec<f64> = state.phys.iter().copied().collect();
        values.extend(state.goal.iter());
        StateVec::new(values).expect("finite state")
    }

    fn step(
        &self,
        state: &GoalEnvState,
        a: &DVector<f64>,
        rng: &mut SeededRng,
    ) -> Result<(GoalEnvState, f64), EnvError> {
        let values: Vec<f64> = a.iter().copied().collect();
        if !self.bounds.contains(&values) {
            return Err(EnvError::ActionOutOfBounds(format!(
                "thrust {:?} exceeds +/-{}",
                values, self.config.thrust_max
            )));
        }
        let mut phys = self.step_map(&state.phys, a);
        if self.config.noise_std > 0.0 {
            for v in phys.iter_mut() {
                *v += rng.normal_scaled(0.0, self.config.noise_std);
            }
        }
        let r = goal_reward(&phys, &state.goal, a);
        Ok((GoalEnvState { phys, goal: state.goal.clone(), t: state.t + 1 }, r))
    }

    fn low_level_for(&self, state: &GoalEnvState) -> Result<LqrLowLevel, EnvError> {
        let dyn_ = self.dynamics_at(&state.phys)?;
        let cost = CostMatrices::tracking(
            DMatrix::from_partial_diagonal(4, 4, &self.config.q_diag),
            DMatrix::from_partial_diagonal(2, 2, &self.config.r_diag),
        );
        let gains = riccati_gains(&dyn_, &cost, self.config.t_abs)?;
        Ok(LqrLowLevel { gains, bounds: Some(self.bounds.clone()) })
    }

    fn dynamics_at(&self, phys: &DVector<f64>) -> Result<LinearDynamics, EnvError> {
        let f = |s: &DVector<f64>, a: &DVector<f64>| self.step_map(s, a);
        Ok(linearize_fd(&f, phys, &DVector::zeros(2), self.config.fd_eps_or_default())?)
    }

    fn goal_scale(&self) -> UScale {
        let pad = 1.0;
        let lo: Vec<f64> =
            self.config.goal_lo.iter().zip(&self.config.start_lo).map(|(g, s)| g.min(*s) - pad).collect();
        let hi: Vec<f64> =
            self.config.goal_hi.iter().zip(&self.config.start_hi).map(|(g, s)| g.max(*s) + pad).collect();
        UScale::new(lo, hi)
    }
}

impl NonlinearEnvConfig {
    fn fd_eps_or_default(&self) -> f64 {
        if self.fd_eps > 0.0 {
            self.fd_eps
        } else {
            1e-5
        }
    }
}
