//! Recover the high-level action that most likely generated an observed
//! transition, by inverting the low-level policy analytically (one-step
//! affine gains or the closed-loop sensitivity recursion over a horizon),
//! by Adam gradient descent, or by the cross-entropy method.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::control::{pseudo_inverse, AffineGains, GainSchedule, LinearDynamics};
use crate::rng::SeededRng;
use crate::types::HighAction;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InversionError {
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },
    #[error("dimension mismatch: {0}")]
    Dims(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum InversionMethod {
    AnalyticOneStep,
    AnalyticHorizon,
    AnalyticRegularized,
    GradientDescent,
    Cem,
}

/// Knobs for the numeric inverses. Defaults follow the tuning that works at
/// desk scale: Adam with learning rate 0.01 for up to 10000 steps, 50 CEM
/// samples per iteration keeping the top 20%, stopping after 4 iterations
/// without improvement, and a 0.2 filter threshold on the final loss.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub method: InversionMethod,
    pub horizon: usize,
    pub lr: f64,
    pub max_steps: usize,
    pub early_stop_tol: f64,
    pub cem_samples: usize,
    pub cem_elite_frac: f64,
    pub cem_patience: usize,
    pub loss_threshold: f64,
    pub regularizer_weight: f64,
    /// Match every intermediate state of the window instead of only the
    /// terminal one.
    pub per_step_state_loss: bool,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            method: InversionMethod::AnalyticHorizon,
            horizon: 5,
            lr: 0.01,
            max_steps: 10_000,
            early_stop_tol: 1e-5,
            cem_samples: 50,
            cem_elite_frac: 0.2,
            cem_patience: 4,
            loss_threshold: 0.2,
            regularizer_weight: 0.0,
            per_step_state_loss: false,
        }
    }
}

impl InversionConfig {
    pub fn with_method(method: InversionMethod) -> Self {
        Self { method, ..Self::default() }
    }
}

/// Affine map between original high-action coordinates and the [-1, 1] box
/// the numeric optimizers work in.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UScale {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl UScale {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        assert!(lo.iter().zip(&hi).all(|(l, h)| h > l), "bounds must satisfy hi > lo");
        Self { lo, hi }
    }

    /// Identity map ([-1, 1] bounds).
    pub fn unit(dim: usize) -> Self {
        Self { lo: vec![-1.0; dim], hi: vec![1.0; dim] }
    }

    pub fn symmetric(dim: usize, magnitude: f64) -> Self {
        Self { lo: vec![-magnitude; dim], hi: vec![magnitude; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn to_scaled(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(u.len(), |i, _| 2.0 * (u[i] - self.lo[i]) / (self.hi[i] - self.lo[i]) - 1.0)
    }

    pub fn from_scaled(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(y.len(), |i, _| self.lo[i] + (y[i] + 1.0) * (self.hi[i] - self.lo[i]) / 2.0)
    }
}

/// Outcome of one inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    pub u_hat: HighAction,
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The pseudo-inverse hit a rank-deficient matrix and returned the
    /// minimum-norm solution.
    pub rank_deficient: bool,
    /// Scaling map used by the numeric methods, when one was applied.
    pub scale: Option<UScale>,
}

impl InversionResult {
    fn analytic(u_hat: HighAction, loss: f64, rank_deficient: bool) -> Self {
        Self { u_hat, loss, iterations: 0, converged: true, rank_deficient, scale: None }
    }
}

/// One-step analytic inverse of the affine policy a* = K u + k:
/// u_hat = (B K)^+ (s' - (A s + c + B k)).
pub fn invert_lqg_analytic(
    dyn_: &LinearDynamics,
    gains: &AffineGains,
    s: &DVector<f64>,
    s_next: &DVector<f64>,
) -> InversionResult {
    let bk = &dyn_.b * &gains.k_mat;
    let rank_deficient = crate::control::numerical_rank(&bk) < bk.ncols();
    let drift = &dyn_.a * s + &dyn_.c + &dyn_.b * &gains.k_vec;
    let u_hat = pseudo_inverse(&bk) * (s_next - &drift);
    let predicted = &drift + &bk * &u_hat;
    let loss = (predicted - s_next).norm_squared();
    InversionResult::analytic(HighAction::goal(u_hat.iter().copied().collect()).unwrap(), loss, rank_deficient)
}

/// Closed-loop sensitivity (`phi1`) and drift (`phi2`) of the T-step rollout
/// under a = K_t (x - u): x_T = phi2 - phi1 u.
pub fn closed_loop_sensitivity(
    dyn_per_step: &[LinearDynamics],
    gains: &GainSchedule,
    s: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    assert_eq!(dyn_per_step.len(), gains.horizon, "one dynamics entry per step");
    let closed = |l: usize| &dyn_per_step[l].a + &dyn_per_step[l].b * &gains.ks[l];
    let mut phi1 = &dyn_per_step[0].b * &gains.ks[0];
    let mut phi2 = closed(0) * s + &dyn_per_step[0].c;
    for l in 1..gains.horizon {
        let cl = closed(l);
        phi1 = &cl * phi1 + &dyn_per_step[l].b * &gains.ks[l];
        phi2 = cl * phi2 + &dyn_per_step[l].c;
    }
    (phi1, phi2)
}

/// Deterministic closed-loop rollout under tracking gains.
pub fn closed_loop_rollout(
    dyn_per_step: &[LinearDynamics],
    gains: &GainSchedule,
    s: &DVector<f64>,
    u: &DVector<f64>,
) -> DVector<f64> {
    let mut x = s.clone();
    for l in 0..gains.horizon {
        let a = &gains.ks[l] * (&x - u);
        x = dyn_per_step[l].step_mean(&x, &a);
    }
    x
}

/// Horizon-T analytic inverse via the sensitivity recursion:
/// u_hat = -phi1^+ (s_T - phi2). The reported loss is the squared error of
/// the actual closed-loop rollout under u_hat against s_T.
pub fn invert_lqr_horizon_analytic(
    dyn_per_step: &[LinearDynamics],
    gains: &GainSchedule,
    s: &DVector<f64>,
    s_terminal: &DVector<f64>,
) -> InversionResult {
    let (phi1, phi2) = closed_loop_sensitivity(dyn_per_step, gains, s);
    let rank_deficient = crate::control::numerical_rank(&phi1) < phi1.ncols();
    let u_hat = -(pseudo_inverse(&phi1) * (s_terminal - &phi2));
    let rolled = closed_loop_rollout(dyn_per_step, gains, s, &u_hat);
    let loss = (rolled - s_terminal).norm_squared();
    InversionResult::analytic(HighAction::goal(u_hat.iter().copied().collect()).unwrap(), loss, rank_deficient)
}

/// Horizon inverse with implicit regularization: Adam on the closed-form
/// rollout loss starting from u = 0, stopping early once per-step
/// improvement falls below `early_stop_tol`. Favors bounded-magnitude
/// solutions over exact fits when the dynamics are misspecified.
pub fn invert_regularized_analytic(
    dyn_per_step: &[LinearDynamics],
    gains: &GainSchedule,
    s: &DVector<f64>,
    s_terminal: &DVector<f64>,
    config: &InversionConfig,
) -> Result<InversionResult, InversionError> {
    let (phi1, phi2) = closed_loop_sensitivity(dyn_per_step, gains, s);
    let residual_at = |u: &DVector<f64>| &phi2 - &phi1 * u - s_terminal;
    let mut loss_fn = |u: &DVector<f64>| residual_at(u).norm_squared();
    // Analytic gradient of ||phi2 - phi1 u - s_T||^2.
    let mut grad_fn = |u: &DVector<f64>| -2.0 * phi1.transpose() * residual_at(u);
    let x0 = DVector::zeros(phi1.ncols());
    let outcome = adam_descent(&mut loss_fn, &mut grad_fn, x0, config)?;
    Ok(InversionResult {
        u_hat: HighAction::goal(outcome.x.iter().copied().collect()).unwrap(),
        loss: outcome.loss,
        iterations: outcome.iterations,
        converged: outcome.converged,
        rank_deficient: false,
        scale: None,
    })
}

/// Low-level policy as seen by the numeric inverses: maps (step-in-window,
/// state, high action) to a primitive action.
pub type PolicyFn<'a> = &'a dyn Fn(usize, &DVector<f64>, &DVector<f64>) -> DVector<f64>;

fn rollout_loss(
    low_level: PolicyFn<'_>,
    dyn_: &LinearDynamics,
    s0: &DVector<f64>,
    targets: &[DVector<f64>],
    u: &DVector<f64>,
    per_step: bool,
) -> f64 {
    let mut x = s0.clone();
    let mut loss = 0.0;
    for (i, target) in targets.iter().enumerate() {
        let a = low_level(i, &x, u);
        x = dyn_.step_mean(&x, &a);
        if per_step || i + 1 == targets.len() {
            loss += (&x - target).norm_squared();
        }
    }
    loss
}

/// Numeric inverse from state-only data: find u whose closed-loop model
/// rollout from `s0` best matches the observed window. `targets` holds the
/// observed states s_1..s_T; only the terminal one enters the loss unless
/// `per_step_state_loss` is set. u is optimized in [-1, 1] coordinates under
/// `scale` and initialized from the observed terminal state.
pub fn invert_numeric_state(
    low_level: PolicyFn<'_>,
    dyn_: &LinearDynamics,
    s0: &DVector<f64>,
    targets: &[DVector<f64>],
    scale: &UScale,
    config: &InversionConfig,
    rng: &mut SeededRng,
) -> Result<InversionResult, InversionError> {
    assert!(!targets.is_empty());
    let terminal = targets.last().expect("nonempty");
    if terminal.len() != scale.dim() {
        return Err(InversionError::Dims(format!(
            "goal dim {} does not match scale dim {}",
            terminal.len(),
            scale.dim()
        )));
    }
    let y0 = scale.to_scaled(terminal);
    let mut objective = |y: &DVector<f64>| {
        let u = scale.from_scaled(y);
        rollout_loss(low_level, dyn_, s0, targets, &u, config.per_step_state_loss)
            + config.regularizer_weight * y.norm_squared()
    };
    run_numeric(&mut objective, y0, scale, config, rng)
}

/// Numeric inverse from observed low-level actions: find u minimizing the
/// cumulative action-prediction error sum_i ||pi_l(s_i, u) - a_i||^2 plus the
/// ridge term. u starts from the zero vector.
pub fn invert_numeric_action(
    low_level: PolicyFn<'_>,
    s_seq: &[DVector<f64>],
    a_seq: &[DVector<f64>],
    scale: &UScale,
    config: &InversionConfig,
    rng: &mut SeededRng,
) -> Result<InversionResult, InversionError> {
    assert_eq!(s_seq.len(), a_seq.len(), "one action per state");
    assert!(!s_seq.is_empty());
    let y0 = scale.to_scaled(&DVector::zeros(scale.dim()));
    let mut objective = |y: &DVector<f64>| {
        let u = scale.from_scaled(y);
        let mut loss = 0.0;
        for (i, (s, a)) in s_seq.iter().zip(a_seq).enumerate() {
            loss += (low_level(i, s, &u) - a).norm_squared();
        }
        loss + config.regularizer_weight * y.norm_squared()
    };
    run_numeric(&mut objective, y0, scale, config, rng)
}

fn run_numeric(
    objective: &mut dyn FnMut(&DVector<f64>) -> f64,
    y0: DVector<f64>,
    scale: &UScale,
    config: &InversionConfig,
    rng: &mut SeededRng,
) -> Result<InversionResult, InversionError> {
    let outcome = match config.method {
        InversionMethod::Cem => {
            let std0 = DVector::from_element(y0.len(), 1.0);
            cem_minimize(objective, y0, std0, config, rng)?.into_gd_outcome()
        }
        _ => adam_descent_fd(objective, y0, config)?,
    };
    let u = scale.from_scaled(&outcome.x);
    Ok(InversionResult {
        u_hat: HighAction::goal(u.iter().copied().collect()).unwrap(),
        loss: outcome.loss,
        iterations: outcome.iterations,
        converged: outcome.converged,
        rank_deficient: false,
        scale: Some(scale.clone()),
    })
}

/// Central finite differences of a scalar objective, eps = 1e-6.
fn fd_gradient_at(f: &mut dyn FnMut(&DVector<f64>) -> f64, x: &DVector<f64>) -> DVector<f64> {
    const EPS: f64 = 1e-6;
    let mut g = DVector::zeros(x.len());
    for i in 0..x.len() {
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi[i] += EPS;
        lo[i] -= EPS;
        g[i] = (f(&hi) - f(&lo)) / (2.0 * EPS);
    }
    g
}

/// Adam with gradients taken by central finite differences of `f`.
pub fn adam_descent_fd(
    f: &mut dyn FnMut(&DVector<f64>) -> f64,
    x0: DVector<f64>,
    config: &InversionConfig,
) -> Result<GdOutcome, InversionError> {
    adam_descent_impl(f, None, x0, config)
}

#[derive(Debug, Clone)]
pub struct GdOutcome {
    pub x: DVector<f64>,
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Adam descent (beta1 = 0.9, beta2 = 0.999, eps = 1e-8) with two stopping
/// rules: the loss dropping to `early_stop_tol` (converged), or the per-step
/// improvement falling below `early_stop_tol` (best-so-far returned,
/// converged only if that best also clears the tolerance).
pub fn adam_descent(
    f: &mut dyn FnMut(&DVector<f64>) -> f64,
    grad: &mut dyn FnMut(&DVector<f64>) -> DVector<f64>,
    x0: DVector<f64>,
    config: &InversionConfig,
) -> Result<GdOutcome, InversionError> {
    adam_descent_impl(f, Some(grad), x0, config)
}

fn adam_descent_impl(
    f: &mut dyn FnMut(&DVector<f64>) -> f64,
    mut grad: Option<&mut dyn FnMut(&DVector<f64>) -> DVector<f64>>,
    x0: DVector<f64>,
    config: &InversionConfig,
) -> Result<GdOutcome, InversionError> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    let mut x = x0;
    let mut m = DVector::zeros(x.len());
    let mut v = DVector::zeros(x.len());
    let mut loss = f(&x);
    if !loss.is_finite() {
        return Err(InversionError::NonFiniteLoss { iteration: 0 });
    }
    let mut best_x = x.clone();
    let mut best_loss = loss;
    let mut iterations = 0;

    for step in 1..=config.max_steps {
        if best_loss <= config.early_stop_tol {
            break;
        }
        let g = match grad.as_mut() {
            Some(grad) => grad(&x),
            None => fd_gradient_at(f, &x),
        };
        if g.iter().any(|v| !v.is_finite()) {
            return Err(InversionError::NonFiniteGradient { iteration: step });
        }
        m = m * BETA1 + &g * (1.0 - BETA1);
        v = v.component_mul(&DVector::from_element(x.len(), BETA2))
            + g.component_mul(&g) * (1.0 - BETA2);
        let m_hat = &m / (1.0 - BETA1.powi(step as i32));
        let v_hat = &v / (1.0 - BETA2.powi(step as i32));
        for i in 0..x.len() {
            x[i] -= config.lr * m_hat[i] / (v_hat[i].sqrt() + EPS);
        }
        let new_loss = f(&x);
        if !new_loss.is_finite() {
            return Err(InversionError::NonFiniteLoss { iteration: step });
        }
        iterations = step;
        let improvement = loss - new_loss;
        loss = new_loss;
        if new_loss < best_loss {
            best_loss = new_loss;
            best_x = x.clone();
        }
        if improvement.abs() < config.early_stop_tol {
            break;
        }
    }

    Ok(GdOutcome { x: best_x, loss: best_loss, iterations, converged: best_loss <= config.early_stop_tol })
}

#[derive(Debug, Clone)]
pub struct CemOutcome {
    pub x: DVector<f64>,
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Running best loss after each iteration; non-increasing.
    pub best_per_iter: Vec<f64>,
}

impl CemOutcome {
    fn into_gd_outcome(self) -> GdOutcome {
        GdOutcome { x: self.x, loss: self.loss, iterations: self.iterations, converged: self.converged }
    }
}

/// Cross-entropy minimization with a diagonal Gaussian sampling distribution.
/// Each iteration draws `cem_samples` points, keeps the best
/// `cem_elite_frac` (plus the best point seen so far), and refits the mean
/// and per-dimension variance from the elites with a variance floor of 1e-6.
/// Stops after `cem_patience` iterations without improvement of the best loss.
pub fn cem_minimize(
    f: &mut dyn FnMut(&DVector<f64>) -> f64,
    mean0: DVector<f64>,
    std0: DVector<f64>,
    config: &InversionConfig,
    rng: &mut SeededRng,
) -> Result<CemOutcome, InversionError> {
    const VAR_FLOOR: f64 = 1e-6;
    let dim = mean0.len();
    let n_elite = ((config.cem_samples as f64 * config.cem_elite_frac).ceil() as usize).max(1);

    let mut mean = mean0;
    let mut var = std0.map(|s| (s * s).max(VAR_FLOOR));
    let mut best_x = mean.clone();
    let mut best_loss = f(&best_x);
    if !best_loss.is_finite() {
        return Err(InversionError::NonFiniteLoss { iteration: 0 });
    }
    let mut best_per_iter = Vec::new();
    let mut prev_elite_mean = f64::INFINITY;
    let mut stall = 0;
    let mut iterations = 0;

    for iter in 1..=config.max_steps {
        let mut scored: Vec<(f64, DVector<f64>)> = Vec::with_capacity(config.cem_samples);
        for _ in 0..config.cem_samples {
            let x = DVector::from_fn(dim, |i, _| mean[i] + var[i].sqrt() * rng.normal());
            let loss = f(&x);
            if !loss.is_finite() {
                return Err(InversionError::NonFiniteLoss { iteration: iter });
            }
            scored.push((loss, x));
        }
        // Retaining the incumbent keeps the elite set from drifting away
        // from the best point found so far.
        scored.push((best_loss, best_x.clone()));
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite losses"));
        let elites = &scored[..n_elite.min(scored.len())];

        if elites[0].0 < best_loss {
            best_loss = elites[0].0;
            best_x = elites[0].1.clone();
        }
        // The per-iteration loss is the elite average; it falls steadily
        // while the sampling distribution still has room to tighten.
        let elite_mean = elites.iter().map(|(l, _)| *l).sum::<f64>() / elites.len() as f64;
        if elite_mean < prev_elite_mean {
            stall = 0;
        } else {
            stall += 1;
        }
        prev_elite_mean = elite_mean;

        for i in 0..dim {
            let m: f64 = elites.iter().map(|(_, x)| x[i]).sum::<f64>() / elites.len() as f64;
            let v: f64 =
                elites.iter().map(|(_, x)| (x[i] - m).powi(2)).sum::<f64>() / elites.len() as f64;
            mean[i] = m;
            var[i] = v.max(VAR_FLOOR);
        }

        iterations = iter;
        best_per_iter.push(best_loss);
        if best_loss <= config.early_stop_tol || stall >= config.cem_patience {
            break;
        }
    }

    Ok(CemOutcome {
        x: best_x,
        loss: best_loss,
        iterations,
        converged: best_loss <= config.early_stop_tol,
        best_per_iter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{
        double_integrator, lqg_affine_gains, riccati_gains, CostMatrices, LinearDynamics,
    };
    use crate::types::StateVec;

    fn vecd(values: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(values)
    }

    fn c1_setup(q11: f64, r: f64, horizon: usize) -> (LinearDynamics, GainSchedule) {
        let dyn_ = double_integrator(0.5);
        let cost = CostMatrices::tracking(
            DMatrix::from_partial_diagonal(2, 2, &[q11, 1.0]),
            DMatrix::from_element(1, 1, r),
        );
        let gains = riccati_gains(&dyn_, &cost, horizon).unwrap();
        (dyn_, gains)
    }

    #[test]
    fn lqg_identity_recovers_next_state() {
        let n = 2;
        let dyn_ = LinearDynamics::new(DMatrix::identity(n, n), DMatrix::identity(n, n), DVector::zeros(n))
            .unwrap();
        let cost = CostMatrices::tracking(DMatrix::zeros(n, n), DMatrix::zeros(n, n)).with_goal_weight(
            DMatrix::zeros(n, n),
            DVector::zeros(n),
            DMatrix::identity(n, n),
        );
        let s = vecd(&[1.0, -1.0]);
        let gains = lqg_affine_gains(&dyn_, &cost, &StateVec::from_dvector(&s).unwrap());
        let s_next = vecd(&[0.25, 0.75]);
        let result = invert_lqg_analytic(&dyn_, &gains, &s, &s_next);
        assert!((result.u_hat.as_dvector() - &s_next).norm() < 1e-12);
        assert!(result.loss < 1e-24);
    }

    #[test]
    fn lqg_forward_simulation_roundtrip() {
        let mut rng = SeededRng::new(101);
        for _ in 0..50 {
            let n = 2 + rng.below(2);
            let m = n; // full column rank BK needs m >= n here
            let a = DMatrix::from_fn(n, n, |_, _| rng.normal());
            let b = DMatrix::from_fn(n, m, |_, _| rng.normal());
            let c = DVector::from_fn(n, |_, _| rng.normal());
            let gm = DMatrix::from_fn(m, m, |_, _| rng.normal());
            let m_mat = &gm * gm.transpose() + DMatrix::identity(m, m);
            let gv = DMatrix::from_fn(n, n, |_, _| rng.normal());
            let v = &gv * gv.transpose() + DMatrix::identity(n, n);
            let dyn_ = LinearDynamics::new(a, b, c).unwrap();
            let cost = CostMatrices::tracking(DMatrix::zeros(n, n), DMatrix::zeros(m, m))
                .with_goal_weight(m_mat, DVector::from_fn(m, |_, _| rng.normal()), v);
            let s = DVector::from_fn(n, |_, _| rng.normal());
            let gains = lqg_affine_gains(&dyn_, &cost, &StateVec::from_dvector(&s).unwrap());
            let u0 = DVector::from_fn(n, |_, _| rng.normal());
            let a_star = &gains.k_mat * &u0 + &gains.k_vec;
            let s_next = dyn_.step_mean(&s, &a_star);

            let result = invert_lqg_analytic(&dyn_, &gains, &s, &s_next);
            assert!(result.loss < 1e-12, "loss {}", result.loss);
            let bk = &dyn_.b * &gains.k_mat;
            if crate::control::numerical_rank(&bk) == n {
                assert!(
                    (result.u_hat.as_dvector() - &u0).norm() < 1e-6,
                    "u mismatch {}",
                    (result.u_hat.as_dvector() - &u0).norm()
                );
            }
        }
    }

    #[test]
    fn lqg_zero_gain_yields_minimum_norm_zero() {
        let dyn_ = double_integrator(0.5);
        let gains = AffineGains {
            k_mat: DMatrix::zeros(1, 2),
            k_vec: DVector::from_element(1, 0.3),
            rank_deficient: true,
        };
        let s = vecd(&[1.0, 1.0]);
        let s_next = vecd(&[0.0, 0.0]);
        let result = invert_lqg_analytic(&dyn_, &gains, &s, &s_next);
        assert!(result.u_hat.as_dvector().norm() == 0.0);
        assert!(result.rank_deficient);
        let expected =
            (dyn_.step_mean(&s, &DVector::from_element(1, 0.3)) - &s_next).norm_squared();
        assert!((result.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn horizon_one_collapses_to_one_step_form() {
        // A = I, B = I, K = -I: u_hat = s_T.
        let n = 2;
        let dyn_ = LinearDynamics::new(DMatrix::identity(n, n), DMatrix::identity(n, n), DVector::zeros(n))
            .unwrap();
        let gains = GainSchedule {
            horizon: 1,
            ks: vec![-DMatrix::identity(n, n)],
            ps: vec![DMatrix::zeros(n, n), DMatrix::zeros(n, n)],
        };
        let s = vecd(&[3.0, -2.0]);
        let s_t = vecd(&[0.5, 0.25]);
        let result = invert_lqr_horizon_analytic(&[dyn_], &gains, &s, &s_t);
        assert!((result.u_hat.as_dvector() - &s_t).norm() < 1e-12);
        assert!(result.loss < 1e-24);
    }

    #[test]
    fn horizon_inverse_exactly_reaches_observed_state() {
        let mut rng = SeededRng::new(7);
        for &q11 in &[3.5, 4.0, 4.5, 5.0, 5.5] {
            for &r in &[0.0, 0.2] {
                let (dyn_, gains) = c1_setup(q11, r, 5);
                let dyns = vec![dyn_.clone(); 5];
                for _ in 0..20 {
                    let s = DVector::from_fn(2, |_, _| rng.uniform_in(-5.0, 5.0));
                    let s_t = DVector::from_fn(2, |_, _| rng.uniform_in(-5.0, 5.0));
                    let result = invert_lqr_horizon_analytic(&dyns, &gains, &s, &s_t);
                    let rolled =
                        closed_loop_rollout(&dyns, &gains, &s, &result.u_hat.as_dvector());
                    assert!((rolled - &s_t).norm() < 1e-8, "q11={q11} r={r}");
                }
            }
        }
    }

    #[test]
    fn horizon_inverse_with_drift_terms() {
        // Nonzero c must be folded into the drift so self-consistent data
        // still inverts exactly.
        let mut dyn_ = double_integrator(0.5);
        dyn_.c = vecd(&[0.05, -0.1]);
        let cost = CostMatrices::tracking(
            DMatrix::from_partial_diagonal(2, 2, &[4.0, 1.0]),
            DMatrix::from_element(1, 1, 0.2),
        );
        let gains = riccati_gains(&dyn_, &cost, 5).unwrap();
        let dyns = vec![dyn_.clone(); 5];
        let s = vecd(&[1.0, 0.5]);
        let u0 = vecd(&[-1.0, 0.25]);
        let s_t = closed_loop_rollout(&dyns, &gains, &s, &u0);
        let result = invert_lqr_horizon_analytic(&dyns, &gains, &s, &s_t);
        assert!(result.loss < 1e-16);
        assert!((result.u_hat.as_dvector() - &u0).norm() < 1e-6);
    }

    #[test]
    fn zero_controllability_gives_zero_action() {
        let n = 2;
        let dyn_ = LinearDynamics::new(
            DMatrix::from_row_slice(n, n, &[1.0, 0.5, 0.0, 1.0]),
            DMatrix::zeros(n, 1),
            DVector::zeros(n),
        )
        .unwrap();
        let gains = GainSchedule {
            horizon: 3,
            ks: vec![DMatrix::zeros(1, n); 3],
            ps: vec![DMatrix::zeros(n, n); 4],
        };
        let dyns = vec![dyn_.clone(); 3];
        let s = vecd(&[1.0, 1.0]);
        let s_t = vecd(&[0.0, 0.0]);
        let result = invert_lqr_horizon_analytic(&dyns, &gains, &s, &s_t);
        assert!(result.u_hat.as_dvector().norm() == 0.0);
        assert!(result.rank_deficient);
        let autonomous = closed_loop_rollout(&dyns, &gains, &s, &vecd(&[0.0, 0.0]));
        assert!((result.loss - (autonomous - &s_t).norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn regularized_matches_analytic_on_exact_system() {
        let (dyn_, gains) = c1_setup(4.0, 0.2, 5);
        let dyns = vec![dyn_.clone(); 5];
        let s = vecd(&[2.0, -1.0]);
        let u0 = vecd(&[0.5, 0.3]);
        let s_t = closed_loop_rollout(&dyns, &gains, &s, &u0);
        let config = InversionConfig {
            method: InversionMethod::AnalyticRegularized,
            early_stop_tol: 1e-12,
            ..Default::default()
        };
        let exact = invert_lqr_horizon_analytic(&dyns, &gains, &s, &s_t);
        let reg = invert_regularized_analytic(&dyns, &gains, &s, &s_t, &config).unwrap();
        assert!(
            (reg.u_hat.as_dvector() - exact.u_hat.as_dvector()).norm() < 1e-4,
            "distance {}",
            (reg.u_hat.as_dvector() - exact.u_hat.as_dvector()).norm()
        );
    }

    #[test]
    fn regularized_with_zero_steps_returns_origin() {
        let (dyn_, gains) = c1_setup(4.0, 0.2, 5);
        let dyns = vec![dyn_.clone(); 5];
        let config = InversionConfig { max_steps: 0, ..Default::default() };
        let result =
            invert_regularized_analytic(&dyns, &gains, &vecd(&[1.0, 1.0]), &vecd(&[0.0, 0.0]), &config)
                .unwrap();
        assert!(result.u_hat.as_dvector().norm() == 0.0);
        assert!(!result.converged);
    }

    #[test]
    fn regularized_shrinks_under_misspecified_dynamics() {
        let mut rng = SeededRng::new(13);
        let (true_dyn, _) = c1_setup(4.0, 0.2, 5);
        // Perturb A by 10% for the model used in inversion.
        let mut wrong = true_dyn.clone();
        wrong.a *= 1.1;
        let cost = CostMatrices::tracking(
            DMatrix::from_partial_diagonal(2, 2, &[4.0, 1.0]),
            DMatrix::from_element(1, 1, 0.2),
        );
        let wrong_gains = riccati_gains(&wrong, &cost, 5).unwrap();
        let wrong_dyns = vec![wrong.clone(); 5];
        let true_gains = riccati_gains(&true_dyn, &cost, 5).unwrap();
        let true_dyns = vec![true_dyn.clone(); 5];

        let config = InversionConfig::default();
        let mut shrunk = 0;
        for _ in 0..100 {
            let s = DVector::from_fn(2, |_, _| rng.uniform_in(-3.0, 3.0));
            let u0 = DVector::from_fn(2, |_, _| rng.uniform_in(-2.0, 2.0));
            let s_t = closed_loop_rollout(&true_dyns, &true_gains, &s, &u0);
            let exact = invert_lqr_horizon_analytic(&wrong_dyns, &wrong_gains, &s, &s_t);
            let reg =
                invert_regularized_analytic(&wrong_dyns, &wrong_gains, &s, &s_t, &config).unwrap();
            if reg.u_hat.as_dvector().norm() <= exact.u_hat.as_dvector().norm() + 1e-12 {
                shrunk += 1;
            }
        }
        assert!(shrunk >= 90, "only {shrunk}/100 shrank");
    }

    fn lqr_policy<'a>(gains: &'a GainSchedule) -> impl Fn(usize, &DVector<f64>, &DVector<f64>) -> DVector<f64> + 'a {
        move |t, x, u| &gains.ks[t] * (x - u)
    }

    #[test]
    fn numeric_state_gd_recovers_known_action() {
        let (dyn_, gains) = c1_setup(4.0, 0.2, 5);
        let dyns = vec![dyn_.clone(); 5];
        let mut rng = SeededRng::new(3);
        let s = vecd(&[1.0, -0.5]);
        let u0 = vecd(&[1.5, 0.0]);
        let mut x = s.clone();
        let mut targets = Vec::new();
        for l in 0..5 {
            let a = &gains.ks[l] * (&x - &u0);
            x = dyn_.step_mean(&x, &a);
            targets.push(x.clone());
        }
        let scale = UScale::symmetric(2, 3.0);
        let policy = lqr_policy(&gains);
        let config = InversionConfig {
            method: InversionMethod::GradientDescent,
            early_stop_tol: 1e-9,
            ..Default::default()
        };
        let result =
            invert_numeric_state(&policy, &dyn_, &s, &targets, &scale, &config, &mut rng).unwrap();
        assert!(result.loss < 1e-5, "loss {}", result.loss);
        assert!(
            (result.u_hat.as_dvector() - &u0).norm() < 1e-3,
            "u error {}",
            (result.u_hat.as_dvector() - &u0).norm()
        );

        // CEM agrees with gradient descent.
        let cem_config = InversionConfig {
            method: InversionMethod::Cem,
            early_stop_tol: 1e-9,
            ..Default::default()
        };
        let mut rng2 = SeededRng::new(4);
        let cem =
            invert_numeric_state(&policy, &dyn_, &s, &targets, &scale, &cem_config, &mut rng2)
                .unwrap();
        assert!(
            (cem.u_hat.as_dvector() - result.u_hat.as_dvector()).norm() < 1e-2,
            "cem/gd gap {}",
            (cem.u_hat.as_dvector() - result.u_hat.as_dvector()).norm()
        );
    }

    #[test]
    fn cem_minimizes_scalar_quadratic() {
        let mut f = |x: &DVector<f64>| (x[0] - 3.0) * (x[0] - 3.0);
        let config = InversionConfig { method: InversionMethod::Cem, early_stop_tol: 1e-9, ..Default::default() };
        let mut rng = SeededRng::new(21);
        let out = cem_minimize(&mut f, vecd(&[0.0]), vecd(&[1.0]), &config, &mut rng).unwrap();
        assert!((out.x[0] - 3.0).abs() < 1e-2, "found {}", out.x[0]);
        // Running best is non-increasing.
        for pair in out.best_per_iter.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-15);
        }
    }

    #[test]
    fn per_step_loss_variant_also_recovers_action() {
        let (dyn_, gains) = c1_setup(4.0, 0.2, 5);
        let mut rng = SeededRng::new(77);
        let s = vecd(&[0.5, -1.0]);
        let u0 = vecd(&[-0.8, 0.2]);
        let mut x = s.clone();
        let targets: Vec<DVector<f64>> = (0..5)
            .map(|l| {
                let a = &gains.ks[l] * (&x - &u0);
                x = dyn_.step_mean(&x, &a);
                x.clone()
            })
            .collect();
        let scale = UScale::symmetric(2, 3.0);
        let policy = lqr_policy(&gains);
        let config = InversionConfig {
            method: InversionMethod::GradientDescent,
            early_stop_tol: 1e-10,
            per_step_state_loss: true,
            ..Default::default()
        };
        let result =
            invert_numeric_state(&policy, &dyn_, &s, &targets, &scale, &config, &mut rng).unwrap();
        assert!(result.loss < 1e-6, "loss {}", result.loss);
        assert!((result.u_hat.as_dvector() - &u0).norm() < 1e-3);
    }

    #[test]
    fn numeric_action_recovers_generating_action() {
        let (_, gains) = c1_setup(4.0, 0.2, 5);
        let mut rng = SeededRng::new(15);
        let u0 = vecd(&[0.8, -0.4]);
        let states: Vec<DVector<f64>> =
            (0..5).map(|_| DVector::from_fn(2, |_, _| rng.uniform_in(-2.0, 2.0))).collect();
        let actions: Vec<DVector<f64>> = states
            .iter()
            .enumerate()
            .map(|(t, s)| &gains.ks[t] * (s - &u0))
            .collect();
        let scale = UScale::symmetric(2, 3.0);
        let policy = lqr_policy(&gains);
        let config = InversionConfig {
            method: InversionMethod::GradientDescent,
            early_stop_tol: 1e-10,
            ..Default::default()
        };
        let result =
            invert_numeric_action(&policy, &states, &actions, &scale, &config, &mut rng).unwrap();
        assert!(result.loss < 1e-6, "loss {}", result.loss);
        assert!((result.u_hat.as_dvector() - &u0).norm() < 1e-3);
    }

    #[test]
    fn numeric_action_single_step_matches_closed_form() {
        // a = K(s - u) with invertible K: u = s - K^{-1} a.
        let k = DMatrix::from_row_slice(2, 2, &[-1.0, 0.2, 0.1, -0.8]);
        let gains = GainSchedule {
            horizon: 1,
            ks: vec![k.clone()],
            ps: vec![DMatrix::zeros(2, 2); 2],
        };
        let s = vecd(&[1.0, 2.0]);
        let u0 = vecd(&[0.3, -0.6]);
        let a = &k * (&s - &u0);
        let expected = &s - k.try_inverse().unwrap() * &a;
        assert!((&expected - &u0).norm() < 1e-12);

        let scale = UScale::symmetric(2, 3.0);
        let policy = lqr_policy(&gains);
        let config = InversionConfig {
            method: InversionMethod::GradientDescent,
            early_stop_tol: 1e-12,
            ..Default::default()
        };
        let mut rng = SeededRng::new(1);
        let result =
            invert_numeric_action(&policy, &[s.clone()], &[a.clone()], &scale, &config, &mut rng)
                .unwrap();
        assert!((result.u_hat.as_dvector() - &u0).norm() < 1e-4);
    }

    #[test]
    fn ridge_weight_shrinks_recovered_action() {
        let (_, gains) = c1_setup(4.0, 0.2, 5);
        let mut rng = SeededRng::new(29);
        let u0 = vecd(&[1.2, -0.9]);
        let states: Vec<DVector<f64>> =
            (0..5).map(|_| DVector::from_fn(2, |_, _| rng.uniform_in(-2.0, 2.0))).collect();
        let actions: Vec<DVector<f64>> =
            states.iter().enumerate().map(|(t, s)| &gains.ks[t] * (s - &u0)).collect();
        let scale = UScale::symmetric(2, 3.0);
        let policy = lqr_policy(&gains);
        let mut norms = Vec::new();
        for &w in &[0.0, 1.0, 100.0] {
            let config = InversionConfig {
                method: InversionMethod::GradientDescent,
                early_stop_tol: 1e-12,
                regularizer_weight: w,
                ..Default::default()
            };
            let mut r = SeededRng::new(2);
            let result =
                invert_numeric_action(&policy, &states, &actions, &scale, &config, &mut r).unwrap();
            norms.push(result.u_hat.as_dvector().norm());
        }
        assert!(norms[0] > norms[1] && norms[1] > norms[2], "norms {norms:?}");
        assert!(norms[2] < 0.2, "heavy ridge should push u toward 0, got {}", norms[2]);
    }

    #[test]
    fn numeric_inversion_is_deterministic() {
        let (dyn_, gains) = c1_setup(4.5, 0.2, 5);
        let s = vecd(&[0.4, 0.1]);
        let targets: Vec<DVector<f64>> = vec![vecd(&[1.0, 0.2]); 5];
        let scale = UScale::symmetric(2, 3.0);
        let policy = lqr_policy(&gains);
        let config = InversionConfig { method: InversionMethod::Cem, ..Default::default() };
        let run = |seed| {
            let mut rng = SeededRng::new(seed);
            invert_numeric_state(&policy, &dyn_, &s, &targets, &scale, &config, &mut rng).unwrap()
        };
        let a = run(99);
        let b = run(99);
        assert_eq!(a.u_hat.values(), b.u_hat.values());
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn gd_never_returns_worse_than_initialization() {
        let mut rng = SeededRng::new(55);
        for _ in 0..20 {
            let (dyn_, gains) = c1_setup(4.0 + rng.uniform(), 0.2, 5);
            let s = DVector::from_fn(2, |_, _| rng.uniform_in(-2.0, 2.0));
            let targets: Vec<DVector<f64>> =
                (0..5).map(|_| DVector::from_fn(2, |_, _| rng.uniform_in(-2.0, 2.0))).collect();
            let scale = UScale::symmetric(2, 3.0);
            let policy = lqr_policy(&gains);
            let init_loss = {
                let u = targets.last().unwrap().clone();
                let mut x = s.clone();
                for l in 0..5 {
                    let a = &gains.ks[l] * (&x - &u);
                    x = dyn_.step_mean(&x, &a);
                }
                (x - targets.last().unwrap()).norm_squared()
            };
            let config = InversionConfig {
                method: InversionMethod::GradientDescent,
                max_steps: 50,
                ..Default::default()
            };
            let result =
                invert_numeric_state(&policy, &dyn_, &s, &targets, &scale, &config, &mut rng)
                    .unwrap();
            assert!(result.loss <= init_loss + 1e-12);
        }
    }

    #[test]
    fn numeric_and_analytic_losses_agree_on_linear_instances() {
        let mut rng = SeededRng::new(71);
        let mut tested = 0;
        while tested < 50 {
            let q11 = rng.uniform_in(3.0, 6.0);
            let r = rng.uniform_in(0.05, 0.5);
            let (dyn_, gains) = c1_setup(q11, r, 5);
            let dyns = vec![dyn_.clone(); 5];
            let s = DVector::from_fn(2, |_, _| rng.uniform_in(-2.0, 2.0));
            let u0 = DVector::from_fn(2, |_, _| rng.uniform_in(-1.5, 1.5));
            let s_t = closed_loop_rollout(&dyns, &gains, &s, &u0);
            let (phi1, _) = closed_loop_sensitivity(&dyns, &gains, &s);
            let svd = phi1.svd(false, false);
            if svd.singular_values.min() < 0.05 {
                continue; // keep only well-conditioned instances
            }
            let analytic = invert_lqr_horizon_analytic(&dyns, &gains, &s, &s_t);
            let targets: Vec<DVector<f64>> = {
                let mut x = s.clone();
                (0..5)
                    .map(|l| {
                        let a = &gains.ks[l] * (&x - &u0);
                        x = dyn_.step_mean(&x, &a);
                        x.clone()
                    })
                    .collect()
            };
            let scale = UScale::symmetric(2, 3.0);
            let policy = lqr_policy(&gains);
            let config = InversionConfig {
                method: InversionMethod::GradientDescent,
                early_stop_tol: 1e-10,
                ..Default::default()
            };
            let numeric =
                invert_numeric_state(&policy, &dyn_, &s, &targets, &scale, &config, &mut rng)
                    .unwrap();
            assert!(
                (numeric.loss - analytic.loss).abs() < 1e-4,
                "loss gap {}",
                (numeric.loss - analytic.loss).abs()
            );
            tested += 1;
        }
    }
}
