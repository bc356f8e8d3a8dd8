//! Linear-algebraic control: finite-horizon Riccati recursion, LQR tracking
//! and affine goal-seeking policies, finite-difference linearization, and
//! least-squares dynamics fitting.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::types::{HighAction, HighActionKind, StateVec, Transition};

/// Relative singular-value cutoff for pseudo-inverses.
pub const PINV_RCOND: f64 = 1e-10;
/// Condition-number threshold beyond which the Riccati inner matrix is
/// treated as singular.
pub const RICCATI_COND_LIMIT: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("R + B'PB numerically singular at step {step} (condition {cond:.3e})")]
    SingularInnerMatrix { step: usize, cond: f64 },
    #[error("step index {t} outside horizon {horizon}")]
    IndexOutOfHorizon { t: usize, horizon: usize },
    #[error("non-finite Jacobian entry while linearizing")]
    NonFiniteJacobian,
    #[error("dimension mismatch: {0}")]
    Dims(String),
    #[error("need at least {needed} transitions with actions, found {found}")]
    InsufficientData { needed: usize, found: usize },
    #[error("transition {index} has no action")]
    MissingAction { index: usize },
}

/// Affine-Gaussian one-step model s' ~ N(As + Ba + c, Sigma).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    /// Process-noise covariance; `None` means zero.
    pub sigma: Option<DMatrix<f64>>,
}

impl LinearDynamics {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DVector<f64>) -> Result<Self, ControlError> {
        if !a.is_square() {
            return Err(ControlError::Dims(format!("A must be square, got {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != a.nrows() {
            return Err(ControlError::Dims(format!(
                "B has {} rows but A is {}x{}",
                b.nrows(),
                a.nrows(),
                a.ncols()
            )));
        }
        if c.len() != a.nrows() {
            return Err(ControlError::Dims(format!("c has length {} but n = {}", c.len(), a.nrows())));
        }
        Ok(Self { a, b, c, sigma: None })
    }

    pub fn with_noise(mut self, sigma: DMatrix<f64>) -> Self {
        self.sigma = Some(sigma);
        self
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Deterministic part of one step.
    pub fn step_mean(&self, s: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
        &self.a * s + &self.b * a + &self.c
    }
}

/// Quadratic cost terms consumed by the Riccati recursion (Q, R) and the
/// affine goal-seeking policy (M, m, V).
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrices {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub m_mat: DMatrix<f64>,
    pub m_vec: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl CostMatrices {
    /// Tracking costs only; M, m, V default to zero.
    pub fn tracking(q: DMatrix<f64>, r: DMatrix<f64>) -> Self {
        let n = q.nrows();
        let m = r.nrows();
        Self {
            q,
            r,
            m_mat: DMatrix::zeros(m, m),
            m_vec: DVector::zeros(m),
            v: DMatrix::zeros(n, n),
        }
    }

    pub fn with_goal_weight(mut self, m_mat: DMatrix<f64>, m_vec: DVector<f64>, v: DMatrix<f64>) -> Self {
        self.m_mat = m_mat;
        self.m_vec = m_vec;
        self.v = v;
        self
    }
}

/// Time-varying feedback gains K_t and value matrices P_t from the backward
/// Riccati recursion. `ps` has horizon + 1 entries with `ps[T] = Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    pub horizon: usize,
    pub ks: Vec<DMatrix<f64>>,
    pub ps: Vec<DMatrix<f64>>,
}

impl GainSchedule {
    pub fn gain(&self, t: usize) -> Result<&DMatrix<f64>, ControlError> {
        self.ks.get(t).ok_or(ControlError::IndexOutOfHorizon { t, horizon: self.horizon })
    }
}

/// Affine policy parameters for a* = K u + k.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGains {
    pub k_mat: DMatrix<f64>,
    pub k_vec: DVector<f64>,
    /// Set when M + B'VB was rank-deficient and a pseudo-inverse was used.
    pub rank_deficient: bool,
}

/// Moore-Penrose pseudo-inverse via SVD, truncating singular values below
/// `PINV_RCOND * sigma_max`.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.iter().all(|&v| v == 0.0) {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    let svd = m.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    svd.pseudo_inverse(PINV_RCOND * sigma_max)
        .expect("pseudo_inverse only fails for negative epsilon")
}

/// Rank of a matrix under the same truncation rule as [`pseudo_inverse`].
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.iter().all(|&v| v == 0.0) {
        return 0;
    }
    let svd = m.clone().svd(false, false);
    let sigma_max = svd.singular_values.max();
    svd.singular_values.iter().filter(|&&s| s > PINV_RCOND * sigma_max).count()
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let svd = m.clone().svd(false, false);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solve (R + B'PB) X = Y by Cholesky, falling back to the pseudo-inverse
/// when the factorization fails. R = 0 is fine as long as B'PB is positive.
fn solve_inner(inner: &DMatrix<f64>, rhs: &DMatrix<f64>, step: usize) -> Result<DMatrix<f64>, ControlError> {
    let cond = condition_number(inner);
    if cond > RICCATI_COND_LIMIT {
        return Err(ControlError::SingularInnerMatrix { step, cond });
    }
    match Cholesky::new(inner.clone()) {
        Some(chol) => Ok(chol.solve(rhs)),
        None => Ok(pseudo_inverse(inner) * rhs),
    }
}

/// Backward Riccati recursion over a finite horizon:
/// K_t = -(R + B'P_{t+1}B)^{-1} (B'P_{t+1}A), P_t = Q + A'P_{t+1}(A + B K_t),
/// with P_T = Q. The resulting control law is a_t = K_t (s_t - u).
pub fn riccati_gains(
    dyn_: &LinearDynamics,
    cost: &CostMatrices,
    horizon: usize,
) -> Result<GainSchedule, ControlError> {
    assert!(horizon >= 1, "horizon must be at least 1");
    let n = dyn_.state_dim();
    if cost.q.nrows() != n || cost.r.nrows() != dyn_.action_dim() {
        return Err(ControlError::Dims("Q/R dimensions do not match dynamics".into()));
    }
    let mut ps = vec![DMatrix::zeros(n, n); horizon + 1];
    let mut ks = vec![DMatrix::zeros(dyn_.action_dim(), n); horizon];
    ps[horizon] = cost.q.clone();
    for t in (0..horizon).rev() {
        let p_next = ps[t + 1].clone();
        let inner = &cost.r + dyn_.b.transpose() * &p_next * &dyn_.b;
        let rhs = dyn_.b.transpose() * &p_next * &dyn_.a;
        let k = -solve_inner(&inner, &rhs, t)?;
        let mut p = &cost.q + dyn_.a.transpose() * &p_next * (&dyn_.a + &dyn_.b * &k);
        // Symmetrize to stop round-off drift from accumulating over the sweep.
        p = (&p + p.transpose()) * 0.5;
        ks[t] = k;
        ps[t] = p;
    }
    Ok(GainSchedule { horizon, ks, ps })
}

/// Tracking law a = K_t (s - u) for a goal-state high action.
pub fn lqr_tracking_action(
    gains: &GainSchedule,
    t: usize,
    s: &StateVec,
    u: &HighAction,
) -> Result<DVector<f64>, ControlError> {
    debug_assert_eq!(u.kind(), HighActionKind::GoalState);
    let k = gains.gain(t)?;
    if k.ncols() != s.dim() || s.dim() != u.dim() {
        return Err(ControlError::Dims(format!(
            "gain is {}x{} but state dim {} and goal dim {}",
            k.nrows(),
            k.ncols(),
            s.dim(),
            u.dim()
        )));
    }
    Ok(k * (s.as_dvector() - u.as_dvector()))
}

/// Affine goal-seeking policy from the one-step quadratic objective:
/// K = (M + B'VB)^+ B'V and k = (M + B'VB)^+ (M m - B'V(As + c)), so that
/// a* = K u + k.
pub fn lqg_affine_gains(dyn_: &LinearDynamics, cost: &CostMatrices, s: &StateVec) -> AffineGains {
    let inner = &cost.m_mat + dyn_.b.transpose() * &cost.v * &dyn_.b;
    let rank_deficient = numerical_rank(&inner) < inner.nrows();
    if rank_deficient {
        log::warn!("M + B'VB is rank-deficient; using minimum-norm gains");
    }
    let inner_pinv = pseudo_inverse(&inner);
    let btv = dyn_.b.transpose() * &cost.v;
    let k_mat = &inner_pinv * &btv;
    let drift = &dyn_.a * s.as_dvector() + &dyn_.c;
    let k_vec = &inner_pinv * (&cost.m_mat * &cost.m_vec - &btv * drift);
    AffineGains { k_mat, k_vec, rank_deficient }
}

/// Central-difference linearization of a deterministic step function around
/// (s0, a0): A[:,i] = (f(s0 + eps e_i, a0) - f(s0 - eps e_i, a0)) / (2 eps),
/// B likewise in a, and c = f(s0, a0) - A s0 - B a0.
pub fn linearize_fd(
    step_fn: &dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
    s0: &DVector<f64>,
    a0: &DVector<f64>,
    eps: f64,
) -> Result<LinearDynamics, ControlError> {
    assert!(eps > 0.0);
    let n = s0.len();
    let m = a0.len();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, m);
    for i in 0..n {
        let mut hi = s0.clone();
        let mut lo = s0.clone();
        hi[i] += eps;
        lo[i] -= eps;
        let col = (step_fn(&hi, a0) - step_fn(&lo, a0)) / (2.0 * eps);
        a.set_column(i, &col);
    }
    for j in 0..m {
        let mut hi = a0.clone();
        let mut lo = a0.clone();
        hi[j] += eps;
        lo[j] -= eps;
        let col = (step_fn(s0, &hi) - step_fn(s0, &lo)) / (2.0 * eps);
        b.set_column(j, &col);
    }
    let c = step_fn(s0, a0) - &a * s0 - &b * a0;
    if a.iter().chain(b.iter()).chain(c.iter()).any(|v| !v.is_finite()) {
        return Err(ControlError::NonFiniteJacobian);
    }
    LinearDynamics::new(a, b, c)
}

/// Ordinary least squares fit of [A B c] minimizing sum ||s' - (As + Ba + c)||^2,
/// solved via SVD so rank-deficient regressors fall back to the minimum-norm
/// solution (with a warning). Sigma is set to the empirical residual covariance.
pub fn fit_linear_dynamics(dataset: &[Transition]) -> Result<LinearDynamics, ControlError> {
    let first_action = dataset
        .iter()
        .enumerate()
        .map(|(i, tr)| tr.a.as_ref().ok_or(ControlError::MissingAction { index: i }))
        .next()
        .transpose()?
        .ok_or(ControlError::InsufficientData { needed: 1, found: 0 })?;
    let n = dataset[0].s.dim();
    let m = first_action.dim();
    let needed = n + m + 1;
    if dataset.len() < needed {
        return Err(ControlError::InsufficientData { needed, found: dataset.len() });
    }

    let rows = dataset.len();
    let mut x = DMatrix::zeros(rows, n + m + 1);
    let mut y = DMatrix::zeros(rows, n);
    for (i, tr) in dataset.iter().enumerate() {
        let a = tr.a.as_ref().ok_or(ControlError::MissingAction { index: i })?;
        for j in 0..n {
            x[(i, j)] = tr.s.values()[j];
        }
        for j in 0..m {
            x[(i, n + j)] = a.values()[j];
        }
        x[(i, n + m)] = 1.0;
        for j in 0..n {
            y[(i, j)] = tr.s_next.values()[j];
        }
    }

    if numerical_rank(&x) < n + m + 1 {
        log::warn!("rank-deficient regressors in dynamics fit; using pseudo-inverse");
    }
    // theta is (n+m+1) x n; row blocks are A', B', c'.
    let theta = pseudo_inverse(&x) * &y;

    let a = theta.rows(0, n).transpose();
    let b = theta.rows(n, m).transpose();
    let c = DVector::from_iterator(n, theta.row(n + m).iter().copied());

    let residuals = &x * &theta - &y;
    let mut sigma = DMatrix::zeros(n, n);
    for i in 0..rows {
        let r = residuals.row(i).transpose();
        sigma += &r * r.transpose();
    }
    sigma /= rows as f64;

    Ok(LinearDynamics::new(a, b, c)?.with_noise(sigma))
}

/// The double-integrator test system used throughout: dt = 0.5,
/// A = [[1, dt], [0, 1]], B = [[dt^2/2], [dt]].
pub fn double_integrator(dt: f64) -> LinearDynamics {
    LinearDynamics::new(
        DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]),
        DMatrix::from_row_slice(2, 1, &[dt * dt / 2.0, dt]),
        DVector::zeros(2),
    )
    .expect("static dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn goal(values: &[f64]) -> HighAction {
        HighAction::goal(values.to_vec()).unwrap()
    }

    fn state(values: &[f64]) -> StateVec {
        StateVec::new(values.to_vec()).unwrap()
    }

    /// Independent scalar/matrix Riccati oracle written in plain loops with
    /// explicit 1x1 and 2x2 arithmetic; deliberately avoids the production
    /// code path.
    fn riccati_oracle_2x2_scalar_action(
        a: [[f64; 2]; 2],
        b: [f64; 2],
        q: [f64; 2],
        r: f64,
        horizon: usize,
    ) -> (Vec<[f64; 2]>, Vec<[[f64; 2]; 2]>) {
        let mut p = [[q[0], 0.0], [0.0, q[1]]];
        let mut ps = vec![p];
        let mut ks = Vec::new();
        for _ in 0..horizon {
            // inner = r + b' P b (scalar)
            let pb = [p[0][0] * b[0] + p[0][1] * b[1], p[1][0] * b[0] + p[1][1] * b[1]];
            let inner = r + b[0] * pb[0] + b[1] * pb[1];
            // k = -(1/inner) * b' P A  (1x2)
            let bpa = [
                pb[0] * a[0][0] + pb[1] * a[1][0],
                pb[0] * a[0][1] + pb[1] * a[1][1],
            ];
            let k = [-bpa[0] / inner, -bpa[1] / inner];
            // closed = A + b k
            let closed = [
                [a[0][0] + b[0] * k[0], a[0][1] + b[0] * k[1]],
                [a[1][0] + b[1] * k[0], a[1][1] + b[1] * k[1]],
            ];
            // p = Q + A' P closed
            let pc = [
                [
                    p[0][0] * closed[0][0] + p[0][1] * closed[1][0],
                    p[0][0] * closed[0][1] + p[0][1] * closed[1][1],
                ],
                [
                    p[1][0] * closed[0][0] + p[1][1] * closed[1][0],
                    p[1][0] * closed[0][1] + p[1][1] * closed[1][1],
                ],
            ];
            let new_p = [
                [
                    q[0] + a[0][0] * pc[0][0] + a[1][0] * pc[1][0],
                    a[0][0] * pc[0][1] + a[1][0] * pc[1][1],
                ],
                [
                    a[0][1] * pc[0][0] + a[1][1] * pc[1][0],
                    q[1] + a[0][1] * pc[0][1] + a[1][1] * pc[1][1],
                ],
            ];
            ks.push(k);
            p = new_p;
            ps.push(p);
        }
        ks.reverse();
        ps.reverse();
        (ks, ps)
    }

    #[test]
    fn scalar_riccati_by_hand() {
        // n = m = 1, A = B = Q = 1, R = 0, T = 1: K_0 = -1, P_0 = 1.
        let dyn_ = LinearDynamics::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
        )
        .unwrap();
        let cost = CostMatrices::tracking(DMatrix::from_element(1, 1, 1.0), DMatrix::zeros(1, 1));
        let sched = riccati_gains(&dyn_, &cost, 1).unwrap();
        assert!((sched.ks[0][(0, 0)] + 1.0).abs() < 1e-12);
        assert!((sched.ps[0][(0, 0)] - 1.0).abs() < 1e-12);
        // a = -(s - u) drives s' = u.
        let a = lqr_tracking_action(&sched, 0, &state(&[2.0]), &goal(&[5.0])).unwrap();
        assert!((a[0] - 3.0).abs() < 1e-12);
        let s_next = dyn_.step_mean(&DVector::from_element(1, 2.0), &a);
        assert!((s_next[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn double_integrator_gains_match_independent_oracle() {
        let dyn_ = double_integrator(0.5);
        let cost = CostMatrices::tracking(
            DMatrix::from_partial_diagonal(2, 2, &[4.0, 1.0]),
            DMatrix::from_element(1, 1, 0.2),
        );
        let sched = riccati_gains(&dyn_, &cost, 5).unwrap();
        let (ks, ps) =
            riccati_oracle_2x2_scalar_action([[1.0, 0.5], [0.0, 1.0]], [0.125, 0.5], [4.0, 1.0], 0.2, 5);
        for t in 0..5 {
            assert!((sched.ks[t][(0, 0)] - ks[t][0]).abs() < 1e-12, "K_{t}[0]");
            assert!((sched.ks[t][(0, 1)] - ks[t][1]).abs() < 1e-12, "K_{t}[1]");
        }
        for t in 0..6 {
            for i in 0..2 {
                for j in 0..2 {
                    assert!((sched.ps[t][(i, j)] - ps[t][i][j]).abs() < 1e-9, "P_{t}[{i}{j}]");
                }
            }
        }
        // Frozen regression values from the oracle.
        assert!((ks[0][0] - -1.831_480_902_421_671).abs() < 1e-12, "K_0[0] = {}", ks[0][0]);
        assert!((ks[0][1] - -2.121_683_755_847_911).abs() < 1e-12, "K_0[1] = {}", ks[0][1]);
        assert!((ps[0][0][0] - 9.263_846_506_734_904).abs() < 1e-9, "P_0[00] = {}", ps[0][0][0]);
        // Tracking action from the oracle gains: s = (0,0), u = (1,0).
        let a = lqr_tracking_action(&sched, 0, &state(&[0.0, 0.0]), &goal(&[1.0, 0.0])).unwrap();
        assert!((a[0] - 1.831_480_902_421_671).abs() < 1e-12);
    }

    #[test]
    fn four_state_gains_have_expected_shape() {
        // Two decoupled double integrators, state (q1, q2, qd1, qd2).
        let dt = 0.5;
        let mut a = DMatrix::identity(4, 4);
        a[(0, 2)] = dt;
        a[(1, 3)] = dt;
        let mut b = DMatrix::zeros(4, 2);
        b[(0, 0)] = dt * dt / 2.0;
        b[(1, 1)] = dt * dt / 2.0;
        b[(2, 0)] = dt;
        b[(3, 1)] = dt;
        let dyn_ = LinearDynamics::new(a, b, DVector::zeros(4)).unwrap();
        let cost = CostMatrices::tracking(
            DMatrix::from_partial_diagonal(4, 4, &[10.0, 10.0, 1.0, 1.0]),
            DMatrix::from_partial_diagonal(2, 2, &[0.1, 0.1]),
        );
        let sched = riccati_gains(&dyn_, &cost, 5).unwrap();
        assert_eq!(sched.ks[0].nrows(), 2);
        assert_eq!(sched.ks[0].ncols(), 4);
        assert!(sched.ks[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn tracking_action_is_zero_at_goal() {
        let dyn_ = double_integrator(0.5);
        let cost = CostMatrices::tracking(
            DMatrix::from_partial_diagonal(2, 2, &[4.0, 1.0]),
            DMatrix::from_element(1, 1, 0.2),
        );
        let sched = riccati_gains(&dyn_, &cost, 5).unwrap();
        let a = lqr_tracking_action(&sched, 2, &state(&[1.5, -0.5]), &goal(&[1.5, -0.5])).unwrap();
        assert!(a.norm() < 1e-14);
        assert!(matches!(
            lqr_tracking_action(&sched, 5, &state(&[0.0, 0.0]), &goal(&[0.0, 0.0])),
            Err(ControlError::IndexOutOfHorizon { t: 5, horizon: 5 })
        ));
    }

    #[test]
    fn riccati_value_matrices_symmetric_psd() {
        let mut rng = SeededRng::new(17);
        for _ in 0..25 {
            let n = 2 + rng.below(2);
            let m = 1 + rng.below(2);
            let a = DMatrix::from_fn(n, n, |_, _| rng.normal());
            let b = DMatrix::from_fn(n, m, |_, _| rng.normal());
            // Random PSD Q, diagonal R >= 0.
            let g = DMatrix::from_fn(n, n, |_, _| rng.normal());
            let q = &g * g.transpose();
            let r = DMatrix::from_fn(m, m, |i, j| if i == j { rng.uniform() } else { 0.0 });
            let dyn_ = LinearDynamics::new(a, b, DVector::zeros(n)).unwrap();
            let cost = CostMatrices::tracking(q, r);
            let sched = match riccati_gains(&dyn_, &cost, 6) {
                Ok(s) => s,
                Err(ControlError::SingularInnerMatrix { .. }) => continue,
                Err(e) => panic!("{e}"),
            };
            for p in &sched.ps {
                let asym = (p - p.transpose()).abs().max();
                assert!(asym < 1e-9, "asymmetry {asym}");
                let eig = p.clone().symmetric_eigen();
                assert!(eig.eigenvalues.min() > -1e-9, "negative eigenvalue");
            }
        }
    }

    #[test]
    fn repeated_first_gain_contracts_to_goal() {
        let dyn_ = double_integrator(0.5);
        let cost = CostMatrices::tracking(
            DMatrix::from_partial_diagonal(2, 2, &[4.0, 1.0]),
            DMatrix::from_element(1, 1, 0.2),
        );
        let sched = riccati_gains(&dyn_, &cost, 5).unwrap();
        let k0 = sched.ks[0].clone();
        let mut rng = SeededRng::new(23);
        for _ in 0..20 {
            let mut s = DVector::from_fn(2, |_, _| rng.uniform_in(-5.0, 5.0));
            // A double integrator can only hold still at zero velocity, so
            // goals are position targets; the velocity component is 0.
            let u = DVector::from_column_slice(&[rng.uniform_in(-5.0, 5.0), 0.0]);
            let mut reached = false;
            for _ in 0..200 {
                let a = &k0 * (&s - &u);
                s = dyn_.step_mean(&s, &a);
                if (&s - &u).norm() < 1e-3 {
                    reached = true;
                    break;
                }
            }
            assert!(reached, "did not contract within 200 steps");
        }
    }

    #[test]
    fn affine_gains_identity_case() {
        // A = I, B = I, c = 0, M = 0, m = 0, V = I: K = I, k = -s, a* = u - s.
        let n = 3;
        let dyn_ = LinearDynamics::new(DMatrix::identity(n, n), DMatrix::identity(n, n), DVector::zeros(n))
            .unwrap();
        let cost = CostMatrices::tracking(DMatrix::zeros(n, n), DMatrix::zeros(n, n)).with_goal_weight(
            DMatrix::zeros(n, n),
            DVector::zeros(n),
            DMatrix::identity(n, n),
        );
        let s = state(&[1.0, -2.0, 0.5]);
        let g = lqg_affine_gains(&dyn_, &cost, &s);
        assert!((&g.k_mat - DMatrix::identity(n, n)).abs().max() < 1e-12);
        assert!((&g.k_vec + s.as_dvector()).abs().max() < 1e-12);
        // s' = As + Ba* + c = s + (u - s) = u.
        let u = DVector::from_column_slice(&[3.0, 4.0, 5.0]);
        let a_star = &g.k_mat * &u + &g.k_vec;
        let s_next = dyn_.step_mean(&s.as_dvector(), &a_star);
        assert!((s_next - u).norm() < 1e-12);
    }

    #[test]
    fn affine_gains_half_identity_case() {
        // M = V = I, B = A = I, c = 0, m = 0: K = (I + I)^+ I = I/2, k = -s/2.
        let n = 2;
        let dyn_ = LinearDynamics::new(DMatrix::identity(n, n), DMatrix::identity(n, n), DVector::zeros(n))
            .unwrap();
        let cost = CostMatrices::tracking(DMatrix::zeros(n, n), DMatrix::zeros(n, n)).with_goal_weight(
            DMatrix::identity(n, n),
            DVector::zeros(n),
            DMatrix::identity(n, n),
        );
        let s = state(&[2.0, -4.0]);
        let g = lqg_affine_gains(&dyn_, &cost, &s);
        assert!((&g.k_mat - DMatrix::identity(n, n) * 0.5).abs().max() < 1e-12);
        assert!((&g.k_vec + s.as_dvector() * 0.5).abs().max() < 1e-12);
    }

    #[test]
    fn affine_gains_satisfy_stationarity() {
        // M(a* - m) + B'V(As + Ba* + c - u) = 0 for the maximizer.
        let mut rng = SeededRng::new(31);
        for _ in 0..100 {
            let n = 2 + rng.below(2);
            let m = 1 + rng.below(n);
            let a = DMatrix::from_fn(n, n, |_, _| rng.normal());
            let b = DMatrix::from_fn(n, m, |_, _| rng.normal());
            let c = DVector::from_fn(n, |_, _| rng.normal());
            let gm = DMatrix::from_fn(m, m, |_, _| rng.normal());
            let m_mat = &gm * gm.transpose() + DMatrix::identity(m, m) * 0.5;
            let gv = DMatrix::from_fn(n, n, |_, _| rng.normal());
            let v = &gv * gv.transpose() + DMatrix::identity(n, n) * 0.5;
            let m_vec = DVector::from_fn(m, |_, _| rng.normal());
            let dyn_ = LinearDynamics::new(a.clone(), b.clone(), c.clone()).unwrap();
            let cost = CostMatrices::tracking(DMatrix::zeros(n, n), DMatrix::zeros(m, m))
                .with_goal_weight(m_mat.clone(), m_vec.clone(), v.clone());
            let sv = DVector::from_fn(n, |_, _| rng.normal());
            let s = StateVec::from_dvector(&sv).unwrap();
            let g = lqg_affine_gains(&dyn_, &cost, &s);
            let u = DVector::from_fn(n, |_, _| rng.normal());
            let a_star = &g.k_mat * &u + &g.k_vec;
            let resid = &m_mat * (&a_star - &m_vec)
                + b.transpose() * &v * (&a * &sv + &b * &a_star + &c - &u);
            assert!(resid.norm() < 1e-9, "stationarity residual {}", resid.norm());
        }
    }

    #[test]
    fn linearize_recovers_exact_linear_system() {
        let dyn_ = double_integrator(0.5);
        let truth = dyn_.clone();
        let f = move |s: &DVector<f64>, a: &DVector<f64>| truth.step_mean(s, a);
        let lin = linearize_fd(&f, &DVector::from_column_slice(&[0.3, -0.7]), &DVector::from_element(1, 0.2), 1e-5)
            .unwrap();
        assert!((&lin.a - &dyn_.a).abs().max() < 1e-8);
        assert!((&lin.b - &dyn_.b).abs().max() < 1e-8);
        assert!(lin.c.norm() < 1e-8);
    }

    #[test]
    fn linearize_scalar_square_function() {
        let f = |s: &DVector<f64>, _a: &DVector<f64>| DVector::from_element(1, s[0] * s[0]);
        let lin = linearize_fd(&f, &DVector::from_element(1, 2.0), &DVector::zeros(1), 1e-5).unwrap();
        assert!((lin.a[(0, 0)] - 4.0).abs() < 1e-6);
        // Affine remainder makes the one-step prediction exact at the expansion point.
        let pred = lin.step_mean(&DVector::from_element(1, 2.0), &DVector::zeros(1));
        assert!((pred[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn fit_recovers_noise_free_system_exactly() {
        let dyn_ = double_integrator(0.5);
        let mut rng = SeededRng::new(9);
        let mut data = Vec::new();
        for ep in 0..10 {
            let mut s = DVector::from_fn(2, |_, _| rng.uniform_in(-2.0, 2.0));
            for t in 0..10 {
                let a = DVector::from_element(1, rng.uniform_in(-1.0, 1.0));
                let s_next = dyn_.step_mean(&s, &a);
                data.push(Transition {
                    episode: ep,
                    t,
                    s: StateVec::from_dvector(&s).unwrap(),
                    a: Some(crate::types::ActionVec::from_dvector(&a).unwrap()),
                    r: None,
                    s_next: StateVec::from_dvector(&s_next).unwrap(),
                });
                s = s_next;
            }
        }
        let fit = fit_linear_dynamics(&data).unwrap();
        assert!((&fit.a - &dyn_.a).abs().max() < 1e-8);
        assert!((&fit.b - &dyn_.b).abs().max() < 1e-8);
        assert!(fit.c.norm() < 1e-8);
        assert!(fit.sigma.unwrap().abs().max() < 1e-12);
    }

    #[test]
    fn fit_degenerate_constant_dataset_stays_consistent() {
        let s = state(&[1.0, 2.0]);
        let a = crate::types::ActionVec::new(vec![0.5]).unwrap();
        let s_next = state(&[3.0, 4.0]);
        let data: Vec<Transition> = (0..10)
            .map(|t| Transition {
                episode: 0,
                t,
                s: s.clone(),
                a: Some(a.clone()),
                r: None,
                s_next: s_next.clone(),
            })
            .collect();
        let fit = fit_linear_dynamics(&data).unwrap();
        // Prediction at the (single) support point must be exact.
        let pred = fit.step_mean(&s.as_dvector(), &a.as_dvector());
        assert!((pred - s_next.as_dvector()).norm() < 1e-8);
    }

    #[test]
    fn fit_tolerates_observation_noise() {
        let dyn_ = double_integrator(0.5);
        let mut rng = SeededRng::new(77);
        let mut data = Vec::new();
        for ep in 0..100 {
            let mut s = DVector::from_fn(2, |_, _| rng.uniform_in(-2.0, 2.0));
            for t in 0..100 {
                let a = DVector::from_element(1, rng.uniform_in(-1.0, 1.0));
                let mut s_next = dyn_.step_mean(&s, &a);
                for v in s_next.iter_mut() {
                    *v += rng.normal_scaled(0.0, 0.01);
                }
                data.push(Transition {
                    episode: ep,
                    t,
                    s: StateVec::from_dvector(&s).unwrap(),
                    a: Some(crate::types::ActionVec::from_dvector(&a).unwrap()),
                    r: None,
                    s_next: StateVec::from_dvector(&s_next).unwrap(),
                });
                s = s_next;
            }
        }
        let fit = fit_linear_dynamics(&data).unwrap();
        assert!((&fit.a - &dyn_.a).abs().max() < 0.01);
        assert!((&fit.b - &dyn_.b).abs().max() < 0.01);
    }

    #[test]
    fn pseudo_inverse_of_zero_is_zero() {
        let z = DMatrix::zeros(2, 3);
        let p = pseudo_inverse(&z);
        assert_eq!(p.nrows(), 3);
        assert_eq!(p.ncols(), 2);
        assert!(p.iter().all(|&v| v == 0.0));
    }
}
