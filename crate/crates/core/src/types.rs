//! Domain types shared by every other module: states, actions, transitions,
//! relabeled samples, and trajectory validation.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when renormalizing distribution-valued high actions.
/// Inversion arithmetic introduces tiny drift; anything beyond this is a
/// genuinely malformed distribution and is rejected.
pub const DISTRIBUTION_DRIFT_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TypeError {
    #[error("dimension mismatch at record {index}: expected {expected}, found {found}")]
    DimMismatch { index: usize, expected: usize, found: usize },
    #[error("non-consecutive timestep at record {index}: episode {episode} jumped to t={t}")]
    NonConsecutiveTime { index: usize, episode: i64, t: i64 },
    #[error("non-finite value in record {index} ({field})")]
    NonFiniteValue { index: usize, field: &'static str },
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("reference score is zero")]
    ZeroReference,
    #[error("distribution entries must be nonnegative and sum to 1 (sum was {sum})")]
    InvalidDistribution { sum: f64 },
    #[error("non-finite entry in {what}")]
    NonFinite { what: &'static str },
    #[error("action entry {index} = {value} outside bounds [{lo}, {hi}]")]
    ActionOutOfBounds { index: usize, value: f64, lo: f64, hi: f64 },
}

/// Flat environment state vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVec {
    values: Vec<f64>,
}

impl StateVec {
    pub fn new(values: Vec<f64>) -> Result<Self, TypeError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TypeError::NonFinite { what: "state" });
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn as_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }

    pub fn from_dvector(v: &DVector<f64>) -> Result<Self, TypeError> {
        Self::new(v.iter().copied().collect())
    }
}

/// Per-dimension box bound for low-level actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxBounds {
    pub fn symmetric(dim: usize, magnitude: f64) -> Self {
        Self { lo: vec![-magnitude; dim], hi: vec![magnitude; dim] }
    }

    pub fn contains(&self, values: &[f64]) -> bool {
        values
            .iter()
            .enumerate()
            .all(|(i, &v)| v >= self.lo[i] - 1e-12 && v <= self.hi[i] + 1e-12)
    }

    pub fn clamp(&self, values: &mut [f64]) {
        for (i, v) in values.iter_mut().enumerate() {
            *v = v.clamp(self.lo[i], self.hi[i]);
        }
    }
}

/// Low-level action vector (torques, flows).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionVec {
    values: Vec<f64>,
}

impl ActionVec {
    pub fn new(values: Vec<f64>) -> Result<Self, TypeError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TypeError::NonFinite { what: "action" });
        }
        Ok(Self { values })
    }

    /// Construct while checking a box bound.
    pub fn bounded(values: Vec<f64>, bounds: &BoxBounds) -> Result<Self, TypeError> {
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(TypeError::NonFinite { what: "action" });
            }
            if v < bounds.lo[i] - 1e-12 || v > bounds.hi[i] + 1e-12 {
                return Err(TypeError::ActionOutOfBounds {
                    index: i,
                    value: v,
                    lo: bounds.lo[i],
                    hi: bounds.hi[i],
                });
            }
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn as_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }

    pub fn from_dvector(v: &DVector<f64>) -> Result<Self, TypeError> {
        Self::new(v.iter().copied().collect())
    }
}

/// What kind of quantity the upper policy emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HighActionKind {
    /// A goal state for a tracking controller.
    GoalState,
    /// A distribution over nodes (nonnegative, sums to 1).
    Distribution,
    /// Warehouse production targets followed by store inventory targets.
    MixedProductionDistribution,
}

/// Output of the upper policy, consumed as a parameter by the low level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighAction {
    values: Vec<f64>,
    kind: HighActionKind,
}

impl HighAction {
    pub fn goal(values: Vec<f64>) -> Result<Self, TypeError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TypeError::NonFinite { what: "high action" });
        }
        Ok(Self { values, kind: HighActionKind::GoalState })
    }

    /// Distribution-kind action. Renormalizes when the sum is within
    /// [`DISTRIBUTION_DRIFT_TOL`] of 1 and rejects otherwise.
    pub fn distribution(values: Vec<f64>) -> Result<Self, TypeError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TypeError::NonFinite { what: "high action" });
        }
        let sum: f64 = values.iter().sum();
        if values.iter().any(|&v| v < -1e-12) || (sum - 1.0).abs() > DISTRIBUTION_DRIFT_TOL {
            return Err(TypeError::InvalidDistribution { sum });
        }
        let values = values.iter().map(|&v| v.max(0.0) / sum).collect();
        Ok(Self { values, kind: HighActionKind::Distribution })
    }

    pub fn mixed(values: Vec<f64>) -> Result<Self, TypeError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TypeError::NonFinite { what: "high action" });
        }
        Ok(Self { values, kind: HighActionKind::MixedProductionDistribution })
    }

    pub fn from_kind(values: Vec<f64>, kind: HighActionKind) -> Result<Self, TypeError> {
        match kind {
            HighActionKind::GoalState => Self::goal(values),
            HighActionKind::Distribution => Self::distribution(values),
            HighActionKind::MixedProductionDistribution => Self::mixed(values),
        }
    }

    pub fn kind(&self) -> HighActionKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn as_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }
}

/// One logged environment step. Actions and rewards are optional because the
/// pipeline must handle both state-only and action-observed data; absence is
/// represented explicitly, never as a sentinel number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub episode: i64,
    pub t: i64,
    pub s: StateVec,
    pub a: Option<ActionVec>,
    pub r: Option<f64>,
    pub s_next: StateVec,
}

/// Offline-RL-ready record produced by relabeling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabeledSample {
    pub s: StateVec,
    pub u: HighAction,
    pub r: f64,
    pub s_next: StateVec,
    pub inv_loss: f64,
}

impl RelabeledSample {
    pub fn new(
        s: StateVec,
        u: HighAction,
        r: f64,
        s_next: StateVec,
        inv_loss: f64,
    ) -> Result<Self, TypeError> {
        if !r.is_finite() {
            return Err(TypeError::NonFinite { what: "reward" });
        }
        if !inv_loss.is_finite() || inv_loss < 0.0 {
            return Err(TypeError::NonFinite { what: "inversion loss" });
        }
        Ok(Self { s, u, r, s_next, inv_loss })
    }
}

/// Validate a logged trajectory: uniform dims, consecutive timesteps per
/// episode, finite values. Returns the input on success so callers can chain.
pub fn validate_trajectory(transitions: &[Transition]) -> Result<&[Transition], TypeError> {
    if transitions.is_empty() {
        return Err(TypeError::EmptyTrajectory);
    }
    let dim = transitions[0].s.dim();
    let mut last: Option<(i64, i64)> = None;
    for (index, tr) in transitions.iter().enumerate() {
        if tr.s.dim() != dim {
            return Err(TypeError::DimMismatch { index, expected: dim, found: tr.s.dim() });
        }
        if tr.s_next.dim() != tr.s.dim() {
            return Err(TypeError::DimMismatch { index, expected: tr.s.dim(), found: tr.s_next.dim() });
        }
        if tr.t < 0 {
            return Err(TypeError::NonConsecutiveTime { index, episode: tr.episode, t: tr.t });
        }
        if let Some((ep, t)) = last {
            if tr.episode == ep && tr.t != t + 1 {
                return Err(TypeError::NonConsecutiveTime { index, episode: tr.episode, t: tr.t });
            }
        }
        if tr.s.values().iter().any(|v| !v.is_finite()) {
            return Err(TypeError::NonFiniteValue { index, field: "s" });
        }
        if tr.s_next.values().iter().any(|v| !v.is_finite()) {
            return Err(TypeError::NonFiniteValue { index, field: "s_next" });
        }
        if let Some(a) = &tr.a {
            if a.values().iter().any(|v| !v.is_finite()) {
                return Err(TypeError::NonFiniteValue { index, field: "a" });
            }
        }
        if let Some(r) = tr.r {
            if !r.is_finite() {
                return Err(TypeError::NonFiniteValue { index, field: "r" });
            }
        }
        last = Some((tr.episode, tr.t));
    }
    Ok(transitions)
}

/// 100 * score / reference.
pub fn normalized_score(score: f64, reference: f64) -> Result<f64, TypeError> {
    if reference == 0.0 {
        return Err(TypeError::ZeroReference);
    }
    Ok(100.0 * score / reference)
}
