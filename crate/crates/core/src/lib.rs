//! Recovering high-level actions from low-level trajectory logs.
//!
//! This crate turns raw trajectory data produced by a known low-level
//! controller (an LQR tracking law or a network-flow linear program) back
//! into the high-level actions that generated it, so the result can be fed
//! to ordinary offline learners. The pieces:
//!
//! - [`types`]: states, actions, transitions, relabeled samples.
//! - [`rng`]: a small deterministic generator shared by everything stochastic.
//! - [`control`]: Riccati recursion, LQR/affine tracking policies, finite
//!   differences, and least-squares dynamics fitting.
//! - [`inversion`]: analytic, gradient-based, and cross-entropy recovery of
//!   the high-level action behind an observed transition.
//! - [`lp`]: a dense simplex solver plus the forward network-flow policies
//!   and their inverse-optimization counterparts.
//! - [`envs`]: desk-scale simulators (linear and nonlinear goal reaching,
//!   supply-chain inventory, station-level vehicle routing).
//! - [`policies`]: behavior policies used to collect datasets.
//! - [`relabel`]: windowed dataset relabeling built on the inversion module.
//! - [`learn`]: behavior cloning and advantage-weighted regression with an
//!   expectile value fit, plus the evaluation harness.

pub mod control;
pub mod envs;
pub mod inversion;
pub mod learn;
pub mod lp;
pub mod policies;
pub mod relabel;
pub mod rng;
pub mod types;

pub use rng::SeededRng;
pub use types::{ActionVec, HighAction, HighActionKind, RelabeledSample, StateVec, Transition};
