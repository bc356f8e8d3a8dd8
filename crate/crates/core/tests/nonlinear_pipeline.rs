//! End-to-end exercise of the nonlinear goal environment: expert
//! collection, relabeling with per-window linearization, behavior cloning,
//! and evaluation.

use nalgebra::DVector;
use ohio_core::envs::{AnyEnv, GoalEnv, NonlinearEnv, NonlinearEnvConfig};
use ohio_core::inversion::{InversionConfig, InversionMethod};
use ohio_core::learn::{bc_train, evaluate_policy, LearnerConfig};
use ohio_core::policies::{collect_goal_expert, GoalSetter};
use ohio_core::relabel::{relabel_dataset, GoalRelabelModel, RelabelConfig};
use ohio_core::SeededRng;

#[test]
fn nonlinear_env_inverts_and_learns() {
    let env = NonlinearEnv::new(NonlinearEnvConfig::default()).unwrap();
    let mut rng = SeededRng::new(42);
    let raw = collect_goal_expert(&env, 40, 0.15, 5, false, &mut rng).unwrap();

    let dynamics_fn = |phys: &DVector<f64>| env.dynamics_at(phys);
    let model = GoalRelabelModel {
        dynamics_fn: &dynamics_fn,
        q_diag: env.config.q_diag.clone(),
        r_diag: env.config.r_diag.clone(),
        phys_dim: env.phys_dim(),
        scale: env.goal_scale(),
        reward_fn: None,
    };
    let config = RelabelConfig {
        inversion: InversionConfig {
            method: InversionMethod::GradientDescent,
            max_steps: 1000,
            ..Default::default()
        },
        ..Default::default()
    };
    let (samples, report) = relabel_dataset(&raw, &model, &config, &SeededRng::new(43)).unwrap();
    // The linearized model only approximates the drag dynamics, so losses
    // are nonzero but the bulk of windows must survive the filter.
    assert!(
        report.retained as f64 / report.windows as f64 > 0.9,
        "retention {}/{}",
        report.retained,
        report.windows
    );

    let learn = LearnerConfig { epochs: 60, seed: 5, ..Default::default() };
    let (policy, _) = bc_train(&samples, &learn).unwrap();
    let any_env = AnyEnv::Nonlinear(NonlinearEnv::new(NonlinearEnvConfig::default()).unwrap());
    let reference = evaluate_policy(&GoalSetter { phys_dim: 4, noise_std: 0.0 }, &any_env, 10, 77, None)
        .unwrap()
        .mean_return;
    let bc = evaluate_policy(&policy, &any_env, 10, 77, Some(reference)).unwrap();
    // Loose sanity: the cloned policy must capture most of the expert's
    // performance on this smooth task.
    assert!(
        bc.normalized.unwrap() > 70.0,
        "normalized {} (reference {reference})",
        bc.normalized.unwrap()
    );
}
