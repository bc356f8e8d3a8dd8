//! Acceptance criteria for the whole pipeline. Each criterion is a
//! self-contained check that prints one pass/fail line; `ohio check` runs
//! them all and the `acceptance` integration test asserts each one.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use ohio_core::control::{riccati_gains, CostMatrices, double_integrator};
use ohio_core::envs::{
    AnyEnv, LinearEnvConfig, RoutingConfig, RoutingEnv, SupplyChainConfig, SupplyChainEnv,
};
use ohio_core::inversion::{
    closed_loop_rollout, closed_loop_sensitivity, invert_lqr_horizon_analytic,
    invert_numeric_state, InversionConfig, InversionMethod, UScale,
};
use ohio_core::learn::{
    awr_train, bc_train, evaluate_policy, expectile_of, mlp_forward_backward, Algorithm, HeadKind,
    LearnerConfig, LossKind, Mlp,
};
use ohio_core::lp::{
    duality_inverse, flow_balance_inverse, rebalancing_policy, solve_lp, LpProblem, LpStatus,
    NetworkProblem, SuboptimalityForm,
};
use ohio_core::policies::{
    collect_routing, collect_supply_chain, GoalSetter, RoutingBehavior, SupplyChainActor,
    SupplyChainBehavior,
};
use ohio_core::relabel::{NetworkInverseMethod, RelabelBaseline};
use ohio_core::types::HighAction;
use ohio_core::SeededRng;

use crate::commands::{cmd_collect, cmd_eval, cmd_relabel, cmd_train};
use crate::config::{DynamicsSpec, EnvSection, PolicySection, RunConfig};
use crate::CliError;

pub struct CriterionResult {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub details: String,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "criterion {}: {} - {} ({})",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.details
        )
    }
}

pub use ohio_core::policies::{TUNED_STORE_LEVELS, TUNED_WAREHOUSE_LEVEL};

/// Shared environment base for the goal-reaching pipeline criteria: the
/// low level is deliberately sluggish (R = 10) so one abstraction window
/// covers only part of the commanded displacement and next-state goals
/// carry little information.
pub fn pipeline_env_config() -> LinearEnvConfig {
    LinearEnvConfig { r_diag: vec![10.0], ..LinearEnvConfig::default() }
}

pub fn run_criteria(ids: &[usize], artifacts: &Path) -> Vec<CriterionResult> {
    ids.iter()
        .map(|&id| match id {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(artifacts),
            6 => criterion_6(),
            7 => criterion_7(),
            8 => criterion_8(),
            9 => criterion_9(artifacts),
            other => CriterionResult {
                id: other,
                name: "unknown",
                passed: false,
                details: "no such criterion".into(),
            },
        })
        .collect()
}

/// Criterion 1: the horizon inverse reproduces arbitrary next states
/// exactly on the linear test system across the Q11/R grid.
pub fn criterion_1() -> CriterionResult {
    let started = Instant::now();
    let dyn_ = double_integrator(0.5);
    let mut worst: f64 = 0.0;
    let mut rng = SeededRng::new(101);
    for &q11 in &[3.5, 4.0, 4.5, 5.0, 5.5] {
        for &r in &[0.0, 0.2] {
            let cost = CostMatrices::tracking(
                DMatrix::from_partial_diagonal(2, 2, &[q11, 1.0]),
                DMatrix::from_element(1, 1, r),
            );
            let gains = riccati_gains(&dyn_, &cost, 5).expect("riccati");
            let dyns = vec![dyn_.clone(); 5];
            for _ in 0..1000 {
                let s = DVector::from_fn(2, |_, _| rng.uniform_in(-5.0, 5.0));
                let s_t = DVector::from_fn(2, |_, _| rng.uniform_in(-5.0, 5.0));
                let result = invert_lqr_horizon_analytic(&dyns, &gains, &s, &s_t);
                let rolled = closed_loop_rollout(&dyns, &gains, &s, &result.u_hat.as_dvector());
                worst = worst.max((rolled - &s_t).norm());
            }
        }
    }
    let elapsed = started.elapsed();
    let passed = worst < 1e-8 && elapsed.as_secs_f64() < 5.0;
    CriterionResult {
        id: 1,
        name: "exact linear recovery",
        passed,
        details: format!("worst rollout error {worst:.3e} over 10x1000 pairs in {elapsed:.2?}"),
    }
}

/// Criterion 2: identifiability on random well-conditioned instances, and
/// numeric inverses agree with the analytic one.
pub fn criterion_2() -> CriterionResult {
    let started = Instant::now();
    let mut rng = SeededRng::new(202);
    let mut worst_exact: f64 = 0.0;
    let mut worst_loss: f64 = 0.0;
    let mut worst_gap: f64 = 0.0;
    let mut done = 0;
    while done < 500 {
        let n = 2 + rng.below(2);
        let m = 1 + rng.below(2);
        let a = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                1.0
            } else {
                0.3 * rng.normal()
            }
        });
        let b = DMatrix::from_fn(n, m, |_, _| rng.normal());
        let dyn_ = match ohio_core::control::LinearDynamics::new(a, b, DVector::zeros(n)) {
            Ok(d) => d,
            Err(_) => continue,
        };
        let cost = CostMatrices::tracking(
            DMatrix::from_fn(n, n, |i, j| if i == j { rng.uniform_in(1.0, 5.0) } else { 0.0 }),
            DMatrix::from_fn(m, m, |i, j| if i == j { rng.uniform_in(0.05, 0.5) } else { 0.0 }),
        );
        let gains = match riccati_gains(&dyn_, &cost, 5) {
            Ok(g) => g,
            Err(_) => continue,
        };
        let dyns = vec![dyn_.clone(); 5];
        let s = DVector::from_fn(n, |_, _| rng.uniform_in(-2.0, 2.0));
        let (phi1, _) = closed_loop_sensitivity(&dyns, &gains, &s);
        let svd = phi1.svd(false, false);
        // The criterion is about well-conditioned instances: full column
        // rank with a modest spread of singular values.
        if svd.singular_values.min() < 0.5 || svd.singular_values.max() > 5.0 {
            continue;
        }
        let u0 = DVector::from_fn(n, |_, _| rng.uniform_in(-2.0, 2.0));
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
        let s_t = targets.last().expect("horizon 5").clone();

        let analytic = invert_lqr_horizon_analytic(&dyns, &gains, &s, &s_t);
        worst_exact = worst_exact.max((analytic.u_hat.as_dvector() - &u0).norm());

        let scale = UScale::symmetric(n, 3.0);
        let policy = |t: usize, x: &DVector<f64>, u: &DVector<f64>| &gains.ks[t] * (x - u);
        // Adam cannot settle much below its step size, so the agreement
        // tolerance needs a finer rate than the relabeling default.
        let gd_config = InversionConfig {
            method: InversionMethod::GradientDescent,
            early_stop_tol: 1e-8,
            lr: 0.002,
            ..Default::default()
        };
        let gd = invert_numeric_state(&policy, &dyn_, &s, &targets, &scale, &gd_config, &mut rng)
            .expect("gd inversion");
        // CEM's terminal precision is set by the variance floor; extra
        // samples and patience keep the best draw within the agreement
        // tolerance.
        let cem_config = InversionConfig {
            method: InversionMethod::Cem,
            early_stop_tol: 1e-9,
            cem_patience: 6,
            ..Default::default()
        };
        let cem = invert_numeric_state(&policy, &dyn_, &s, &targets, &scale, &cem_config, &mut rng)
            .expect("cem inversion");
        worst_loss = worst_loss.max(gd.loss).max(cem.loss);
        worst_gap = worst_gap
            .max((gd.u_hat.as_dvector() - analytic.u_hat.as_dvector()).norm())
            .max((cem.u_hat.as_dvector() - analytic.u_hat.as_dvector()).norm());
        done += 1;
    }
    let elapsed = started.elapsed();
    let passed =
        worst_exact < 1e-6 && worst_loss < 1e-3 && worst_gap < 1e-2 && elapsed.as_secs_f64() < 120.0;
    CriterionResult {
        id: 2,
        name: "round-trip identifiability",
        passed,
        details: format!(
            "analytic err {worst_exact:.2e}, numeric loss {worst_loss:.2e}, gap {worst_gap:.2e}, {elapsed:.2?}"
        ),
    }
}

/// Criterion 3: LP inverse consistency on logged steps from both network
/// environments, plus suboptimality detection on perturbed flows.
pub fn criterion_3() -> CriterionResult {
    let started = Instant::now();
    let mut details = Vec::new();
    let mut passed = true;

    // Routing: 100 logged steps under the proportional heuristic.
    {
        let env = RoutingEnv::new(RoutingConfig::default()).expect("routing env");
        let mut rng = SeededRng::new(303);
        let raw = collect_routing(&env, &RoutingBehavior::Proportional { window: 6 }, 4, &mut rng)
            .expect("collect");
        let steps: Vec<_> = raw.iter().take(100).collect();
        let mut worst_obj: f64 = 0.0;
        let mut worst_eps: f64 = 0.0;
        let mut perturbed_detections = 0;
        let mut perturbable = 0;
        for tr in &steps {
            let idle = &tr.s.values()[env.obs_idle_range()];
            let demand = &tr.s.values()[env.obs_demand_range()];
            let matching = env.match_passengers(idle, demand);
            let net = env.network(&matching.idle_after);
            let flows = tr.a.as_ref().expect("flows logged").values();
            let logged_cost = net.flow_cost(flows);
            let targets = flow_balance_inverse(&net, flows).expect("feasible flows");
            let resolved = rebalancing_policy(&net, &targets).expect("re-solve");
            worst_obj = worst_obj.max((net.flow_cost(&resolved) - logged_cost).abs());

            let form = SuboptimalityForm::rebalancing(&net, &targets);
            let out =
                duality_inverse(&form, &DVector::from_column_slice(flows)).expect("duality");
            worst_eps = worst_eps.max(out.epsilon);

            // Perturbed copy: one gratuitous unit around a 2-cycle.
            if matching.idle_after[0] >= 1.0 + net.outflow(0, flows)
                && matching.idle_after[1] >= 1.0 + net.outflow(1, flows)
            {
                perturbable += 1;
                let mut bad = flows.to_vec();
                for (k, e) in net.edges.iter().enumerate() {
                    if (e.from, e.to) == (0, 1) || (e.from, e.to) == (1, 0) {
                        bad[k] += 1.0;
                    }
                }
                let bad_targets = flow_balance_inverse(&net, &bad).expect("still feasible");
                let bad_form = SuboptimalityForm::rebalancing(&net, &bad_targets);
                let bad_out = duality_inverse(&bad_form, &DVector::from_column_slice(&bad))
                    .expect("duality on perturbed");
                if bad_out.epsilon > 1e-6 {
                    perturbed_detections += 1;
                }
            }
        }
        let ok = worst_obj < 1e-6
            && worst_eps < 1e-7
            && perturbable > 0
            && perturbed_detections == perturbable;
        passed &= ok;
        details.push(format!(
            "routing: obj gap {worst_obj:.2e}, eps {worst_eps:.2e}, {perturbed_detections}/{perturbable} perturbed flagged"
        ));
    }

    // Supply chain: 100 logged steps under order-up-to.
    {
        let env = SupplyChainEnv::new(SupplyChainConfig::one_w_three_s()).expect("supply env");
        let behavior = SupplyChainBehavior::OrderUpTo {
            warehouse_level: TUNED_WAREHOUSE_LEVEL,
            store_levels: TUNED_STORE_LEVELS.to_vec(),
        };
        let mut rng = SeededRng::new(304);
        let raw = collect_supply_chain(&env, &behavior, 4, &mut rng).expect("collect");
        let steps: Vec<_> = raw.iter().take(100).collect();
        let mut worst_obj: f64 = 0.0;
        let mut worst_eps: f64 = 0.0;
        let mut perturbed_flagged = 0;
        for tr in &steps {
            let inventories = &tr.s.values()[env.obs_inventory_range()];
            let demand = &tr.s.values()[env.obs_demand_range()];
            let backorders = &tr.s.values()[env.obs_backorder_range()];
            let consumption: Vec<f64> = (0..env.store_count())
                .map(|i| (demand[i] + backorders[i]).min(inventories[i + 1]))
                .collect();
            let net = NetworkProblem::one_warehouse(
                inventories[0],
                (env.config.storage_caps[0], env.config.production_cap),
                &inventories[1..],
                &env.config.storage_caps[1..],
                env.config.transport_cost,
            );
            let action = tr.a.as_ref().expect("flows logged").values();
            let flows = &action[..env.store_count()];
            let production = action[env.store_count()];

            // Re-solving with the reconstructed targets must leave zero
            // deviation: the logged flows attain them exactly.
            let direct = flow_balance_inverse(&net, flows).expect("feasible");
            let mut theta0 = vec![production];
            for &s in &net.stores() {
                theta0.push(direct[s]);
            }
            let plan = ohio_core::lp::supplychain_policy(
                &net,
                &theta0[..1],
                &theta0[1..],
                &consumption,
            )
            .expect("re-solve");
            worst_obj = worst_obj.max(plan.objective.abs());

            let form = SuboptimalityForm::supply_chain(&net, &consumption, &theta0);
            let mut x_star = flows.to_vec();
            x_star.push(production);
            let out = duality_inverse(&form, &DVector::from_column_slice(&x_star))
                .expect("duality");
            worst_eps = worst_eps.max(out.epsilon);

            // Perturbed copy: ship more than the warehouse holds. No
            // right-hand side rationalizes it, so reconstruction fails.
            let mut bad = x_star.clone();
            bad[0] += inventories[0] + 1.0;
            let bad_theta = {
                let mut t = theta0.clone();
                t[1] += inventories[0] + 1.0;
                t
            };
            let bad_form = SuboptimalityForm::supply_chain(&net, &consumption, &bad_theta);
            match duality_inverse(&bad_form, &DVector::from_column_slice(&bad)) {
                Err(_) => perturbed_flagged += 1,
                Ok(out) if out.epsilon > 1e-6 => perturbed_flagged += 1,
                Ok(_) => {}
            }
        }
        let ok = worst_obj < 1e-6 && worst_eps < 1e-7 && perturbed_flagged == steps.len();
        passed &= ok;
        details.push(format!(
            "supply chain: deviation {worst_obj:.2e}, eps {worst_eps:.2e}, {perturbed_flagged}/{} perturbed flagged",
            steps.len()
        ));
    }

    let elapsed = started.elapsed();
    passed &= elapsed.as_secs_f64() < 60.0;
    details.push(format!("{elapsed:.2?}"));
    CriterionResult {
        id: 3,
        name: "LP inverse consistency",
        passed,
        details: details.join("; "),
    }
}

/// Criterion 4: the LP low level keeps every hard constraint; bypassing it
/// with raw flows is caught.
pub fn criterion_4() -> CriterionResult {
    let started = Instant::now();
    let env = SupplyChainEnv::new(SupplyChainConfig::one_w_three_s()).expect("supply env");
    let behaviors: Vec<(&str, SupplyChainBehavior)> = vec![
        (
            "order_up_to",
            SupplyChainBehavior::OrderUpTo {
                warehouse_level: TUNED_WAREHOUSE_LEVEL,
                store_levels: TUNED_STORE_LEVELS.to_vec(),
            },
        ),
        ("random", SupplyChainBehavior::Random),
    ];
    let mut violations = 0usize;
    let mut episodes_run = 0usize;
    for (bi, (_, behavior)) in behaviors.iter().enumerate() {
        for ep in 0..50 {
            let mut rng = SeededRng::new(404).child((bi * 1000 + ep) as u64);
            let mut state = env.reset(&mut rng);
            episodes_run += 1;
            for _ in 0..env.config.episode_len {
                let u = behavior.act(&env, &state, &mut rng);
                match env.hierarchical_step(&state, &u, &mut rng) {
                    Ok((next, _)) => {
                        for node in 0..env.node_count() {
                            if next.inventories[node] > env.config.storage_caps[node] + 1e-7
                                || next.inventories[node] < -1e-9
                            {
                                violations += 1;
                            }
                        }
                        state = next;
                    }
                    Err(_) => violations += 1,
                }
            }
        }
    }

    // Bypass: write raw flows that overdraw the warehouse.
    let mut rng = SeededRng::new(405);
    let state = env.reset(&mut rng);
    let bypass_caught = matches!(
        env.step(&state, &[40.0, 20.0, 10.0], 0.0, &mut rng),
        Err(ohio_core::envs::EnvError::ConstraintViolation(_))
    );

    let elapsed = started.elapsed();
    let passed = violations == 0 && bypass_caught;
    CriterionResult {
        id: 4,
        name: "constraint safety is structural",
        passed,
        details: format!(
            "{violations} violations over {episodes_run} LP-driven episodes; bypass caught: {bypass_caught}; {elapsed:.2?}"
        ),
    }
}

fn base_pipeline_config(artifacts: &Path) -> (RunConfig, std::path::PathBuf) {
    let mut config = RunConfig::default();
    config.seed = 7;
    config.episodes = 250;
    config.env = EnvSection::Linear(pipeline_env_config());
    config.policy = PolicySection::HierarchicalExpert {
        noise_std: 0.3,
        macro_len: 5,
        log_actions: false,
    };
    config.relabel.relabel.t_abs = 5;
    config.learn.epochs = 200;
    (config, artifacts.to_path_buf())
}

/// Criterion 5: the Table-1-style comparison. Behavior-cloned policies on
/// inverted data recover expert-level scores; the observed-state baseline
/// lands far below under temporal abstraction.
pub fn criterion_5(artifacts: &Path) -> CriterionResult {
    let started = Instant::now();
    match criterion_5_inner(artifacts) {
        Ok((ohio_score, observed_score, elapsed)) => {
            let passed =
                ohio_score >= 90.0 && observed_score <= ohio_score - 30.0 && elapsed < 600.0;
            CriterionResult {
                id: 5,
                name: "hierarchical dataset recovery beats observed-state",
                passed,
                details: format!(
                    "inverted BC {ohio_score:.1}, observed-state BC {observed_score:.1} (normalized vs expert), {:.1}s",
                    elapsed
                ),
            }
        }
        Err(e) => CriterionResult {
            id: 5,
            name: "hierarchical dataset recovery beats observed-state",
            passed: false,
            details: format!("{e} after {:.1?}", started.elapsed()),
        },
    }
}

fn criterion_5_inner(artifacts: &Path) -> Result<(f64, f64, f64), CliError> {
    let started = Instant::now();
    let dir = artifacts.join("c5");
    let (mut config, _) = base_pipeline_config(artifacts);

    // Expert reference: the noise-free goal setter on the same protocol.
    let env = config.env.build()?;
    let setter = GoalSetter { phys_dim: 2, noise_std: 0.0 };
    let reference = evaluate_policy(&setter, &env, 50, 900, None)
        .map_err(CliError::from_learn)?
        .mean_return;

    let raw = dir.join("raw.jsonl");
    let manifest = cmd_collect(&config, &raw)?;
    if manifest.count != 250 * 40 {
        return Err(CliError::Data(format!(
            "expected 250 episodes x 40 steps = 10000 records, manifest says {}",
            manifest.count
        )));
    }

    // Inverted relabel -> BC -> eval.
    let relabeled = dir.join("relabeled.jsonl");
    config.relabel.relabel.baseline = RelabelBaseline::Ohio;
    cmd_relabel(&config, &raw, &relabeled)?;
    let model = dir.join("bc.json");
    cmd_train(&config, &relabeled, &model)?;
    config.eval.episodes = 50;
    config.eval.reference = Some(reference);
    let results = cmd_eval(&config, &model, &dir.join("results_ohio.json"))?;
    let ohio_score = results.normalized_score.expect("reference set");

    // Observed-state relabel -> BC -> eval.
    let observed = dir.join("relabeled_observed.jsonl");
    config.relabel.relabel.baseline = RelabelBaseline::ObservedState;
    cmd_relabel(&config, &raw, &observed)?;
    let observed_model = dir.join("bc_observed.json");
    cmd_train(&config, &observed, &observed_model)?;
    let observed_results = cmd_eval(&config, &observed_model, &dir.join("results_observed.json"))?;
    let observed_score = observed_results.normalized_score.expect("reference set");

    Ok((ohio_score, observed_score, started.elapsed().as_secs_f64()))
}

/// Criterion 6: numeric inversion shrugs off a 10x control-cost
/// perturbation of the low level and stays near the regularized-analytic
/// variant.
pub fn criterion_6() -> CriterionResult {
    let started = Instant::now();
    match criterion_6_inner() {
        Ok((base, perturbed, regularized)) => {
            let passed = perturbed >= base - 10.0 && (perturbed - regularized).abs() <= 15.0;
            CriterionResult {
                id: 6,
                name: "model-misspecification robustness",
                passed,
                details: format!(
                    "numeric BC: base {base:.1}, x10 control cost {perturbed:.1}, reg-analytic {regularized:.1}; {:.1?}",
                    started.elapsed()
                ),
            }
        }
        Err(e) => CriterionResult {
            id: 6,
            name: "model-misspecification robustness",
            passed: false,
            details: format!("{e} after {:.1?}", started.elapsed()),
        },
    }
}

fn criterion_6_inner() -> Result<(f64, f64, f64), CliError> {
    // A sharp base controller (R = 0.02) whose perturbed counterpart
    // (R x10) is still able to track; the relabel-time mismatch is the
    // controller, not the dynamics.
    let base_env_cfg = LinearEnvConfig {
        r_diag: vec![0.02],
        goal_lo: vec![-2.5, 0.0],
        goal_hi: vec![2.5, 0.0],
        start_lo: vec![-2.5, -0.2],
        start_hi: vec![2.5, 0.2],
        ..LinearEnvConfig::default()
    };
    let mut pert_env_cfg = base_env_cfg.clone();
    pert_env_cfg.r_diag = vec![base_env_cfg.r_diag[0] * 10.0];

    // Expert data with logged actions, collected once under the base
    // controller; the dynamics model is fit from this dataset.
    let mut collect_cfg = RunConfig::default();
    collect_cfg.seed = 11;
    collect_cfg.episodes = 120;
    collect_cfg.env = EnvSection::Linear(base_env_cfg.clone());
    collect_cfg.policy =
        PolicySection::HierarchicalExpert { noise_std: 0.2, macro_len: 5, log_actions: true };
    let tmp = tempdir_in_target()?;
    let raw = tmp.join("raw.jsonl");
    cmd_collect(&collect_cfg, &raw)?;

    let variant = |env_cfg: &LinearEnvConfig,
                   cost_scale_r: f64,
                   method: InversionMethod,
                   tag: &str|
     -> Result<f64, CliError> {
        let mut config = collect_cfg.clone();
        config.env = EnvSection::Linear(env_cfg.clone());
        config.relabel.dynamics = DynamicsSpec::Fit;
        config.relabel.cost_scale_r = cost_scale_r;
        config.relabel.relabel.inversion.method = method;
        config.relabel.relabel.t_abs = 5;
        // Overlapping windows for coverage; a bounded iteration budget plus
        // the ridge term keep ill-posed windows from producing huge
        // actions, and the loss filter drops what still fits poorly.
        config.relabel.relabel.overlapping = true;
        config.relabel.relabel.loss_threshold = 0.05;
        config.relabel.relabel.inversion.max_steps = 1000;
        if method == InversionMethod::GradientDescent {
            config.relabel.relabel.inversion.regularizer_weight = 2e-3;
        }
        let relabeled = tmp.join(format!("relabeled_{tag}.jsonl"));
        cmd_relabel(&config, &raw, &relabeled)?;

        // Reference: the noise-free expert deployed through this variant's
        // own low level.
        let env = config.env.build()?;
        let reference = evaluate_policy(&GoalSetter { phys_dim: 2, noise_std: 0.0 }, &env, 30, 901, None)
            .map_err(CliError::from_learn)?
            .mean_return;

        let mut total = 0.0;
        let seeds = 20;
        for seed in 0..seeds {
            config.seed = 500 + seed;
            config.learn.epochs = 60;
            let model = tmp.join(format!("bc_{tag}_{seed}.json"));
            cmd_train(&config, &relabeled, &model)?;
            config.eval.episodes = 20;
            config.eval.reference = Some(reference);
            let results = cmd_eval(&config, &model, &tmp.join(format!("res_{tag}_{seed}.json")))?;
            total += results.normalized_score.expect("reference set");
        }
        Ok(total / seeds as f64)
    };

    let base = variant(&base_env_cfg, 1.0, InversionMethod::GradientDescent, "base")?;
    let perturbed = variant(&pert_env_cfg, 10.0, InversionMethod::GradientDescent, "pert")?;
    let regularized = variant(&pert_env_cfg, 10.0, InversionMethod::AnalyticRegularized, "reg")?;
    Ok((base, perturbed, regularized))
}

fn tempdir_in_target() -> Result<std::path::PathBuf, CliError> {
    let dir = std::env::temp_dir().join(format!("ohio-accept-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

/// Criterion 7: network-environment learning sanity. Inverted BC stays
/// within 10 points of its behavior policy; AWR beats BC on mixed data.
pub fn criterion_7() -> CriterionResult {
    let started = Instant::now();
    match criterion_7_inner() {
        Ok((bc_score, awr_mean, bc_mean)) => {
            let passed = bc_score >= 90.0 && awr_mean >= bc_mean;
            CriterionResult {
                id: 7,
                name: "network-env learning sanity",
                passed,
                details: format!(
                    "BC vs behavior {bc_score:.1}; mixed-data 20-seed means AWR {awr_mean:.1} vs BC {bc_mean:.1}; {:.1?}",
                    started.elapsed()
                ),
            }
        }
        Err(e) => CriterionResult {
            id: 7,
            name: "network-env learning sanity",
            passed: false,
            details: format!("{e} after {:.1?}", started.elapsed()),
        },
    }
}

fn criterion_7_inner() -> Result<(f64, f64, f64), CliError> {
    let env = SupplyChainEnv::new(SupplyChainConfig::one_w_three_s())?;
    let behavior = SupplyChainBehavior::OrderUpTo {
        warehouse_level: TUNED_WAREHOUSE_LEVEL,
        store_levels: TUNED_STORE_LEVELS.to_vec(),
    };

    // Behavior reference on the evaluation protocol.
    let any_env = AnyEnv::SupplyChain(SupplyChainEnv::new(SupplyChainConfig::one_w_three_s())?);
    let actor = SupplyChainActor { env: &env, behavior: behavior.clone() };
    let reference = evaluate_policy(&actor, &any_env, 50, 902, None)
        .map_err(CliError::from_learn)?
        .mean_return;

    // Expert-only dataset -> flow-balance relabel -> BC.
    let mut rng = SeededRng::new(700);
    let raw = collect_supply_chain(&env, &behavior, 60, &mut rng)?;
    let (samples, _) = ohio_core::relabel::relabel_network_dataset(
        &raw,
        &ohio_core::relabel::NetworkEnvRef::SupplyChain(&env),
        NetworkInverseMethod::FlowBalance,
    )?;
    let learn_config = LearnerConfig { epochs: 150, seed: 7, ..Default::default() };
    let (bc_policy, _) = bc_train(&samples, &learn_config).map_err(CliError::from_learn)?;
    let bc_eval = evaluate_policy(&bc_policy, &any_env, 50, 903, Some(reference))
        .map_err(CliError::from_learn)?;
    let bc_score = bc_eval.normalized.expect("reference set");

    // Mixed 50/50 expert and random dataset.
    let mut noisy_rng = SeededRng::new(701);
    let mut noisy = collect_supply_chain(&env, &SupplyChainBehavior::Random, 30, &mut noisy_rng)?;
    for tr in noisy.iter_mut() {
        tr.episode += 10_000;
    }
    let mut mixed_raw = collect_supply_chain(&env, &behavior, 30, &mut SeededRng::new(702))?;
    mixed_raw.extend(noisy);
    let (mixed, _) = ohio_core::relabel::relabel_network_dataset(
        &mixed_raw,
        &ohio_core::relabel::NetworkEnvRef::SupplyChain(&env),
        NetworkInverseMethod::FlowBalance,
    )?;

    let seeds = 20;
    let mut awr_total = 0.0;
    let mut bc_total = 0.0;
    for seed in 0..seeds {
        let config = LearnerConfig {
            epochs: 80,
            value_sweeps: 10,
            value_epochs: 3,
            seed: 1000 + seed,
            ..Default::default()
        };
        let awr_config = LearnerConfig { algorithm: Algorithm::Awr, ..config.clone() };
        let (bc_mixed, _) = bc_train(&mixed, &config).map_err(CliError::from_learn)?;
        let (awr_mixed, _) = awr_train(&mixed, &awr_config).map_err(CliError::from_learn)?;
        let bc_r = evaluate_policy(&bc_mixed, &any_env, 20, 2000 + seed, None)
            .map_err(CliError::from_learn)?;
        let awr_r = evaluate_policy(&awr_mixed, &any_env, 20, 2000 + seed, None)
            .map_err(CliError::from_learn)?;
        bc_total += bc_r.mean_return;
        awr_total += awr_r.mean_return;
    }
    Ok((bc_score, awr_total / seeds as f64, bc_total / seeds as f64))
}

/// Criterion 8: the numerics suite.
pub fn criterion_8() -> CriterionResult {
    let started = Instant::now();
    let mut details = Vec::new();
    let mut passed = true;

    // Gradient check across random nets and batches.
    {
        let mut worst: f64 = 0.0;
        for seed in 0..10 {
            let mut rng = SeededRng::new(800 + seed);
            let mut net = Mlp::new(&[4, 6, 3], HeadKind::Linear, &mut rng);
            let x = DMatrix::from_fn(4, 5, |_, _| rng.normal());
            let y = DMatrix::from_fn(3, 5, |_, _| rng.normal());
            let (_, gw, gb) = mlp_forward_backward(&net, &x, &y, None, LossKind::Mse);
            let mut analytic: Vec<f64> = Vec::new();
            for l in 0..net.weights.len() {
                analytic.extend(gw[l].iter());
                analytic.extend(gb[l].iter());
            }
            let params = net.params_flat();
            let eps = 1e-6;
            for k in 0..params.len() {
                let mut hi = params.clone();
                let mut lo = params.clone();
                hi[k] += eps;
                lo[k] -= eps;
                net.set_params_flat(&hi);
                let (lh, _, _) = mlp_forward_backward(&net, &x, &y, None, LossKind::Mse);
                net.set_params_flat(&lo);
                let (ll, _, _) = mlp_forward_backward(&net, &x, &y, None, LossKind::Mse);
                let fd = (lh - ll) / (2.0 * eps);
                let denom = fd.abs().max(analytic[k].abs()).max(1e-6);
                worst = worst.max((fd - analytic[k]).abs() / denom);
            }
            net.set_params_flat(&params);
        }
        passed &= worst < 1e-4;
        details.push(format!("grad check {worst:.2e}"));
    }

    // Riccati symmetry and positive semidefiniteness.
    {
        let mut rng = SeededRng::new(808);
        let mut worst_asym: f64 = 0.0;
        let mut worst_eig: f64 = 0.0;
        for _ in 0..50 {
            let n = 2 + rng.below(3);
            let m = 1 + rng.below(2);
            let a = DMatrix::from_fn(n, n, |_, _| rng.normal());
            let b = DMatrix::from_fn(n, m, |_, _| rng.normal());
            let g = DMatrix::from_fn(n, n, |_, _| rng.normal());
            let q = &g * g.transpose();
            let r = DMatrix::from_fn(m, m, |i, j| if i == j { rng.uniform() } else { 0.0 });
            let dyn_ = ohio_core::control::LinearDynamics::new(a, b, DVector::zeros(n)).unwrap();
            if let Ok(sched) = riccati_gains(&dyn_, &CostMatrices::tracking(q, r), 6) {
                for p in &sched.ps {
                    worst_asym = worst_asym.max((p - p.transpose()).abs().max());
                    worst_eig = worst_eig.min(p.clone().symmetric_eigen().eigenvalues.min());
                }
            }
        }
        passed &= worst_asym < 1e-9 && worst_eig > -1e-9;
        details.push(format!("riccati asym {worst_asym:.2e}, min eig {worst_eig:.2e}"));
    }

    // Simplex equals brute-force vertex enumeration on the small corpus.
    {
        let mut rng = SeededRng::new(809);
        let mut worst: f64 = 0.0;
        let mut compared = 0;
        while compared < 60 {
            let n = 2 + rng.below(5);
            let mut p = LpProblem::minimize(
                &(0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect::<Vec<_>>(),
            );
            for _ in 0..(1 + rng.below(3)) {
                let coeffs: Vec<(usize, f64)> =
                    (0..n).map(|j| (j, rng.uniform_in(-1.0, 1.0))).collect();
                p.add_ub_row(&coeffs, rng.uniform_in(0.0, 2.0));
            }
            for j in 0..n {
                p = p.with_bounds(j, 0.0, rng.uniform_in(1.0, 3.0));
            }
            let sol = solve_lp(&p).expect("solve");
            match (sol.status, vertex_enumeration_optimum(&p)) {
                (LpStatus::Optimal, Some(best)) => {
                    worst = worst.max((sol.objective_value - best).abs());
                    compared += 1;
                }
                (LpStatus::Infeasible, None) => compared += 1,
                (status, oracle) => {
                    passed = false;
                    details.push(format!("simplex {status:?} vs oracle {oracle:?}"));
                    compared += 1;
                }
            }
        }
        passed &= worst < 1e-8;
        details.push(format!("simplex vs vertices {worst:.2e}"));
    }

    // Expectile of {0, 1} at tau = 0.9.
    {
        let v = expectile_of(&[0.0, 1.0], 0.9);
        passed &= (v - 0.9).abs() < 1e-6;
        details.push(format!("expectile {v:.8}"));
    }

    details.push(format!("{:.2?}", started.elapsed()));
    CriterionResult { id: 8, name: "numerics suite", passed, details: details.join("; ") }
}

/// Independent oracle: enumerate basic solutions from all constraint/bound
/// combinations and keep the best feasible objective.
fn vertex_enumeration_optimum(p: &LpProblem) -> Option<f64> {
    let n = p.num_vars();
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    for i in 0..p.a_ub.nrows() {
        rows.push((p.a_ub.row(i).transpose(), p.b_ub[i]));
    }
    for i in 0..p.a_eq.nrows() {
        rows.push((p.a_eq.row(i).transpose(), p.b_eq[i]));
    }
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        if p.lo[j].is_finite() {
            rows.push((e.clone(), p.lo[j]));
        }
        if p.hi[j].is_finite() {
            rows.push((e, p.hi[j]));
        }
    }
    if rows.len() < n {
        return None;
    }
    let feasible = |x: &DVector<f64>| {
        (0..p.a_ub.nrows()).all(|i| p.a_ub.row(i).transpose().dot(x) <= p.b_ub[i] + 1e-8)
            && (0..p.a_eq.nrows())
                .all(|i| (p.a_eq.row(i).transpose().dot(x) - p.b_eq[i]).abs() <= 1e-8)
            && (0..n).all(|j| x[j] >= p.lo[j] - 1e-8 && x[j] <= p.hi[j] + 1e-8)
    };
    let mut best: Option<f64> = None;
    let k = rows.len();
    let mut choice: Vec<usize> = (0..n).collect();
    loop {
        let mut a = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        for (r, &idx) in choice.iter().enumerate() {
            a.row_mut(r).copy_from(&rows[idx].0.transpose());
            b[r] = rows[idx].1;
        }
        if let Some(inv) = a.try_inverse() {
            let x = inv * &b;
            if x.iter().all(|v| v.is_finite()) && feasible(&x) {
                let obj = p.objective.dot(&x);
                best = Some(best.map_or(obj, |cur: f64| cur.min(obj)));
            }
        }
        let mut i = n;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if choice[i] != i + k - n {
                choice[i] += 1;
                for j in i + 1..n {
                    choice[j] = choice[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Criterion 9: the pipeline is byte-deterministic under OHIO_SEED=7.
pub fn criterion_9(artifacts: &Path) -> CriterionResult {
    let started = Instant::now();
    match criterion_9_inner(artifacts) {
        Ok(compared) => CriterionResult {
            id: 9,
            name: "byte-identical reruns under OHIO_SEED=7",
            passed: true,
            details: format!("{compared} artifact pairs identical; {:.1?}", started.elapsed()),
        },
        Err(e) => CriterionResult {
            id: 9,
            name: "byte-identical reruns under OHIO_SEED=7",
            passed: false,
            details: e.to_string(),
        },
    }
}

fn criterion_9_inner(artifacts: &Path) -> Result<usize, CliError> {
    // Seed resolution goes through the same path the CLI uses for the
    // OHIO_SEED environment variable.
    let mut config = RunConfig::resolve(None, Some(7), &[])?;
    config.episodes = 30;
    config.env = EnvSection::Linear(pipeline_env_config());
    config.policy =
        PolicySection::HierarchicalExpert { noise_std: 0.3, macro_len: 5, log_actions: false };
    config.learn.epochs = 40;
    config.eval.episodes = 10;
    config.eval.reference = Some(1.0);

    let run = |dir: &Path| -> Result<(), CliError> {
        let raw = dir.join("raw.jsonl");
        cmd_collect(&config, &raw)?;
        let relabeled = dir.join("relabeled.jsonl");
        cmd_relabel(&config, &raw, &relabeled)?;
        let model = dir.join("model.json");
        cmd_train(&config, &relabeled, &model)?;
        cmd_eval(&config, &model, &dir.join("results.json"))?;
        Ok(())
    };
    let dir1 = artifacts.join("c9/run1");
    let dir2 = artifacts.join("c9/run2");
    run(&dir1)?;
    run(&dir2)?;

    let mut compared = 0;
    for name in ["raw.jsonl", "raw.jsonl.manifest.json", "relabeled.jsonl", "model.json", "results.json"] {
        let a = std::fs::read(dir1.join(name))
            .map_err(|e| CliError::Io(format!("{name}: {e}")))?;
        let b = std::fs::read(dir2.join(name))
            .map_err(|e| CliError::Io(format!("{name}: {e}")))?;
        if a != b {
            return Err(CliError::Data(format!("{name} differs between reruns")));
        }
        compared += 1;
    }
    Ok(compared)
}

/// The proportional heuristic and dispersion collectors double as smoke
/// checks for routing data used by criterion 3.
pub fn routing_smoke() -> Result<(), CliError> {
    let env = RoutingEnv::new(RoutingConfig::default())?;
    let mut rng = SeededRng::new(1);
    let data = collect_routing(&env, &RoutingBehavior::Dispersion, 1, &mut rng)?;
    if data.len() != env.config.episode_len {
        return Err(CliError::Data("unexpected routing episode length".into()));
    }
    let u = HighAction::distribution(vec![0.25; 4]).map_err(|e| CliError::Data(e.to_string()))?;
    let state = env.reset(&mut rng);
    env.hierarchical_step(&state, &u, &mut rng)?;
    Ok(())
}
