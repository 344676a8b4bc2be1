use std::sync::OnceLock;

use nalgebra::{Isometry3, Matrix2, Translation3, UnitQuaternion, Vector2, Vector3};
use proptest::prelude::*;

use reach_intent::abc::{evaluate, kernel_weights, prior_densities, read_ipos, write_ipos, GridSpec, InferenceConfig, InferenceGrid, Kernel};
use reach_intent::dataset::Dataset;
use reach_intent::kinematics::{nullspace_projector, pseudo_inverse, ArmModel, JointState, JointVector, NUM_JOINTS};
use reach_intent::priors::{default_proximity_prior, mixture, proximity_prior};
use reach_intent::scene::Scene;
use reach_intent::task_sim::{compute_metrics, run_policy, task_scene, Agent, Policy, TaskConfig};
use reach_intent::trajectory::{Simulator, TrajectorySource};

fn model() -> ArmModel {
    ArmModel::standard()
}

/// A configuration inside the joint limits, from unit-interval fractions.
fn theta_in_limits() -> impl Strategy<Value = JointVector> {
    proptest::array::uniform9(0.02f64..0.98).prop_map(|fractions| {
        let model = model();
        JointVector::from_fn(|i, _| {
            let l = &model.joint_limits[i];
            l.lower + fractions[i] * (l.upper - l.lower)
        })
    })
}

fn simulator_grid() -> &'static InferenceGrid {
    static GRID: OnceLock<InferenceGrid> = OnceLock::new();
    GRID.get_or_init(|| {
        let mut grid = InferenceGrid::new(GridSpec::default()).unwrap();
        grid.rebuild(&Simulator::standard(Scene::empty())).unwrap();
        grid
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn jacobian_matches_forward_kinematics(theta in theta_in_limits()) {
        let model = model();
        let (_, jac) = model.jacobian(&theta).unwrap();
        let h = 1e-6;
        for i in 0..NUM_JOINTS {
            let (mut up, mut down) = (theta, theta);
            up[i] += h;
            down[i] -= h;
            let fd = (model.forward_kinematics(&up).unwrap() - model.forward_kinematics(&down).unwrap()) / (2.0 * h);
            prop_assert!((fd - jac.column(i)).amax() <= 1e-5);
        }
    }
}

proptest! {
    #[test]
    fn nullspace_projector_annihilates_and_is_idempotent(theta in theta_in_limits()) {
        let model = model();
        let (_, jac) = model.jacobian(&theta).unwrap();
        prop_assume!((jac * jac.transpose()).determinant() > 1e-6);
        let dagger = pseudo_inverse(&jac, 0.0).unwrap();
        let n = nullspace_projector(&dagger, &jac);
        prop_assert!((jac * n).amax() <= 1e-9);
        prop_assert!((n * n - n).amax() <= 1e-9);
    }

    #[test]
    fn forward_kinematics_follows_the_base(
        theta in theta_in_limits(),
        t in proptest::array::uniform3(-1.0f64..1.0),
        axis_angle in proptest::array::uniform3(-1.0f64..1.0),
    ) {
        let model = model();
        let hand = model.forward_kinematics(&theta).unwrap();
        let motion = Isometry3::from_parts(
            Translation3::new(t[0], t[1], t[2]),
            UnitQuaternion::from_scaled_axis(Vector3::from(axis_angle)),
        );
        let mut moved = model.clone();
        moved.base_pose = motion * model.base_pose;
        let expected = motion.transform_point(&hand.into()).coords;
        prop_assert!((moved.forward_kinematics(&theta).unwrap() - expected).amax() <= 1e-12);
    }

    #[test]
    fn integration_never_leaves_the_limits(
        theta in theta_in_limits(),
        velocity in proptest::array::uniform9(-50.0f64..50.0),
        dt in 1e-3f64..0.5,
    ) {
        let model = model();
        let mut state = JointState::at_rest(theta);
        for _ in 0..3 {
            state.integrate(&model, JointVector::from(velocity), dt);
            prop_assert!(model.within_limits(&state.theta));
        }
    }

    #[test]
    fn mixture_weights_are_scale_free(
        weights in proptest::array::uniform2(0.01f64..10.0),
        scale in 0.01f64..100.0,
        x in -0.6f64..0.6,
        y in 0.0f64..0.7,
    ) {
        let parts = || vec![
            default_proximity_prior(),
            proximity_prior(Vector2::new(0.2, 0.3), Matrix2::new(0.01, 0.002, 0.002, 0.02)).unwrap(),
        ];
        let a = mixture(parts(), &weights).unwrap();
        let b = mixture(parts(), &[weights[0] * scale, weights[1] * scale]).unwrap();
        let z = Vector2::new(x, y);
        prop_assert!((a.evaluate(&z) - b.evaluate(&z)).abs() <= 1e-9 * a.evaluate(&z).max(1.0));
    }

    #[test]
    fn kernel_weights_are_a_distribution(
        cells in proptest::collection::vec((0.0f64..5.0, 0.0f64..0.2), 1..60),
        epsilon in 1e-4f64..1.0,
        gaussian in any::<bool>(),
    ) {
        let (prior, losses): (Vec<f64>, Vec<f64>) = cells.into_iter().unzip();
        let kernel = if gaussian { Kernel::Gaussian } else { Kernel::Indicator };
        let (w, _) = kernel_weights(&prior, &losses, kernel, epsilon);
        prop_assert_eq!(w.len(), prior.len());
        prop_assert!(w.iter().all(|v| v.is_finite() && *v >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn ipos_round_trips(nx in 1usize..20, ny in 1usize..20, seed in any::<u64>()) {
        let weights: Vec<f32> = (0..nx * ny).map(|i| ((i as u64 ^ seed) % 1000) as f32 / 1000.0).collect();
        let mut bytes = Vec::new();
        write_ipos(&mut bytes, nx, ny, &weights).unwrap();
        let (rx, ry, back) = read_ipos(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!((rx, ry), (nx, ny));
        prop_assert_eq!(back, weights);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn dataset_round_trips_and_is_seeded(count in 1usize..20, seed in any::<u64>()) {
        let sim = Simulator::standard(Scene::empty());
        let data = Dataset::generate(&sim, count, seed).unwrap();
        prop_assert_eq!(&data, &Dataset::generate(&sim, count, seed).unwrap());
        let mut bytes = Vec::new();
        data.write(&mut bytes).unwrap();
        prop_assert_eq!(Dataset::read(&mut bytes.as_slice()).unwrap(), data);
    }

    #[test]
    fn each_agent_does_one_thing_at_a_time(seed in 0u64..1000, policy_index in 0usize..4) {
        let config = TaskConfig::default();
        let policy = Policy::ALL[policy_index];
        let scene = task_scene(config.objects, config.min_separation, seed).unwrap();
        let log = run_policy(policy, &scene, Some(simulator_grid()), &config, seed).unwrap();
        let metrics = compute_metrics(&log).unwrap();
        for (agent, idle) in [(Agent::Human, metrics.hi), (Agent::Robot, metrics.ri)] {
            let mut actions: Vec<_> = log.agent_actions(agent).collect();
            actions.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));
            for pair in actions.windows(2) {
                prop_assert!(pair[0].t_end <= pair[1].t_start + 1e-9);
            }
            for a in &actions {
                prop_assert!(a.t_start >= log.t0 - 1e-9 && a.t_end <= log.t_final + 1e-9);
            }
            // Time is partitioned into actions and idle.
            if let Some(idle) = idle {
                let busy: f64 = actions.iter().map(|a| a.duration()).sum();
                prop_assert!((busy + idle - metrics.t).abs() <= 1e-6);
            }
        }
        if policy == Policy::IntentPrediction {
            prop_assert!(metrics.fd.is_some());
        }
    }
}

/// On noiseless reaches the posterior sharpens as more of the trajectory is seen.
#[test]
fn posterior_entropy_mostly_decreases_with_observation() {
    let grid = simulator_grid();
    let spec = grid.spec;
    let sim = Simulator::standard(Scene::empty());
    let prior = prior_densities(&spec, &default_proximity_prior());
    let config = InferenceConfig::default();
    let (mut steps, mut non_increasing) = (0, 0);
    for k in 0..20 {
        let cell = spec.index(5 + (k * 37) % 120, 5 + (k * 23) % 60);
        let observed = sim.generate(&spec.target(cell)).unwrap();
        let mut previous = f64::INFINITY;
        for t in 1..=observed.len() {
            let entropy = evaluate(grid, &prior, &observed.prefix(t), &config).unwrap().entropy();
            if previous.is_finite() {
                steps += 1;
                non_increasing += (entropy <= previous + 1e-12) as usize;
            }
            previous = entropy;
        }
    }
    let share = non_increasing as f64 / steps as f64;
    assert!(share >= 0.95, "{non_increasing}/{steps}");
}

/// A negative mean delay implies at least one handover where the robot
/// started reaching before the human finished retreating.
#[test]
fn intent_runs_have_an_anticipating_handover() {
    let config = TaskConfig::default();
    for seed in 0..3 {
        let scene = task_scene(config.objects, config.min_separation, seed).unwrap();
        let log = run_policy(Policy::IntentPrediction, &scene, Some(simulator_grid()), &config, seed).unwrap();
        let fd = compute_metrics(&log).unwrap().fd.unwrap();
        assert!(fd < 0.0, "seed {seed}: mean FD {fd}");
    }
}
