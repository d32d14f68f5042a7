use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use posctl::controller::ControllerConfig;
use posctl::fixtures;
use posctl::harness::{self, Algorithm, Disturbance, ExperimentConfig};
use posctl::ssp::{self, QLearningConfig, QTable};

#[test]
fn q_learning_finds_the_exact_policy() {
    let instance = fixtures::ssp3_mdp();
    let exact = ssp::exact_ssp_value(&instance, 1e-13).unwrap();
    let cfg = QLearningConfig { eps0: 0.3, alpha: 1.0, ..Default::default() };
    let mut table = QTable::new(&instance);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for h in 0..10_000 {
        ssp::q_learning_episode(&instance, &mut table, cfg.epsilon(h), &cfg.step_size(), 1000, &mut rng);
    }
    let greedy = table.greedy_policy();
    assert_eq!(&greedy[..instance.n_states()], &exact.policy[..instance.n_states()]);
    for i in 0..instance.n_states() {
        assert!((table.state_value(i) - exact.values[i]).abs() < 0.25, "state {i}");
    }
}

fn noise_free(eps0: f64, episodes: usize) -> ExperimentConfig {
    ExperimentConfig {
        algorithms: vec![Algorithm::Adaptive],
        disturbance: Disturbance::None,
        controller: ControllerConfig { eps0, alpha: 1.0, ..Default::default() },
        termination_threshold: 1e-3,
        episodes,
        runs: 4,
        seed: 21,
        certify: true,
        ..Default::default()
    }
}

#[test]
fn noise_free_learning_drives_the_condition_to_zero() {
    let report = harness::regret_experiment(noise_free(0.5, 60)).unwrap();
    for run in &report.runs {
        let lhs: Vec<f64> = run.condition_lhs.iter().cloned().filter(|v| v.is_finite()).collect();
        assert!(!lhs.is_empty());
        for pair in lhs.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-6, "run {}: {:?}", run.run, pair);
        }
        assert!(*lhs.last().unwrap() < 1e-4, "run {} ends at {}", run.run, lhs.last().unwrap());
    }
    let c = report.condition.as_ref().unwrap();
    assert_eq!(c.final_fraction, 1.0);
    assert!(c.settled_from.is_some());
}

#[test]
fn noise_free_certificates_are_checked_and_hold() {
    let report = harness::regret_experiment(noise_free(0.5, 60)).unwrap();
    let t = &report.algorithms[0].certification;
    assert!(t.thm1_measured_checked > 0 && t.thm2_measured_checked > 0);
    assert!(t.windows_measured_checked > 0, "{t:?}");
    assert_eq!(t.violations(), 0, "{t:?}");
}

#[test]
fn replay_of_a_recorded_run_certifies_cleanly() {
    let replay = harness::simulate(noise_free(0.5, 20), 0).unwrap();
    let report = harness::replay_certification(&replay, 0.3, &Default::default()).unwrap();
    assert!(report.tally.steps > 0);
    assert!(report.tally.thm1_checked > 0);
    assert_eq!(report.tally.violations(), 0, "{:?}", report.tally);
}

#[test]
fn optimal_policy_regret_is_centered() {
    let cfg = ExperimentConfig {
        algorithms: vec![Algorithm::Optimal],
        episodes: 400,
        runs: 8,
        seed: 3,
        rho_monitor: None,
        ..Default::default()
    };
    let report = harness::regret_experiment(cfg).unwrap();
    let a = &report.algorithms[0];
    assert!(a.final_regret_ci[0] <= 0.0 && 0.0 <= a.final_regret_ci[1], "{:?}", a.final_regret_ci);
}
