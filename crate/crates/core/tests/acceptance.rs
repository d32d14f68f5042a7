//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each, and exits nonzero if
//! any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use posctl::certify::{self, Constants};
use posctl::controller::{AdaptiveController, ControllerConfig};
use posctl::dp::{self, LpSettings, PIterates, QIterates, SolveSettings};
use posctl::estimator::CorrelationState;
use posctl::fixtures;
use posctl::generate::{self, ProblemShape};
use posctl::harness::{self, Algorithm, ExperimentConfig, ExperimentReport};
use posctl::linalg::{self, Matrix, Vector};
use posctl::ssp;
use posctl::PositiveProblem;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random_instances(seed: u64, count: usize) -> Vec<PositiveProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| generate::random_problem(&mut rng, ProblemShape::default())).collect()
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut instances = vec![fixtures::ssp3_problem()];
    instances.extend(random_instances(101, 100));
    let mut worst: f64 = 0.0;
    let mut gain_mismatches = 0;
    let mut unique = 0;
    for p in &instances {
        let vi = dp::solve_p(p, &SolveSettings::default()).expect("finite value");
        let oracle = dp::brute_force_p(p).expect("oracle");
        worst = worst.max(linalg::vec_inf_norm(&(&vi.p - &oracle.p.p)));
        if oracle.unique {
            unique += 1;
            if dp::extract_gain(p, &vi.p) != oracle.gain {
                gain_mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-8 && gain_mismatches == 0 && elapsed < Duration::from_secs(10),
        format!(
            "{} instances, max |p_vi - p_oracle| = {worst:.2e}, gain mismatches {gain_mismatches}/{unique} unique, {:.2}s",
            instances.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn q_p_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    for p in random_instances(202, 100) {
        let op = p.model_operator();
        for (pk, (q, gain)) in PIterates::new(&p).zip(QIterates::new(&p, &op)).take(200) {
            worst = worst.max(linalg::vec_inf_norm(&(q.value_under(&gain) - pk)));
        }
    }
    outcome(worst <= 1e-12, format!("100 instances x 200 iterations, max deviation {worst:.2e}"))
}

fn solver_cross_check() -> Outcome {
    let mut instances = vec![fixtures::ssp3_problem()];
    instances.extend(random_instances(303, 50));
    let mut rng = ChaCha8Rng::seed_from_u64(304);
    let settings = SolveSettings::default();
    let mut worst_model: f64 = 0.0;
    let mut worst_data: f64 = 0.0;
    for p in &instances {
        let vi = dp::solve_q_model_based(p, &settings).expect("vi");
        let lp = dp::solve_q_lp(&p.model_operator(), p, &LpSettings::default()).expect("lp");
        worst_model = worst_model.max(linalg::vec_inf_norm(&(vi.q.stacked() - lp.stacked())));

        let sigma = generate::random_spd(&mut rng, p.n() + p.m());
        let bar = p.model_operator().transpose() * &sigma;
        let stats = CorrelationState::from_parts(sigma, bar, 1.0).expect("valid statistics");
        let dvi = posctl::estimator::solve_data_driven(&stats, p, &settings, 1e12, None).expect("data vi");
        let dlp = posctl::estimator::solve_data_driven_lp(&stats, p, &LpSettings::default(), 1e12).expect("data lp");
        worst_data = worst_data.max(linalg::vec_inf_norm(&(dvi.q.stacked() - dlp.q.stacked())));
    }
    outcome(
        worst_model <= 1e-6 && worst_data <= 1e-6,
        format!("{} instances, model operator {worst_model:.2e}, data operator {worst_data:.2e}", instances.len()),
    )
}

fn conversion_fidelity() -> Outcome {
    let instance = fixtures::ssp3_mdp();
    let converted = ssp::convert(&instance).expect("convert");
    let a = Matrix::from_row_slice(3, 3, &[0.4, 0.0, 0.0, 0.0, 0.6, 0.0, 0.4, 0.4, 0.4]);
    let b = Matrix::from_row_slice(3, 4, &[-0.4, 0.3, 0.0, 0.2, 0.4, -0.6, -0.5, 0.2, 0.0, 0.3, 0.0, -0.4]);
    let exact = converted.a() == &a
        && converted.b() == &b
        && converted.e() == &Matrix::identity(3, 3)
        && converted.s().as_slice() == [1.5, 1.5, 1.5]
        && converted.r().as_slice() == [0.5, 0.5, 0.5, 0.5]
        && converted.partition() == [1, 2, 1];
    let values = ssp::exact_ssp_value(&instance, 1e-13).expect("proper");
    let p = dp::solve_p(&converted, &SolveSettings::default()).expect("value");
    let gap = (values.values[instance.initial_state()] - p.p[0]).abs();
    outcome(exact && gap <= 1e-6, format!("fixture data reproduced exactly: {exact}, |J(i_init) - p_1| = {gap:.2e}"))
}

fn certified_runs() -> (ExperimentReport, Duration) {
    let start = Instant::now();
    let cfg = ExperimentConfig {
        algorithms: vec![Algorithm::Adaptive],
        episodes: 300,
        runs: 100,
        seed: 5,
        certify: true,
        ..Default::default()
    };
    (harness::regret_experiment(cfg).expect("certified benchmark"), start.elapsed())
}

fn envelope(report: &ExperimentReport) -> Outcome {
    let a = &report.algorithms[0];
    let t = &a.certification;
    outcome(
        t.thm1_violations == 0 && t.thm1_measured_violations == 0 && a.runs_excluded == 0,
        format!(
            "{} runs, {} steps, condition held on {} certifiable steps; envelope at rho=0.3: {} checks, {} violations; at measured rho: {} checks, {} violations",
            a.runs_included, t.steps, t.condition_held, t.thm1_checked, t.thm1_violations, t.thm1_measured_checked, t.thm1_measured_violations
        ),
    )
}

fn decrease_and_cost_bound(report: &ExperimentReport) -> Outcome {
    let t = &report.algorithms[0].certification;
    let problem = fixtures::ssp3_problem();
    let p = dp::solve_p(&problem, &SolveSettings::default()).expect("value").p;
    let beta = certify::beta_for(&p, problem.s());
    let c = Constants::new(&problem, beta, 0.0).expect("rho = 0");
    let collapse = c.alpha_check == 1.0
        && c.alpha_hat == 1.0
        && c.theta == 1.0
        && certify::corollary1_gamma(&problem, beta, 0.0) == Some(1.0);
    outcome(
        t.thm2_violations == 0
            && t.thm2_measured_violations == 0
            && t.window_violations == 0
            && t.windows_measured_violations == 0
            && collapse,
        format!(
            "decrease inequality: {} checks at rho=0.3, {} violations; cost-bound windows at rho=0.3: {} checked, {} vacuous (gamma {:?}), {} violations; at measured rho: {} checked, {} vacuous, {} violations; rho=0 collapse exact: {collapse}",
            t.thm2_checked,
            t.thm2_violations,
            t.windows_checked,
            t.windows_vacuous,
            report.gamma_at_monitor,
            t.window_violations,
            t.windows_measured_checked,
            t.windows_measured_vacuous,
            t.windows_measured_violations
        ),
    )
}

fn regret_benchmark() -> (ExperimentReport, Duration) {
    let start = Instant::now();
    let cfg = ExperimentConfig { episodes: 1000, runs: 20, seed: 7, ..Default::default() };
    (harness::regret_experiment(cfg).expect("regret benchmark"), start.elapsed())
}

fn regret_ordering(report: &ExperimentReport, elapsed: Duration) -> Outcome {
    let find = |alg| report.algorithms.iter().find(|a| a.algorithm == alg).expect("algorithm ran");
    let ad = find(Algorithm::Adaptive);
    let ql = find(Algorithm::Qlearning);
    outcome(
        ad.sublinear && ql.sublinear && ad.final_regret_mean < ql.final_regret_mean && elapsed < Duration::from_secs(300),
        format!(
            "R(1000): adaptive {:.3}, qlearning {:.3}; R(h)/h first/last quartile: adaptive {:.4}/{:.4}, qlearning {:.4}/{:.4}; {:.1}s",
            ad.final_regret_mean,
            ql.final_regret_mean,
            ad.first_quartile_rate,
            ad.last_quartile_rate,
            ql.first_quartile_rate,
            ql.last_quartile_rate,
            elapsed.as_secs_f64()
        ),
    )
}

fn condition_settles(report: &ExperimentReport) -> Outcome {
    let c = report.condition.as_ref().expect("monitored");
    let below = c.lhs.mean.iter().position(|&v| v <= c.rho);
    let reached_one = c.satisfied_fraction.iter().position(|&f| f == 1.0);
    let best = c.satisfied_fraction.iter().cloned().fold(0.0, f64::max);
    outcome(
        below.is_some() && reached_one.is_some(),
        format!(
            "rho={}, mean lhs first below rho at episode {:?}, final mean lhs {:.3}; satisfied fraction reaches 1 at {:?}, best {:.2}, final {:.2}",
            c.rho,
            below.map(|h| h + 1),
            c.final_lhs_mean,
            reached_one.map(|h| h + 1),
            best,
            c.final_fraction
        ),
    )
}

fn determinism() -> Outcome {
    let cfg = ExperimentConfig { episodes: 40, runs: 4, seed: 9, certify: true, ..Default::default() };
    let dirs = [tempfile::tempdir().expect("tmp"), tempfile::tempdir().expect("tmp")];
    for d in &dirs {
        let report = harness::regret_experiment(cfg.clone()).expect("benchmark");
        harness::write_outputs(&report, d.path()).expect("write");
        let replay = harness::simulate(cfg.clone(), 1).expect("simulate");
        let file = std::fs::File::create(d.path().join("trajectory.csv")).expect("create");
        harness::write_trajectory_csv(&replay, file).expect("write");
    }
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).expect("output exists");
    let names = ["regret.csv", "condition.csv", "summary.json", "trajectory.csv"];
    let same = names.iter().all(|f| read(dirs[0].path(), f) == read(dirs[1].path(), f));
    outcome(same, format!("{} identical across two invocations: {same}", names.join(", ")))
}

fn feasibility_fuzz() -> Outcome {
    const STEPS: usize = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut steps = 0;
    let mut violations = 0;
    let mut explored = 0;
    let mut negative = 0;
    let mut diverged = 0;
    let mut instances = 0u64;
    while steps < STEPS {
        let p = generate::random_problem(&mut rng, ProblemShape::default());
        let cfg = ControllerConfig { eps0: 0.3, alpha: 1.0, recompute_period: 20, seed: instances, ..Default::default() };
        let mut ctrl = AdaptiveController::new(p.clone(), cfg).expect("controller");
        instances += 1;
        let mut x = generate::random_state(&mut rng, p.n(), 2.0);
        for _ in 0..10_000 {
            let action = ctrl.act(&x).expect("nonnegative state");
            let u = &action.u;
            explored += usize::from(action.explored);
            let mut ok = u.iter().all(|&v| v >= -1e-12);
            for i in 0..p.n() {
                let used: f64 = p.block(i).map(|j| u[j]).sum();
                ok &= used <= p.e().row(i).transpose().dot(&x) + 1e-12;
            }
            violations += usize::from(!ok);
            let w = Vector::from_fn(p.n(), |_, _| 0.01 * rand::Rng::random::<f64>(&mut rng));
            let next = p.a() * &x + p.b() * u + w;
            ctrl.observe(&x, u, &next);
            let norm = linalg::vec_inf_norm(&next);
            negative += usize::from(next.min() < 0.0);
            diverged += usize::from(!(norm < 1e6));
            x = if norm < 0.05 || !(norm < 1e6) || next.min() < 0.0 {
                generate::random_state(&mut rng, p.n(), 2.0)
            } else {
                next
            };
            steps += 1;
        }
    }
    outcome(
        violations == 0,
        format!("{steps} controller steps on {instances} random instances ({explored} exploratory), {violations} infeasible inputs; restarts: {diverged} diverged, {negative} negative states"),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    results.push((1, "oracle equivalence", oracle_equivalence()));
    results.push((2, "q/p iterate equivalence", q_p_equivalence()));
    results.push((3, "value iteration vs linear program", solver_cross_check()));
    results.push((4, "SSP conversion fidelity", conversion_fidelity()));
    let (certified, _) = certified_runs();
    results.push((5, "value envelope under misspecification", envelope(&certified)));
    results.push((6, "decrease inequality and cost bound", decrease_and_cost_bound(&certified)));
    let (regret, elapsed) = regret_benchmark();
    results.push((7, "regret ordering and sublinearity", regret_ordering(&regret, elapsed)));
    results.push((8, "misspecification condition settles below rho", condition_settles(&regret)));
    results.push((9, "determinism", determinism()));
    results.push((10, "feasibility fuzzing", feasibility_fuzz()));

    let mut failed = 0;
    for (id, name, o) in &results {
        println!("criterion {id:>2} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
