//! Adaptive controller: accumulate statistics, re-solve the data-driven equation, act with an
//! ε-decreasing random choice of gain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dp::SolveSettings;
use crate::error::{Error, Result};
use crate::estimator::{self, CorrelationState, DataDrivenSolution};
use crate::linalg::Vector;
use crate::problem::{GainMatrix, PositiveProblem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub eps0: f64,
    pub alpha: f64,
    pub recompute_period: usize,
    pub lambda: f64,
    pub sigma0_scale: f64,
    pub seed: u64,
    pub condition_cap: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            eps0: 0.05,
            alpha: 0.99,
            recompute_period: 1,
            lambda: 1.0,
            sigma0_scale: estimator::DEFAULT_SIGMA0_SCALE,
            seed: 0,
            condition_cap: estimator::DEFAULT_CONDITION_CAP,
        }
    }
}

impl ControllerConfig {
    pub fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eps0) || !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("eps0 {} and alpha {} must lie in [0, 1]", self.eps0, self.alpha)));
        }
        if self.recompute_period == 0 {
            return Err(Error::Config("recompute_period must be positive".into()));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config(format!("lambda {} outside (0, 1]", self.lambda)));
        }
        if !(self.sigma0_scale >= 0.0 && self.sigma0_scale.is_finite()) {
            return Err(Error::Config(format!("sigma0_scale {}", self.sigma0_scale)));
        }
        if !(self.condition_cap > 1.0) {
            return Err(Error::Config(format!("condition_cap {}", self.condition_cap)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub u: Vector,
    pub used_gain: GainMatrix,
    pub explored: bool,
}

#[derive(Debug, Clone)]
pub struct AdaptiveController {
    problem: PositiveProblem,
    config: ControllerConfig,
    solve: SolveSettings,
    state: CorrelationState,
    current_gain: GainMatrix,
    solution: Option<DataDrivenSolution>,
    fresh: bool,
    episode: usize,
    steps: u64,
    solves: u64,
    failures: u64,
    last_error: Option<Error>,
    rng: ChaCha8Rng,
}

impl AdaptiveController {
    /// Starts from `Σ(0) = σ₀ I`, whose data-driven solution is the zero gain; if that first solve
    /// fails the zero gain is used anyway.
    pub fn new(problem: PositiveProblem, config: ControllerConfig) -> Result<Self> {
        Self::with_settings(problem, config, SolveSettings::default())
    }

    pub fn with_settings(problem: PositiveProblem, config: ControllerConfig, solve: SolveSettings) -> Result<Self> {
        config.check()?;
        let state = CorrelationState::new(problem.n(), problem.m(), config.lambda, config.sigma0_scale)?;
        let current_gain = problem.zero_gain();
        let mut controller = Self {
            problem,
            config,
            solve,
            state,
            current_gain,
            solution: None,
            fresh: false,
            episode: 0,
            steps: 0,
            solves: 0,
            failures: 0,
            last_error: None,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        controller.recompute();
        Ok(controller)
    }

    pub fn problem(&self) -> &PositiveProblem {
        &self.problem
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn statistics(&self) -> &CorrelationState {
        &self.state
    }

    pub fn current_gain(&self) -> &GainMatrix {
        &self.current_gain
    }

    /// Latest successful data-driven solution.
    pub fn solution(&self) -> Option<&DataDrivenSolution> {
        self.solution.as_ref()
    }

    /// The solution behind the current gain, if it was computed from the current statistics.
    pub fn current_solution(&self) -> Option<&DataDrivenSolution> {
        self.solution.as_ref().filter(|_| self.fresh)
    }

    pub fn episode(&self) -> usize {
        self.episode
    }

    pub fn solves(&self) -> u64 {
        self.solves
    }

    pub fn failures(&self) -> u64 {
        self.failures
    }

    pub fn last_error(&self) -> Option<&Error> {
        self.last_error.as_ref()
    }

    /// `ε = ε₀ α^h`.
    pub fn epsilon(&self) -> f64 {
        self.config.eps0 * self.config.alpha.powi(self.episode as i32)
    }

    /// With probability ε a uniformly random feasible gain, otherwise the current one; `u = K x`.
    pub fn act(&mut self, x: &Vector) -> Result<Action> {
        if x.len() != self.problem.n() {
            return Err(Error::Dimension(format!("state of length {}, expected {}", x.len(), self.problem.n())));
        }
        if x.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput("state must be finite and nonnegative".into()));
        }
        let explored = self.rng.random::<f64>() < self.epsilon();
        let used_gain = if explored {
            self.problem.random_gain_with(&mut self.rng)
        } else {
            self.current_gain.clone()
        };
        let u = used_gain.apply(x);
        Ok(Action { u, used_gain, explored })
    }

    /// Records the transition; every `recompute_period` steps re-solves the data-driven equation.
    /// Failures keep the current gain and are counted, never surfaced.
    pub fn observe(&mut self, x: &Vector, u: &Vector, x_next: &Vector) {
        if let Err(e) = self.state.update(x, u, x_next) {
            log::warn!("rejected sample: {e}");
            self.fresh = false;
            self.record_failure(e);
            return;
        }
        self.steps += 1;
        self.fresh = false;
        if self.steps % self.config.recompute_period as u64 == 0 {
            self.recompute();
        }
    }

    /// Re-solves from the current statistics, warm-started from the previous solution.
    pub fn recompute(&mut self) {
        self.solves += 1;
        let warm = self.solution.as_ref().map(|s| &s.q);
        match estimator::solve_data_driven(&self.state, &self.problem, &self.solve, self.config.condition_cap, warm) {
            Ok(sol) => {
                self.current_gain = sol.gain.clone();
                self.solution = Some(sol);
                self.fresh = true;
            }
            Err(e) => {
                log::debug!("data-driven solve failed at step {}: {e}", self.steps);
                self.record_failure(e);
            }
        }
    }

    fn record_failure(&mut self, e: Error) {
        self.failures += 1;
        self.last_error = Some(e);
    }

    /// Advances the episode counter; statistics and gain carry over.
    pub fn end_episode(&mut self) {
        self.episode += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::brute_force_p;
    use crate::fixtures::{ssp3_initial_state, ssp3_problem};

    fn controller(eps0: f64) -> AdaptiveController {
        AdaptiveController::new(ssp3_problem(), ControllerConfig { eps0, seed: 7, ..Default::default() }).unwrap()
    }

    #[test]
    fn zero_exploration_uses_current_gain() {
        let mut c = controller(0.0);
        let x = Vector::from_vec(vec![0.3, 0.2, 0.5]);
        for _ in 0..100 {
            let a = c.act(&x).unwrap();
            assert!(!a.explored);
            assert_eq!(a.u, c.current_gain().apply(&x));
        }
    }

    #[test]
    fn zero_state_gives_zero_input() {
        let mut c = controller(1.0);
        for _ in 0..50 {
            assert!(c.act(&Vector::zeros(3)).unwrap().u.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn negative_state_rejected() {
        let mut c = controller(0.05);
        assert!(c.act(&Vector::from_vec(vec![0.1, -1e-9, 0.0])).is_err());
    }

    #[test]
    fn exploration_frequency() {
        let mut c = controller(0.05);
        let x = ssp3_initial_state();
        let explored = (0..10_000).filter(|_| c.act(&x).unwrap().explored).count();
        assert!((explored as f64 / 1e4 - 0.05).abs() < 0.01);
    }

    #[test]
    fn epsilon_schedule() {
        let mut c = controller(0.05);
        assert_eq!(c.epsilon(), 0.05);
        c.end_episode();
        assert!((c.epsilon() - 0.0495).abs() < 1e-15);
        for _ in 1..1000 {
            c.end_episode();
        }
        assert!((c.epsilon() - 0.05 * 0.99f64.powi(1000)).abs() < 1e-18);
        assert!((c.epsilon() - 2.16e-6).abs() < 1e-8);
    }

    #[test]
    fn end_episode_keeps_statistics() {
        let mut c = controller(0.05);
        let x = ssp3_initial_state();
        let a = c.act(&x).unwrap();
        let next = c.problem().a() * &x + c.problem().b() * &a.u;
        c.observe(&x, &a.u, &next);
        let before = c.statistics().clone();
        let gain = c.current_gain().clone();
        c.end_episode();
        assert_eq!(c.statistics(), &before);
        assert_eq!(c.current_gain(), &gain);
    }

    #[test]
    fn noise_free_learning_reaches_optimal_gain() {
        let p = ssp3_problem();
        let optimal = brute_force_p(&p).unwrap().gain;
        let mut c = AdaptiveController::new(p.clone(), ControllerConfig { eps0: 0.5, alpha: 0.97, seed: 1, ..Default::default() })
            .unwrap();
        let mut settled_at = None;
        for episode in 0..60 {
            let mut x = ssp3_initial_state();
            for _ in 0..30 {
                let a = c.act(&x).unwrap();
                let next = p.a() * &x + p.b() * &a.u;
                c.observe(&x, &a.u, &next);
                x = next;
                if c.current_gain() == &optimal {
                    settled_at.get_or_insert(episode);
                } else {
                    assert!(settled_at.is_none(), "gain left the optimum after settling");
                }
            }
            c.end_episode();
        }
        assert!(settled_at.is_some());
    }

    #[test]
    fn failed_solve_keeps_gain() {
        let p = ssp3_problem();
        let mut c = AdaptiveController::new(p.clone(), ControllerConfig { sigma0_scale: 0.0, seed: 2, ..Default::default() })
            .unwrap();
        // the initial solve on Σ(0) = 0 already fails
        assert_eq!(c.failures(), 1);
        let gain = c.current_gain().clone();
        let x = ssp3_initial_state();
        let u = Vector::zeros(4);
        c.observe(&x, &u, &(p.a() * &x));
        assert_eq!(c.current_gain(), &gain);
        assert_eq!(c.failures(), 2);
        assert!(c.current_solution().is_none());
        assert!(matches!(c.last_error(), Some(Error::InsufficientExcitation { .. })));
    }

    #[test]
    fn batch_and_online_statistics_agree() {
        let p = ssp3_problem();
        let mut c = controller(0.3);
        let mut batch = CorrelationState::new(3, 4, 1.0, 1e-6).unwrap();
        let mut x = ssp3_initial_state();
        for _ in 0..40 {
            let a = c.act(&x).unwrap();
            let next = p.a() * &x + p.b() * &a.u + Vector::from_element(3, 0.001);
            c.observe(&x, &a.u, &next);
            batch.update(&x, &a.u, &next).unwrap();
            x = next;
        }
        assert_eq!(c.statistics(), &batch);
    }

    #[test]
    fn initial_solution_is_zero_gain() {
        let c = controller(0.05);
        let sol = c.current_solution().unwrap();
        assert_eq!(sol.gain, c.problem().zero_gain());
        assert_eq!(sol.q.stacked(), c.problem().stacked_costs());
    }

    #[test]
    fn same_seed_same_actions() {
        let run = || {
            let mut c = controller(0.5);
            (0..200).map(|_| c.act(&ssp3_initial_state()).unwrap().used_gain).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn bad_config_rejected() {
        let bad = ControllerConfig { recompute_period: 0, ..Default::default() };
        assert!(AdaptiveController::new(ssp3_problem(), bad).unwrap_err().is_config());
    }
}
