//! Experiment engine: seeded episodic simulation, regret accounting, misspecification monitoring,
//! certificate replay and CSV output.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::{self, CostBoundStep};
use crate::controller::{Action, AdaptiveController, ControllerConfig};
use crate::dp::{self, SolveSettings};
use crate::error::{Error, Result};
use crate::estimator::{self, CorrelationState};
use crate::fixtures;
use crate::linalg::{self, Vector};
use crate::problem::{GainMatrix, PositiveProblem, ProblemDocument};
use crate::ssp::{self, QLearningConfig, QTable, SspInstance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Disturbance {
    None,
    Uniform { lo: f64, hi: f64 },
}

impl Default for Disturbance {
    fn default() -> Self {
        Disturbance::Uniform { lo: 0.0, hi: 0.01 }
    }
}

impl Disturbance {
    pub fn check(&self) -> Result<()> {
        match *self {
            Disturbance::None => Ok(()),
            Disturbance::Uniform { lo, hi } if lo.is_finite() && hi.is_finite() && lo <= hi && lo >= 0.0 => Ok(()),
            Disturbance::Uniform { lo, hi } => {
                Err(Error::Config(format!("uniform disturbance needs 0 <= lo <= hi, got [{lo}, {hi}]")))
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vector {
        match *self {
            Disturbance::None => Vector::zeros(n),
            Disturbance::Uniform { lo, hi } => Vector::from_fn(n, |_, _| lo + (hi - lo) * rng.random::<f64>()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Adaptive,
    Qlearning,
    Optimal,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Adaptive => "adaptive",
            Algorithm::Qlearning => "qlearning",
            Algorithm::Optimal => "optimal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Problem JSON; ignored when `ssp` is given.
    pub instance: Option<PathBuf>,
    /// SSP JSON, converted for the plant and used directly by Q-learning.
    pub ssp: Option<PathBuf>,
    pub initial_state: Option<Vec<f64>>,
    pub algorithms: Vec<Algorithm>,
    pub episodes: usize,
    pub max_episode_len: usize,
    pub termination_threshold: f64,
    pub disturbance: Disturbance,
    pub runs: usize,
    pub seed: u64,
    pub controller: ControllerConfig,
    pub qlearning: QLearningConfig,
    pub rho_monitor: Option<f64>,
    /// Record every step and replay it through the certificates.
    pub certify: bool,
    pub solve: SolveSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            instance: None,
            ssp: None,
            initial_state: None,
            algorithms: vec![Algorithm::Adaptive, Algorithm::Qlearning],
            episodes: 1000,
            max_episode_len: 1000,
            termination_threshold: 0.05,
            disturbance: Disturbance::default(),
            runs: 20,
            seed: 0,
            controller: ControllerConfig::default(),
            qlearning: QLearningConfig::default(),
            rho_monitor: Some(0.3),
            certify: false,
            solve: SolveSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON config; relative instance paths resolve against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.instance, &mut cfg.ssp].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        if self.episodes == 0 || self.runs == 0 || self.max_episode_len == 0 {
            return Err(Error::Config("episodes, runs and max_episode_len must be positive".into()));
        }
        if !(self.termination_threshold > 0.0) {
            return Err(Error::Config(format!("termination threshold {}", self.termination_threshold)));
        }
        if self.algorithms.is_empty() {
            return Err(Error::Config("no algorithm selected".into()));
        }
        if let Some(rho) = self.rho_monitor {
            if !(rho >= 0.0) {
                return Err(Error::Config(format!("rho_monitor {rho}")));
            }
        }
        self.disturbance.check()?;
        self.controller.check()
    }
}

/// A config resolved into instances and the model-based optimum.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub problem: PositiveProblem,
    pub ssp: Option<SspInstance>,
    pub x0: Vector,
    pub p: Vector,
    pub optimal_gain: GainMatrix,
    pub beta: f64,
    ssp_policy: Option<Vec<usize>>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.check()?;
        let (problem, ssp) = match (&config.ssp, &config.instance) {
            (Some(path), _) => {
                let ssp = SspInstance::load(path)?;
                (ssp::convert(&ssp)?, Some(ssp))
            }
            (None, Some(path)) => (PositiveProblem::load(path)?, None),
            (None, None) => {
                let ssp = fixtures::ssp3_mdp();
                (ssp::convert(&ssp)?, Some(ssp))
            }
        };
        let report = problem.validate();
        if !report.all_passed() {
            return Err(Error::Config(format!("instance violates the standing assumptions: {report:?}")));
        }
        let x0 = match (&config.initial_state, &ssp) {
            (Some(x), _) => Vector::from_vec(x.clone()),
            (None, Some(s)) => s.initial_distribution(),
            (None, None) => {
                let mut x = Vector::zeros(problem.n());
                x[0] = 1.0;
                x
            }
        };
        if x0.len() != problem.n() || x0.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("initial state must be a nonnegative vector of length n".into()));
        }
        if config.algorithms.contains(&Algorithm::Qlearning) && ssp.is_none() {
            return Err(Error::Config("Q-learning needs an SSP instance".into()));
        }
        let p = dp::solve_p(&problem, &config.solve)?.p;
        let optimal_gain = dp::extract_gain(&problem, &p);
        let beta = certify::beta_for(&p, problem.s());
        let ssp_policy = match &ssp {
            Some(s) if config.algorithms.contains(&Algorithm::Qlearning) => {
                Some(ssp::exact_ssp_value(s, 1e-12)?.policy)
            }
            _ => None,
        };
        Ok(Self { config, problem, ssp, x0, p, optimal_gain, beta, ssp_policy })
    }

    pub fn options(&self, record: bool) -> EpisodeOptions {
        EpisodeOptions {
            delta: self.config.termination_threshold,
            t_max: self.config.max_episode_len,
            record,
            condition_cap: self.config.controller.condition_cap,
        }
    }
}

/// Independent generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_PLANT: u64 = 1;
const STREAM_REFERENCE: u64 = 2;
const STREAM_QLEARNING: u64 = 3;
const STREAM_SSP_REFERENCE: u64 = 4;

pub trait Policy {
    fn act(&mut self, x: &Vector) -> Result<Action>;

    fn observe(&mut self, _x: &Vector, _u: &Vector, _x_next: &Vector) {}

    /// The gain in force and its `p(t)`, when they come from the current statistics.
    fn deployed(&self) -> Option<(&GainMatrix, &Vector)> {
        None
    }

    fn statistics(&self) -> Option<&CorrelationState> {
        None
    }
}

impl Policy for AdaptiveController {
    fn act(&mut self, x: &Vector) -> Result<Action> {
        AdaptiveController::act(self, x)
    }

    fn observe(&mut self, x: &Vector, u: &Vector, x_next: &Vector) {
        AdaptiveController::observe(self, x, u, x_next)
    }

    fn deployed(&self) -> Option<(&GainMatrix, &Vector)> {
        self.current_solution().map(|s| (&s.gain, &s.p_t))
    }

    fn statistics(&self) -> Option<&CorrelationState> {
        Some(AdaptiveController::statistics(self))
    }
}

#[derive(Debug, Clone)]
pub struct FixedGain(pub GainMatrix);

impl Policy for FixedGain {
    fn act(&mut self, x: &Vector) -> Result<Action> {
        Ok(Action { u: self.0.apply(x), used_gain: self.0.clone(), explored: false })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeOptions {
    pub delta: f64,
    pub t_max: usize,
    pub record: bool,
    pub condition_cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub cost: f64,
    pub used_gain: Vec<Option<usize>>,
    pub deployed_gain: Option<Vec<Option<usize>>>,
    pub p_t: Option<Vec<f64>>,
    /// Condition (15) left side on the statistics behind the deployed gain.
    pub lhs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub cost: f64,
    pub steps: usize,
    pub final_state: Vector,
    pub trace: Vec<StepRecord>,
}

/// Simulates `x⁺ = Ax + Bu + w` from `x0` until `‖x‖_∞ ≤ δ` or `t_max` steps, accumulating
/// `sᵀx + rᵀu`.
pub fn run_episode<P: Policy + ?Sized, R: Rng + ?Sized>(
    problem: &PositiveProblem,
    policy: &mut P,
    disturbance: &Disturbance,
    rng: &mut R,
    x0: &Vector,
    options: &EpisodeOptions,
    episode: usize,
) -> Result<Episode> {
    let mut x = x0.clone();
    let mut cost = 0.0;
    let mut trace = Vec::new();
    let mut t = 0;
    while t < options.t_max && linalg::vec_inf_norm(&x) > options.delta {
        let record = options.record.then(|| {
            let deployed = policy.deployed();
            let lhs = policy.statistics().and_then(|st| {
                estimator::misspec_condition(st, problem, 0.0, options.condition_cap).ok().map(|d| d.lhs)
            });
            (
                deployed.map(|(k, _)| k.selector().to_vec()),
                deployed.map(|(_, p)| p.iter().cloned().collect::<Vec<_>>()),
                lhs,
            )
        });
        let action = policy.act(&x).map_err(|_| Error::SimulationBlowUp { episode, step: t })?;
        let w = disturbance.sample(problem.n(), rng);
        let next = problem.a() * &x + problem.b() * &action.u + &w;
        let stage = problem.s().dot(&x) + problem.r().dot(&action.u);
        if !linalg::all_finite(next.iter()) || !stage.is_finite() {
            return Err(Error::SimulationBlowUp { episode, step: t });
        }
        cost += stage;
        if let Some((deployed_gain, p_t, lhs)) = record {
            trace.push(StepRecord {
                t,
                x: x.iter().cloned().collect(),
                u: action.u.iter().cloned().collect(),
                w: w.iter().cloned().collect(),
                cost: stage,
                used_gain: action.used_gain.selector().to_vec(),
                deployed_gain,
                p_t,
                lhs,
            });
        }
        policy.observe(&x, &action.u, &next);
        x = next;
        t += 1;
    }
    Ok(Episode { cost, steps: t, final_state: x, trace })
}

/// One optimal-policy rollout under its own disturbance stream.
pub fn optimal_reference_cost<R: Rng + ?Sized>(
    problem: &PositiveProblem,
    optimal_gain: &GainMatrix,
    disturbance: &Disturbance,
    rng: &mut R,
    x0: &Vector,
    options: &EpisodeOptions,
) -> Result<f64> {
    let options = EpisodeOptions { record: false, ..*options };
    Ok(run_episode(problem, &mut FixedGain(optimal_gain.clone()), disturbance, rng, x0, &options, 0)?.cost)
}

/// Counts of certificate checks over recorded steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertTally {
    pub steps: u64,
    /// Steps whose deployed gain was solved from the current statistics.
    pub certifiable_steps: u64,
    /// Certifiable steps with the condition satisfied at the monitored level.
    pub condition_held: u64,
    pub thm1_checked: u64,
    pub thm1_violations: u64,
    pub thm2_checked: u64,
    pub thm2_violations: u64,
    /// Same checks with `ρ` set to the measured left side.
    pub thm1_measured_checked: u64,
    pub thm1_measured_violations: u64,
    pub thm2_measured_checked: u64,
    pub thm2_measured_violations: u64,
    /// Cost-bound windows at the monitored level.
    pub windows_checked: u64,
    pub windows_vacuous: u64,
    pub window_violations: u64,
    /// Cost-bound windows with `ρ` = largest measured left side over the window.
    pub windows_measured_checked: u64,
    pub windows_measured_vacuous: u64,
    pub windows_measured_violations: u64,
    pub worst_thm1_margin: f64,
    pub worst_thm2_margin: f64,
    pub worst_window_slack: f64,
}

impl Default for CertTally {
    fn default() -> Self {
        Self {
            steps: 0,
            certifiable_steps: 0,
            condition_held: 0,
            thm1_checked: 0,
            thm1_violations: 0,
            thm2_checked: 0,
            thm2_violations: 0,
            thm1_measured_checked: 0,
            thm1_measured_violations: 0,
            thm2_measured_checked: 0,
            thm2_measured_violations: 0,
            windows_checked: 0,
            windows_vacuous: 0,
            window_violations: 0,
            windows_measured_checked: 0,
            windows_measured_vacuous: 0,
            windows_measured_violations: 0,
            worst_thm1_margin: f64::INFINITY,
            worst_thm2_margin: f64::INFINITY,
            worst_window_slack: f64::INFINITY,
        }
    }
}

impl CertTally {
    pub fn merge(&mut self, o: &CertTally) {
        self.steps += o.steps;
        self.certifiable_steps += o.certifiable_steps;
        self.condition_held += o.condition_held;
        self.thm1_checked += o.thm1_checked;
        self.thm1_violations += o.thm1_violations;
        self.thm2_checked += o.thm2_checked;
        self.thm2_violations += o.thm2_violations;
        self.thm1_measured_checked += o.thm1_measured_checked;
        self.thm1_measured_violations += o.thm1_measured_violations;
        self.thm2_measured_checked += o.thm2_measured_checked;
        self.thm2_measured_violations += o.thm2_measured_violations;
        self.windows_checked += o.windows_checked;
        self.windows_vacuous += o.windows_vacuous;
        self.window_violations += o.window_violations;
        self.windows_measured_checked += o.windows_measured_checked;
        self.windows_measured_vacuous += o.windows_measured_vacuous;
        self.windows_measured_violations += o.windows_measured_violations;
        self.worst_thm1_margin = self.worst_thm1_margin.min(o.worst_thm1_margin);
        self.worst_thm2_margin = self.worst_thm2_margin.min(o.worst_thm2_margin);
        self.worst_window_slack = self.worst_window_slack.min(o.worst_window_slack);
    }

    pub fn violations(&self) -> u64 {
        self.thm1_violations
            + self.thm2_violations
            + self.thm1_measured_violations
            + self.thm2_measured_violations
            + self.window_violations
            + self.windows_measured_violations
    }
}

struct CertStep {
    x: Vector,
    used: GainMatrix,
    deployed: GainMatrix,
    p_t: Vector,
    lhs: f64,
    w: Vector,
}

/// Replays one recorded episode through the certificates. Steps count as certifiable when the
/// deployed gain came from the statistics whose misspecification was measured.
pub fn certify_episode(
    problem: &PositiveProblem,
    p: &Vector,
    beta: f64,
    rho_monitor: f64,
    trace: &[StepRecord],
) -> Result<CertTally> {
    let mut tally = CertTally { steps: trace.len() as u64, ..Default::default() };
    let mut steps: Vec<Option<CertStep>> = Vec::with_capacity(trace.len());
    for rec in trace {
        let step = match (&rec.deployed_gain, &rec.p_t, rec.lhs) {
            (Some(k), Some(p_t), Some(lhs)) => Some(CertStep {
                x: Vector::from_column_slice(&rec.x),
                used: GainMatrix::from_selector(problem, &rec.used_gain)?,
                deployed: GainMatrix::from_selector(problem, k)?,
                p_t: Vector::from_column_slice(p_t),
                lhs,
                w: Vector::from_column_slice(&rec.w),
            }),
            _ => None,
        };
        steps.push(step);
    }

    for step in steps.iter().flatten() {
        tally.certifiable_steps += 1;
        let mut check = |rho: f64, measured: bool| {
            if rho * beta >= 1.0 {
                return;
            }
            let t1 = certify::theorem1_bounds(problem, p, &step.p_t, beta, rho).expect("hypothesis checked");
            let t2 = certify::theorem2_inequality(problem, p, &step.deployed, beta, rho).expect("hypothesis checked");
            tally.worst_thm1_margin = tally.worst_thm1_margin.min(t1.lower_margin.min(t1.upper_margin));
            tally.worst_thm2_margin = tally.worst_thm2_margin.min(t2.margin);
            let (c1, v1, c2, v2) = if measured {
                (
                    &mut tally.thm1_measured_checked,
                    &mut tally.thm1_measured_violations,
                    &mut tally.thm2_measured_checked,
                    &mut tally.thm2_measured_violations,
                )
            } else {
                (&mut tally.thm1_checked, &mut tally.thm1_violations, &mut tally.thm2_checked, &mut tally.thm2_violations)
            };
            *c1 += 1;
            *v1 += u64::from(!t1.holds);
            *c2 += 1;
            *v2 += u64::from(!t2.holds);
        };
        if step.lhs <= rho_monitor {
            check(rho_monitor, false);
        }
        check(step.lhs, true);
        if step.lhs <= rho_monitor {
            tally.condition_held += 1;
        }
    }

    // windows [t0, end) over which every step is certifiable
    let mut suffix_max = f64::NEG_INFINITY;
    for t0 in (0..steps.len()).rev() {
        let Some(step) = &steps[t0] else {
            break;
        };
        suffix_max = suffix_max.max(step.lhs);
        let window: Vec<CostBoundStep> = steps[t0..]
            .iter()
            .flatten()
            .map(|s| CostBoundStep {
                x: s.x.clone(),
                gain: s.deployed.matrix().clone(),
                epsilon: s.used.apply(&s.x) - s.deployed.apply(&s.x),
                w: s.w.clone(),
            })
            .collect();
        let mut check = |rho: f64, measured: bool| {
            let (checked, vacuous, violations) = if measured {
                (
                    &mut tally.windows_measured_checked,
                    &mut tally.windows_measured_vacuous,
                    &mut tally.windows_measured_violations,
                )
            } else {
                (&mut tally.windows_checked, &mut tally.windows_vacuous, &mut tally.window_violations)
            };
            match certify::corollary1_gamma(problem, beta, rho) {
                Some(gamma) => {
                    let bound = certify::corollary1_cost_bound(problem, &window, p, beta, gamma);
                    *checked += 1;
                    *violations += u64::from(!bound.holds);
                    tally.worst_window_slack = tally.worst_window_slack.min(bound.rhs - bound.lhs);
                }
                None => *vacuous += 1,
            }
        };
        if suffix_max <= rho_monitor {
            check(rho_monitor, false);
        }
        check(suffix_max, true);
    }
    Ok(tally)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub algorithm: Algorithm,
    pub episode_costs: Vec<f64>,
    pub reference_costs: Vec<f64>,
    pub episode_lengths: Vec<usize>,
    /// Condition left side at the end of each episode; NaN where it cannot be evaluated.
    pub condition_lhs: Vec<f64>,
    pub solver_failures: u64,
    pub certification: CertTally,
    pub excluded: Option<String>,
}

impl RunResult {
    /// `R(h) = Σ_{k ≤ h} (cost_k − reference_k)`.
    pub fn regret(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.episode_costs
            .iter()
            .zip(&self.reference_costs)
            .map(|(c, r)| {
                acc += c - r;
                acc
            })
            .collect()
    }
}

pub fn run_seed(base: u64, run: usize) -> u64 {
    base ^ run as u64
}

/// One run of one algorithm; a blow-up ends the run and marks it excluded.
pub fn run_once(exp: &Experiment, algorithm: Algorithm, run: usize) -> Result<RunResult> {
    let seed = run_seed(exp.config.seed, run);
    let mut result = RunResult {
        run,
        seed,
        algorithm,
        episode_costs: Vec::new(),
        reference_costs: Vec::new(),
        episode_lengths: Vec::new(),
        condition_lhs: Vec::new(),
        solver_failures: 0,
        certification: CertTally::default(),
        excluded: None,
    };
    let outcome = match algorithm {
        Algorithm::Adaptive => run_adaptive(exp, seed, &mut result),
        Algorithm::Optimal => run_fixed(exp, seed, &mut result),
        Algorithm::Qlearning => {
            run_qlearning(exp, seed, &mut result);
            Ok(())
        }
    };
    match outcome {
        Ok(()) => {}
        Err(e @ Error::SimulationBlowUp { .. }) => result.excluded = Some(e.to_string()),
        Err(e) => return Err(e),
    }
    Ok(result)
}

fn run_adaptive(exp: &Experiment, seed: u64, out: &mut RunResult) -> Result<()> {
    let cfg = &exp.config;
    let mut ctrl = AdaptiveController::with_settings(
        exp.problem.clone(),
        ControllerConfig { seed, ..cfg.controller },
        cfg.solve,
    )?;
    let mut plant = stream(seed, STREAM_PLANT);
    let mut reference = stream(seed, STREAM_REFERENCE);
    let options = exp.options(cfg.certify);
    let rho = cfg.rho_monitor.unwrap_or(0.0);
    for h in 0..cfg.episodes {
        let ep = run_episode(&exp.problem, &mut ctrl, &cfg.disturbance, &mut plant, &exp.x0, &options, h);
        out.solver_failures = ctrl.failures();
        let ep = ep?;
        let ref_cost = optimal_reference_cost(&exp.problem, &exp.optimal_gain, &cfg.disturbance, &mut reference, &exp.x0, &options)?;
        out.episode_costs.push(ep.cost);
        out.reference_costs.push(ref_cost);
        out.episode_lengths.push(ep.steps);
        let lhs = if cfg.rho_monitor.is_some() {
            estimator::misspec_condition(ctrl.statistics(), &exp.problem, rho, cfg.controller.condition_cap)
                .map_or(f64::NAN, |d| d.lhs)
        } else {
            f64::NAN
        };
        out.condition_lhs.push(lhs);
        if cfg.certify {
            let tally = certify_episode(&exp.problem, &exp.p, exp.beta, rho, &ep.trace)?;
            out.certification.merge(&tally);
        }
        ctrl.end_episode();
    }
    Ok(())
}

fn run_fixed(exp: &Experiment, seed: u64, out: &mut RunResult) -> Result<()> {
    let cfg = &exp.config;
    let mut policy = FixedGain(exp.optimal_gain.clone());
    let mut plant = stream(seed, STREAM_PLANT);
    let mut reference = stream(seed, STREAM_REFERENCE);
    let options = exp.options(false);
    for h in 0..cfg.episodes {
        let ep = run_episode(&exp.problem, &mut policy, &cfg.disturbance, &mut plant, &exp.x0, &options, h)?;
        let ref_cost = optimal_reference_cost(&exp.problem, &exp.optimal_gain, &cfg.disturbance, &mut reference, &exp.x0, &options)?;
        out.episode_costs.push(ep.cost);
        out.reference_costs.push(ref_cost);
        out.episode_lengths.push(ep.steps);
        out.condition_lhs.push(f64::NAN);
    }
    Ok(())
}

fn run_qlearning(exp: &Experiment, seed: u64, out: &mut RunResult) {
    let cfg = &exp.config;
    let ssp = exp.ssp.as_ref().expect("checked when the experiment was built");
    let policy = exp.ssp_policy.as_ref().expect("checked when the experiment was built");
    let mut table = QTable::new(ssp);
    let step = cfg.qlearning.step_size();
    let mut learner = stream(seed, STREAM_QLEARNING);
    let mut reference = stream(seed, STREAM_SSP_REFERENCE);
    for h in 0..cfg.episodes {
        let eps = cfg.qlearning.epsilon(h);
        let ep = ssp::q_learning_episode(ssp, &mut table, eps, &step, cfg.max_episode_len, &mut learner);
        let re = ssp::policy_episode(ssp, policy, cfg.max_episode_len, &mut reference);
        out.episode_costs.push(ep.cost);
        out.reference_costs.push(re.cost);
        out.episode_lengths.push(ep.steps);
        out.condition_lhs.push(f64::NAN);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Band {
    pub mean: Vec<f64>,
    pub ci_lo: Vec<f64>,
    pub ci_hi: Vec<f64>,
}

/// Per-index mean and `mean ± 1.96·sd/√k` across series, summed in series order.
pub fn band(series: &[&[f64]]) -> Band {
    let len = series.first().map_or(0, |s| s.len());
    let k = series.len() as f64;
    let mut out = Band { mean: vec![0.0; len], ci_lo: vec![0.0; len], ci_hi: vec![0.0; len] };
    for i in 0..len {
        let mean = series.iter().map(|s| s[i]).sum::<f64>() / k;
        let half = if series.len() > 1 {
            let var = series.iter().map(|s| (s[i] - mean).powi(2)).sum::<f64>() / (k - 1.0);
            1.96 * var.sqrt() / k.sqrt()
        } else {
            0.0
        };
        out.mean[i] = mean;
        out.ci_lo[i] = mean - half;
        out.ci_hi[i] = mean + half;
    }
    out
}

/// Mean of `R(h)/h` over the first and last quarter of the episodes.
pub fn quartile_rates(regret: &[f64]) -> (f64, f64) {
    let h = regret.len();
    let q = (h / 4).max(1);
    let rate = |range: std::ops::Range<usize>| {
        let len = range.len() as f64;
        range.map(|i| regret[i] / (i + 1) as f64).sum::<f64>() / len
    };
    (rate(0..q), rate(h - q..h))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlgorithmSummary {
    pub algorithm: Algorithm,
    pub runs_included: usize,
    pub runs_excluded: usize,
    pub exclusions: Vec<String>,
    pub final_regret_mean: f64,
    pub final_regret_ci: [f64; 2],
    pub first_quartile_rate: f64,
    pub last_quartile_rate: f64,
    pub sublinear: bool,
    pub mean_episode_cost: f64,
    pub mean_reference_cost: f64,
    pub solver_failures: u64,
    pub certification: CertTally,
    #[serde(skip)]
    pub regret: Band,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionSummary {
    pub rho: f64,
    /// First episode from which every run satisfies the condition through the last episode.
    pub settled_from: Option<usize>,
    pub final_fraction: f64,
    pub final_lhs_mean: f64,
    #[serde(skip)]
    pub lhs: Band,
    #[serde(skip)]
    pub satisfied_fraction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub p: Vec<f64>,
    pub optimal_gain: String,
    pub beta: f64,
    pub gamma_at_monitor: Option<f64>,
    pub algorithms: Vec<AlgorithmSummary>,
    pub condition: Option<ConditionSummary>,
    #[serde(skip)]
    pub runs: Vec<RunResult>,
}

/// All runs of all configured algorithms, in parallel over runs, reduced in run order.
pub fn regret_experiment(config: ExperimentConfig) -> Result<ExperimentReport> {
    let exp = Experiment::new(config)?;
    let cfg = &exp.config;
    let mut algorithms = Vec::new();
    let mut all_runs = Vec::new();
    let mut condition = None;
    for &algorithm in &cfg.algorithms {
        let runs: Vec<RunResult> = (0..cfg.runs)
            .into_par_iter()
            .map(|r| run_once(&exp, algorithm, r))
            .collect::<Result<_>>()?;
        let included: Vec<&RunResult> = runs.iter().filter(|r| r.excluded.is_none()).collect();
        let regrets: Vec<Vec<f64>> = included.iter().map(|r| r.regret()).collect();
        let regret = band(&regrets.iter().map(Vec::as_slice).collect::<Vec<_>>());
        let (first, last) = if regret.mean.is_empty() { (f64::NAN, f64::NAN) } else { quartile_rates(&regret.mean) };
        let mut certification = CertTally::default();
        for r in &included {
            certification.merge(&r.certification);
        }
        let mean_of = |f: &dyn Fn(&RunResult) -> f64| included.iter().map(|r| f(r)).sum::<f64>() / included.len() as f64;
        let final_idx = cfg.episodes - 1;
        algorithms.push(AlgorithmSummary {
            algorithm,
            runs_included: included.len(),
            runs_excluded: runs.len() - included.len(),
            exclusions: runs.iter().filter_map(|r| r.excluded.clone()).collect(),
            final_regret_mean: regret.mean.get(final_idx).copied().unwrap_or(f64::NAN),
            final_regret_ci: [
                regret.ci_lo.get(final_idx).copied().unwrap_or(f64::NAN),
                regret.ci_hi.get(final_idx).copied().unwrap_or(f64::NAN),
            ],
            first_quartile_rate: first,
            last_quartile_rate: last,
            sublinear: last < first,
            mean_episode_cost: mean_of(&|r| r.episode_costs.iter().sum::<f64>() / r.episode_costs.len() as f64),
            mean_reference_cost: mean_of(&|r| r.reference_costs.iter().sum::<f64>() / r.reference_costs.len() as f64),
            solver_failures: included.iter().map(|r| r.solver_failures).sum(),
            certification,
            regret,
        });
        if algorithm == Algorithm::Adaptive && condition.is_none() {
            if let Some(rho) = cfg.rho_monitor {
                condition = Some(condition_summary(&included, rho, cfg.episodes));
            }
        }
        all_runs.extend(runs);
    }
    let gamma_at_monitor = cfg.rho_monitor.and_then(|rho| certify::corollary1_gamma(&exp.problem, exp.beta, rho));
    Ok(ExperimentReport {
        config: exp.config.clone(),
        p: exp.p.iter().cloned().collect(),
        optimal_gain: exp.optimal_gain.to_string(),
        beta: exp.beta,
        gamma_at_monitor,
        algorithms,
        condition,
        runs: all_runs,
    })
}

fn condition_summary(runs: &[&RunResult], rho: f64, episodes: usize) -> ConditionSummary {
    let series: Vec<&[f64]> = runs.iter().map(|r| r.condition_lhs.as_slice()).collect();
    let lhs = band(&series);
    let satisfied_fraction: Vec<f64> = (0..episodes)
        .map(|h| runs.iter().filter(|r| r.condition_lhs[h] <= rho).count() as f64 / runs.len().max(1) as f64)
        .collect();
    let mut settled_from = None;
    for h in (0..episodes).rev() {
        if satisfied_fraction[h] == 1.0 {
            settled_from = Some(h);
        } else {
            break;
        }
    }
    ConditionSummary {
        rho,
        settled_from,
        final_fraction: satisfied_fraction.last().copied().unwrap_or(0.0),
        final_lhs_mean: lhs.mean.last().copied().unwrap_or(f64::NAN),
        lhs,
        satisfied_fraction,
    }
}

/// 17 significant digits.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_regret_csv<W: Write>(report: &ExperimentReport, mut w: W) -> Result<()> {
    let mut header = vec!["episode".to_string()];
    for a in &report.algorithms {
        let n = a.algorithm.name();
        header.extend([format!("mean_{n}"), format!("ci_lo_{n}"), format!("ci_hi_{n}")]);
    }
    writeln!(w, "{}", header.join(","))?;
    for h in 0..report.config.episodes {
        let mut row = vec![(h + 1).to_string()];
        for a in &report.algorithms {
            for v in [&a.regret.mean, &a.regret.ci_lo, &a.regret.ci_hi] {
                row.push(v.get(h).map_or_else(|| "NaN".to_string(), |&x| fmt_num(x)));
            }
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn write_condition_csv<W: Write>(summary: &ConditionSummary, mut w: W) -> Result<()> {
    writeln!(w, "episode,mean_lhs,ci_lo,ci_hi,satisfied_fraction")?;
    for h in 0..summary.satisfied_fraction.len() {
        writeln!(
            w,
            "{},{},{},{},{}",
            h + 1,
            fmt_num(summary.lhs.mean[h]),
            fmt_num(summary.lhs.ci_lo[h]),
            fmt_num(summary.lhs.ci_hi[h]),
            fmt_num(summary.satisfied_fraction[h])
        )?;
    }
    Ok(())
}

/// Writes `regret.csv`, `condition.csv` (when monitored) and `summary.json`.
pub fn write_outputs(report: &ExperimentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_regret_csv(report, std::io::BufWriter::new(std::fs::File::create(dir.join("regret.csv"))?))?;
    if let Some(c) = &report.condition {
        write_condition_csv(c, std::io::BufWriter::new(std::fs::File::create(dir.join("condition.csv"))?))?;
    }
    let mut summary = serde_json::to_string_pretty(report)?;
    summary.push('\n');
    std::fs::write(dir.join("summary.json"), summary)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub cost: f64,
    pub reference_cost: f64,
    pub steps: Vec<StepRecord>,
}

/// A single recorded adaptive run, replayable through the certificates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replay {
    pub problem: ProblemDocument,
    pub seed: u64,
    pub rho: f64,
    pub episodes: Vec<EpisodeRecord>,
}

/// One adaptive run with every step recorded.
pub fn simulate(config: ExperimentConfig, run: usize) -> Result<Replay> {
    let exp = Experiment::new(config)?;
    let cfg = &exp.config;
    let seed = run_seed(cfg.seed, run);
    let mut ctrl = AdaptiveController::with_settings(
        exp.problem.clone(),
        ControllerConfig { seed, ..cfg.controller },
        cfg.solve,
    )?;
    let mut plant = stream(seed, STREAM_PLANT);
    let mut reference = stream(seed, STREAM_REFERENCE);
    let options = exp.options(true);
    let mut episodes = Vec::with_capacity(cfg.episodes);
    for h in 0..cfg.episodes {
        let ep = run_episode(&exp.problem, &mut ctrl, &cfg.disturbance, &mut plant, &exp.x0, &options, h)?;
        let reference_cost =
            optimal_reference_cost(&exp.problem, &exp.optimal_gain, &cfg.disturbance, &mut reference, &exp.x0, &options)?;
        episodes.push(EpisodeRecord { episode: h, cost: ep.cost, reference_cost, steps: ep.trace });
        ctrl.end_episode();
    }
    Ok(Replay {
        problem: ProblemDocument::from(&exp.problem),
        seed,
        rho: cfg.rho_monitor.unwrap_or(0.0),
        episodes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub beta: f64,
    pub rho: f64,
    pub alpha_check: Option<f64>,
    pub alpha_hat: Option<f64>,
    pub theta: Option<f64>,
    pub gamma: Option<f64>,
    pub tally: CertTally,
}

/// Re-solves the true model and checks every recorded episode.
pub fn replay_certification(replay: &Replay, rho: f64, settings: &SolveSettings) -> Result<ReplayReport> {
    let problem = replay.problem.clone().into_problem()?;
    let p = dp::solve_p(&problem, settings)?.p;
    let beta = certify::beta_for(&p, problem.s());
    let mut tally = CertTally::default();
    for ep in &replay.episodes {
        tally.merge(&certify_episode(&problem, &p, beta, rho, &ep.steps)?);
    }
    let constants = certify::Constants::new(&problem, beta, rho).ok();
    Ok(ReplayReport {
        beta,
        rho,
        alpha_check: constants.map(|c| c.alpha_check),
        alpha_hat: constants.map(|c| c.alpha_hat),
        theta: constants.map(|c| c.theta),
        gamma: certify::corollary1_gamma(&problem, beta, rho),
        tally,
    })
}

pub fn write_trajectory_csv<W: Write>(replay: &Replay, mut w: W) -> Result<()> {
    let n = replay.problem.s.len();
    let m = replay.problem.r.len();
    let mut header = vec!["episode".to_string(), "t".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=m).map(|j| format!("u{j}")));
    header.push("cost".into());
    writeln!(w, "{}", header.join(","))?;
    for ep in &replay.episodes {
        for s in &ep.steps {
            let mut row = vec![(ep.episode + 1).to_string(), s.t.to_string()];
            row.extend(s.x.iter().chain(&s.u).map(|&v| fmt_num(v)));
            row.push(fmt_num(s.cost));
            writeln!(w, "{}", row.join(","))?;
        }
    }
    Ok(())
}
