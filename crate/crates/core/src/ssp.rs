//! Stochastic shortest path instances, their conversion into a [`PositiveProblem`], an episodic
//! simulator and the tabular Q-learning baseline.
//!
//! States are 0-based in memory; the goal is index `n`. The JSON layout uses the 1-based
//! `i_init` of the usual notation.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::problem::PositiveProblem;

const PROBABILITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SspInstance {
    /// `transitions[i]` is `(n+1) × a_i`; column `a` is the successor distribution of action `a`.
    transitions: Vec<Matrix>,
    costs: Vec<Vector>,
    initial: usize,
}

impl SspInstance {
    pub fn new(transitions: Vec<Matrix>, costs: Vec<Vector>, initial: usize) -> Result<Self> {
        let n = transitions.len();
        if n == 0 {
            return Err(Error::InvalidInput("SSP needs at least one non-goal state".into()));
        }
        if costs.len() != n {
            return Err(Error::Dimension(format!("{} cost rows for {n} states", costs.len())));
        }
        if initial >= n {
            return Err(Error::InvalidInput(format!("initial state {initial} out of range")));
        }
        for (i, (t, c)) in transitions.iter().zip(&costs).enumerate() {
            if t.nrows() != n + 1 {
                return Err(Error::Dimension(format!(
                    "transition matrix of state {i} has {} rows, expected {}",
                    t.nrows(),
                    n + 1
                )));
            }
            if t.ncols() == 0 || t.ncols() != c.len() {
                return Err(Error::Dimension(format!(
                    "state {i}: {} actions but {} costs",
                    t.ncols(),
                    c.len()
                )));
            }
            if !linalg::all_finite(c.iter()) {
                return Err(Error::InvalidInput(format!("state {i} has non-finite costs")));
            }
            for (a, col) in t.column_iter().enumerate() {
                let sum: f64 = col.iter().sum();
                if col.iter().any(|&v| v < 0.0 || !v.is_finite()) || (sum - 1.0).abs() > PROBABILITY_TOL {
                    return Err(Error::InvalidInput(format!(
                        "state {i}, action {a}: column is not a probability distribution"
                    )));
                }
            }
        }
        Ok(Self { transitions, costs, initial })
    }

    /// Number of non-goal states.
    pub fn n_states(&self) -> usize {
        self.transitions.len()
    }

    pub fn goal(&self) -> usize {
        self.transitions.len()
    }

    pub fn initial_state(&self) -> usize {
        self.initial
    }

    pub fn n_actions(&self, state: usize) -> usize {
        self.costs[state].len()
    }

    pub fn transitions(&self, state: usize) -> &Matrix {
        &self.transitions[state]
    }

    pub fn costs(&self, state: usize) -> &Vector {
        &self.costs[state]
    }

    /// Probability mass vector over the regular states, all mass on the initial state.
    pub fn initial_distribution(&self) -> Vector {
        let mut x = Vector::zeros(self.n_states());
        x[self.initial] = 1.0;
        x
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: SspDocument = serde_json::from_str(text)?;
        doc.into_instance()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&SspDocument::from(self)).expect("SSP serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }
}

/// JSON layout: `T` (list of row-major matrices), `c` (list of rows), `i_init` (1-based).
/// The goal's absorbing matrix and zero cost may be listed last or omitted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SspDocument {
    #[serde(rename = "T")]
    pub t: Vec<Vec<Vec<f64>>>,
    pub c: Vec<Vec<f64>>,
    pub i_init: usize,
}

impl SspDocument {
    pub fn into_instance(mut self) -> Result<SspInstance> {
        let rows = self.t.first().map_or(0, |m| m.len());
        if rows == 0 {
            return Err(Error::InvalidInput("empty transition list".into()));
        }
        let n = rows - 1;
        if self.t.len() == rows {
            let goal_t = self.t.pop().expect("non-empty");
            let goal_c = self.c.pop().unwrap_or_default();
            let absorbing = goal_t.iter().enumerate().all(|(row, vals)| {
                vals.iter().all(|&v| if row == n { v == 1.0 } else { v == 0.0 })
            });
            if !absorbing || goal_c.iter().any(|&c| c != 0.0) {
                return Err(Error::InvalidInput("goal state must be absorbing with zero cost".into()));
            }
        } else if self.t.len() != n {
            return Err(Error::Dimension(format!(
                "{} transition matrices with {rows} rows each",
                self.t.len()
            )));
        }
        if self.i_init == 0 || self.i_init > n {
            return Err(Error::InvalidInput(format!("i_init {} out of range 1..={n}", self.i_init)));
        }
        let transitions = self
            .t
            .iter()
            .map(|m| {
                linalg::matrix_from_rows(m, None)
                    .ok_or_else(|| Error::Dimension("ragged transition matrix".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let costs = self.c.into_iter().map(Vector::from_vec).collect();
        SspInstance::new(transitions, costs, self.i_init - 1)
    }
}

impl From<&SspInstance> for SspDocument {
    fn from(ssp: &SspInstance) -> Self {
        let n = ssp.n_states();
        let mut t: Vec<Vec<Vec<f64>>> = ssp.transitions.iter().map(linalg::matrix_to_rows).collect();
        t.push((0..=n).map(|row| vec![if row == n { 1.0 } else { 0.0 }]).collect());
        let mut c: Vec<Vec<f64>> = ssp.costs.iter().map(|v| v.iter().cloned().collect()).collect();
        c.push(vec![0.0]);
        Self { t, c, i_init: ssp.initial + 1 }
    }
}

/// Reference action per state: cheapest action, lowest index on ties.
pub fn reference_actions(ssp: &SspInstance) -> Vec<usize> {
    (0..ssp.n_states()).map(|i| argmin(ssp.costs(i).iter().cloned())).collect()
}

pub fn convert(ssp: &SspInstance) -> Result<PositiveProblem> {
    convert_with_reference(ssp, &reference_actions(ssp))
}

/// Builds the positive-system form: column `i` of `A` is the reference successor distribution of
/// state `i`; block `B_i` holds, per alternative action, the difference to the reference
/// distribution; `s_i` is the reference cost, `r` the cost gaps; `E = I`.
pub fn convert_with_reference(ssp: &SspInstance, reference: &[usize]) -> Result<PositiveProblem> {
    let n = ssp.n_states();
    if reference.len() != n {
        return Err(Error::Dimension(format!("{} reference actions for {n} states", reference.len())));
    }
    let partition: Vec<usize> = (0..n).map(|i| ssp.n_actions(i) - 1).collect();
    let m: usize = partition.iter().sum();
    let mut a = Matrix::zeros(n, n);
    let mut b = Matrix::zeros(n, m);
    let mut s = Vector::zeros(n);
    let mut r = Vector::zeros(m);
    let mut col = 0;
    for i in 0..n {
        let t = ssp.transitions(i);
        let c = ssp.costs(i);
        let re = reference[i];
        if re >= c.len() {
            return Err(Error::Conversion(format!("reference action {re} of state {i} out of range")));
        }
        if c[re] < 0.0 {
            return Err(Error::Conversion(format!("state {i} has negative reference cost {}", c[re])));
        }
        for k in 0..n {
            a[(k, i)] = t[(k, re)];
        }
        s[i] = c[re];
        for alt in (0..c.len()).filter(|&j| j != re) {
            let gap = decimal_difference(c[alt], c[re]);
            if gap < 0.0 {
                return Err(Error::Conversion(format!(
                    "state {i}: action {alt} is cheaper than the reference action {re}"
                )));
            }
            r[col] = gap;
            for k in 0..n {
                b[(k, col)] = decimal_difference(t[(k, alt)], t[(k, re)]);
            }
            col += 1;
        }
    }
    PositiveProblem::new(a, b, Matrix::identity(n, n), s, r, partition)
}

/// `x - y`, snapped to 15 significant digits when that moves it by at most a few ulps. Keeps
/// differences of decimal inputs decimal (`0.7 - 0.4` becomes `0.3`).
fn decimal_difference(x: f64, y: f64) -> f64 {
    let d = x - y;
    if d == 0.0 || !d.is_finite() {
        return d;
    }
    let snapped: f64 = format!("{d:.14e}").parse().unwrap_or(d);
    let ulp_scale = x.abs().max(y.abs()) * f64::EPSILON * 4.0;
    if (snapped - d).abs() <= ulp_scale {
        snapped
    } else {
        d
    }
}

fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Samples a successor; the realized cost is the expected stage cost of the action.
pub fn ssp_step<R: Rng + ?Sized>(ssp: &SspInstance, state: usize, action: usize, rng: &mut R) -> (usize, f64) {
    if state == ssp.goal() {
        return (state, 0.0);
    }
    let column = ssp.transitions(state).column(action);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_support = ssp.goal();
    for (k, &prob) in column.iter().enumerate() {
        if prob > 0.0 {
            acc += prob;
            last_support = k;
            if u < acc {
                return (k, ssp.costs(state)[action]);
            }
        }
    }
    (last_support, ssp.costs(state)[action])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SspSolution {
    /// Optimal cost-to-go per state including the goal (last entry, zero).
    pub values: Vec<f64>,
    pub policy: Vec<usize>,
    pub iterations: usize,
}

/// Standard value iteration on the shortest-path Bellman equation from zero values.
pub fn exact_ssp_value(ssp: &SspInstance, tol: f64) -> Result<SspSolution> {
    const MAX_ITER: usize = 1_000_000;
    const DIVERGENCE: f64 = 1e12;
    let n = ssp.n_states();
    let mut v = vec![0.0; n + 1];
    for iterations in 1..=MAX_ITER {
        let mut next = vec![0.0; n + 1];
        for (i, slot) in next.iter_mut().enumerate().take(n) {
            *slot = (0..ssp.n_actions(i))
                .map(|a| action_value(ssp, &v, i, a))
                .fold(f64::INFINITY, f64::min);
        }
        let step = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if next.iter().any(|x| !(x.abs() <= DIVERGENCE)) {
            return Err(Error::ImproperSsp);
        }
        v = next;
        if step <= tol {
            let policy = (0..n)
                .map(|i| argmin((0..ssp.n_actions(i)).map(|a| action_value(ssp, &v, i, a))))
                .collect();
            return Ok(SspSolution { values: v, policy, iterations });
        }
    }
    Err(Error::ImproperSsp)
}

fn action_value(ssp: &SspInstance, v: &[f64], state: usize, action: usize) -> f64 {
    let col = ssp.transitions(state).column(action);
    ssp.costs(state)[action] + col.iter().zip(v).map(|(p, x)| p * x).sum::<f64>()
}

/// Stepsize `η = η₀ / (1 + visits)^ω`, with `visits` counted before the current update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSize {
    pub eta0: f64,
    pub omega: f64,
}

impl Default for StepSize {
    fn default() -> Self {
        Self { eta0: 1.0, omega: 0.8 }
    }
}

impl StepSize {
    pub fn at(&self, visits: u64) -> f64 {
        self.eta0 / (1.0 + visits as f64).powf(self.omega)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    values: Vec<Vec<f64>>,
    visits: Vec<Vec<u64>>,
}

impl QTable {
    pub fn new(ssp: &SspInstance) -> Self {
        let values = (0..ssp.n_states()).map(|i| vec![0.0; ssp.n_actions(i)]).collect();
        let visits = (0..ssp.n_states()).map(|i| vec![0; ssp.n_actions(i)]).collect();
        Self { values, visits }
    }

    /// Q-factor of `(state, action)`; the goal's factors are zero.
    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.values.get(state).map_or(0.0, |row| row[action])
    }

    pub fn visits(&self, state: usize, action: usize) -> u64 {
        self.visits.get(state).map_or(0, |row| row[action])
    }

    /// `min_a Q(state, a)`, zero at the goal.
    pub fn state_value(&self, state: usize) -> f64 {
        self.values
            .get(state)
            .map_or(0.0, |row| row.iter().cloned().fold(f64::INFINITY, f64::min))
    }

    pub fn greedy(&self, state: usize) -> usize {
        self.values.get(state).map_or(0, |row| argmin(row.iter().cloned()))
    }

    pub fn greedy_policy(&self) -> Vec<usize> {
        (0..self.values.len()).map(|i| self.greedy(i)).collect()
    }

    /// `Q(s,a) ← (1−η) Q(s,a) + η (cost + min_a' Q(s', a'))`.
    pub fn update(&mut self, state: usize, action: usize, cost: f64, next: usize, step: &StepSize) {
        let Some(row) = self.values.get(state) else {
            return;
        };
        let eta = step.at(self.visits[state][action]);
        let target = cost + self.state_value(next);
        let updated = (1.0 - eta) * row[action] + eta * target;
        self.values[state][action] = updated;
        self.visits[state][action] += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QLearningConfig {
    pub eps0: f64,
    pub alpha: f64,
    pub eta0: f64,
    pub omega: f64,
}

impl Default for QLearningConfig {
    fn default() -> Self {
        Self { eps0: 0.05, alpha: 0.99, eta0: 1.0, omega: 0.8 }
    }
}

impl QLearningConfig {
    pub fn epsilon(&self, episode: usize) -> f64 {
        self.eps0 * self.alpha.powi(episode as i32)
    }

    pub fn step_size(&self) -> StepSize {
        StepSize { eta0: self.eta0, omega: self.omega }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SspEpisode {
    pub cost: f64,
    pub steps: usize,
    pub reached_goal: bool,
}

/// One ε-greedy Q-learning episode from the initial state; the table is updated in place.
pub fn q_learning_episode<R: Rng + ?Sized>(
    ssp: &SspInstance,
    table: &mut QTable,
    epsilon: f64,
    step: &StepSize,
    max_steps: usize,
    rng: &mut R,
) -> SspEpisode {
    let mut state = ssp.initial_state();
    let mut cost = 0.0;
    let mut steps = 0;
    while state != ssp.goal() && steps < max_steps {
        let action = if rng.random::<f64>() < epsilon {
            rng.random_range(0..ssp.n_actions(state))
        } else {
            table.greedy(state)
        };
        let (next, c) = ssp_step(ssp, state, action, rng);
        table.update(state, action, c, next, step);
        cost += c;
        state = next;
        steps += 1;
    }
    SspEpisode { cost, steps, reached_goal: state == ssp.goal() }
}

/// Episode under a fixed stationary policy.
pub fn policy_episode<R: Rng + ?Sized>(
    ssp: &SspInstance,
    policy: &[usize],
    max_steps: usize,
    rng: &mut R,
) -> SspEpisode {
    let mut state = ssp.initial_state();
    let mut cost = 0.0;
    let mut steps = 0;
    while state != ssp.goal() && steps < max_steps {
        let (next, c) = ssp_step(ssp, state, policy[state], rng);
        cost += c;
        state = next;
        steps += 1;
    }
    SspEpisode { cost, steps, reached_goal: state == ssp.goal() }
}
