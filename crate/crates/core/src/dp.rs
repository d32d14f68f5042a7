//! Model-based solvers for the optimality equation
//!
//! ```text
//! p = s + Aᵀp + Σ_i min{r_i + B_iᵀp, 0} E_i
//! ```
//!
//! and its q-parameter form `q = [s + Aᵀp; r + Bᵀp]`. Value iteration in `p` and in `q`, an LP
//! route, and a brute-force oracle that solves one linear system per vertex gain.

use minilp::{ComparisonOp, OptimizationDirection};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::problem::{GainMatrix, PositiveProblem};

/// Spectral radius threshold separating stable closed loops in the oracle.
pub const STABILITY_THRESHOLD: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveSettings {
    /// ∞-norm bound on the change between successive iterates.
    pub tol: f64,
    pub max_iter: usize,
    /// Iterates larger than this in ∞-norm signal an infinite value.
    pub divergence_bound: f64,
}

impl Default for SolveSettings {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 100_000, divergence_bound: 1e12 }
    }
}

impl SolveSettings {
    fn check(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidInput(format!("bad solve settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PValue {
    pub p: Vector,
    pub iterations: usize,
    /// ∞-norm defect of the optimality equation at `p`.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QParameter {
    #[serde(with = "crate::linalg::serde_vector")]
    pub qx: Vector,
    #[serde(with = "crate::linalg::serde_vector")]
    pub qu: Vector,
}

impl QParameter {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self { qx: Vector::zeros(n), qu: Vector::zeros(m) }
    }

    pub fn from_stacked(q: &Vector, n: usize) -> Self {
        Self {
            qx: q.rows(0, n).into_owned(),
            qu: q.rows(n, q.len() - n).into_owned(),
        }
    }

    pub fn stacked(&self) -> Vector {
        let n = self.qx.len();
        let mut q = Vector::zeros(n + self.qu.len());
        q.rows_mut(0, n).copy_from(&self.qx);
        q.rows_mut(n, self.qu.len()).copy_from(&self.qu);
        q
    }

    /// `[I Kᵀ] q`.
    pub fn value_under(&self, gain: &GainMatrix) -> Vector {
        &self.qx + gain.matrix().tr_mul(&self.qu)
    }
}

/// Result of a q-iteration: the parameter, its minimizing gain and `p = [I Kᵀ] q`.
#[derive(Debug, Clone, PartialEq)]
pub struct QSolution {
    pub q: QParameter,
    pub gain: GainMatrix,
    pub p: Vector,
    pub iterations: usize,
}

/// Right-hand side of the optimality equation for dynamics `(a, b)`.
pub fn bellman_map(problem: &PositiveProblem, a: &Matrix, b: &Matrix, p: &Vector) -> Vector {
    let input_costs = problem.r() + b.tr_mul(p);
    let mut out = problem.s() + a.tr_mul(p);
    add_min_terms(problem, &input_costs, &mut out);
    out
}

/// `out += Σ_i min{costs_i, 0} E_i`.
fn add_min_terms(problem: &PositiveProblem, costs: &Vector, out: &mut Vector) {
    for i in 0..problem.n() {
        let least = problem.block(i).map(|j| costs[j]).fold(0.0, f64::min);
        if least < 0.0 {
            *out += problem.e().row(i).transpose() * least;
        }
    }
}

pub fn bellman_rhs(problem: &PositiveProblem, p: &Vector) -> Vector {
    bellman_map(problem, problem.a(), problem.b(), p)
}

/// ∞-norm of `p - rhs(p)`; zero exactly at a fixed point.
pub fn bellman_residual(problem: &PositiveProblem, p: &Vector) -> f64 {
    linalg::vec_inf_norm(&(p - bellman_rhs(problem, p)))
}

/// Per block, actuate the row with the most negative cost (lowest index on ties), or nothing
/// when every entry is nonnegative.
pub fn gain_from_input_costs(problem: &PositiveProblem, costs: &Vector) -> GainMatrix {
    let selector: Vec<Option<usize>> = (0..problem.n())
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for (j, c) in problem.block(i).enumerate() {
                let v = costs[c];
                if v < 0.0 && best.is_none_or(|(_, b)| v < b) {
                    best = Some((j, v));
                }
            }
            best.map(|(j, _)| j)
        })
        .collect();
    GainMatrix::from_selector(problem, &selector).expect("selector built from partition")
}

/// Optimal gain read off a solution `p`: costs `r + Bᵀp`.
pub fn extract_gain(problem: &PositiveProblem, p: &Vector) -> GainMatrix {
    gain_from_input_costs(problem, &(problem.r() + problem.b().tr_mul(p)))
}

/// Value iterates `p¹, p², …` starting from `p⁰ = 0`.
pub struct PIterates<'a> {
    problem: &'a PositiveProblem,
    p: Vector,
}

impl<'a> PIterates<'a> {
    pub fn new(problem: &'a PositiveProblem) -> Self {
        Self { problem, p: Vector::zeros(problem.n()) }
    }
}

impl Iterator for PIterates<'_> {
    type Item = Vector;

    fn next(&mut self) -> Option<Vector> {
        self.p = bellman_rhs(self.problem, &self.p);
        Some(self.p.clone())
    }
}

pub fn solve_p(problem: &PositiveProblem, settings: &SolveSettings) -> Result<PValue> {
    settings.check()?;
    let mut p = Vector::zeros(problem.n());
    let mut step = f64::INFINITY;
    for iterations in 1..=settings.max_iter {
        let next = bellman_rhs(problem, &p);
        let norm = linalg::vec_inf_norm(&next);
        if !(norm <= settings.divergence_bound) {
            return Err(Error::InfiniteValue { iterations, norm });
        }
        step = linalg::vec_inf_norm(&(&next - &p));
        p = next;
        if step <= settings.tol {
            let residual = bellman_residual(problem, &p);
            if residual <= 10.0 * settings.tol {
                return Ok(PValue { p, iterations, residual });
            }
        }
    }
    Err(Error::NotConverged {
        iterations: settings.max_iter,
        last_step: step,
        last_iterate: p.iter().cloned().collect(),
    })
}

/// Iterates of the q-recursion `q^{k+1} = M [I (K^k)ᵀ] q^k + [s; r]` for a model operator `M`
/// of shape `(n+m) × n`. Each item is `(q^{k+1}, K^{k+1})`.
pub struct QIterates<'a> {
    problem: &'a PositiveProblem,
    operator: &'a Matrix,
    costs: Vector,
    q: Vector,
}

impl<'a> QIterates<'a> {
    pub fn new(problem: &'a PositiveProblem, operator: &'a Matrix) -> Self {
        Self::warm(problem, operator, Vector::zeros(problem.n() + problem.m()))
    }

    pub fn warm(problem: &'a PositiveProblem, operator: &'a Matrix, q0: Vector) -> Self {
        Self { problem, operator, costs: problem.stacked_costs(), q: q0 }
    }

    fn advance(&mut self) -> (Vector, GainMatrix) {
        let n = self.problem.n();
        let gain = gain_from_input_costs(self.problem, &self.q.rows(n, self.problem.m()).into_owned());
        let p = self.q.rows(0, n) + gain.matrix().tr_mul(&self.q.rows(n, self.problem.m()));
        self.q = self.operator * p + &self.costs;
        let next_gain =
            gain_from_input_costs(self.problem, &self.q.rows(n, self.problem.m()).into_owned());
        (self.q.clone(), next_gain)
    }
}

impl Iterator for QIterates<'_> {
    type Item = (QParameter, GainMatrix);

    fn next(&mut self) -> Option<Self::Item> {
        let (q, gain) = self.advance();
        Some((QParameter::from_stacked(&q, self.problem.n()), gain))
    }
}

/// Runs the q-recursion for any `(n+m) × n` operator until successive iterates agree to `tol`.
pub fn q_value_iteration(
    problem: &PositiveProblem,
    operator: &Matrix,
    settings: &SolveSettings,
    warm_start: Option<&QParameter>,
) -> Result<QSolution> {
    settings.check()?;
    let (n, m) = (problem.n(), problem.m());
    if operator.nrows() != n + m || operator.ncols() != n {
        return Err(Error::Dimension(format!(
            "operator is {}x{}, expected {}x{n}",
            operator.nrows(),
            operator.ncols(),
            n + m
        )));
    }
    let q0 = warm_start.map_or_else(|| Vector::zeros(n + m), QParameter::stacked);
    let mut iterates = QIterates::warm(problem, operator, q0.clone());
    let mut prev = q0;
    let mut step = f64::INFINITY;
    for iterations in 1..=settings.max_iter {
        let (q, gain) = iterates.advance();
        let norm = linalg::vec_inf_norm(&q);
        if !(norm <= settings.divergence_bound) {
            return Err(Error::InfiniteValue { iterations, norm });
        }
        step = linalg::vec_inf_norm(&(&q - &prev));
        if step <= settings.tol {
            let q = QParameter::from_stacked(&q, n);
            let p = q.value_under(&gain);
            return Ok(QSolution { q, gain, p, iterations });
        }
        prev = q;
    }
    Err(Error::NotConverged {
        iterations: settings.max_iter,
        last_step: step,
        last_iterate: prev.iter().cloned().collect(),
    })
}

/// q-iteration with the true model `[A B]ᵀ` in place of the data operator.
pub fn solve_q_model_based(problem: &PositiveProblem, settings: &SolveSettings) -> Result<QSolution> {
    q_value_iteration(problem, &problem.model_operator(), settings, None)
}

/// Exhaustive solution over the vertex gains.
#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub p: PValue,
    pub gain: GainMatrix,
    /// No other gain attains the minimal cost vector.
    pub unique: bool,
    /// `p_K` per enumerated gain, `None` when the closed loop is not stable.
    pub per_gain: Vec<(GainMatrix, Option<Vector>)>,
}

/// Closed-loop cost `p_K = s + Kᵀr + (A + BK)ᵀ p_K`, or `None` when `A + BK` is not stable.
pub fn gain_cost(problem: &PositiveProblem, gain: &GainMatrix) -> Option<Vector> {
    let n = problem.n();
    let closed = problem.a() + problem.b() * gain.matrix();
    if linalg::spectral_radius(&closed) >= STABILITY_THRESHOLD {
        return None;
    }
    let lhs = Matrix::identity(n, n) - closed.transpose();
    let rhs = problem.s() + gain.matrix().tr_mul(problem.r());
    lhs.lu().solve(&rhs)
}

pub fn brute_force_p(problem: &PositiveProblem) -> Result<OracleSolution> {
    let gains = problem.enumerate_gains()?;
    let per_gain: Vec<(GainMatrix, Option<Vector>)> =
        gains.into_iter().map(|g| {
            let cost = gain_cost(problem, &g);
            (g, cost)
        }).collect();
    let finite: Vec<(usize, &Vector)> = per_gain
        .iter()
        .enumerate()
        .filter_map(|(i, (_, c))| c.as_ref().map(|c| (i, c)))
        .collect();
    if finite.is_empty() {
        return Err(Error::NoStabilizingGain);
    }
    let n = problem.n();
    let p = Vector::from_fn(n, |k, _| {
        finite.iter().map(|(_, c)| c[k]).fold(f64::INFINITY, f64::min)
    });
    let close = |c: &Vector| {
        let scale = 1.0 + linalg::vec_inf_norm(&p);
        linalg::vec_inf_norm(&(c - &p)) <= 1e-9 * scale
    };
    let attaining: Vec<usize> = finite.iter().filter(|(_, c)| close(c)).map(|(i, _)| *i).collect();
    let best = match attaining.first() {
        Some(&i) => i,
        // no single gain attains the elementwise minimum; fall back to the smallest total cost
        None => {
            finite
                .iter()
                .min_by(|a, b| a.1.sum().total_cmp(&b.1.sum()))
                .map(|(i, _)| *i)
                .expect("non-empty")
        }
    };
    let residual = bellman_residual(problem, &p);
    Ok(OracleSolution {
        gain: per_gain[best].0.clone(),
        unique: attaining.len() == 1,
        p: PValue { p, iterations: 0, residual },
        per_gain,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpSettings {
    /// Allowed violation of the optimality inequalities at the returned point.
    pub constraint_tol: f64,
}

impl Default for LpSettings {
    fn default() -> Self {
        Self { constraint_tol: 1e-7 }
    }
}

/// LP route for the q-parameter with operator `M` (`[A B]ᵀ` or a data operator):
///
/// ```text
/// maximize   1ᵀ v           over v ∈ ℝⁿ, z ∈ ℝⁿ₊
/// subject to v ≤ qˣ − Eᵀ z,   z_i ≥ −(qᵘ)_ij for every row j of block i,
///            q = M v + [s; r].
/// ```
///
/// `z_i` is the magnitude of the most negative input cost of block `i`, so at the optimum
/// `v = qˣ + Σ_i min{q_iᵘ, 0} E_i`, the largest subsolution of the optimality equation.
pub fn solve_q_lp(
    operator: &Matrix,
    problem: &PositiveProblem,
    settings: &LpSettings,
) -> Result<QParameter> {
    let (n, m) = (problem.n(), problem.m());
    if operator.nrows() != n + m || operator.ncols() != n {
        return Err(Error::Dimension(format!(
            "operator is {}x{}, expected {}x{n}",
            operator.nrows(),
            operator.ncols(),
            n + m
        )));
    }
    let mut lp = minilp::Problem::new(OptimizationDirection::Maximize);
    let v: Vec<_> = (0..n).map(|_| lp.add_var(1.0, (f64::NEG_INFINITY, f64::INFINITY))).collect();
    let z: Vec<_> = (0..n).map(|_| lp.add_var(0.0, (0.0, f64::INFINITY))).collect();

    // v_k − (M_x v)_k + Σ_i E_ik z_i ≤ s_k
    for k in 0..n {
        let mut terms = Vec::with_capacity(2 * n);
        for (l, &var) in v.iter().enumerate() {
            let coeff = if l == k { 1.0 } else { 0.0 } - operator[(k, l)];
            if coeff != 0.0 {
                terms.push((var, coeff));
            }
        }
        for (i, &var) in z.iter().enumerate() {
            let coeff = problem.e()[(i, k)];
            if coeff != 0.0 {
                terms.push((var, coeff));
            }
        }
        lp.add_constraint(&terms[..], ComparisonOp::Le, problem.s()[k]);
    }
    // −(M_u v)_j − z_i ≤ r_j
    for (i, &zi) in z.iter().enumerate() {
        for j in problem.block(i) {
            let mut terms = vec![(zi, -1.0)];
            for (l, &var) in v.iter().enumerate() {
                let coeff = -operator[(n + j, l)];
                if coeff != 0.0 {
                    terms.push((var, coeff));
                }
            }
            lp.add_constraint(&terms[..], ComparisonOp::Le, problem.r()[j]);
        }
    }

    let solution = lp.solve().map_err(|e| match e {
        minilp::Error::Infeasible => Error::LpInfeasible,
        minilp::Error::Unbounded => Error::LpUnbounded,
    })?;
    let value = Vector::from_iterator(n, v.iter().map(|&var| solution[var]));
    if !linalg::all_finite(value.iter()) || !solution.objective().is_finite() {
        return Err(Error::LpUnbounded);
    }
    let q = operator * &value + problem.stacked_costs();
    let q = QParameter::from_stacked(&q, n);

    let mut bound = q.qx.clone();
    add_min_terms(problem, &q.qu, &mut bound);
    let violation = (&value - &bound).iter().cloned().fold(0.0, f64::max);
    if violation > settings.constraint_tol * (1.0 + linalg::vec_inf_norm(&value)) {
        return Err(Error::LpInfeasible);
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::ssp3_problem;

    fn scalar(a: f64, b: &[f64], s: f64, r: &[f64]) -> PositiveProblem {
        PositiveProblem::new(
            Matrix::from_element(1, 1, a),
            Matrix::from_row_slice(1, b.len(), b),
            Matrix::from_element(1, 1, 1.0),
            Vector::from_element(1, s),
            Vector::from_row_slice(r),
            vec![b.len()],
        )
        .unwrap()
    }

    fn zero_dynamics() -> PositiveProblem {
        let p = ssp3_problem();
        p.with_dynamics(Matrix::zeros(3, 3), Matrix::zeros(3, 4)).unwrap()
    }

    /// Closed-form optimum of the three-state fixture: the policy (off, row 2, off) gives
    /// p3 = 1.5 / 0.6, p2 = 3 / 0.9, p1 = 2.5 / 0.6.
    fn ssp3_exact() -> Vector {
        Vector::from_vec(vec![25.0 / 6.0, 10.0 / 3.0, 5.0 / 2.0])
    }

    #[test]
    fn zero_dynamics_converges_to_s_in_two_steps() {
        let p = zero_dynamics();
        let sol = solve_p(&p, &SolveSettings::default()).unwrap();
        assert_eq!(sol.p, *p.s());
        assert_eq!(sol.iterations, 2);
    }

    #[test]
    fn scalar_geometric_series() {
        let p = scalar(0.5, &[0.0], 1.0, &[0.0]);
        let sol = solve_p(&p, &SolveSettings::default()).unwrap();
        assert!((sol.p[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn ssp3_matches_closed_form_and_oracle() {
        let p = ssp3_problem();
        let sol = solve_p(&p, &SolveSettings::default()).unwrap();
        assert!(linalg::vec_inf_norm(&(&sol.p - ssp3_exact())) < 1e-8);
        let oracle = brute_force_p(&p).unwrap();
        assert!(oracle.unique);
        assert!(linalg::vec_inf_norm(&(&sol.p - &oracle.p.p)) < 1e-8);
        assert_eq!(oracle.gain.selector(), &[None, Some(1), None]);
        assert_eq!(extract_gain(&p, &sol.p), oracle.gain);
        assert!(bellman_residual(&p, &sol.p) <= 1e-9);
    }

    #[test]
    fn divergence_is_infinite_value() {
        let p = scalar(1.1, &[0.0], 1.0, &[0.0]);
        assert!(matches!(
            solve_p(&p, &SolveSettings::default()),
            Err(Error::InfiniteValue { .. })
        ));
        assert!(matches!(brute_force_p(&p), Err(Error::NoStabilizingGain)));
    }

    #[test]
    fn iteration_cap_is_not_convergence() {
        let p = scalar(0.999, &[0.0], 1.0, &[0.0]);
        let settings = SolveSettings { max_iter: 10, ..Default::default() };
        match solve_p(&p, &settings) {
            Err(Error::NotConverged { iterations, last_iterate, .. }) => {
                assert_eq!(iterations, 10);
                assert_eq!(last_iterate.len(), 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn extract_gain_cases() {
        let p = ssp3_problem();
        // all input costs nonnegative
        assert_eq!(extract_gain(&p, &Vector::zeros(3)), p.zero_gain());

        let single = scalar(0.0, &[-3.0], 1.0, &[1.0]);
        let g = extract_gain(&single, &Vector::from_element(1, 1.0));
        assert_eq!(g.matrix(), &Matrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn ties_pick_lowest_row() {
        let p = PositiveProblem::new(
            Matrix::zeros(1, 1),
            Matrix::zeros(1, 3),
            Matrix::from_element(1, 1, 1.0),
            Vector::from_element(1, 1.0),
            Vector::zeros(3),
            vec![3],
        )
        .unwrap();
        let g = gain_from_input_costs(&p, &Vector::from_vec(vec![0.0, -1.0, -1.0]));
        assert_eq!(g.selector(), &[Some(1)]);
    }

    #[test]
    fn residual_examples() {
        let p = scalar(0.0, &[0.0], 1.0, &[0.0]);
        assert_eq!(bellman_residual(&p, &Vector::zeros(1)), 1.0);
        assert_eq!(bellman_residual(&p, &Vector::from_element(1, 1.0)), 0.0);
    }

    #[test]
    fn q_iteration_zero_dynamics() {
        let p = zero_dynamics();
        let sol = solve_q_model_based(&p, &SolveSettings::default()).unwrap();
        assert_eq!(sol.q.stacked(), p.stacked_costs());
        assert_eq!(sol.gain, p.zero_gain());
    }

    #[test]
    fn q_iteration_agrees_with_p_iteration_on_ssp3() {
        let p = ssp3_problem();
        let settings = SolveSettings::default();
        let q = solve_q_model_based(&p, &settings).unwrap();
        let pv = solve_p(&p, &settings).unwrap();
        assert!(linalg::vec_inf_norm(&(&q.p - &pv.p)) < 1e-8);
        // q = [s + Aᵀp; r + Bᵀp]
        let qx = p.s() + p.a().tr_mul(&q.p);
        let qu = p.r() + p.b().tr_mul(&q.p);
        assert!(linalg::vec_inf_norm(&(&q.q.qx - qx)) < 1e-9);
        assert!(linalg::vec_inf_norm(&(&q.q.qu - qu)) < 1e-9);
    }

    #[test]
    fn q_iterates_track_p_iterates() {
        let p = ssp3_problem();
        let op = p.model_operator();
        for (k, ((q, gain), pk)) in QIterates::new(&p, &op).zip(PIterates::new(&p)).take(60).enumerate() {
            let via_q = q.value_under(&gain);
            assert!(linalg::vec_inf_norm(&(via_q - pk)) <= 1e-12, "iteration {k}");
        }
    }

    #[test]
    fn p_iterates_are_monotone() {
        let p = ssp3_problem();
        let mut prev = Vector::zeros(3);
        for next in PIterates::new(&p).take(100) {
            assert!(next.iter().zip(prev.iter()).all(|(a, b)| *a >= *b - 1e-15));
            prev = next;
        }
    }

    #[test]
    fn lp_zero_dynamics() {
        let p = zero_dynamics();
        let q = solve_q_lp(&p.model_operator(), &p, &LpSettings::default()).unwrap();
        assert!(linalg::vec_inf_norm(&(q.stacked() - p.stacked_costs())) < 1e-9);
    }

    #[test]
    fn lp_agrees_with_value_iteration_on_ssp3() {
        let p = ssp3_problem();
        let lp = solve_q_lp(&p.model_operator(), &p, &LpSettings::default()).unwrap();
        let vi = solve_q_model_based(&p, &SolveSettings::default()).unwrap();
        assert!(linalg::vec_inf_norm(&(lp.stacked() - vi.q.stacked())) < 1e-6);
    }

    #[test]
    fn lp_unbounded_when_value_is_infinite() {
        let p = scalar(1.1, &[0.0], 1.0, &[0.0]);
        assert!(matches!(
            solve_q_lp(&p.model_operator(), &p, &LpSettings::default()),
            Err(Error::LpUnbounded)
        ));
    }
}
