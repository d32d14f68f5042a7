//! Data-correlation statistics and the data-driven solution of the optimality equation.

use serde::{Deserialize, Serialize};

use crate::dp::{self, LpSettings, QParameter, SolveSettings};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::problem::{GainMatrix, PositiveProblem};

pub const DEFAULT_SIGMA0_SCALE: f64 = 1e-6;
pub const DEFAULT_CONDITION_CAP: f64 = 1e12;
const MODEL_RESIDUAL_TOL: f64 = 1e-8;
const RESIDUAL_RETRIES: usize = 5;

/// `Σ(t) = λΣ(t−1) + z zᵀ` and `Σ̄(t) = λΣ̄(t−1) + x⁺ zᵀ` with `z = [x; u]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationState {
    #[serde(rename = "Sigma", with = "crate::linalg::serde_matrix")]
    sigma: Matrix,
    #[serde(rename = "SigmaBar", with = "crate::linalg::serde_matrix")]
    sigma_bar: Matrix,
    lambda: f64,
    t: u64,
}

impl CorrelationState {
    /// `Σ(0) = σ₀ I`, `Σ̄(0) = 0`.
    pub fn new(n: usize, m: usize, lambda: f64, sigma0_scale: f64) -> Result<Self> {
        if !(sigma0_scale >= 0.0) || !sigma0_scale.is_finite() {
            return Err(Error::InvalidInput(format!("sigma0 scale {sigma0_scale}")));
        }
        Self::from_parts(Matrix::identity(n + m, n + m) * sigma0_scale, Matrix::zeros(n, n + m), lambda)
    }

    pub fn from_parts(sigma: Matrix, sigma_bar: Matrix, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::InvalidInput(format!("forgetting factor {lambda} outside (0, 1]")));
        }
        if !sigma.is_square() || sigma_bar.ncols() != sigma.ncols() || sigma_bar.nrows() > sigma.nrows() {
            return Err(Error::Dimension(format!(
                "Sigma {}x{} and SigmaBar {}x{}",
                sigma.nrows(),
                sigma.ncols(),
                sigma_bar.nrows(),
                sigma_bar.ncols()
            )));
        }
        if !linalg::all_finite(sigma.iter()) || !linalg::all_finite(sigma_bar.iter()) {
            return Err(Error::InvalidInput("non-finite correlation data".into()));
        }
        if sigma != sigma.transpose() {
            return Err(Error::InvalidInput("Sigma is not symmetric".into()));
        }
        Ok(Self { sigma, sigma_bar, lambda, t: 0 })
    }

    pub fn n(&self) -> usize {
        self.sigma_bar.nrows()
    }

    pub fn m(&self) -> usize {
        self.sigma.nrows() - self.sigma_bar.nrows()
    }

    pub fn sigma(&self) -> &Matrix {
        &self.sigma
    }

    pub fn sigma_bar(&self) -> &Matrix {
        &self.sigma_bar
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn samples(&self) -> u64 {
        self.t
    }

    pub fn update(&mut self, x: &Vector, u: &Vector, x_next: &Vector) -> Result<()> {
        let (n, m) = (self.n(), self.m());
        if x.len() != n || u.len() != m || x_next.len() != n {
            return Err(Error::Dimension(format!(
                "update with x:{} u:{} x+:{}, expected {n}/{m}/{n}",
                x.len(),
                u.len(),
                x_next.len()
            )));
        }
        if !linalg::all_finite(x.iter().chain(u.iter()).chain(x_next.iter())) {
            return Err(Error::InvalidInput("non-finite sample".into()));
        }
        let mut z = Vector::zeros(n + m);
        z.rows_mut(0, n).copy_from(x);
        z.rows_mut(n, m).copy_from(u);
        // symmetric rank-one update, written so that Sigma stays exactly symmetric
        for j in 0..n + m {
            for i in j..n + m {
                let v = self.lambda * self.sigma[(i, j)] + z[i] * z[j];
                self.sigma[(i, j)] = v;
                self.sigma[(j, i)] = v;
            }
        }
        self.sigma_bar *= self.lambda;
        self.sigma_bar.ger(1.0, x_next, &z, 1.0);
        self.t += 1;
        Ok(())
    }

    /// `Σ⁻¹Σ̄ᵀ`, the `(n+m) × n` operator of the data-driven q-recursion.
    pub fn data_operator(&self, condition_cap: f64) -> Result<Matrix> {
        let condition = linalg::symmetric_condition(&self.sigma);
        if !(condition <= condition_cap) {
            return Err(Error::InsufficientExcitation { condition });
        }
        let chol = self
            .sigma
            .clone()
            .cholesky()
            .ok_or(Error::InsufficientExcitation { condition })?;
        let operator = chol.solve(&self.sigma_bar.transpose());
        let residual = linalg::inf_norm(&(operator.tr_mul(&self.sigma) - &self.sigma_bar));
        if residual > MODEL_RESIDUAL_TOL * linalg::inf_norm(&self.sigma_bar) || !residual.is_finite() {
            return Err(Error::InsufficientExcitation { condition });
        }
        Ok(operator)
    }

    pub fn implied_model(&self, condition_cap: f64) -> Result<ImpliedModel> {
        let op = self.data_operator(condition_cap)?;
        let n = self.n();
        Ok(ImpliedModel {
            a_hat: op.rows(0, n).transpose(),
            b_hat: op.rows(n, self.m()).transpose(),
        })
    }
}

/// Least-squares dynamics consistent with the statistics: `[Â B̂] = Σ̄Σ⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpliedModel {
    pub a_hat: Matrix,
    pub b_hat: Matrix,
}

impl ImpliedModel {
    /// `[Â B̂]ᵀ`.
    pub fn operator(&self) -> Matrix {
        let n = self.a_hat.nrows();
        let m = self.b_hat.ncols();
        let mut op = Matrix::zeros(n + m, n);
        op.rows_mut(0, n).copy_from(&self.a_hat.transpose());
        op.rows_mut(n, m).copy_from(&self.b_hat.transpose());
        op
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataDrivenSolution {
    pub q: QParameter,
    pub gain: GainMatrix,
    /// `[I Kᵀ] q`.
    pub p_t: Vector,
    pub iterations: usize,
}

fn check_dims(state: &CorrelationState, problem: &PositiveProblem) -> Result<()> {
    if state.n() != problem.n() || state.m() != problem.m() {
        return Err(Error::Dimension(format!(
            "statistics for n={}, m={} used with a problem of n={}, m={}",
            state.n(),
            state.m(),
            problem.n(),
            problem.m()
        )));
    }
    Ok(())
}

/// q-recursion with the data operator `Σ⁻¹Σ̄ᵀ`, optionally warm-started.
pub fn solve_data_driven(
    state: &CorrelationState,
    problem: &PositiveProblem,
    settings: &SolveSettings,
    condition_cap: f64,
    warm_start: Option<&QParameter>,
) -> Result<DataDrivenSolution> {
    check_dims(state, problem)?;
    let model = state.implied_model(condition_cap)?;
    let operator = model.operator();
    let mut warm = warm_start.cloned();
    let mut iterations = 0;
    for _ in 0..RESIDUAL_RETRIES {
        let sol = dp::q_value_iteration(problem, &operator, settings, warm.as_ref())
            .map_err(|e| match e {
                Error::InfiniteValue { .. } | Error::NotConverged { .. } => Error::NotStabilizable(Box::new(e)),
                other => other,
            })?;
        iterations += sol.iterations;
        let residual = linalg::vec_inf_norm(
            &(&sol.p - dp::bellman_map(problem, &model.a_hat, &model.b_hat, &sol.p)),
        );
        if residual <= 10.0 * settings.tol {
            return Ok(DataDrivenSolution { q: sol.q, gain: sol.gain, p_t: sol.p, iterations });
        }
        warm = Some(sol.q);
    }
    Err(Error::NotStabilizable(Box::new(Error::NotConverged {
        iterations,
        last_step: f64::NAN,
        last_iterate: warm.map(|q| q.stacked().iter().cloned().collect()).unwrap_or_default(),
    })))
}

/// LP route with the data operator; the gain follows the same per-block rule.
pub fn solve_data_driven_lp(
    state: &CorrelationState,
    problem: &PositiveProblem,
    settings: &LpSettings,
    condition_cap: f64,
) -> Result<DataDrivenSolution> {
    check_dims(state, problem)?;
    let operator = state.data_operator(condition_cap)?;
    let q = dp::solve_q_lp(&operator, problem, settings)?;
    let gain = dp::gain_from_input_costs(problem, &q.qu);
    let p_t = q.value_under(&gain);
    Ok(DataDrivenSolution { q, gain, p_t, iterations: 0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MisspecDiagnostics {
    pub lhs: f64,
    /// `‖Eᵀ‖_∞ ‖Bᵀ − B̂ᵀ‖_∞ + ‖Aᵀ − Âᵀ‖_∞`, the weighting the envelope argument actually bounds.
    /// Equal to `lhs` when `‖Eᵀ‖_∞ = 1` and smaller when `‖Eᵀ‖_∞ > 1`.
    pub input_weighted_lhs: f64,
    pub rho: f64,
    pub satisfied: bool,
    /// `Â − A`.
    pub a_tilde: Matrix,
    /// `B̂ − B`.
    pub b_tilde: Matrix,
    /// `Σ̄ − [A B]Σ`.
    pub sigma_tilde: Matrix,
}

/// `‖Eᵀ‖_∞ ‖Aᵀ − Âᵀ‖_∞ + ‖Bᵀ − B̂ᵀ‖_∞` against `rho`; needs the true model.
pub fn misspec_condition(
    state: &CorrelationState,
    truth: &PositiveProblem,
    rho: f64,
    condition_cap: f64,
) -> Result<MisspecDiagnostics> {
    check_dims(state, truth)?;
    let model = state.implied_model(condition_cap)?;
    let a_tilde = &model.a_hat - truth.a();
    let b_tilde = &model.b_hat - truth.b();
    let e_norm = linalg::inf_norm(&truth.e().transpose());
    let (a_norm, b_norm) = (linalg::inf_norm(&a_tilde.transpose()), linalg::inf_norm(&b_tilde.transpose()));
    let lhs = e_norm * a_norm + b_norm;
    let input_weighted_lhs = e_norm * b_norm + a_norm;
    let sigma_tilde = state.sigma_bar() - truth.model_operator().transpose() * state.sigma();
    Ok(MisspecDiagnostics { lhs, input_weighted_lhs, rho, satisfied: lhs <= rho, a_tilde, b_tilde, sigma_tilde })
}
