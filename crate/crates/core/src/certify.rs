//! Robustness certificates for the data-driven gain: model-set membership, the two-sided value
//! envelope, the one-step decrease inequality and the accumulated cost bound.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::problem::{GainMatrix, PositiveProblem};

/// Slack for the elementwise theorem checks.
pub const BOUND_SLACK: f64 = 1e-9;

/// Smallest `β` with `p ≤ β (min_i s_i) 1`.
pub fn beta_for(p: &Vector, s: &Vector) -> f64 {
    linalg::vec_inf_norm(p) / s.min()
}

/// `s ≤ p ≤ β (min_i s_i) 1`, up to rounding in the last bits.
pub fn m_beta_check(problem: &PositiveProblem, p: &Vector, beta: f64) -> bool {
    let s = problem.s();
    let cap = beta * s.min();
    let tol = 4.0 * f64::EPSILON * cap.abs().max(linalg::vec_inf_norm(p));
    s.iter().zip(p.iter()).all(|(&si, &pi)| si <= pi + tol && pi <= cap + tol)
}

/// `‖A + |B|Ē‖₁`.
pub fn closed_loop_norm(problem: &PositiveProblem) -> f64 {
    let abs_b = linalg::elementwise_abs(problem.b());
    linalg::one_norm(&(problem.a() + abs_b * problem.extended_constraint().matrix()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Constants {
    pub beta: f64,
    pub rho: f64,
    /// `α̌ = 1 − ρβ`.
    pub alpha_check: f64,
    /// `α̂ = 1 − α̌⁻¹ρβ`.
    pub alpha_hat: f64,
    /// `θ = α̌⁻¹(1 + ρβ(1 + β‖A + |B|Ē‖₁))`.
    pub theta: f64,
}

impl Constants {
    pub fn new(problem: &PositiveProblem, beta: f64, rho: f64) -> Result<Self> {
        if !(rho >= 0.0) || !(beta > 0.0) {
            return Err(Error::InvalidInput(format!("beta {beta}, rho {rho}")));
        }
        let rb = rho * beta;
        if rb >= 1.0 {
            return Err(Error::HypothesisViolated { rho_beta: rb });
        }
        let alpha_check = 1.0 - rb;
        let alpha_hat = 1.0 - rb / alpha_check;
        let theta = (1.0 + rb * (1.0 + beta * closed_loop_norm(problem))) / alpha_check;
        Ok(Self { beta, rho, alpha_check, alpha_hat, theta })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnvelopeCheck {
    pub holds: bool,
    /// `min_i (p(t) − α̂p)_i`.
    pub lower_margin: f64,
    /// `min_i (α̌⁻¹p − p(t))_i`.
    pub upper_margin: f64,
}

/// `α̂ p ≤ p(t) ≤ α̌⁻¹ p` elementwise with [`BOUND_SLACK`].
pub fn theorem1_bounds(problem: &PositiveProblem, p: &Vector, p_t: &Vector, beta: f64, rho: f64) -> Result<EnvelopeCheck> {
    let c = Constants::new(problem, beta, rho)?;
    let lower_margin = (p_t - p * c.alpha_hat).min();
    let upper_margin = (p / c.alpha_check - p_t).min();
    Ok(EnvelopeCheck {
        holds: lower_margin >= -BOUND_SLACK && upper_margin >= -BOUND_SLACK,
        lower_margin,
        upper_margin,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecreaseCheck {
    pub holds: bool,
    /// `min_i (θp − s − Aᵀp − Kᵀ(r + Bᵀp))_i`.
    pub margin: f64,
}

/// `θp − s ≥ Aᵀp + Kᵀ(r + Bᵀp)` elementwise with [`BOUND_SLACK`].
pub fn theorem2_inequality(
    problem: &PositiveProblem,
    p: &Vector,
    gain: &GainMatrix,
    beta: f64,
    rho: f64,
) -> Result<DecreaseCheck> {
    let c = Constants::new(problem, beta, rho)?;
    let lhs = p * c.theta - problem.s();
    let rhs = problem.a().tr_mul(p) + gain.matrix().tr_mul(&(problem.r() + problem.b().tr_mul(p)));
    let margin = (lhs - rhs).min();
    Ok(DecreaseCheck { holds: margin >= -BOUND_SLACK, margin })
}

/// Largest `γ ∈ (0, 1]` with
/// `γ(s − Ēᵀ|r|) ≤ s − Ēᵀ|r| − (α̌⁻¹ − 1 + ρβ(1 + β‖A + |B|Ē‖₁))βs`;
/// `None` when no positive `γ` exists or `ρβ ≥ 1`.
pub fn corollary1_gamma(problem: &PositiveProblem, beta: f64, rho: f64) -> Option<f64> {
    let c = Constants::new(problem, beta, rho).ok()?;
    let coeff = 1.0 / c.alpha_check - 1.0 + rho * beta * (1.0 + beta * closed_loop_norm(problem));
    let base = problem.s() - problem.extended_constraint().matrix().tr_mul(&problem.r().abs());
    let rhs = &base - problem.s() * (coeff * beta);
    let mut gamma: f64 = 1.0;
    for (&b, &r) in base.iter().zip(rhs.iter()) {
        if !(b > 0.0) {
            return None;
        }
        gamma = gamma.min(r / b);
    }
    (gamma > 0.0).then_some(gamma)
}

/// One recorded step for the accumulated cost bound.
#[derive(Debug, Clone, PartialEq)]
pub struct CostBoundStep {
    pub x: Vector,
    /// The data-driven gain `K(t)` in force at this step.
    pub gain: Matrix,
    /// `ε(t) = (K_used − K(t)) x`.
    pub epsilon: Vector,
    pub w: Vector,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostBound {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `Σ sᵀx + rᵀK(t)x ≤ γ⁻¹(pᵀx_{t₀} + Σ βsᵀ|Bε + w|)` over the window, relative slack 1e−9.
pub fn corollary1_cost_bound(
    problem: &PositiveProblem,
    window: &[CostBoundStep],
    p: &Vector,
    beta: f64,
    gamma: f64,
) -> CostBound {
    let Some(first) = window.first() else {
        return CostBound { lhs: 0.0, rhs: 0.0, holds: true };
    };
    let mut lhs = 0.0;
    let mut forcing = 0.0;
    for step in window {
        lhs += problem.s().dot(&step.x) + problem.r().dot(&(&step.gain * &step.x));
        forcing += beta * problem.s().dot(&(problem.b() * &step.epsilon + &step.w).abs());
    }
    let rhs = (p.dot(&first.x) + forcing) / gamma;
    CostBound { lhs, rhs, holds: lhs <= rhs + BOUND_SLACK * rhs.abs().max(1.0) }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificationReport {
    #[serde(flatten)]
    pub constants: Constants,
    pub gamma: Option<f64>,
    pub theorem1: EnvelopeCheck,
    pub theorem2: DecreaseCheck,
}

/// All per-step certificates for a data-driven solution `(p(t), K(t))` at misspecification `ρ`.
pub fn certify(
    problem: &PositiveProblem,
    p: &Vector,
    p_t: &Vector,
    gain: &GainMatrix,
    beta: f64,
    rho: f64,
) -> Result<CertificationReport> {
    Ok(CertificationReport {
        constants: Constants::new(problem, beta, rho)?,
        gamma: corollary1_gamma(problem, beta, rho),
        theorem1: theorem1_bounds(problem, p, p_t, beta, rho)?,
        theorem2: theorem2_inequality(problem, p, gain, beta, rho)?,
    })
}
