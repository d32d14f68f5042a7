//! Problem instances: linear dynamics with nonnegative state, linear stage cost, and per-block
//! input budgets `1ᵀu_i ≤ E_iᵀx`.

use std::fmt;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};

/// Enumeration of the feasible gain set refuses to go above this many members by default.
pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

/// Margin used for the strict inequality `s > Ēᵀr`.
pub const STRICT_MARGIN: f64 = 1e-12;

/// Slack for the elementwise positivity check `A + BK ≥ 0`.
pub const POSITIVITY_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PositiveProblem {
    a: Matrix,
    b: Matrix,
    e: Matrix,
    s: Vector,
    r: Vector,
    partition: Vec<usize>,
    offsets: Vec<usize>,
}

impl PositiveProblem {
    /// Builds an instance after checking that all dimensions agree.
    ///
    /// Sign conditions and the two standing assumptions are not enforced here; see [`validate`].
    /// Blocks of width zero are accepted (a state with no alternative inputs).
    pub fn new(
        a: Matrix,
        b: Matrix,
        e: Matrix,
        s: Vector,
        r: Vector,
        partition: Vec<usize>,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension(format!("A is {}x{}, expected square", n, a.ncols())));
        }
        if b.nrows() != n {
            return Err(Error::Dimension(format!("B has {} rows, expected {n}", b.nrows())));
        }
        if e.nrows() != n || e.ncols() != n {
            return Err(Error::Dimension(format!(
                "E is {}x{}, expected {n}x{n}",
                e.nrows(),
                e.ncols()
            )));
        }
        if s.len() != n {
            return Err(Error::Dimension(format!("s has length {}, expected {n}", s.len())));
        }
        if partition.len() != n {
            return Err(Error::Dimension(format!(
                "partition has {} blocks, expected {n}",
                partition.len()
            )));
        }
        let m: usize = partition.iter().sum();
        if b.ncols() != m {
            return Err(Error::Dimension(format!(
                "B has {} columns but the partition sums to {m}",
                b.ncols()
            )));
        }
        if r.len() != m {
            return Err(Error::Dimension(format!("r has length {}, expected {m}", r.len())));
        }
        let finite = linalg::all_finite(a.iter())
            && linalg::all_finite(b.iter())
            && linalg::all_finite(e.iter())
            && linalg::all_finite(s.iter())
            && linalg::all_finite(r.iter());
        if !finite {
            return Err(Error::InvalidInput("non-finite problem data".into()));
        }
        let offsets = partition
            .iter()
            .scan(0, |acc, &mi| {
                let start = *acc;
                *acc += mi;
                Some(start)
            })
            .collect();
        Ok(Self { a, b, e, s, r, partition, offsets })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn e(&self) -> &Matrix {
        &self.e
    }

    pub fn s(&self) -> &Vector {
        &self.s
    }

    pub fn r(&self) -> &Vector {
        &self.r
    }

    pub fn partition(&self) -> &[usize] {
        &self.partition
    }

    /// Columns of `B` (and entries of `u`, `r`) belonging to block `i`.
    pub fn block(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i] + self.partition[i]
    }

    /// `[s; r]`, the constant term of the q-iteration.
    pub fn stacked_costs(&self) -> Vector {
        let mut c = Vector::zeros(self.n() + self.m());
        c.rows_mut(0, self.n()).copy_from(&self.s);
        c.rows_mut(self.n(), self.m()).copy_from(&self.r);
        c
    }

    /// `[A B]ᵀ`, the model operator of the q-iteration.
    pub fn model_operator(&self) -> Matrix {
        let n = self.n();
        let mut op = Matrix::zeros(n + self.m(), n);
        op.rows_mut(0, n).copy_from(&self.a.transpose());
        op.rows_mut(n, self.m()).copy_from(&self.b.transpose());
        op
    }

    /// The same constraint structure and costs with different dynamics.
    pub fn with_dynamics(&self, a: Matrix, b: Matrix) -> Result<Self> {
        Self::new(a, b, self.e.clone(), self.s.clone(), self.r.clone(), self.partition.clone())
    }

    /// Ē: row block `i` holds `m_i` copies of `E_iᵀ`.
    pub fn extended_constraint(&self) -> ExtendedConstraintMatrix {
        let mut ebar = Matrix::zeros(self.m(), self.n());
        for i in 0..self.n() {
            for row in self.block(i) {
                ebar.row_mut(row).copy_from(&self.e.row(i));
            }
        }
        ExtendedConstraintMatrix(ebar)
    }

    pub fn validate(&self) -> ValidationReport {
        validate(self)
    }

    /// Number of vertex gains, `Π (m_i + 1)`, saturating.
    pub fn gain_count(&self) -> u128 {
        self.partition
            .iter()
            .fold(1u128, |acc, &mi| acc.saturating_mul(mi as u128 + 1))
    }

    pub fn enumerate_gains(&self) -> Result<Vec<GainMatrix>> {
        self.enumerate_gains_capped(DEFAULT_ENUMERATION_CAP)
    }

    /// All vertex gains in lexicographic selector order (`off` before row 0 before row 1 ...).
    pub fn enumerate_gains_capped(&self, cap: u128) -> Result<Vec<GainMatrix>> {
        let count = self.gain_count();
        if count > cap {
            return Err(Error::TooLargeToEnumerate { count, cap });
        }
        let n = self.n();
        let mut selector: Vec<Option<usize>> = vec![None; n];
        let mut out = Vec::with_capacity(count as usize);
        loop {
            out.push(GainMatrix::from_selector(self, &selector)?);
            // odometer, last block fastest
            let mut i = n;
            loop {
                if i == 0 {
                    return Ok(out);
                }
                i -= 1;
                let next = match selector[i] {
                    None if self.partition[i] > 0 => Some(0),
                    Some(j) if j + 1 < self.partition[i] => Some(j + 1),
                    _ => None,
                };
                selector[i] = next;
                if next.is_some() {
                    break;
                }
            }
        }
    }

    pub fn random_gain(&self, seed: u64) -> GainMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.random_gain_with(&mut rng)
    }

    /// Uniform draw over the vertex gains; blocks are independent so each is drawn uniformly.
    pub fn random_gain_with<R: Rng + ?Sized>(&self, rng: &mut R) -> GainMatrix {
        let selector: Vec<Option<usize>> = self
            .partition
            .iter()
            .map(|&mi| match rng.random_range(0..=mi) {
                0 => None,
                j => Some(j - 1),
            })
            .collect();
        GainMatrix::from_selector(self, &selector).expect("selector drawn within partition")
    }

    pub fn zero_gain(&self) -> GainMatrix {
        GainMatrix::from_selector(self, &vec![None; self.n()]).expect("zero selector is valid")
    }

    /// Membership in the gain set of the budget constraints: `K ≥ 0` and each block's column sums
    /// equal either `E_iᵀ` or zero.
    pub fn is_feasible_gain(&self, k: &Matrix) -> bool {
        const TOL: f64 = 1e-12;
        if k.nrows() != self.m() || k.ncols() != self.n() {
            return false;
        }
        if k.iter().any(|&v| v < 0.0) {
            return false;
        }
        (0..self.n()).all(|i| {
            let range = self.block(i);
            let sums: Vec<f64> = (0..self.n())
                .map(|c| range.clone().map(|row| k[(row, c)]).sum())
                .collect();
            let full = sums.iter().enumerate().all(|(c, v)| (v - self.e[(i, c)]).abs() <= TOL);
            let zero = sums.iter().all(|v| v.abs() <= TOL);
            full || zero
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: ProblemDocument = serde_json::from_str(text)?;
        doc.into_problem()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&ProblemDocument::from(self)).expect("problem serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string() + "\n")?;
        Ok(())
    }
}

/// On-disk layout: row-major nested arrays under `A`, `B`, `E`, `s`, `r`, `partition`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemDocument {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "E")]
    pub e: Vec<Vec<f64>>,
    pub s: Vec<f64>,
    pub r: Vec<f64>,
    pub partition: Vec<usize>,
}

impl ProblemDocument {
    pub fn into_problem(self) -> Result<PositiveProblem> {
        let n = self.s.len();
        let m: usize = self.partition.iter().sum();
        let ragged = |name: &str| Error::Dimension(format!("{name} has ragged rows"));
        let a = linalg::matrix_from_rows(&self.a, Some(n)).ok_or_else(|| ragged("A"))?;
        let b = linalg::matrix_from_rows(&self.b, Some(m)).ok_or_else(|| ragged("B"))?;
        let e = linalg::matrix_from_rows(&self.e, Some(n)).ok_or_else(|| ragged("E"))?;
        PositiveProblem::new(
            a,
            b,
            e,
            Vector::from_vec(self.s),
            Vector::from_vec(self.r),
            self.partition,
        )
    }
}

impl From<&PositiveProblem> for ProblemDocument {
    fn from(p: &PositiveProblem) -> Self {
        Self {
            a: linalg::matrix_to_rows(&p.a),
            b: linalg::matrix_to_rows(&p.b),
            e: linalg::matrix_to_rows(&p.e),
            s: p.s.iter().cloned().collect(),
            r: p.r.iter().cloned().collect(),
            partition: p.partition.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedConstraintMatrix(pub Matrix);

impl ExtendedConstraintMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// A vertex of the feasible gain set: each block is either zero or carries `E_iᵀ` in one row.
#[derive(Debug, Clone, PartialEq)]
pub struct GainMatrix {
    k: Matrix,
    selector: Vec<Option<usize>>,
}

impl GainMatrix {
    /// `selector[i] = Some(j)` puts `E_iᵀ` at row `j` (0-based) of block `i`.
    pub fn from_selector(problem: &PositiveProblem, selector: &[Option<usize>]) -> Result<Self> {
        if selector.len() != problem.n() {
            return Err(Error::Dimension(format!(
                "selector has {} entries, expected {}",
                selector.len(),
                problem.n()
            )));
        }
        let mut k = Matrix::zeros(problem.m(), problem.n());
        for (i, sel) in selector.iter().enumerate() {
            if let Some(j) = *sel {
                if j >= problem.partition()[i] {
                    return Err(Error::InvalidInput(format!(
                        "selector row {j} outside block {i} of width {}",
                        problem.partition()[i]
                    )));
                }
                let row = problem.block(i).start + j;
                k.row_mut(row).copy_from(&problem.e().row(i));
            }
        }
        Ok(Self { k, selector: selector.to_vec() })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.k
    }

    pub fn selector(&self) -> &[Option<usize>] {
        &self.selector
    }

    /// `u = Kx`.
    pub fn apply(&self, x: &Vector) -> Vector {
        &self.k * x
    }
}

impl fmt::Display for GainMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .selector
            .iter()
            .map(|s| match s {
                None => "off".to_string(),
                Some(j) => (j + 1).to_string(),
            })
            .collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Check {
    Pass,
    Fail { row: usize, col: usize, value: f64, detail: String },
}

impl Check {
    pub fn passed(&self) -> bool {
        matches!(self, Check::Pass)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    /// `E`, `s`, `r` entrywise nonnegative.
    pub nonnegativity: Check,
    /// Closed-loop positivity `A + BK ≥ 0` for every vertex gain.
    pub assumption1: Check,
    /// `s > Ēᵀr` with margin [`STRICT_MARGIN`].
    pub assumption2: Check,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.nonnegativity.passed() && self.assumption1.passed() && self.assumption2.passed()
    }
}

pub fn validate(problem: &PositiveProblem) -> ValidationReport {
    ValidationReport {
        nonnegativity: check_nonnegativity(problem),
        assumption1: check_closed_loop_positivity(problem),
        assumption2: check_cost_dominance(problem),
    }
}

fn check_nonnegativity(problem: &PositiveProblem) -> Check {
    let e = problem.e();
    for row in 0..e.nrows() {
        for col in 0..e.ncols() {
            let value = e[(row, col)];
            if value < 0.0 {
                return Check::Fail { row, col, value, detail: "E has a negative entry".into() };
            }
        }
    }
    for (name, v) in [("s", problem.s()), ("r", problem.r())] {
        if let Some((i, &value)) = v.iter().enumerate().find(|(_, x)| **x < 0.0) {
            return Check::Fail { row: i, col: 0, value, detail: format!("{name} has a negative entry") };
        }
    }
    Check::Pass
}

/// Entry `(row, col)` of `A + BK` is smallest when every block picks, independently, the input
/// minimizing `B[row, j] * E[i, col]` or stays off, so the minimum over all vertex gains is
/// `A + Σ_i min(0, min_j B_i[row, j] E[i, col])`.
fn check_closed_loop_positivity(problem: &PositiveProblem) -> Check {
    let n = problem.n();
    let mut worst: Option<(usize, usize, f64, Vec<Option<usize>>)> = None;
    for row in 0..n {
        for col in 0..n {
            let mut value = problem.a()[(row, col)];
            let mut selector = vec![None; n];
            for (i, slot) in selector.iter_mut().enumerate() {
                let weight = problem.e()[(i, col)];
                let mut best = 0.0;
                for (j, c) in problem.block(i).enumerate() {
                    let contribution = problem.b()[(row, c)] * weight;
                    if contribution < best {
                        best = contribution;
                        *slot = Some(j);
                    }
                }
                value += best;
            }
            if worst.as_ref().is_none_or(|w| value < w.2) {
                worst = Some((row, col, value, selector));
            }
        }
    }
    match worst {
        Some((row, col, value, selector)) if value < -POSITIVITY_SLACK => {
            let gain: Vec<String> = selector
                .iter()
                .map(|s| s.map_or("off".to_string(), |j| (j + 1).to_string()))
                .collect();
            Check::Fail {
                row,
                col,
                value,
                detail: format!("(A+BK)[{row},{col}] < 0 for gain selector [{}]", gain.join(", ")),
            }
        }
        _ => Check::Pass,
    }
}

fn check_cost_dominance(problem: &PositiveProblem) -> Check {
    let ebar = problem.extended_constraint();
    let bound = ebar.matrix().transpose() * problem.r();
    for i in 0..problem.n() {
        let margin = problem.s()[i] - bound[i];
        if margin <= STRICT_MARGIN {
            return Check::Fail {
                row: i,
                col: 0,
                value: margin,
                detail: format!("s[{i}] = {} does not exceed (Ēᵀr)[{i}] = {}", problem.s()[i], bound[i]),
            };
        }
    }
    Check::Pass
}
