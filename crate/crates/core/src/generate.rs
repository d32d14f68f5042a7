//! Random instances for property tests and benchmarks.

use rand::Rng;

use crate::linalg::{self, Matrix, Vector};
use crate::problem::PositiveProblem;
use crate::ssp::SspInstance;

#[derive(Debug, Clone, Copy)]
pub struct ProblemShape {
    pub max_states: usize,
    pub max_block: usize,
}

impl Default for ProblemShape {
    fn default() -> Self {
        Self { max_states: 5, max_block: 3 }
    }
}

/// A problem satisfying both standing assumptions with a stable open loop, so the value is finite.
///
/// `A ≥ 0` is scaled to a spectral radius in `[0.3, 0.9]`; the negative part of `B` is shrunk
/// row by row until every vertex closed loop stays nonnegative; `r` is scaled below `s`.
pub fn random_problem<R: Rng + ?Sized>(rng: &mut R, shape: ProblemShape) -> PositiveProblem {
    let n = rng.random_range(1..=shape.max_states);
    let partition: Vec<usize> = (0..n).map(|_| rng.random_range(1..=shape.max_block)).collect();
    let m: usize = partition.iter().sum();

    let mut a = Matrix::from_fn(n, n, |_, _| if rng.random_bool(0.8) { rng.random::<f64>() } else { 0.0 });
    let radius = linalg::spectral_radius(&a);
    if radius > 0.0 {
        a *= rng.random_range(0.3..0.9) / radius;
    }
    let e = Matrix::from_fn(n, n, |i, j| {
        if i == j || rng.random_bool(0.3) {
            rng.random_range(0.2..1.5)
        } else {
            0.0
        }
    });
    let mut b = Matrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));

    let mut offsets = Vec::with_capacity(n);
    let mut start = 0;
    for &w in &partition {
        offsets.push(start..start + w);
        start += w;
    }
    for row in 0..n {
        // worst-case negative contribution to each column of A + BK
        let mut scale: f64 = 1.0;
        for col in 0..n {
            let worst: f64 = offsets
                .iter()
                .enumerate()
                .map(|(i, block)| block.clone().map(|j| b[(row, j)]).fold(0.0, f64::min) * e[(i, col)])
                .sum();
            if worst < 0.0 {
                scale = scale.min(a[(row, col)] / -worst);
            }
        }
        for j in 0..m {
            if b[(row, j)] < 0.0 {
                b[(row, j)] *= scale;
            }
        }
    }

    let s = Vector::from_fn(n, |_, _| rng.random_range(0.5..2.0));
    let mut r = Vector::from_fn(m, |_, _| rng.random_range(0.0..1.0));
    let problem = PositiveProblem::new(a.clone(), b.clone(), e.clone(), s.clone(), r.clone(), partition.clone())
        .expect("generated dimensions are consistent");
    let load = problem.extended_constraint().matrix().tr_mul(&r);
    let worst = load.iter().zip(s.iter()).map(|(l, s)| l / s).fold(0.0, f64::max);
    if worst > 0.0 {
        r *= rng.random_range(0.1..0.9) / worst;
    }
    PositiveProblem::new(a, b, e, s, r, partition).expect("generated dimensions are consistent")
}

/// Proper SSP with 3–6 regular states, 1–3 actions each and goal probability at least 0.1 from
/// every state-action pair.
pub fn random_ssp<R: Rng + ?Sized>(rng: &mut R) -> SspInstance {
    let n = rng.random_range(3..=6);
    let mut transitions = Vec::with_capacity(n);
    let mut costs = Vec::with_capacity(n);
    for _ in 0..n {
        let actions = rng.random_range(1..=3);
        let t = Matrix::from_fn(n + 1, actions, |_, _| rng.random::<f64>());
        let mut t = t;
        for mut col in t.column_iter_mut() {
            let goal_mass = rng.random_range(0.1..0.6);
            let rest: f64 = col.rows(0, n).sum();
            for k in 0..n {
                col[k] *= (1.0 - goal_mass) / rest;
            }
            col[n] = 1.0 - col.rows(0, n).sum();
        }
        transitions.push(t);
        costs.push(Vector::from_fn(actions, |_, _| rng.random_range(0.5..2.0)));
    }
    let initial = rng.random_range(0..n);
    SspInstance::new(transitions, costs, initial).expect("generated SSP is well formed")
}

/// Random symmetric positive definite `k × k` matrix with a unit floor on its spectrum.
pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Matrix {
    let g = Matrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
    let mut s = &g * g.transpose() + Matrix::identity(k, k);
    for i in 0..k {
        for j in 0..i {
            let v = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    s
}

pub fn random_state<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vector {
    Vector::from_fn(n, |_, _| if rng.random_bool(0.2) { 0.0 } else { rng.random::<f64>() * scale })
}
