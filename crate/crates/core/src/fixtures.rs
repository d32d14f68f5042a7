//! The three-state benchmark instance, shipped as checked-in JSON.

use crate::linalg::Vector;
use crate::problem::PositiveProblem;
use crate::ssp::SspInstance;

pub const SSP3_MDP_JSON: &str = include_str!("../fixtures/ssp3_mdp.json");
pub const SSP3_JSON: &str = include_str!("../fixtures/ssp3.json");

/// Four-state shortest-path instance (three regular states plus the goal).
pub fn ssp3_mdp() -> SspInstance {
    SspInstance::from_json_str(SSP3_MDP_JSON).expect("bundled SSP fixture parses")
}

/// The converted instance: n = 3, m = 4, partition (1, 2, 1), E = I.
pub fn ssp3_problem() -> PositiveProblem {
    PositiveProblem::from_json_str(SSP3_JSON).expect("bundled problem fixture parses")
}

/// All mass starts in the first state.
pub fn ssp3_initial_state() -> Vector {
    Vector::from_vec(vec![1.0, 0.0, 0.0])
}
