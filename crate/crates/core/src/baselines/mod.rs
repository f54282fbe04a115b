//! Comparators and correctness oracles: a bagging ensemble of independently
//! fine-tuned encoders, and a SAMME reference over decision stumps.

mod bagging;
mod oracle;
mod stump;

pub use bagging::{bag_train, geometric_multipliers, BagConfig, BagEnsemble};
pub use oracle::{
    format_trajectory, reference_problems, samme_oracle, trajectory_gap, OracleRound, Problem,
};
pub use stump::{Stump, StumpLearner, STUMP_TIE_TOL};
