//! Utility proportional fairness rate allocation for a two-tier cellular network.
//!
//! Small cells running on leased spectrum allocate first. SUEs whose application utility stays
//! below their required minimum are escalated to the macro cell, which allocates over its own
//! users and the escalated SUEs with carrier aggregation. The math is generic over
//! [`Scalar`] (`f32` or `f64`); the aliases below fix it to `f64`.

// Validation is written as `!(x > 0)` throughout so that NaN is rejected along with the rest.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod oracle;
pub mod scalar;
pub mod sharing;
pub mod solver;
pub mod utility;

pub use error::{Error, Result};
pub use oracle::{grid_search_allocate, GridSpec, OracleResult};
pub use scalar::Scalar;
pub use sharing::{
    exchange_parameters, macro_round, run_scenario, small_cell_round, AllocationReport, CellId,
    CellOutcome, EscalationRecord, ParameterMessage, Scenario, SmallCell, Tier, UserOutcome,
    UserProfile,
};
pub use solver::{
    allocate, allocate_with, stationarity_gap, AllocationProblem, BisectionStep, CellAllocation,
    Entry, SolverOptions, UserId,
};
pub use utility::{UtilityFunction, UtilityParams};

pub type Utility = UtilityFunction<f64>;
pub type Utility32 = UtilityFunction<f32>;
pub type Problem = AllocationProblem<f64>;
pub type Problem32 = AllocationProblem<f32>;
pub type Allocation = CellAllocation<f64>;
pub type Allocation32 = CellAllocation<f32>;
pub type Grid = GridSpec<f64>;
pub type Scenario64 = Scenario<f64>;
pub type Scenario32 = Scenario<f32>;
pub type Report = AllocationReport<f64>;
pub type Report32 = AllocationReport<f32>;
