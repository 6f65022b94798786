//! Learning model predictive control for iterative tasks.
//!
//! A controller repeatedly executes the same task from a fixed start state.
//! Each successful run is stored in a *sampled safe set*; the terminal
//! constraint of the receding-horizon problem is restricted to stored
//! states, and the terminal cost is the best realized cost-to-go among the
//! trajectories passing through them. This keeps every iteration feasible
//! and makes the iteration cost non-increasing, while the closed loop
//! steadily improves toward a (locally) optimal trajectory.
//!
//! The crate provides:
//!
//! - [`model`], [`trajectory`]: problem data and realized trajectories;
//! - [`safe_set`]: the stored-state set, its cost-to-go map and the
//!   bound-based candidate pruning;
//! - [`qp`], [`condense`]: a dense strictly convex QP solver and the MPC
//!   condensing that feeds it;
//! - [`controller`]: candidate enumeration, the convex-hull relaxation, the
//!   receding-horizon loop and the campaign runner;
//! - [`systems`]: the constrained-LQR, Dubins-car and adaptive Dubins
//!   instances with their initial feasible iterations;
//! - [`oracle`]: independent reference computations for verification;
//! - [`cli`]: the experiment runner behind the `lmpc-lab` binary.

pub mod cli;
pub mod condense;
pub mod controller;
pub mod model;
pub mod oracle;
pub mod qp;
pub mod safe_set;
pub mod systems;
pub mod trajectory;

pub use condense::{condense_mpc, condense_template, CondensedMpc};
pub use controller::{
    run_iteration, run_until_convergence, solve_lmpc_step, strategy_by_name, strategy_names,
    CampaignResult, ClosedLoopPlant, ConvexHullStrategy, EnumerationStrategy, LmpcError,
    LmpcProblem, ModelPlant, StepMode, StepOutcome, StepResult, StepStrategy, SubproblemSolution,
};
pub use model::{
    ConfigError, ConstraintSet, DynamicsModel, Ellipse, InputVec, StageCost, StateVec, Violation,
};
pub use qp::{solve_qp, solve_qp_warm, KktResiduals, QpError, QpSolution, QpStatus, QuadraticProgram};
pub use safe_set::{cost_to_go_tails, RestrictionSet, SafePoint, SafeSetError, SampledSafeSet};
pub use trajectory::{max_pointwise_gap, IterationRecord, Trajectory, TrajectoryStep};
