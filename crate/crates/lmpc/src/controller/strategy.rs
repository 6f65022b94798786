//! Step strategies behind a common trait, registered by name and selected
//! at runtime from the experiment configuration.

use std::sync::Arc;

use crate::model::StateVec;
use crate::safe_set::SampledSafeSet;

use super::{linear, solve_lmpc_step, LmpcError, LmpcProblem, StepOutcome, StepResult};

/// One way of handling the terminal constraint in a receding-horizon step.
pub trait StepStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    fn solve_step(
        &self,
        prob: &LmpcProblem,
        ss: &SampledSafeSet,
        x: &StateVec,
        time: usize,
        prev: Option<&StepResult>,
        warm: Option<&StepOutcome>,
    ) -> Result<StepOutcome, LmpcError>;
}

/// Candidate enumeration over the sampled safe set, optionally pruned to the
/// bound-based restriction set.
#[derive(Clone, Copy, Debug)]
pub struct EnumerationStrategy {
    pub use_restriction: bool,
}

impl Default for EnumerationStrategy {
    fn default() -> Self {
        Self { use_restriction: true }
    }
}

impl StepStrategy for EnumerationStrategy {
    fn name(&self) -> &'static str {
        "enumeration"
    }

    fn solve_step(
        &self,
        prob: &LmpcProblem,
        ss: &SampledSafeSet,
        x: &StateVec,
        time: usize,
        prev: Option<&StepResult>,
        warm: Option<&StepOutcome>,
    ) -> Result<StepOutcome, LmpcError> {
        solve_lmpc_step(prob, ss, x, time, prev, warm, self.use_restriction)
    }
}

/// Convex-hull relaxation of the terminal set with barycentric terminal
/// cost; one QP per step. Linear dynamics and convex stage cost only.
#[derive(Clone, Copy, Debug, Default)]
pub struct ConvexHullStrategy;

impl StepStrategy for ConvexHullStrategy {
    fn name(&self) -> &'static str {
        "convex-relaxation"
    }

    fn solve_step(
        &self,
        prob: &LmpcProblem,
        ss: &SampledSafeSet,
        x: &StateVec,
        time: usize,
        prev: Option<&StepResult>,
        warm: Option<&StepOutcome>,
    ) -> Result<StepOutcome, LmpcError> {
        let warm_support: &[usize] = warm.map(|o| o.warm_active.as_slice()).unwrap_or(&[]);
        linear::solve_relaxed_step(prob, ss, x, time, prev, warm_support)
    }
}

/// Look a strategy up by its registered name.
pub fn strategy_by_name(name: &str) -> Option<Arc<dyn StepStrategy>> {
    match name {
        "enumeration" => Some(Arc::new(EnumerationStrategy::default())),
        "convex-relaxation" => Some(Arc::new(ConvexHullStrategy)),
        _ => None,
    }
}

pub fn strategy_names() -> &'static [&'static str] {
    &["enumeration", "convex-relaxation"]
}
