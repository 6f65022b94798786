//! The worked problem instances, registered by name and configurable from
//! JSON overrides.

pub mod adaptive;
pub mod clqr;
pub mod dubins;

use std::sync::Arc;

use crate::controller::{ClosedLoopPlant, LmpcProblem, ModelPlant, StepMode};
use crate::model::ConfigError;
use crate::safe_set::SampledSafeSet;
use crate::trajectory::IterationRecord;

pub use adaptive::{adaptive_dynamics_step, appendix_initialize, estimate_error, AdaptiveDubinsInstance, AdaptivePlant};
pub use clqr::{clqr_seed_iteration0, dare_lqr_gain, ClqrInstance};
pub use dubins::{dubins_model, dubins_seed_iteration0, DubinsInstance};

/// A ready-to-run task: problem data, the initial feasible iteration, the
/// safe set seeded from it, and the plant the closed loop runs on.
pub struct InstanceSetup {
    pub name: String,
    pub problem: LmpcProblem,
    pub seed: IterationRecord,
    pub initial_safe_set: SampledSafeSet,
    pub plant: Arc<dyn ClosedLoopPlant>,
}

pub fn instance_names() -> &'static [&'static str] {
    &["clqr", "dubins", "adaptive-dubins"]
}

fn parse_overrides<T: serde::de::DeserializeOwned>(overrides: &serde_json::Value) -> Result<T, ConfigError> {
    let value = if overrides.is_null() {
        serde_json::Value::Object(serde_json::Map::new())
    } else {
        overrides.clone()
    };
    serde_json::from_value(value)
        .map_err(|e| ConfigError::Invalid(format!("instance overrides rejected: {e}")))
}

/// Build a registered instance with its JSON overrides applied over the
/// defaults. Unknown instance names and unknown override keys are errors.
pub fn build_instance(
    name: &str,
    overrides: &serde_json::Value,
    mode: StepMode,
) -> Result<InstanceSetup, ConfigError> {
    match name {
        "clqr" => {
            let inst: ClqrInstance = parse_overrides(overrides)?;
            let problem = inst.problem(mode)?;
            let seed = clqr_seed_iteration0(&inst)?;
            let mut ss = SampledSafeSet::new();
            ss.add_trajectory(&seed)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            Ok(InstanceSetup {
                name: name.to_string(),
                plant: Arc::new(ModelPlant(problem.model.clone())),
                problem,
                seed,
                initial_safe_set: ss,
            })
        }
        "dubins" => {
            let inst: DubinsInstance = parse_overrides(overrides)?;
            let problem = inst.problem(mode)?;
            let seed = dubins_seed_iteration0(&inst)?;
            let mut ss = SampledSafeSet::new();
            ss.add_trajectory(&seed)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            Ok(InstanceSetup {
                name: name.to_string(),
                plant: Arc::new(ModelPlant(problem.model.clone())),
                problem,
                seed,
                initial_safe_set: ss,
            })
        }
        "adaptive-dubins" => {
            let inst: AdaptiveDubinsInstance = parse_overrides(overrides)?;
            let (seed, ss) = appendix_initialize(&inst)?;
            let x_start = seed.trajectory.steps[0].state.clone();
            let x_target = seed.trajectory.terminal.clone();
            let problem = inst.problem(mode, x_start, x_target)?;
            Ok(InstanceSetup {
                name: name.to_string(),
                plant: Arc::new(inst.plant()),
                problem,
                seed,
                initial_safe_set: ss,
            })
        }
        other => Err(ConfigError::Invalid(format!(
            "unknown instance '{other}', expected one of {:?}",
            instance_names()
        ))),
    }
}
