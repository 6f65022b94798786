//! The learning MPC controller: fixed-terminal candidate enumeration over
//! the sampled safe set, the receding-horizon closed loop, the iteration
//! runner and the inter-iteration convergence test.

pub mod linear;
pub mod nonlinear;
pub mod strategy;

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::condense::condense_template;
use crate::model::{ConfigError, ConstraintSet, DynamicsModel, InputVec, StageCost, StateVec};
use crate::safe_set::{SafeSetError, SampledSafeSet};
use crate::trajectory::{max_pointwise_gap, IterationRecord, Trajectory, TrajectoryStep};

pub use strategy::{strategy_by_name, strategy_names, ConvexHullStrategy, EnumerationStrategy, StepStrategy};

/// Hard cap on closed-loop steps per iteration; hitting it means the
/// termination threshold is unreachable and is reported as an error.
pub const STEP_LIMIT: usize = 20_000;

/// Terminal-constraint handling mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepMode {
    /// Enumerate stored points as fixed terminal candidates.
    Enumeration,
    /// Relax the safe set to its convex hull with barycentric terminal cost
    /// (linear dynamics and convex stage cost only).
    ConvexRelaxation,
}

impl StepMode {
    pub fn name(&self) -> &'static str {
        match self {
            StepMode::Enumeration => "enumeration",
            StepMode::ConvexRelaxation => "convex-relaxation",
        }
    }
}

/// Fast necessary condition for "`target` is reachable from `x` in `k`
/// steps", used to skip hopeless candidate solves. Must never reject a
/// reachable pair.
pub type ReachabilityFilter = Arc<dyn Fn(&StateVec, &StateVec, usize) -> bool + Send + Sync>;

/// Extra initial guesses for the nonlinear candidate solver, keyed by
/// (current state, candidate state, plan length).
pub type StartHints =
    Arc<dyn Fn(&StateVec, &StateVec, usize) -> Vec<Vec<InputVec>> + Send + Sync>;

/// One iterative control task: dynamics, cost, constraints and the
/// controller's horizon and thresholds.
#[derive(Clone)]
pub struct LmpcProblem {
    pub model: DynamicsModel,
    pub cost: StageCost,
    pub constraints: ConstraintSet,
    pub horizon: usize,
    pub x_start: StateVec,
    pub x_target: StateVec,
    /// Termination threshold on the optimal step cost.
    pub epsilon: f64,
    /// Inter-iteration convergence tolerance on the max pointwise gap.
    pub gamma: f64,
    pub iteration_cap: usize,
    pub mode: StepMode,
    pub reachability_filter: Option<ReachabilityFilter>,
    pub start_hints: Option<StartHints>,
}

impl LmpcProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: DynamicsModel,
        cost: StageCost,
        constraints: ConstraintSet,
        horizon: usize,
        x_start: StateVec,
        x_target: StateVec,
        epsilon: f64,
        gamma: f64,
        iteration_cap: usize,
        mode: StepMode,
    ) -> Result<Self, ConfigError> {
        if horizon < 2 {
            return Err(ConfigError::Invalid(
                "horizon must be at least 2 for the convergence guarantees".into(),
            ));
        }
        if x_start.len() != model.state_dim() || x_target.len() != model.state_dim() {
            return Err(ConfigError::DimensionMismatch {
                what: "start/target state",
                expected: model.state_dim(),
                got: x_start.len().max(x_target.len()),
            });
        }
        let zero_u = InputVec::zeros(model.input_dim());
        let fixed = model.step(&x_target, &zero_u)?;
        if (&fixed - &x_target).amax() > 1e-12 {
            return Err(ConfigError::Invalid(
                "target is not an equilibrium of the unforced system".into(),
            ));
        }
        if !constraints.state_violations(&x_start).is_empty() {
            return Err(ConfigError::Invalid("start state violates the constraints".into()));
        }
        Ok(Self {
            model,
            cost,
            constraints,
            horizon,
            x_start,
            x_target,
            epsilon,
            gamma,
            iteration_cap,
            mode,
            reachability_filter: None,
            start_hints: None,
        })
    }

    pub fn with_reachability_filter(mut self, filter: ReachabilityFilter) -> Self {
        self.reachability_filter = Some(filter);
        self
    }

    pub fn with_start_hints(mut self, hints: StartHints) -> Self {
        self.start_hints = Some(hints);
        self
    }
}

/// Solution of one fixed-terminal-candidate subproblem.
#[derive(Clone, Debug)]
pub struct SubproblemSolution {
    /// Index of the candidate point in the safe set.
    pub candidate_index: usize,
    /// (iteration, time) identity of the candidate.
    pub candidate_id: (usize, usize),
    pub candidate_q: f64,
    /// Planned inputs, horizon length (zero-padded past an early arrival).
    pub inputs: Vec<InputVec>,
    /// Predicted states, horizon + 1 entries starting at the current state.
    pub states: Vec<StateVec>,
    /// Stage-cost sum over the horizon.
    pub stage_sum: f64,
    /// Stage sum plus the candidate's stored cost-to-go.
    pub total_cost: f64,
    /// Active set of the condensed QP, for warm starts (empty for the
    /// nonlinear path).
    pub qp_active: Vec<usize>,
}

/// Diagnostics of one receding-horizon step.
#[derive(Clone, Debug)]
pub struct StepResult {
    /// First element of the winning input sequence, the input applied.
    pub applied_input: InputVec,
    /// Optimal step cost (stage sum plus terminal cost-to-go).
    pub optimal_cost: f64,
    /// Upper bound fed to the next step's restriction set: the optimal cost
    /// tightened by the realized stage cost once the input is applied (the
    /// per-step decrease the Lyapunov chain guarantees).
    pub rs_bound: f64,
    /// Winning candidate identity; `None` in relaxed mode.
    pub candidate: Option<(usize, usize)>,
    pub candidate_index: Option<usize>,
    pub candidates_solved: usize,
    pub rs_size: usize,
    /// Barycentric weights of the relaxed terminal state, when applicable.
    pub hull_weights: Option<Vec<f64>>,
}

/// A step result bundled with what the next step needs for warm starts.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub result: StepResult,
    pub winner: Option<SubproblemSolution>,
    pub warm_active: Vec<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum LmpcError {
    #[error(
        "no feasible terminal candidate at iteration {iteration}, time {time}: \
         {candidates} candidates over a restriction set of {rs_size} (state {state:?})"
    )]
    NoFeasibleCandidate {
        iteration: usize,
        time: usize,
        candidates: usize,
        rs_size: usize,
        state: Vec<f64>,
    },
    #[error("the sampled safe set is empty; an initial feasible iteration is required")]
    EmptySafeSet,
    #[error("closed loop exceeded {0} steps without meeting the termination threshold")]
    StepLimit(usize),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    SafeSet(#[from] SafeSetError),
    #[error("{context}: {source}")]
    Qp {
        context: String,
        source: crate::qp::QpError,
    },
}

impl LmpcError {
    fn with_iteration(mut self, j: usize) -> Self {
        if let LmpcError::NoFeasibleCandidate { iteration, .. } = &mut self {
            *iteration = j;
        }
        self
    }
}

/// How the realized closed loop evolves under an applied input. For exact
/// models this is the planning dynamics; the adaptive example substitutes
/// the true plant plus its online estimator.
pub trait ClosedLoopPlant: Send + Sync {
    fn advance(&self, x: &StateVec, u: &InputVec) -> StateVec;
}

/// Plant that coincides with the planning model.
pub struct ModelPlant(pub DynamicsModel);

impl ClosedLoopPlant for ModelPlant {
    fn advance(&self, x: &StateVec, u: &InputVec) -> StateVec {
        self.0.step_unchecked(x, u)
    }
}

/// Simulate the planning model forward under an input sequence.
pub fn rollout(model: &DynamicsModel, x0: &StateVec, inputs: &[InputVec]) -> Vec<StateVec> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(x0.clone());
    for u in inputs {
        let x = states.last().unwrap();
        states.push(model.step_unchecked(x, u));
    }
    states
}

fn better(a: &SubproblemSolution, b: &SubproblemSolution) -> bool {
    if a.total_cost != b.total_cost {
        return a.total_cost < b.total_cost;
    }
    if a.candidate_q != b.candidate_q {
        return a.candidate_q < b.candidate_q;
    }
    a.candidate_id < b.candidate_id
}

/// One receding-horizon step by candidate enumeration (the parallel
/// bound-restricted loop). Returns the minimum-total-cost subproblem over
/// the candidate set, ties broken by lowest terminal cost-to-go, then
/// earliest (iteration, time).
pub fn solve_lmpc_step(
    prob: &LmpcProblem,
    ss: &SampledSafeSet,
    x_t: &StateVec,
    time: usize,
    prev: Option<&StepResult>,
    warm: Option<&StepOutcome>,
    use_restriction: bool,
) -> Result<StepOutcome, LmpcError> {
    if ss.is_empty() {
        return Err(LmpcError::EmptySafeSet);
    }
    // The winning candidate's cost-to-go is bounded by the previous optimal
    // cost less the stage costs the chain already guarantees: the realized
    // previous stage (folded into `rs_bound`) and the input-independent part
    // of the current stage, which every candidate pays.
    let unavoidable = prob.cost.eval(x_t, &InputVec::zeros(prob.model.input_dim()));
    let rs = match prev {
        Some(p) if use_restriction => ss.restriction_set(p.rs_bound - unavoidable),
        _ => ss.full_set(),
    };
    let rs_size = rs.len();
    let mut candidates = ss.dedup_candidates(&rs);

    let linear = prob.model.linear_form().is_some() && prob.cost.is_quadratic();
    let template = if linear {
        Some(
            condense_template(&prob.model, &prob.cost, prob.horizon, x_t, &prob.constraints)
                .map_err(LmpcError::Config)?,
        )
    } else {
        None
    };

    // Candidate-level bound from the same chain: the stage sum of a plan
    // ending at candidate c is at least the current state's cost plus the
    // minimum input energy that satisfies the terminal equality, so
    // candidates with Q(c) above the remaining budget cannot win and are
    // skipped without a solve.
    if let (true, Some(p), Some(tmpl)) = (use_restriction, prev, &template) {
        {
            if let Ok(pinv) = tmpl.terminal_map.clone().pseudo_inverse(1e-10) {
                let budget = p.rs_bound + crate::safe_set::RESTRICTION_SLACK;
                candidates.retain(|&idx| {
                    let point = ss.point(idx);
                    let gap = &point.state - &tmpl.terminal_offset;
                    let effort = (&pinv * gap).norm_squared();
                    point.cost_to_go + unavoidable + effort <= budget
                });
            }
        }
    }
    let warm_active: &[usize] = warm.map(|o| o.warm_active.as_slice()).unwrap_or(&[]);
    let warm_sub = warm.and_then(|o| o.winner.as_ref());

    let solutions: Vec<Option<SubproblemSolution>> = candidates
        .par_iter()
        .map(|&idx| {
            let point = ss.point(idx);
            if let Some(tmpl) = &template {
                linear::solve_candidate_with_template(tmpl, point, idx, warm_active)
            } else {
                nonlinear::solve_candidate_nonlinear(prob, ss, x_t, idx, warm_sub)
            }
        })
        .collect();

    let mut winner: Option<SubproblemSolution> = None;
    for sol in solutions.into_iter().flatten() {
        match &winner {
            None => winner = Some(sol),
            Some(best) => {
                if better(&sol, best) {
                    winner = Some(sol);
                }
            }
        }
    }
    let Some(winner) = winner else {
        return Err(LmpcError::NoFeasibleCandidate {
            iteration: 0,
            time,
            candidates: candidates.len(),
            rs_size,
            state: x_t.iter().copied().collect(),
        });
    };
    let result = StepResult {
        applied_input: winner.inputs[0].clone(),
        optimal_cost: winner.total_cost,
        rs_bound: winner.total_cost,
        candidate: Some(winner.candidate_id),
        candidate_index: Some(winner.candidate_index),
        candidates_solved: candidates.len(),
        rs_size,
        hull_weights: None,
    };
    let warm_active = winner.qp_active.clone();
    Ok(StepOutcome { result, winner: Some(winner), warm_active })
}

/// Run one closed-loop iteration from the fixed start state until the
/// optimal step cost drops to the termination threshold. The safe set is
/// the previous iterations' snapshot and is never updated mid-iteration.
pub fn run_iteration(
    prob: &LmpcProblem,
    ss: &SampledSafeSet,
    strat: &dyn StepStrategy,
    plant: &dyn ClosedLoopPlant,
    iteration_index: usize,
) -> Result<IterationRecord, LmpcError> {
    if ss.is_empty() {
        return Err(LmpcError::EmptySafeSet);
    }
    let mut x = prob.x_start.clone();
    let mut steps: Vec<TrajectoryStep> = Vec::new();
    let mut results: Vec<StepResult> = Vec::new();
    let mut outcome: Option<StepOutcome> = None;
    let mut terminated = false;

    for t in 0..STEP_LIMIT {
        let mut next = strat
            .solve_step(prob, ss, &x, t, results.last(), outcome.as_ref())
            .map_err(|e| e.with_iteration(iteration_index))?;
        let applied = next.result.applied_input.clone();
        let step_cost = next.result.optimal_cost;
        if step_cost <= prob.epsilon {
            results.push(next.result.clone());
            terminated = true;
            break;
        }
        let h = prob.cost.eval(&x, &applied);
        // Applying the input buys the stage cost back (the Lyapunov
        // decrease), so the next step's restriction bound can be tightened.
        next.result.rs_bound = step_cost - h;
        results.push(next.result.clone());
        let mut x_next = plant.advance(&x, &applied);
        if let Some(snapped) = prob.cost.canonicalize(&x_next) {
            x_next = snapped;
        }
        steps.push(TrajectoryStep { state: x.clone(), input: applied, stage_cost: h });
        x = x_next;
        outcome = Some(next);
    }
    if !terminated {
        return Err(LmpcError::StepLimit(STEP_LIMIT));
    }
    // Truncate at the termination time and pin the tail at the target.
    let terminal = match &prob.cost {
        StageCost::Quadratic { .. } => prob.x_target.clone(),
        _ => x,
    };
    let trajectory = Trajectory { iteration: iteration_index, steps, terminal };
    Ok(IterationRecord::from_trajectory(trajectory, true, results))
}

/// A completed campaign: the seed record followed by every controller
/// iteration, with the safe-set size snapshot after each record was added.
#[derive(Clone, Debug)]
pub struct CampaignResult {
    pub records: Vec<IterationRecord>,
    pub converged: bool,
    pub safe_set: SampledSafeSet,
    pub ss_sizes: Vec<usize>,
}

/// Iterate run + store until two consecutive closed-loop trajectories agree
/// to within the convergence tolerance in max pointwise 2-norm, or the
/// iteration cap is reached (reported, not an error).
pub fn run_until_convergence(
    prob: &LmpcProblem,
    ss0: SampledSafeSet,
    seed: &IterationRecord,
    strat: &dyn StepStrategy,
    plant: &dyn ClosedLoopPlant,
) -> Result<CampaignResult, LmpcError> {
    let mut ss = ss0;
    let mut records = vec![seed.clone()];
    let mut ss_sizes = vec![ss.len()];
    let mut converged = false;
    for j in 1..=prob.iteration_cap {
        let rec = run_iteration(prob, &ss, strat, plant, j)?;
        ss.add_trajectory(&rec)?;
        let gap = max_pointwise_gap(&records.last().unwrap().trajectory, &rec.trajectory);
        records.push(rec);
        ss_sizes.push(ss.len());
        if gap < prob.gamma {
            converged = true;
            break;
        }
    }
    Ok(CampaignResult { records, converged, safe_set: ss, ss_sizes })
}
