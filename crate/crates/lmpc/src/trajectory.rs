//! Closed-loop trajectories and per-iteration records.

use crate::controller::StepResult;
use crate::model::{InputVec, StateVec};

/// One realized step: the state visited, the input applied there and the
/// stage cost incurred.
#[derive(Clone, Debug)]
pub struct TrajectoryStep {
    pub state: StateVec,
    pub input: InputVec,
    pub stage_cost: f64,
}

/// Ordered (state, input) pairs plus the terminal state the run settled on.
///
/// Step states are exactly the simulated values (re-applying the inputs from
/// the initial state reproduces them bit for bit); the terminal is the
/// canonical target representative appended at truncation.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub iteration: usize,
    pub steps: Vec<TrajectoryStep>,
    pub terminal: StateVec,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// State at time `t`, padding past-the-end queries with the terminal.
    pub fn state_at(&self, t: usize) -> &StateVec {
        if t < self.steps.len() {
            &self.steps[t].state
        } else {
            &self.terminal
        }
    }

    /// Sum of the per-step stage costs, accumulated backward so it equals
    /// the stored cost-to-go of the first state bit for bit.
    pub fn total_stage_cost(&self) -> f64 {
        self.steps.iter().rev().fold(0.0, |acc, s| s.stage_cost + acc)
    }
}

/// One closed-loop iteration: its trajectory, iteration cost, termination
/// time and per-step solver diagnostics.
///
/// `step_results` holds one entry per state the controller solved at,
/// including the state that triggered the termination threshold, so its
/// length is `termination_time + 1` for controller-produced records (seeds
/// leave it empty).
#[derive(Clone, Debug)]
pub struct IterationRecord {
    pub trajectory: Trajectory,
    /// Iteration cost, the finite stage-cost sum up to termination.
    pub cost: f64,
    pub termination_time: usize,
    pub converged: bool,
    pub step_results: Vec<StepResult>,
}

impl IterationRecord {
    /// Build a record from a finished trajectory, summing its stage costs.
    pub fn from_trajectory(
        trajectory: Trajectory,
        converged: bool,
        step_results: Vec<StepResult>,
    ) -> Self {
        let cost = trajectory.total_stage_cost();
        let termination_time = trajectory.len();
        Self {
            trajectory,
            cost,
            termination_time,
            converged,
            step_results,
        }
    }
}

/// Largest pointwise 2-norm gap between two trajectories, the quantity the
/// inter-iteration convergence test thresholds. The shorter trajectory is
/// padded with its terminal state.
pub fn max_pointwise_gap(a: &Trajectory, b: &Trajectory) -> f64 {
    let horizon = a.len().max(b.len()) + 1;
    let mut worst = 0.0f64;
    for t in 0..horizon {
        worst = worst.max((a.state_at(t) - b.state_at(t)).norm());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn two_step(iteration: usize, second: f64) -> Trajectory {
        Trajectory {
            iteration,
            steps: vec![
                TrajectoryStep { state: dvector![1.0], input: dvector![0.0], stage_cost: 1.0 },
                TrajectoryStep { state: dvector![second], input: dvector![0.0], stage_cost: 1.0 },
            ],
            terminal: dvector![0.0],
        }
    }

    #[test]
    fn record_cost_equals_resummation() {
        let rec = IterationRecord::from_trajectory(two_step(0, 0.5), true, vec![]);
        let resummed =
            rec.trajectory.steps.iter().rev().fold(0.0, |acc, s| s.stage_cost + acc);
        assert_eq!(rec.cost, resummed);
        assert_eq!(rec.termination_time, 2);
    }

    #[test]
    fn gap_pads_with_terminal() {
        let a = two_step(0, 0.5);
        let mut b = two_step(1, 0.5);
        b.steps.pop();
        // At t = 1 the shorter trajectory reads its terminal 0, the longer 0.5.
        assert_eq!(max_pointwise_gap(&a, &b), 0.5);
        assert_eq!(max_pointwise_gap(&a, &a), 0.0);
    }
}
