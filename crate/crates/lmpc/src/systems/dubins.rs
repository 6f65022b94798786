//! Minimum-time Dubins car with an ellipsoidal obstacle and a known
//! acceleration saturation limit. State (z, y, v), inputs (heading θ,
//! acceleration a), indicator stage cost.

use std::sync::Arc;

use nalgebra::{dvector, DVector};
use serde::Deserialize;

use crate::controller::nonlinear::seed_polish;
use crate::controller::{LmpcProblem, StepMode};
use crate::model::{ConfigError, ConstraintSet, DynamicsModel, Ellipse, InputVec, StageCost, StateVec};
use crate::trajectory::{IterationRecord, Trajectory, TrajectoryStep};

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DubinsInstance {
    pub x_start: Vec<f64>,
    pub x_target: Vec<f64>,
    /// Known acceleration saturation limit.
    pub saturation: f64,
    pub obstacle_center: [f64; 2],
    pub semi_axes: [f64; 2],
    pub horizon: usize,
    pub epsilon: f64,
    pub gamma: f64,
    pub iteration_cap: usize,
}

impl Default for DubinsInstance {
    fn default() -> Self {
        Self {
            x_start: vec![0.0, 0.0, 0.0],
            x_target: vec![54.0, 0.0, 0.0],
            saturation: 1.0,
            obstacle_center: [27.0, 0.0],
            semi_axes: [8.0, 6.0],
            horizon: 6,
            epsilon: 1e-8,
            gamma: 1e-10,
            iteration_cap: 50,
        }
    }
}

/// Position/heading/velocity update: `(z + v cosθ, y + v sinθ, v + a)`.
pub fn dubins_model() -> DynamicsModel {
    DynamicsModel::nonlinear(3, 2, |x, u| {
        dvector![x[0] + x[2] * u[0].cos(), x[1] + x[2] * u[0].sin(), x[2] + u[1]]
    })
}

impl DubinsInstance {
    pub fn constraints(&self) -> Result<ConstraintSet, ConfigError> {
        ConstraintSet::new(
            DVector::from_element(3, f64::NEG_INFINITY),
            DVector::from_element(3, f64::INFINITY),
            dvector![f64::NEG_INFINITY, -self.saturation],
            dvector![f64::INFINITY, self.saturation],
            vec![Ellipse {
                center: (self.obstacle_center[0], self.obstacle_center[1]),
                semi_axes: (self.semi_axes[0], self.semi_axes[1]),
                coords: (0, 1),
            }],
        )
    }

    pub fn problem(&self, mode: StepMode) -> Result<LmpcProblem, ConfigError> {
        let target = DVector::from_vec(self.x_target.clone());
        let prob = LmpcProblem::new(
            dubins_model(),
            StageCost::min_time(target.clone()),
            self.constraints()?,
            self.horizon,
            DVector::from_vec(self.x_start.clone()),
            target,
            self.epsilon,
            self.gamma,
            self.iteration_cap,
            mode,
        )?;
        let sat = self.saturation;
        let prob = prob.with_start_hints(Arc::new(|x, target, k| {
            // Aim at the candidate with a heading fan and a uniform
            // velocity-matching ramp.
            let aim = (target[1] - x[1]).atan2(target[0] - x[0]);
            let dv = (target[2] - x[2]) / k as f64;
            [-0.4f64, 0.0, 0.4]
                .iter()
                .map(|spread| (0..k).map(|_| dvector![aim + spread, dv]).collect())
                .collect()
        }));
        Ok(prob.with_reachability_filter(Arc::new(move |x, target, k| {
            // Necessary conditions: the velocity gap closes by at most s per
            // step and positions move by at most the running speed bound.
            if (target[2] - x[2]).abs() > k as f64 * sat + 1e-6 {
                return false;
            }
            let dist = ((target[0] - x[0]).powi(2) + (target[1] - x[1]).powi(2)).sqrt();
            let mut reach = 0.0;
            let mut speed = x[2].abs();
            for _ in 0..k {
                reach += speed;
                speed += sat;
            }
            dist <= reach + 1e-6
        })))
    }
}

/// Parameterized open-loop input family swept by the seed search: steer up
/// then down by a fixed heading, accelerate for a while, coast, decelerate
/// symmetrically.
fn family_inputs(n: usize, theta: f64, n_s: usize, n_bar: usize, accel: f64) -> Vec<InputVec> {
    (0..n)
        .map(|k| {
            let th = if k < n_s { theta } else { -theta };
            let a = if k < n_bar {
                accel
            } else if k >= n - n_bar {
                -accel
            } else {
                0.0
            };
            dvector![th, a]
        })
        .collect()
}

fn rollout_states(model: &DynamicsModel, x0: &StateVec, inputs: &[InputVec]) -> Vec<StateVec> {
    let mut states = vec![x0.clone()];
    for u in inputs {
        let x = states.last().unwrap();
        states.push(model.step_unchecked(x, u));
    }
    states
}

/// Initial feasible iteration by deterministic grid search over the input
/// family, polished to an exact landing on the target. Shorter trajectory
/// lengths are tried first; re-running yields a bit-identical record.
pub fn dubins_seed_iteration0(inst: &DubinsInstance) -> Result<IterationRecord, ConfigError> {
    let model = dubins_model();
    let prob = inst.problem(StepMode::Enumeration)?;
    let x0: StateVec = DVector::from_vec(inst.x_start.clone());
    let target: StateVec = DVector::from_vec(inst.x_target.clone());
    let constraints = inst.constraints()?;

    let thetas: Vec<f64> = (1..=12).map(|i| 0.05 * i as f64).collect();
    let accels: Vec<f64> = (1..=10).map(|i| 0.1 * i as f64).collect();

    let mut n = 20;
    while n <= 80 {
        // Best few obstacle-feasible members of the family by terminal
        // mismatch, then polish the terminal equality exactly.
        let mut ranked: Vec<(f64, Vec<InputVec>)> = Vec::new();
        for &theta in &thetas {
            for n_s in 2..=n / 2 {
                for n_bar in 2..=n / 3 {
                    for &accel in &accels {
                        if accel > inst.saturation {
                            continue;
                        }
                        let inputs = family_inputs(n, theta, n_s, n_bar, accel);
                        let states = rollout_states(&model, &x0, &inputs);
                        if states.iter().any(|s| !constraints.state_violations(s).is_empty()) {
                            continue;
                        }
                        let mismatch = (states.last().unwrap() - &target).norm_squared();
                        ranked.push((mismatch, inputs));
                    }
                }
            }
        }
        ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for (_, start) in ranked.into_iter().take(5) {
            if let Some(plan) = seed_polish(&prob, &x0, &target, n, start) {
                return Ok(seed_record(inst, &model, &x0, plan));
            }
        }
        n += 5;
    }
    Err(ConfigError::Invalid(
        "seed grid exhausted without a feasible landing; enlarge the sweep".into(),
    ))
}

fn seed_record(
    inst: &DubinsInstance,
    model: &DynamicsModel,
    x0: &StateVec,
    inputs: Vec<InputVec>,
) -> IterationRecord {
    let cost = StageCost::min_time(DVector::from_vec(inst.x_target.clone()));
    let states = rollout_states(model, x0, &inputs);
    let steps: Vec<TrajectoryStep> = inputs
        .iter()
        .enumerate()
        .map(|(k, u)| TrajectoryStep {
            state: states[k].clone(),
            input: u.clone(),
            stage_cost: cost.eval(&states[k], u),
        })
        .collect();
    let terminal = cost
        .canonicalize(states.last().unwrap())
        .expect("polished seed lands within the target tolerance");
    let trajectory = Trajectory { iteration: 0, steps, terminal };
    IterationRecord::from_trajectory(trajectory, true, vec![])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_avoids_obstacle_and_lands_exactly() {
        let inst = DubinsInstance::default();
        let seed = dubins_seed_iteration0(&inst).unwrap();
        let cs = inst.constraints().unwrap();
        for step in &seed.trajectory.steps {
            assert!(cs.is_feasible(&step.state, &step.input));
        }
        assert_eq!(seed.trajectory.terminal, DVector::from_vec(inst.x_target.clone()));
        // Minimum-time cost counts steps; the seed is well above the
        // converged optimum but in the tens.
        assert!(seed.cost > 16.0 && seed.cost < 90.0, "seed cost {}", seed.cost);
        assert_eq!(seed.cost, seed.trajectory.len() as f64);
    }

    #[test]
    fn seed_search_is_deterministic() {
        let inst = DubinsInstance::default();
        let a = dubins_seed_iteration0(&inst).unwrap();
        let b = dubins_seed_iteration0(&inst).unwrap();
        assert_eq!(a.trajectory.len(), b.trajectory.len());
        for (sa, sb) in a.trajectory.steps.iter().zip(b.trajectory.steps.iter()) {
            assert_eq!(sa.state, sb.state);
            assert_eq!(sa.input, sb.input);
        }
    }
}
