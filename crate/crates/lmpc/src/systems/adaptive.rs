//! Dubins car with an *unknown* acceleration saturation limit. The
//! controller plans on an augmented model `(z, y, v, s_hat, e)` whose drive
//! term uses a sigmoid of the commanded acceleration scaled by the running
//! estimate `s_hat`; the simulation plant applies the true limit, and the
//! estimator error `e` is recovered online by inverting the velocity
//! measurement.

use nalgebra::{dvector, DVector};
use serde::Deserialize;

use crate::controller::nonlinear::seed_polish;
use crate::controller::{ClosedLoopPlant, LmpcProblem, StepMode};
use crate::model::{
    ConfigError, ConstraintSet, DynamicsModel, Ellipse, InputVec, StageCost, StateVec,
};
use crate::safe_set::SampledSafeSet;
use crate::trajectory::{IterationRecord, Trajectory, TrajectoryStep};

/// Continuously differentiable stand-in for the saturation: `a / √(1 + a²)`.
pub fn sigmoid(a: f64) -> f64 {
    a / (1.0 + a * a).sqrt()
}

/// Sigmoid magnitude below which the error estimator carries its previous
/// value forward (the measurement carries no saturation information).
const SIGMOID_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptiveDubinsInstance {
    pub x_start: Vec<f64>,
    /// Position/velocity target; the terminal set leaves `s_hat` free and
    /// requires `e = 0`.
    pub x_target: Vec<f64>,
    /// True plant saturation, hidden from the controller.
    pub saturation_true: f64,
    /// Initial guess for the saturation coefficient estimate.
    pub s_hat0: f64,
    /// Weight on the squared error estimate in the stage cost.
    pub error_weight: f64,
    pub obstacle_center: [f64; 2],
    pub semi_axes: [f64; 2],
    pub horizon: usize,
    pub epsilon: f64,
    pub gamma: f64,
    pub iteration_cap: usize,
}

impl Default for AdaptiveDubinsInstance {
    fn default() -> Self {
        Self {
            x_start: vec![0.0, 0.0, 0.0],
            x_target: vec![54.0, 0.0, 0.0],
            saturation_true: 1.0,
            s_hat0: 0.25,
            error_weight: 10.0,
            obstacle_center: [27.0, 0.0],
            semi_axes: [8.0, 6.0],
            horizon: 4,
            epsilon: 1e-8,
            gamma: 1e-10,
            iteration_cap: 50,
        }
    }
}

/// Augmented-model update. Inputs are `(a, θ, δ)`; the velocity row uses the
/// *post-update* estimate `s_hat + δ` on the sigmoid drive, and the error
/// state absorbs the opposite correction.
pub fn adaptive_dynamics_step(x: &StateVec, u: &InputVec) -> StateVec {
    let (z, y, v, s_hat, e) = (x[0], x[1], x[2], x[3], x[4]);
    let (a, theta, delta) = (u[0], u[1], u[2]);
    let s_next = s_hat + delta;
    dvector![
        z + v * theta.cos(),
        y + v * theta.sin(),
        v + s_next * sigmoid(a),
        s_next,
        e - delta
    ]
}

/// Error estimate by inversion of the measured output channel:
/// `((Δy_t) - (Δy_{t-1})) / σ(a_{t-1})` where `Δy` is the measured-minus-
/// predicted output, carrying the previous estimate when the sigmoid term
/// vanishes.
pub fn estimate_error(
    y_meas_t: f64,
    y_pred_t: f64,
    y_meas_prev: f64,
    y_pred_prev: f64,
    a_prev: f64,
    e_prev: f64,
) -> f64 {
    let sig = sigmoid(a_prev);
    if sig.abs() <= SIGMOID_FLOOR {
        e_prev
    } else {
        ((y_meas_t - y_pred_t) - (y_meas_prev - y_pred_prev)) / sig
    }
}

/// Realized closed loop of the adaptive example: positions and velocity come
/// from the true saturated plant, the estimate integrates the applied
/// corrections, and the error component is re-measured each step.
pub struct AdaptivePlant {
    pub saturation_true: f64,
}

impl ClosedLoopPlant for AdaptivePlant {
    fn advance(&self, x: &StateVec, u: &InputVec) -> StateVec {
        let (z, y, v, s_hat, e) = (x[0], x[1], x[2], x[3], x[4]);
        let (a, theta, delta) = (u[0], u[1], u[2]);
        let v_meas = v + self.saturation_true * sigmoid(a);
        let s_next = s_hat + delta;
        let v_pred = v + s_next * sigmoid(a);
        let e_next = estimate_error(v_meas, v_pred, v, v, a, e);
        dvector![z + v * theta.cos(), y + v * theta.sin(), v_meas, s_next, e_next]
    }
}

impl AdaptiveDubinsInstance {
    pub fn model(&self) -> DynamicsModel {
        DynamicsModel::nonlinear(5, 3, adaptive_dynamics_step)
    }

    pub fn constraints(&self) -> Result<ConstraintSet, ConfigError> {
        ConstraintSet::new(
            DVector::from_element(5, f64::NEG_INFINITY),
            DVector::from_element(5, f64::INFINITY),
            DVector::from_element(3, f64::NEG_INFINITY),
            DVector::from_element(3, f64::INFINITY),
            vec![Ellipse {
                center: (self.obstacle_center[0], self.obstacle_center[1]),
                semi_axes: (self.semi_axes[0], self.semi_axes[1]),
                coords: (0, 1),
            }],
        )
    }

    pub fn stage_cost(&self) -> Result<StageCost, ConfigError> {
        StageCost::adaptive_min_time(DVector::from_vec(self.x_target.clone()), self.error_weight)
    }

    /// Problem with the given canonical initial augmented state and terminal
    /// representative (both produced by the initialization pipeline).
    pub fn problem(
        &self,
        mode: StepMode,
        x_start: StateVec,
        x_target_aug: StateVec,
    ) -> Result<LmpcProblem, ConfigError> {
        let prob = LmpcProblem::new(
            self.model(),
            self.stage_cost()?,
            self.constraints()?,
            self.horizon,
            x_start,
            x_target_aug,
            self.epsilon,
            self.gamma,
            self.iteration_cap,
            mode,
        )?;
        Ok(prob.with_start_hints(std::sync::Arc::new(|x, target, k| {
            // Heading fan aimed at the candidate, a sigmoid-inverted drive
            // matching the velocity gap, and the full estimator correction
            // applied at the first step.
            let aim = (target[1] - x[1]).atan2(target[0] - x[0]);
            let e_gap = x[4] - target[4];
            let s_next = x[3] + e_gap;
            let dv = (target[2] - x[2]) / k as f64;
            let sig = if s_next.abs() > 1e-9 { (dv / s_next).clamp(-0.99, 0.99) } else { 0.0 };
            let drive = sig / (1.0 - sig * sig).sqrt();
            [-0.4f64, 0.0, 0.4]
                .iter()
                .map(|spread| {
                    (0..k)
                        .map(|i| {
                            let delta = if i == 0 { e_gap } else { 0.0 };
                            dvector![drive, aim + spread, delta]
                        })
                        .collect()
                })
                .collect()
        })))
    }

    pub fn plant(&self) -> AdaptivePlant {
        AdaptivePlant { saturation_true: self.saturation_true }
    }
}

/// Greedy initialization of the adaptive example:
///
/// 1. freeze the estimate corrections (`δ = 0`),
/// 2. sweep the parameterized open-loop family through the estimate-scaled
///    model and keep the member with the smallest terminal mismatch on the
///    position/velocity slice,
/// 3. polish it with a warm-started local solve into an exact landing,
/// 4. apply the same inputs to the true plant and back-compute the error
///    sequence by inverting the velocity channel (this is where the unknown
///    limit enters the data),
/// 5. append one correction step `δ = e` that regulates the error to zero,
///    steering the final state into the terminal set.
///
/// Returns the stored iteration-0 record and the safe set built from it.
pub fn appendix_initialize(
    inst: &AdaptiveDubinsInstance,
) -> Result<(IterationRecord, SampledSafeSet), ConfigError> {
    let target3: StateVec = DVector::from_vec(inst.x_target.clone());
    let x0_3: StateVec = DVector::from_vec(inst.x_start.clone());

    // Frozen-estimate model on the (z, y, v) slice with inputs (θ, a).
    let s_hat = inst.s_hat0;
    let slice_model = DynamicsModel::nonlinear(3, 2, move |x, u| {
        dvector![
            x[0] + x[2] * u[0].cos(),
            x[1] + x[2] * u[0].sin(),
            x[2] + s_hat * sigmoid(u[1])
        ]
    });
    let slice_constraints = ConstraintSet::new(
        DVector::from_element(3, f64::NEG_INFINITY),
        DVector::from_element(3, f64::INFINITY),
        DVector::from_element(2, f64::NEG_INFINITY),
        DVector::from_element(2, f64::INFINITY),
        vec![Ellipse {
            center: (inst.obstacle_center[0], inst.obstacle_center[1]),
            semi_axes: (inst.semi_axes[0], inst.semi_axes[1]),
            coords: (0, 1),
        }],
    )?;
    let slice_prob = LmpcProblem::new(
        slice_model.clone(),
        StageCost::min_time(target3.clone()),
        slice_constraints.clone(),
        2,
        x0_3.clone(),
        target3.clone(),
        inst.epsilon,
        inst.gamma,
        inst.iteration_cap,
        StepMode::Enumeration,
    )?;

    let thetas: Vec<f64> = (1..=12).map(|i| 0.05 * i as f64).collect();
    let accels: Vec<f64> = (1..=10).map(|i| 0.1 * i as f64).collect();
    let family = |n: usize, theta: f64, n_s: usize, n_bar: usize, accel: f64| -> Vec<InputVec> {
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
    };

    let mut polished: Option<Vec<InputVec>> = None;
    let mut n = 20;
    'outer: while n <= 120 {
        let mut ranked: Vec<(f64, Vec<InputVec>)> = Vec::new();
        for &theta in &thetas {
            for n_s in 2..=n / 2 {
                for n_bar in 2..=n / 3 {
                    for &accel in &accels {
                        let inputs = family(n, theta, n_s, n_bar, accel);
                        let mut x = x0_3.clone();
                        let mut feasible = true;
                        for u in &inputs {
                            x = slice_model.step_unchecked(&x, u);
                            if !slice_constraints.state_violations(&x).is_empty() {
                                feasible = false;
                                break;
                            }
                        }
                        if feasible {
                            ranked.push(((x - &target3).norm_squared(), inputs));
                        }
                    }
                }
            }
        }
        ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for (_, start) in ranked.into_iter().take(5) {
            if let Some(plan) = seed_polish(&slice_prob, &x0_3, &target3, n, start) {
                polished = Some(plan);
                break 'outer;
            }
        }
        n += 5;
    }
    let slice_inputs =
        polished.ok_or_else(|| ConfigError::Invalid("initialization sweep exhausted; enlarge the grid".into()))?;

    // Apply the polished inputs to the true plant and invert the error.
    let steps_n = slice_inputs.len();
    let mut v_model = vec![0.0; steps_n + 1];
    let mut v_plant = vec![0.0; steps_n + 1];
    v_model[0] = x0_3[2];
    v_plant[0] = x0_3[2];
    for (k, u) in slice_inputs.iter().enumerate() {
        v_model[k + 1] = v_model[k] + inst.s_hat0 * sigmoid(u[1]);
        v_plant[k + 1] = v_plant[k] + inst.saturation_true * sigmoid(u[1]);
    }
    let mut errors = vec![f64::NAN; steps_n + 1];
    let mut first_measured: Option<f64> = None;
    for k in 0..steps_n {
        let prev = if k == 0 { 0.0 } else { errors[k] };
        let e = estimate_error(v_plant[k + 1], v_model[k + 1], v_plant[k], v_model[k], slice_inputs[k][1], prev);
        errors[k + 1] = e;
        if first_measured.is_none() && sigmoid(slice_inputs[k][1]).abs() > SIGMOID_FLOOR {
            first_measured = Some(e);
        }
    }
    let e0 = first_measured
        .ok_or_else(|| ConfigError::Invalid("initialization rollout never accelerates; the error is unobservable".into()))?;

    // Stored trajectory: the augmented model under (a, θ, δ=0) from the
    // backfilled initial state, then the single correction step.
    let model = inst.model();
    let cost = inst.stage_cost()?;
    let x_init: StateVec = dvector![x0_3[0], x0_3[1], x0_3[2], inst.s_hat0, e0];
    let mut steps: Vec<TrajectoryStep> = Vec::new();
    let mut x = x_init.clone();
    for u_slice in &slice_inputs {
        let u: InputVec = dvector![u_slice[1], u_slice[0], 0.0];
        let h = cost.eval(&x, &u);
        let next = model.step_unchecked(&x, &u);
        steps.push(TrajectoryStep { state: x, input: u, stage_cost: h });
        x = next;
    }
    let correction: InputVec = dvector![0.0, 0.0, x[4]];
    let h = cost.eval(&x, &correction);
    let final_state = model.step_unchecked(&x, &correction);
    steps.push(TrajectoryStep { state: x, input: correction, stage_cost: h });
    let terminal = cost.canonicalize(&final_state).ok_or_else(|| {
        ConfigError::Invalid(format!(
            "correction step missed the terminal set: {:?}",
            final_state.as_slice()
        ))
    })?;

    let trajectory = Trajectory { iteration: 0, steps, terminal };
    let record = IterationRecord::from_trajectory(trajectory, true, vec![]);
    let mut ss = SampledSafeSet::new();
    ss.add_trajectory(&record)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok((record, ss))
}
