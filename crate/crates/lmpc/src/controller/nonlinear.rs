//! Fixed-terminal candidate subproblems for nonlinear dynamics: quadratic
//! penalty on the terminal equality and obstacle constraints, minimized by
//! damped Gauss–Newton on the shooting variables, multi-started from the
//! shifted previous solution and from the stored trajectory segment that
//! produced the candidate. A guaranteed-feasible warm start always exists
//! along a replay, so the local method only has to refine, never to find
//! feasibility from nothing.

use nalgebra::{DMatrix, DVector};

use crate::model::{InputVec, StageCost, StateVec};
use crate::safe_set::SampledSafeSet;

use super::{rollout, LmpcProblem, SubproblemSolution};

/// Obstacle clearance targeted by the penalty, keeping accepted plans
/// strictly inside the feasibility tolerance.
const OBSTACLE_MARGIN: f64 = 1e-6;
/// Terminal mismatch accepted for a horizon-length plan.
const TERMINAL_TOL: f64 = 1e-8;
/// Tighter mismatch for early arrivals, so the pinned tail stays within the
/// horizon-end tolerance after drifting through the remaining steps.
const ARRIVAL_TOL: f64 = 1e-9;

/// Solve the fixed-terminal reachability problem for one candidate point.
/// Infeasible or unconverged candidates return `None` and are pruned.
pub fn solve_candidate_nonlinear(
    prob: &LmpcProblem,
    ss: &SampledSafeSet,
    x_t: &StateVec,
    candidate_index: usize,
    warm: Option<&SubproblemSolution>,
) -> Option<SubproblemSolution> {
    let point = ss.point(candidate_index);
    let horizon = prob.horizon;
    let arrivals: Vec<usize> = if prob.cost.at_target(&point.state) {
        (1..=horizon).collect()
    } else {
        vec![horizon]
    };

    for k in arrivals {
        if let Some(filter) = &prob.reachability_filter {
            if !filter(x_t, &point.state, k) {
                continue;
            }
        }
        let starts = build_starts(prob, ss, x_t, candidate_index, warm, k);
        let tol = if k < horizon { ARRIVAL_TOL } else { TERMINAL_TOL };

        for start in &starts {
            if plan_is_exact(prob, x_t, &point.state, start, tol) {
                if let Some(sol) = assemble(prob, x_t, candidate_index, point, start.clone(), k) {
                    return Some(sol);
                }
            }
        }

        let mut best: Option<(f64, Vec<InputVec>)> = None;
        for start in starts {
            if let Some(plan) = gauss_newton_reach(prob, x_t, &point.state, k, start, tol) {
                let cost = plan_stage_cost(prob, x_t, &plan);
                if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                    best = Some((cost, plan));
                }
            }
        }
        if let Some((_, plan)) = best {
            if let Some(sol) = assemble(prob, x_t, candidate_index, point, plan, k) {
                return Some(sol);
            }
        }
    }
    None
}

/// Polish an open-loop guess into an exact `k`-step landing on `target`,
/// used by the seed constructions. Same penalty/Gauss–Newton machinery as
/// the candidate solves.
pub fn seed_polish(
    prob: &LmpcProblem,
    x0: &StateVec,
    target: &StateVec,
    k: usize,
    mut start: Vec<InputVec>,
) -> Option<Vec<InputVec>> {
    clamp_inputs(prob, &mut start);
    if plan_is_exact(prob, x0, target, &start, ARRIVAL_TOL) {
        return Some(start);
    }
    gauss_newton_reach(prob, x0, target, k, start, ARRIVAL_TOL)
}

fn clamp_inputs(prob: &LmpcProblem, inputs: &mut [InputVec]) {
    let lo = &prob.constraints.u_lower;
    let hi = &prob.constraints.u_upper;
    for u in inputs.iter_mut() {
        for i in 0..u.len() {
            u[i] = u[i].clamp(lo[i], hi[i]);
        }
    }
}

fn build_starts(
    prob: &LmpcProblem,
    ss: &SampledSafeSet,
    x_t: &StateVec,
    candidate_index: usize,
    warm: Option<&SubproblemSolution>,
    k: usize,
) -> Vec<Vec<InputVec>> {
    let m = prob.model.input_dim();
    let mut starts = Vec::new();
    if let Some(w) = warm {
        // Shifted previous solution extended by the stored successor input.
        let mut shifted: Vec<InputVec> = w.inputs.iter().skip(1).cloned().collect();
        let (u_next, _) = ss.successor(w.candidate_index);
        shifted.push(u_next);
        shifted.truncate(k);
        while shifted.len() < k {
            shifted.push(InputVec::zeros(m));
        }
        starts.push(shifted);
    }
    if let Some(segment) = ss.segment_inputs_ending_at(candidate_index, k) {
        starts.push(segment);
    }
    starts.push(vec![InputVec::zeros(m); k]);
    // Instance-provided guesses widen the basin the local solver can reach;
    // the guaranteed fallbacks above are untouched.
    if let Some(hints) = &prob.start_hints {
        starts.extend(hints(x_t, &ss.point(candidate_index).state, k));
    }
    for s in &mut starts {
        clamp_inputs(prob, s);
    }
    starts
}

fn plan_is_exact(
    prob: &LmpcProblem,
    x_t: &StateVec,
    target: &StateVec,
    inputs: &[InputVec],
    tol: f64,
) -> bool {
    let states = rollout(&prob.model, x_t, inputs);
    if (states.last().unwrap() - target).amax() > tol {
        return false;
    }
    for (i, u) in inputs.iter().enumerate() {
        if !prob.constraints.check(&states[i + 1], u).is_empty() {
            return false;
        }
    }
    true
}

/// Stage-cost sum of a plan prefix, used to rank accepted local solutions.
fn plan_stage_cost(prob: &LmpcProblem, x_t: &StateVec, inputs: &[InputVec]) -> f64 {
    let states = rollout(&prob.model, x_t, inputs);
    inputs.iter().enumerate().map(|(i, u)| prob.cost.eval(&states[i], u)).sum()
}

struct Residuals<'a> {
    prob: &'a LmpcProblem,
    x_t: &'a StateVec,
    target: &'a StateVec,
    k: usize,
    adaptive_weight: Option<f64>,
}

impl Residuals<'_> {
    fn count(&self) -> usize {
        let n = self.target.len();
        let obstacle = self.prob.constraints.exclusions.len() * self.k;
        let smooth = if self.adaptive_weight.is_some() { self.k.saturating_sub(1) } else { 0 };
        n + obstacle + smooth
    }

    fn eval(&self, w: &DVector<f64>, pen_sqrt: f64, out: &mut DVector<f64>) {
        let m = self.prob.model.input_dim();
        let inputs: Vec<InputVec> =
            (0..self.k).map(|i| DVector::from_fn(m, |j, _| w[i * m + j])).collect();
        let states = rollout(&self.prob.model, self.x_t, &inputs);
        let n = self.target.len();
        let mut row = 0;
        let terminal = states.last().unwrap();
        for i in 0..n {
            out[row] = pen_sqrt * (terminal[i] - self.target[i]);
            row += 1;
        }
        for state in states.iter().take(self.k + 1).skip(1) {
            for ell in &self.prob.constraints.exclusions {
                let gap = (1.0 + OBSTACLE_MARGIN) - ell.value(state);
                out[row] = pen_sqrt * gap.max(0.0);
                row += 1;
            }
        }
        if let Some(weight) = self.adaptive_weight {
            let sqrt_w = weight.sqrt();
            let e_idx = self.target.len() - 1;
            for state in states.iter().take(self.k).skip(1) {
                out[row] = sqrt_w * state[e_idx];
                row += 1;
            }
        }
    }
}

/// Penalty rounds of damped Gauss–Newton, then an exact terminal polish.
fn gauss_newton_reach(
    prob: &LmpcProblem,
    x_t: &StateVec,
    target: &StateVec,
    k: usize,
    start: Vec<InputVec>,
    tol: f64,
) -> Option<Vec<InputVec>> {
    let m = prob.model.input_dim();
    let nw = k * m;
    let res = Residuals {
        prob,
        x_t,
        target,
        k,
        adaptive_weight: match &prob.cost {
            StageCost::AdaptiveMinTime { weight, .. } => Some(*weight),
            _ => None,
        },
    };
    let nr = res.count();
    let mut w = DVector::from_fn(nw, |i, _| start[i / m][i % m]);
    let mut r = DVector::zeros(nr);
    let mut r_trial = DVector::zeros(nr);
    let mut jac = DMatrix::zeros(nr, nw);

    for round in 0..5 {
        let pen_sqrt = (1e2f64 * 10f64.powi(round)).sqrt();
        let mut mu = 1e-3;
        res.eval(&w, pen_sqrt, &mut r);
        let mut r_norm = r.norm_squared();
        for _ in 0..60 {
            // Forward-difference Jacobian.
            for i in 0..nw {
                let h = 1e-6 * (1.0 + w[i].abs());
                let saved = w[i];
                w[i] = saved + h;
                res.eval(&w, pen_sqrt, &mut r_trial);
                w[i] = saved;
                for row in 0..nr {
                    jac[(row, i)] = (r_trial[row] - r[row]) / h;
                }
            }
            let jtj = jac.transpose() * &jac;
            let jtr = jac.transpose() * &r;
            let mut accepted = false;
            for _ in 0..10 {
                let mut damped = jtj.clone();
                for i in 0..nw {
                    damped[(i, i)] += mu * (jtj[(i, i)] + 1e-12);
                }
                let Some(chol) = damped.cholesky() else {
                    mu *= 10.0;
                    continue;
                };
                let delta = chol.solve(&(-&jtr));
                let mut w_trial = &w + &delta;
                for i in 0..nw {
                    let coord = i % m;
                    w_trial[i] =
                        w_trial[i].clamp(prob.constraints.u_lower[coord], prob.constraints.u_upper[coord]);
                }
                res.eval(&w_trial, pen_sqrt, &mut r_trial);
                let trial_norm = r_trial.norm_squared();
                if trial_norm < r_norm {
                    w = w_trial;
                    std::mem::swap(&mut r, &mut r_trial);
                    r_norm = trial_norm;
                    mu = (mu * 0.33).max(1e-12);
                    accepted = true;
                    break;
                }
                mu *= 3.0;
            }
            if !accepted || r_norm < 1e-24 {
                break;
            }
        }
        if let Some(plan) = accept_plan(prob, x_t, target, &w, k, tol) {
            return Some(plan);
        }
    }

    // Penalty rounds converge to the constraint manifold only as the weight
    // grows; finish the last stretch with a Newton step on the terminal
    // equality alone.
    let near = {
        let inputs = unflatten(&w, k, m);
        let states = rollout(&prob.model, x_t, &inputs);
        (states.last().unwrap() - target).amax() < 1e-3
    };
    if near {
        newton_terminal_polish(prob, x_t, target, k, &mut w);
        if let Some(plan) = accept_plan(prob, x_t, target, &w, k, tol) {
            return Some(plan);
        }
    }
    None
}

fn unflatten(w: &DVector<f64>, k: usize, m: usize) -> Vec<InputVec> {
    (0..k).map(|i| DVector::from_fn(m, |j, _| w[i * m + j])).collect()
}

fn accept_plan(
    prob: &LmpcProblem,
    x_t: &StateVec,
    target: &StateVec,
    w: &DVector<f64>,
    k: usize,
    tol: f64,
) -> Option<Vec<InputVec>> {
    let m = prob.model.input_dim();
    let inputs = unflatten(w, k, m);
    if plan_is_exact(prob, x_t, target, &inputs, tol) {
        Some(inputs)
    } else {
        None
    }
}

/// Zero the terminal residual with least-norm Newton steps on the last few
/// inputs, holding the rest of the plan fixed.
fn newton_terminal_polish(
    prob: &LmpcProblem,
    x_t: &StateVec,
    target: &StateVec,
    k: usize,
    w: &mut DVector<f64>,
) {
    let n = target.len();
    let m = prob.model.input_dim();
    let q_steps = n.div_ceil(m).min(k);
    let nv = q_steps * m;
    let offset = (k - q_steps) * m;

    let terminal_of = |w: &DVector<f64>| -> StateVec {
        let inputs = unflatten(w, k, m);
        rollout(&prob.model, x_t, &inputs).pop().unwrap()
    };

    for _ in 0..25 {
        let r = terminal_of(w) - target;
        if r.amax() < 1e-12 {
            return;
        }
        let mut jac = DMatrix::zeros(n, nv);
        for i in 0..nv {
            let h = 1e-7 * (1.0 + w[offset + i].abs());
            let saved = w[offset + i];
            w[offset + i] = saved + h;
            let r_pert = terminal_of(w) - target;
            w[offset + i] = saved;
            for row in 0..n {
                jac[(row, i)] = (r_pert[row] - r[row]) / h;
            }
        }
        let mut jjt = &jac * jac.transpose();
        for i in 0..n {
            jjt[(i, i)] += 1e-12;
        }
        let Some(chol) = jjt.cholesky() else { return };
        let lambda = chol.solve(&r);
        let delta = -(jac.transpose() * lambda);
        for i in 0..nv {
            let coord = (offset + i) % m;
            w[offset + i] = (w[offset + i] + delta[i])
                .clamp(prob.constraints.u_lower[coord], prob.constraints.u_upper[coord]);
        }
    }
}

/// Pad an accepted `k`-step plan to the full horizon, simulate it exactly
/// and package the subproblem solution.
fn assemble(
    prob: &LmpcProblem,
    x_t: &StateVec,
    candidate_index: usize,
    point: &crate::safe_set::SafePoint,
    mut inputs: Vec<InputVec>,
    _arrival: usize,
) -> Option<SubproblemSolution> {
    let m = prob.model.input_dim();
    while inputs.len() < prob.horizon {
        inputs.push(InputVec::zeros(m));
    }
    let states = rollout(&prob.model, x_t, &inputs);
    for (i, u) in inputs.iter().enumerate() {
        if !prob.constraints.check(&states[i + 1], u).is_empty() {
            return None;
        }
    }
    if (states.last().unwrap() - &point.state).amax() > TERMINAL_TOL {
        return None;
    }
    let stage_sum: f64 =
        inputs.iter().enumerate().map(|(i, u)| prob.cost.eval(&states[i], u)).sum();
    Some(SubproblemSolution {
        candidate_index,
        candidate_id: (point.iteration, point.time),
        candidate_q: point.cost_to_go,
        total_cost: stage_sum + point.cost_to_go,
        stage_sum,
        inputs,
        states,
        qp_active: Vec::new(),
    })
}
