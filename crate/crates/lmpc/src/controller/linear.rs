//! Linear-quadratic candidate subproblems: condensed QP per fixed terminal
//! candidate, and the convex-hull relaxation that replaces the discrete
//! terminal set with barycentric combinations of stored points.

use std::collections::BTreeSet;
use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::condense::{condense_template, CondensedMpc};
use crate::model::StateVec;
use crate::qp::{solve_qp_semidefinite_warm, solve_qp_warm, QpSolution, QpStatus, QuadraticProgram};
use crate::safe_set::{SafePoint, SampledSafeSet};

use super::{solve_lmpc_step, LmpcError, LmpcProblem, StepOutcome, StepResult, SubproblemSolution};

/// Reduced-cost threshold for adding a stored point to the hull support.
const PRICING_TOL: f64 = 1e-9;
const MAX_PRICING_ROUNDS: usize = 200;

/// Solve one fixed-terminal candidate with a pre-built condensing template.
pub fn solve_candidate_with_template(
    template: &CondensedMpc,
    point: &SafePoint,
    index: usize,
    warm_active: &[usize],
) -> Option<SubproblemSolution> {
    let qp = template.with_terminal(&point.state);
    let sol = solve_qp_warm(&qp, warm_active).ok()?;
    if sol.status != QpStatus::Optimal {
        // Infeasible or iteration-limited candidates are pruned; the shifted
        // feasible fallback keeps the step solvable.
        return None;
    }
    let (states, inputs) = template.expand(&sol.point);
    let stage_sum = sol.value + template.constant;
    Some(SubproblemSolution {
        candidate_index: index,
        candidate_id: (point.iteration, point.time),
        candidate_q: point.cost_to_go,
        inputs,
        states,
        stage_sum,
        total_cost: stage_sum + point.cost_to_go,
        qp_active: sol.active_set,
    })
}

/// Solve one fixed-terminal candidate for a linear-quadratic problem.
pub fn solve_candidate_linear(
    prob: &LmpcProblem,
    x_t: &StateVec,
    point: &SafePoint,
    index: usize,
) -> Result<Option<SubproblemSolution>, LmpcError> {
    let template = condense_template(&prob.model, &prob.cost, prob.horizon, x_t, &prob.constraints)
        .map_err(LmpcError::Config)?;
    Ok(solve_candidate_with_template(&template, point, index, &[]))
}

/// Master problem restricted to a small basis of hull points. With at most
/// state-dimension-plus-one basis points, the barycentric weights are pinned
/// by the terminal and simplex equalities, so the reduced Hessian stays
/// positive definite without any regularization and the solve is exact.
fn build_master(
    template: &CondensedMpc,
    ss: &SampledSafeSet,
    basis: &[usize],
) -> QuadraticProgram {
    let n = template.state_dim();
    let nz = template.qp.num_vars();
    let p = basis.len();
    let nv = nz + p;

    let mut hessian = DMatrix::zeros(nv, nv);
    hessian.view_mut((0, 0), (nz, nz)).copy_from(&template.qp.hessian);
    let mut linear = DVector::zeros(nv);
    linear.rows_mut(0, nz).copy_from(&template.qp.linear);
    for (i, &idx) in basis.iter().enumerate() {
        linear[nz + i] = ss.point(idx).cost_to_go;
    }

    let mut a_eq = DMatrix::zeros(n + 1, nv);
    a_eq.view_mut((0, 0), (n, nz)).copy_from(&template.terminal_map);
    for (i, &idx) in basis.iter().enumerate() {
        let state = &ss.point(idx).state;
        for r in 0..n {
            a_eq[(r, nz + i)] = -state[r];
        }
        a_eq[(n, nz + i)] = 1.0;
    }
    let mut b_eq = DVector::zeros(n + 1);
    b_eq.rows_mut(0, n).copy_from(&(-&template.terminal_offset));
    b_eq[n] = 1.0;

    let rows_in = template.qp.num_in();
    let mut a_in = DMatrix::zeros(rows_in + p, nv);
    a_in.view_mut((0, 0), (rows_in, nz)).copy_from(&template.qp.a_in);
    for i in 0..p {
        a_in[(rows_in + i, nz + i)] = -1.0;
    }
    let mut b_in = DVector::zeros(rows_in + p);
    b_in.rows_mut(0, rows_in).copy_from(&template.qp.b_in);

    QuadraticProgram::new_unchecked(hessian, linear, a_eq, b_eq, a_in, b_in)
}

/// Solve the basis-restricted master; `None` when the basis is infeasible or
/// affinely degenerate.
fn solve_basis(
    template: &CondensedMpc,
    ss: &SampledSafeSet,
    basis: &[usize],
) -> Option<QpSolution> {
    let qp = build_master(template, ss, basis);
    match solve_qp_semidefinite_warm(&qp, &[]) {
        Ok(sol) if sol.status == QpStatus::Optimal => Some(sol),
        _ => None,
    }
}

/// One relaxed receding-horizon step. The terminal state is a convex
/// combination of stored points with the combined stored cost-to-go as the
/// terminal cost; the combination support is found by pricing stored points
/// into a restricted master (the optimal support has at most state-dimension
/// plus one points, so the master stays tiny and well scaled).
pub fn solve_relaxed_step(
    prob: &LmpcProblem,
    ss: &SampledSafeSet,
    x_t: &StateVec,
    time: usize,
    prev: Option<&StepResult>,
    warm_support: &[usize],
) -> Result<StepOutcome, LmpcError> {
    if ss.is_empty() {
        return Err(LmpcError::EmptySafeSet);
    }
    let template = condense_template(&prob.model, &prob.cost, prob.horizon, x_t, &prob.constraints)
        .map_err(LmpcError::Config)?;
    let columns = ss.dedup_candidates(&ss.full_set());
    let col_of_rep: HashMap<usize, usize> =
        columns.iter().enumerate().map(|(c, &p)| (p, c)).collect();
    let col_for_point = |p: usize| -> Option<usize> {
        ss.rep_index_of(&ss.point(p).state).and_then(|rep| col_of_rep.get(&rep).copied())
    };
    let no_candidate = || LmpcError::NoFeasibleCandidate {
        iteration: 0,
        time,
        candidates: columns.len(),
        rs_size: ss.len(),
        state: x_t.iter().copied().collect(),
    };

    let n = template.state_dim();
    let nz = template.qp.num_vars();
    let max_basis = n + 1;

    // Starting basis: the best enumeration vertex, with the previous
    // support's stored successors as fallbacks when no vertex is feasible.
    let vertex = solve_lmpc_step(prob, ss, x_t, time, prev, None, true).ok();
    let mut basis: Vec<usize> = Vec::new();
    if let Some(v) = &vertex {
        if let Some(winner) = &v.winner {
            if let Some(c) = col_for_point(winner.candidate_index) {
                basis.push(c);
            }
        }
    }
    if basis.is_empty() {
        let mut seeds = BTreeSet::new();
        for &p in warm_support {
            if p < ss.len() {
                let (_, succ) = ss.successor(p);
                if let Some(c) = col_for_point(succ) {
                    seeds.insert(c);
                }
            }
        }
        basis = seeds.into_iter().take(max_basis).collect();
    }
    if basis.is_empty() {
        return Err(no_candidate());
    }
    let points_of = |cols: &[usize]| -> Vec<usize> { cols.iter().map(|&c| columns[c]).collect() };
    let mut current = solve_basis(&template, ss, &points_of(&basis)).ok_or_else(no_candidate)?;

    // Price stored points into the basis, exchanging one column at a time;
    // each candidate basis is solved exactly, so the value never increases
    // and stays at or below the best vertex cost.
    for _round in 0..MAX_PRICING_ROUNDS {
        let nu_t = current.eq_multipliers.rows(0, n).into_owned();
        let nu_s = current.eq_multipliers[n];
        let mut entering: Option<(f64, usize)> = None;
        for (c, &p) in columns.iter().enumerate() {
            if basis.contains(&c) {
                continue;
            }
            let point = ss.point(p);
            let reduced = point.cost_to_go - point.state.dot(&nu_t) + nu_s;
            if reduced < -PRICING_TOL && entering.is_none_or(|(r, _)| reduced < r) {
                entering = Some((reduced, c));
            }
        }
        let Some((_, enter)) = entering else { break };
        let mut best: Option<(f64, Vec<usize>, QpSolution)> = None;
        let mut try_basis = |cand: Vec<usize>| {
            if let Some(sol) = solve_basis(&template, ss, &points_of(&cand)) {
                if best.as_ref().is_none_or(|(v, _, _)| sol.value < *v) {
                    best = Some((sol.value, cand, sol));
                }
            }
        };
        if basis.len() < max_basis {
            let mut grown = basis.clone();
            grown.push(enter);
            grown.sort_unstable();
            try_basis(grown);
        }
        for drop in 0..basis.len() {
            let mut swapped = basis.clone();
            swapped[drop] = enter;
            swapped.sort_unstable();
            swapped.dedup();
            try_basis(swapped);
        }
        match best {
            Some((value, cand, sol)) if value < current.value - 1e-12 => {
                basis = cand;
                current = sol;
            }
            // No exchange improves: accept the current basis (its value is
            // already at or below the best vertex).
            _ => break,
        }
    }
    let sol = current;
    let basis_cols = basis;

    let z_inputs = sol.point.rows(0, nz).into_owned();
    let (_, inputs) = template.expand(&z_inputs);
    let weights: Vec<f64> = (0..basis_cols.len()).map(|i| sol.point[nz + i]).collect();
    let result = StepResult {
        applied_input: inputs[0].clone(),
        optimal_cost: sol.value + template.constant,
        rs_bound: sol.value + template.constant,
        candidate: None,
        candidate_index: None,
        candidates_solved: 1,
        rs_size: columns.len(),
        hull_weights: Some(weights),
    };
    // Warm the next step with the supporting point indices.
    let warm_active = basis_cols.iter().map(|&c| columns[c]).collect();
    Ok(StepOutcome { result, winner: None, warm_active })
}
