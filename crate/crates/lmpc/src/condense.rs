//! Condensing of linear-quadratic MPC subproblems: predicted states are
//! eliminated through the linear prediction map so the QP decision vector is
//! the stacked input sequence, with the terminal state pinned to a candidate
//! point by an equality constraint.

use nalgebra::{DMatrix, DVector};

use crate::model::{ConfigError, ConstraintSet, DynamicsModel, InputVec, StageCost, StateVec};
use crate::qp::QuadraticProgram;

/// A condensed fixed-terminal subproblem template. The QP's objective plus
/// `constant` equals the stage-cost sum of the horizon, so a candidate's
/// terminal cost can be added on top to recover the full objective.
#[derive(Clone, Debug)]
pub struct CondensedMpc {
    pub qp: QuadraticProgram,
    /// Stage-cost terms independent of the inputs (`‖x_0‖²` and the free
    /// response of the intermediate states).
    pub constant: f64,
    pub horizon: usize,
    /// Last block row of the prediction map: `x_N = terminal_offset + terminal_map · z`.
    pub terminal_map: DMatrix<f64>,
    pub terminal_offset: DVector<f64>,
    state_dim: usize,
    input_dim: usize,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    x0: StateVec,
}

impl CondensedMpc {
    /// Swap in a terminal candidate, reusing all condensed matrices.
    pub fn with_terminal(&self, x_terminal: &StateVec) -> QuadraticProgram {
        let mut qp = self.qp.clone();
        qp.b_eq = x_terminal - &self.terminal_offset;
        qp.validate().expect("template QP stays valid under terminal swap");
        qp
    }

    /// Expand a condensed solution back into input and state sequences by
    /// applying the dynamics recursion exactly.
    pub fn expand(&self, z: &DVector<f64>) -> (Vec<StateVec>, Vec<InputVec>) {
        let m = self.input_dim;
        let inputs: Vec<InputVec> = (0..self.horizon)
            .map(|k| DVector::from_fn(m, |i, _| z[k * m + i]))
            .collect();
        let mut states = Vec::with_capacity(self.horizon + 1);
        states.push(self.x0.clone());
        for u in &inputs {
            let x = states.last().unwrap();
            states.push(&self.a * x + &self.b * u);
        }
        (states, inputs)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }
}

/// Build the condensed template for horizon `N` from `x0`, with box
/// constraints on the intermediate states and all inputs. The terminal
/// equality right-hand side is left at zero; instantiate it per candidate
/// with [`CondensedMpc::with_terminal`].
pub fn condense_template(
    model: &DynamicsModel,
    cost: &StageCost,
    horizon: usize,
    x0: &StateVec,
    constraints: &ConstraintSet,
) -> Result<CondensedMpc, ConfigError> {
    let form = model
        .linear_form()
        .ok_or_else(|| ConfigError::Invalid("condensing requires linear dynamics".into()))?;
    if !cost.is_quadratic() {
        return Err(ConfigError::Invalid("condensing requires the quadratic stage cost".into()));
    }
    if horizon == 0 {
        return Err(ConfigError::Invalid("horizon must be at least 1".into()));
    }
    if x0.len() != model.state_dim() {
        return Err(ConfigError::DimensionMismatch {
            what: "initial state",
            expected: model.state_dim(),
            got: x0.len(),
        });
    }
    if !constraints.exclusions.is_empty() {
        return Err(ConfigError::Invalid(
            "ellipsoidal exclusions are not representable in a convex QP".into(),
        ));
    }

    let n = model.state_dim();
    let m = model.input_dim();
    let nz = horizon * m;
    let a = form.a.clone();
    let b = form.b.clone();

    // Powers of A and the block rows of the prediction map.
    let mut a_pow = vec![DMatrix::<f64>::identity(n, n)];
    for _ in 0..horizon {
        let next = &a * a_pow.last().unwrap();
        a_pow.push(next);
    }
    let block_row = |k: usize| -> DMatrix<f64> {
        let mut row = DMatrix::zeros(n, nz);
        for j in 0..k {
            row.view_mut((0, j * m), (n, m)).copy_from(&(&a_pow[k - 1 - j] * &b));
        }
        row
    };

    // Objective: ‖x_0‖² + Σ_{k=1}^{N-1} ‖x_k‖² + Σ ‖u_k‖², the terminal
    // stage belongs to the candidate's stored cost-to-go.
    let mut hess = DMatrix::<f64>::identity(nz, nz) * 2.0;
    let mut lin = DVector::<f64>::zeros(nz);
    let mut constant = x0.norm_squared();
    let mut rows: Vec<(usize, DMatrix<f64>, DVector<f64>)> = Vec::new();
    #[allow(clippy::needless_range_loop)]
    for k in 1..horizon {
        let g_k = block_row(k);
        let free = &a_pow[k] * x0;
        hess += g_k.transpose() * &g_k * 2.0;
        lin += g_k.transpose() * &free * 2.0;
        constant += free.norm_squared();
        rows.push((k, g_k, free));
    }

    // Inequalities: finite state boxes on x_1..x_{N-1} (x_N is pinned to a
    // feasible stored point) and finite input boxes.
    let mut a_in_rows: Vec<DVector<f64>> = Vec::new();
    let mut b_in: Vec<f64> = Vec::new();
    for (_, g_k, free) in &rows {
        for i in 0..n {
            if constraints.x_upper[i].is_finite() {
                a_in_rows.push(g_k.row(i).transpose());
                b_in.push(constraints.x_upper[i] - free[i]);
            }
            if constraints.x_lower[i].is_finite() {
                a_in_rows.push(-g_k.row(i).transpose());
                b_in.push(free[i] - constraints.x_lower[i]);
            }
        }
    }
    for k in 0..horizon {
        for i in 0..m {
            if constraints.u_upper[i].is_finite() {
                let mut row = DVector::zeros(nz);
                row[k * m + i] = 1.0;
                a_in_rows.push(row);
                b_in.push(constraints.u_upper[i]);
            }
            if constraints.u_lower[i].is_finite() {
                let mut row = DVector::zeros(nz);
                row[k * m + i] = -1.0;
                a_in_rows.push(row);
                b_in.push(-constraints.u_lower[i]);
            }
        }
    }
    let mut a_in = DMatrix::zeros(a_in_rows.len(), nz);
    for (i, row) in a_in_rows.iter().enumerate() {
        a_in.set_row(i, &row.transpose());
    }

    let terminal_map = block_row(horizon);
    let terminal_offset = &a_pow[horizon] * x0;
    let qp = QuadraticProgram::new(
        hess,
        lin,
        terminal_map.clone(),
        DVector::zeros(n),
        a_in,
        DVector::from_vec(b_in),
    )
    .map_err(|e| ConfigError::Invalid(format!("condensed QP invalid: {e}")))?;

    Ok(CondensedMpc {
        qp,
        constant,
        horizon,
        terminal_map,
        terminal_offset,
        state_dim: n,
        input_dim: m,
        a,
        b,
        x0: x0.clone(),
    })
}

/// Condense one fixed-terminal subproblem.
pub fn condense_mpc(
    model: &DynamicsModel,
    cost: &StageCost,
    horizon: usize,
    x0: &StateVec,
    x_terminal: &StateVec,
    constraints: &ConstraintSet,
) -> Result<CondensedMpc, ConfigError> {
    let mut template = condense_template(model, cost, horizon, x0, constraints)?;
    template.qp.b_eq = x_terminal - &template.terminal_offset;
    Ok(template)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::{solve_qp, QpStatus};
    use nalgebra::{dmatrix, dvector};

    fn clqr() -> (DynamicsModel, StageCost, ConstraintSet) {
        let model =
            DynamicsModel::linear(dmatrix![1.0, 1.0; 0.0, 1.0], dmatrix![0.0; 1.0]).unwrap();
        let cost = StageCost::quadratic(dvector![0.0, 0.0]).unwrap();
        let cs = ConstraintSet::new(
            dvector![-4.0, -4.0],
            dvector![4.0, 4.0],
            dvector![-1.0],
            dvector![1.0],
            vec![],
        )
        .unwrap();
        (model, cost, cs)
    }

    #[test]
    fn trivial_single_step() {
        let model = DynamicsModel::linear(DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap();
        let cost = StageCost::quadratic(dvector![0.0, 0.0]).unwrap();
        let cs = ConstraintSet::unbounded(2, 2);
        let cond = condense_mpc(&model, &cost, 1, &dvector![0.0, 0.0], &dvector![0.0, 0.0], &cs).unwrap();
        let sol = solve_qp(&cond.qp).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(sol.point.amax() < 1e-12);
        assert!((sol.value + cond.constant).abs() < 1e-12);
    }

    #[test]
    fn unreachable_terminal_is_infeasible() {
        let (model, cost, cs) = clqr();
        // One step from rest cannot move the position to 4.
        let cond = condense_mpc(&model, &cost, 1, &dvector![-3.95, -0.05], &dvector![4.0, 0.0], &cs).unwrap();
        let sol = solve_qp(&cond.qp).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn expansion_satisfies_dynamics_and_terminal() {
        let (model, cost, cs) = clqr();
        let x0 = dvector![-3.95, -0.05];
        // A reachable terminal: roll the system forward under a known
        // feasible input sequence and pin its endpoint.
        let inputs = [1.0, 1.0, -1.0, -1.0];
        let mut x = x0.clone();
        for u in inputs {
            x = model.step(&x, &dvector![u]).unwrap();
        }
        let cond = condense_mpc(&model, &cost, 4, &x0, &x, &cs).unwrap();
        let sol = solve_qp(&cond.qp).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal, "the stored-inputs construction must be feasible");
        let (states, us) = cond.expand(&sol.point);
        for k in 0..4 {
            let next = model.step(&states[k], &us[k]).unwrap();
            assert_eq!(next, states[k + 1]);
        }
        assert!((states[4].clone() - &x).amax() < 1e-8);
        // The rolled-out inputs themselves are one feasible point, so the
        // optimum cannot cost more than their stage sum.
        let mut plug = x0.clone();
        let mut plug_cost = 0.0;
        for u in inputs {
            let uv = dvector![u];
            plug_cost += cost.eval(&plug, &uv);
            plug = model.step(&plug, &uv).unwrap();
        }
        assert!(sol.value + cond.constant <= plug_cost + 1e-9);
    }

    #[test]
    fn value_is_invariant_to_inequality_row_order() {
        let (model, cost, cs) = clqr();
        let x0 = dvector![-3.95, -0.05];
        let mut x = x0.clone();
        for u in [1.0, 1.0, -1.0, -1.0] {
            x = model.step(&x, &dvector![u]).unwrap();
        }
        let cond = condense_mpc(&model, &cost, 4, &x0, &x, &cs).unwrap();
        let base = solve_qp(&cond.qp).unwrap();

        let rows = cond.qp.num_in();
        let perm: Vec<usize> = (0..rows).rev().collect();
        let mut a_in = DMatrix::zeros(rows, cond.qp.num_vars());
        let mut b_in = DVector::zeros(rows);
        for (new_i, &old_i) in perm.iter().enumerate() {
            a_in.set_row(new_i, &cond.qp.a_in.row(old_i));
            b_in[new_i] = cond.qp.b_in[old_i];
        }
        let permuted = QuadraticProgram::new(
            cond.qp.hessian.clone(),
            cond.qp.linear.clone(),
            cond.qp.a_eq.clone(),
            cond.qp.b_eq.clone(),
            a_in,
            b_in,
        )
        .unwrap();
        let sol = solve_qp(&permuted).unwrap();
        assert!((sol.value - base.value).abs() < 1e-9);
    }
}
