//! Constrained LQR benchmark: double integrator with box constraints on
//! state and input, quadratic stage cost, regulated to the origin.

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::controller::{LmpcProblem, StepMode};
use crate::model::{ConfigError, ConstraintSet, DynamicsModel, StageCost, StateVec};
use crate::trajectory::{IterationRecord, Trajectory, TrajectoryStep};

/// State norm below which the seed's LQR tail is truncated and the origin
/// appended; deep enough that the discarded tail cost is far below the
/// termination threshold.
const SEED_TRUNCATION: f64 = 1e-9;

/// Fixed open-loop prefix of the initial feasible controller: arrest the
/// drift toward the position bound, accelerate toward the origin, brake.
/// Hands the unconstrained LQR a state well inside the boxes.
const OPEN_LOOP_PREFIX: [f64; 4] = [1.0, 1.0, -1.0, -1.0];

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClqrInstance {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub x_start: Vec<f64>,
    pub state_bound: f64,
    pub input_bound: f64,
    pub horizon: usize,
    pub epsilon: f64,
    pub gamma: f64,
    pub iteration_cap: usize,
}

impl Default for ClqrInstance {
    fn default() -> Self {
        Self {
            a: vec![vec![1.0, 1.0], vec![0.0, 1.0]],
            b: vec![vec![0.0], vec![1.0]],
            x_start: vec![-3.95, -0.05],
            state_bound: 4.0,
            input_bound: 1.0,
            horizon: 4,
            epsilon: 1e-8,
            gamma: 1e-10,
            iteration_cap: 50,
        }
    }
}

impl ClqrInstance {
    pub fn state_dim(&self) -> usize {
        self.a.len()
    }

    pub fn input_dim(&self) -> usize {
        self.b.first().map_or(0, Vec::len)
    }

    pub fn a_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.a.len(), self.a[0].len(), |i, j| self.a[i][j])
    }

    pub fn b_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.b.len(), self.b[0].len(), |i, j| self.b[i][j])
    }

    pub fn model(&self) -> Result<DynamicsModel, ConfigError> {
        DynamicsModel::linear(self.a_matrix(), self.b_matrix())
    }

    pub fn constraints(&self) -> Result<ConstraintSet, ConfigError> {
        let n = self.state_dim();
        let m = self.input_dim();
        ConstraintSet::new(
            DVector::from_element(n, -self.state_bound),
            DVector::from_element(n, self.state_bound),
            DVector::from_element(m, -self.input_bound),
            DVector::from_element(m, self.input_bound),
            vec![],
        )
    }

    pub fn problem(&self, mode: StepMode) -> Result<LmpcProblem, ConfigError> {
        let n = self.state_dim();
        LmpcProblem::new(
            self.model()?,
            StageCost::quadratic(DVector::zeros(n))?,
            self.constraints()?,
            self.horizon,
            DVector::from_vec(self.x_start.clone()),
            DVector::zeros(n),
            self.epsilon,
            self.gamma,
            self.iteration_cap,
            mode,
        )
    }
}

/// Solve the discrete algebraic Riccati equation by fixed-point iteration
/// and return the LQR gain `K` (so `u = -K x`) together with the value
/// matrix `P`.
pub fn dare_lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), ConfigError> {
    let mut p = q.clone();
    for _ in 0..100_000 {
        let btpb = r + b.transpose() * &p * b;
        let inv = btpb
            .clone()
            .try_inverse()
            .ok_or_else(|| ConfigError::Invalid("singular input-weight block in the Riccati step".into()))?;
        let next =
            q + a.transpose() * &p * a - a.transpose() * &p * b * &inv * b.transpose() * &p * a;
        let delta = (&next - &p).amax();
        p = next;
        if delta < 1e-14 {
            let btpb = r + b.transpose() * &p * b;
            let inv = btpb.try_inverse().unwrap();
            let k = inv * b.transpose() * &p * a;
            return Ok((k, p));
        }
    }
    Err(ConfigError::Invalid("Riccati iteration did not converge".into()))
}

/// Initial feasible iteration: the fixed open-loop prefix followed by the
/// unconstrained LQR (weights matching the stage cost) until the state norm
/// underflows the truncation threshold. Every step is verified against the
/// constraints; the construction fails loudly if an override breaks it.
pub fn clqr_seed_iteration0(inst: &ClqrInstance) -> Result<IterationRecord, ConfigError> {
    let model = inst.model()?;
    let constraints = inst.constraints()?;
    let n = inst.state_dim();
    let cost = StageCost::quadratic(DVector::zeros(n))?;
    let (k_gain, _) = dare_lqr_gain(
        &inst.a_matrix(),
        &inst.b_matrix(),
        &DMatrix::identity(n, n),
        &DMatrix::identity(inst.input_dim(), inst.input_dim()),
    )?;

    let mut x: StateVec = DVector::from_vec(inst.x_start.clone());
    let mut steps: Vec<TrajectoryStep> = Vec::new();
    #[allow(clippy::needless_range_loop)]
    for t in 0..10_000 {
        if x.amax() < SEED_TRUNCATION {
            let trajectory = Trajectory { iteration: 0, steps, terminal: DVector::zeros(n) };
            return Ok(IterationRecord::from_trajectory(trajectory, true, vec![]));
        }
        let u = if t < OPEN_LOOP_PREFIX.len() {
            DVector::from_element(inst.input_dim(), OPEN_LOOP_PREFIX[t])
        } else {
            -(&k_gain * &x)
        };
        if !constraints.is_feasible(&x, &u) {
            return Err(ConfigError::Invalid(format!(
                "seed construction infeasible at step {t}: state {:?}, input {:?}",
                x.as_slice(),
                u.as_slice()
            )));
        }
        let h = cost.eval(&x, &u);
        let next = model.step(&x, &u)?;
        steps.push(TrajectoryStep { state: x, input: u, stage_cost: h });
        x = next;
    }
    Err(ConfigError::Invalid("seed LQR tail did not reach the truncation threshold".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_feasible_and_converges() {
        let inst = ClqrInstance::default();
        let seed = clqr_seed_iteration0(&inst).unwrap();
        assert!(seed.converged);
        let cs = inst.constraints().unwrap();
        for step in &seed.trajectory.steps {
            assert!(cs.is_feasible(&step.state, &step.input));
        }
        // Truncated at the threshold with the origin appended.
        assert!(seed.trajectory.steps.last().unwrap().state.amax() >= SEED_TRUNCATION);
        assert_eq!(seed.trajectory.terminal, DVector::zeros(2));
        assert!(seed.cost > 49.0);
    }

    #[test]
    fn seed_replays_bit_exactly() {
        let inst = ClqrInstance::default();
        let seed = clqr_seed_iteration0(&inst).unwrap();
        let model = inst.model().unwrap();
        let mut x = DVector::from_vec(inst.x_start.clone());
        for step in &seed.trajectory.steps {
            assert_eq!(x, step.state);
            x = model.step(&x, &step.input).unwrap();
        }
    }

    #[test]
    fn dare_gain_stabilizes() {
        let inst = ClqrInstance::default();
        let (k, p) = dare_lqr_gain(
            &inst.a_matrix(),
            &inst.b_matrix(),
            &DMatrix::identity(2, 2),
            &DMatrix::identity(1, 1),
        )
        .unwrap();
        // Closed-loop matrix must be a contraction in the P-metric.
        let acl = inst.a_matrix() - inst.b_matrix() * &k;
        let decayed = acl.transpose() * &p * &acl;
        let diff = &p - &decayed;
        assert!(diff.clone().cholesky().is_some(), "P - Acl'PAcl must be positive definite");
    }
}
