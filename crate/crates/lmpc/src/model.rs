//! Problem data shared by every controller component: dynamics, stage costs
//! and constraint descriptions.
//!
//! All types here are immutable after construction and `Send + Sync`, so an
//! iteration's workers can share them without synchronization.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

/// Dense real state vector, dimension fixed per problem instance.
pub type StateVec = DVector<f64>;
/// Dense real input vector.
pub type InputVec = DVector<f64>;
/// Shared deterministic update map.
pub type UpdateMap = Arc<dyn Fn(&StateVec, &InputVec) -> StateVec + Send + Sync>;

/// Absolute feasibility tolerance for constraint checks. Matches the QP
/// solver's KKT tolerance so closed-loop states produced by the solver
/// always pass.
pub const FEASIBILITY_TOL: f64 = 1e-8;

/// Infinity-norm tolerance for "state equals the target" in the minimum-time
/// costs. Exact equality is unreachable in floating point; 1e-6 is far below
/// the length scales of the vehicle examples.
pub const TARGET_TOL: f64 = 1e-6;

/// Errors raised while assembling or using problem data.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Explicit affine form `f(x, u) = A x + B u` of a dynamics map.
#[derive(Clone, Debug)]
pub struct LinearForm {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// Deterministic discrete-time update map `x' = f(x, u)`.
///
/// The map is total on the declared dimensions. When a linear form is
/// present, `f(x, u) = A x + B u` exactly (same floating-point result).
#[derive(Clone)]
pub struct DynamicsModel {
    state_dim: usize,
    input_dim: usize,
    map: UpdateMap,
    linear: Option<LinearForm>,
}

impl fmt::Debug for DynamicsModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DynamicsModel")
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .field("linear", &self.linear.is_some())
            .finish()
    }
}

impl DynamicsModel {
    /// Linear system `x' = A x + B u`.
    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self, ConfigError> {
        if a.nrows() != a.ncols() {
            return Err(ConfigError::Invalid("A must be square".into()));
        }
        if b.nrows() != a.nrows() {
            return Err(ConfigError::DimensionMismatch {
                what: "B rows",
                expected: a.nrows(),
                got: b.nrows(),
            });
        }
        let form = LinearForm { a, b };
        let map_form = form.clone();
        Ok(Self {
            state_dim: form.a.nrows(),
            input_dim: form.b.ncols(),
            map: Arc::new(move |x, u| &map_form.a * x + &map_form.b * u),
            linear: Some(form),
        })
    }

    /// General nonlinear update map.
    pub fn nonlinear<F>(state_dim: usize, input_dim: usize, map: F) -> Self
    where
        F: Fn(&StateVec, &InputVec) -> StateVec + Send + Sync + 'static,
    {
        Self {
            state_dim,
            input_dim,
            map: Arc::new(map),
            linear: None,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn linear_form(&self) -> Option<&LinearForm> {
        self.linear.as_ref()
    }

    /// Apply one step of the update map.
    pub fn step(&self, x: &StateVec, u: &InputVec) -> Result<StateVec, ConfigError> {
        if x.len() != self.state_dim {
            return Err(ConfigError::DimensionMismatch {
                what: "state",
                expected: self.state_dim,
                got: x.len(),
            });
        }
        if u.len() != self.input_dim {
            return Err(ConfigError::DimensionMismatch {
                what: "input",
                expected: self.input_dim,
                got: u.len(),
            });
        }
        Ok((self.map)(x, u))
    }

    /// Step without the dimension guard, for inner loops that already
    /// validated their data.
    pub(crate) fn step_unchecked(&self, x: &StateVec, u: &InputVec) -> StateVec {
        (self.map)(x, u)
    }
}

/// Stage cost `h(x, u)`, zero exactly at the target equilibrium.
#[derive(Clone, Debug)]
pub enum StageCost {
    /// `‖x‖² + ‖u‖²` with the target at the origin.
    Quadratic { target: StateVec },
    /// 1 away from the target, 0 at it; total cost counts time steps.
    MinTime { target: StateVec },
    /// Minimum-time indicator on the leading position/velocity slice plus a
    /// weighted penalty on the estimator-error component. State layout is
    /// `(z, y, v, s_hat, e)`: the indicator requires `(z, y, v)` at the
    /// target and `e = 0`, with `s_hat` free.
    AdaptiveMinTime { target: StateVec, weight: f64 },
}

impl StageCost {
    pub fn quadratic(target: StateVec) -> Result<Self, ConfigError> {
        if target.iter().any(|v| *v != 0.0) {
            return Err(ConfigError::Invalid(
                "quadratic stage cost requires the target at the origin".into(),
            ));
        }
        Ok(Self::Quadratic { target })
    }

    pub fn min_time(target: StateVec) -> Self {
        Self::MinTime { target }
    }

    pub fn adaptive_min_time(target: StateVec, weight: f64) -> Result<Self, ConfigError> {
        if target.len() != 3 {
            return Err(ConfigError::DimensionMismatch {
                what: "adaptive target",
                expected: 3,
                got: target.len(),
            });
        }
        if weight < 0.0 {
            return Err(ConfigError::Invalid("error weight must be nonnegative".into()));
        }
        Ok(Self::AdaptiveMinTime { target, weight })
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self, Self::Quadratic { .. })
    }

    /// Evaluate `h(x, u)`.
    pub fn eval(&self, x: &StateVec, u: &InputVec) -> f64 {
        match self {
            Self::Quadratic { .. } => x.norm_squared() + u.norm_squared(),
            Self::MinTime { .. } | Self::AdaptiveMinTime { .. } => {
                let indicator = if self.at_target(x) { 0.0 } else { 1.0 };
                match self {
                    Self::AdaptiveMinTime { weight, .. } => {
                        let e = x[x.len() - 1];
                        weight * e * e + indicator
                    }
                    _ => indicator,
                }
            }
        }
    }

    /// Whether `x` counts as at the terminal target for the indicator costs.
    /// The quadratic variant never snaps; its runs terminate via the cost
    /// threshold instead.
    pub fn at_target(&self, x: &StateVec) -> bool {
        match self {
            Self::Quadratic { .. } => false,
            Self::MinTime { target } => {
                x.iter().zip(target.iter()).all(|(a, b)| (a - b).abs() <= TARGET_TOL)
            }
            Self::AdaptiveMinTime { target, .. } => {
                let e = x[x.len() - 1];
                x.iter().take(3).zip(target.iter()).all(|(a, b)| (a - b).abs() <= TARGET_TOL)
                    && e.abs() <= TARGET_TOL
            }
        }
    }

    /// Canonical representative of the target set an at-target state snaps
    /// to. Returns `None` when `x` is not at the target (or for the
    /// quadratic variant).
    pub fn canonicalize(&self, x: &StateVec) -> Option<StateVec> {
        if !self.at_target(x) {
            return None;
        }
        match self {
            Self::Quadratic { .. } => None,
            Self::MinTime { target } => Some(target.clone()),
            Self::AdaptiveMinTime { target, .. } => {
                let mut snapped = x.clone();
                snapped[0] = target[0];
                snapped[1] = target[1];
                snapped[2] = target[2];
                let e_idx = x.len() - 1;
                snapped[e_idx] = 0.0;
                Some(snapped)
            }
        }
    }
}

/// Ellipsoidal exclusion region: feasible points satisfy
/// `(x[i] - c0)²/a² + (x[j] - c1)²/b² ≥ 1`.
#[derive(Clone, Debug)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    /// State coordinates the ellipse applies to.
    pub coords: (usize, usize),
}

impl Ellipse {
    /// Left-hand side of the exclusion inequality at `x`.
    pub fn value(&self, x: &StateVec) -> f64 {
        let dz = x[self.coords.0] - self.center.0;
        let dy = x[self.coords.1] - self.center.1;
        let (ae, be) = self.semi_axes;
        dz * dz / (ae * ae) + dy * dy / (be * be)
    }
}

/// One violated constraint in a feasibility check.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    StateLower { coord: usize, value: f64, bound: f64 },
    StateUpper { coord: usize, value: f64, bound: f64 },
    InputLower { coord: usize, value: f64, bound: f64 },
    InputUpper { coord: usize, value: f64, bound: f64 },
    Exclusion { index: usize, value: f64 },
}

/// Box bounds on states and inputs plus optional ellipsoidal exclusions.
/// Bounds may be infinite per coordinate.
#[derive(Clone, Debug)]
pub struct ConstraintSet {
    pub x_lower: DVector<f64>,
    pub x_upper: DVector<f64>,
    pub u_lower: DVector<f64>,
    pub u_upper: DVector<f64>,
    pub exclusions: Vec<Ellipse>,
}

impl ConstraintSet {
    pub fn new(
        x_lower: DVector<f64>,
        x_upper: DVector<f64>,
        u_lower: DVector<f64>,
        u_upper: DVector<f64>,
        exclusions: Vec<Ellipse>,
    ) -> Result<Self, ConfigError> {
        if x_lower.len() != x_upper.len() {
            return Err(ConfigError::DimensionMismatch {
                what: "state bounds",
                expected: x_lower.len(),
                got: x_upper.len(),
            });
        }
        if u_lower.len() != u_upper.len() {
            return Err(ConfigError::DimensionMismatch {
                what: "input bounds",
                expected: u_lower.len(),
                got: u_upper.len(),
            });
        }
        if x_lower.iter().zip(x_upper.iter()).any(|(l, u)| l > u)
            || u_lower.iter().zip(u_upper.iter()).any(|(l, u)| l > u)
        {
            return Err(ConfigError::Invalid("lower bound exceeds upper bound".into()));
        }
        for ell in &exclusions {
            if ell.semi_axes.0 <= 0.0 || ell.semi_axes.1 <= 0.0 {
                return Err(ConfigError::Invalid("ellipse semi-axes must be positive".into()));
            }
            let max_coord = ell.coords.0.max(ell.coords.1);
            if max_coord >= x_lower.len() {
                return Err(ConfigError::DimensionMismatch {
                    what: "ellipse coordinates",
                    expected: x_lower.len(),
                    got: max_coord + 1,
                });
            }
        }
        Ok(Self {
            x_lower,
            x_upper,
            u_lower,
            u_upper,
            exclusions,
        })
    }

    /// All-infinite box of the given dimensions.
    pub fn unbounded(state_dim: usize, input_dim: usize) -> Self {
        Self {
            x_lower: DVector::from_element(state_dim, f64::NEG_INFINITY),
            x_upper: DVector::from_element(state_dim, f64::INFINITY),
            u_lower: DVector::from_element(input_dim, f64::NEG_INFINITY),
            u_upper: DVector::from_element(input_dim, f64::INFINITY),
            exclusions: Vec::new(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.x_lower.len()
    }

    pub fn input_dim(&self) -> usize {
        self.u_lower.len()
    }

    /// Violations of the state-only constraints at `x`.
    pub fn state_violations(&self, x: &StateVec) -> Vec<Violation> {
        let tol = FEASIBILITY_TOL;
        let mut out = Vec::new();
        for i in 0..x.len() {
            if x[i] < self.x_lower[i] - tol {
                out.push(Violation::StateLower { coord: i, value: x[i], bound: self.x_lower[i] });
            }
            if x[i] > self.x_upper[i] + tol {
                out.push(Violation::StateUpper { coord: i, value: x[i], bound: self.x_upper[i] });
            }
        }
        for (k, ell) in self.exclusions.iter().enumerate() {
            let v = ell.value(x);
            if v < 1.0 - tol {
                out.push(Violation::Exclusion { index: k, value: v });
            }
        }
        out
    }

    /// Check a state/input pair. Infeasibility is a value, not an error.
    pub fn check(&self, x: &StateVec, u: &InputVec) -> Vec<Violation> {
        let tol = FEASIBILITY_TOL;
        let mut out = self.state_violations(x);
        for i in 0..u.len() {
            if u[i] < self.u_lower[i] - tol {
                out.push(Violation::InputLower { coord: i, value: u[i], bound: self.u_lower[i] });
            }
            if u[i] > self.u_upper[i] + tol {
                out.push(Violation::InputUpper { coord: i, value: u[i], bound: self.u_upper[i] });
            }
        }
        out
    }

    pub fn is_feasible(&self, x: &StateVec, u: &InputVec) -> bool {
        self.check(x, u).is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn clqr_model() -> DynamicsModel {
        DynamicsModel::linear(dmatrix![1.0, 1.0; 0.0, 1.0], dmatrix![0.0; 1.0]).unwrap()
    }

    #[test]
    fn step_matches_clqr_example() {
        let model = clqr_model();
        let x = dvector![-3.95, -0.05];
        let next = model.step(&x, &dvector![0.0]).unwrap();
        assert_eq!(next, dvector![-4.0, -0.05]);
    }

    #[test]
    fn step_fixes_equilibrium() {
        let model = clqr_model();
        let x_f = dvector![0.0, 0.0];
        assert_eq!(model.step(&x_f, &dvector![0.0]).unwrap(), x_f);
    }

    #[test]
    fn step_dubins_zero_velocity() {
        let model = DynamicsModel::nonlinear(3, 2, |x, u| {
            dvector![
                x[0] + x[2] * u[0].cos(),
                x[1] + x[2] * u[0].sin(),
                x[2] + u[1]
            ]
        });
        let next = model.step(&dvector![0.0, 0.0, 0.0], &dvector![0.0, 1.0]).unwrap();
        assert_eq!(next, dvector![0.0, 0.0, 1.0]);
    }

    #[test]
    fn step_rejects_dimension_mismatch() {
        let model = clqr_model();
        assert!(model.step(&dvector![0.0], &dvector![0.0]).is_err());
        assert!(model.step(&dvector![0.0, 0.0], &dvector![0.0, 0.0]).is_err());
    }

    #[test]
    fn quadratic_cost_example() {
        let cost = StageCost::quadratic(dvector![0.0, 0.0]).unwrap();
        assert_eq!(cost.eval(&dvector![3.0, 4.0], &dvector![1.0]), 26.0);
    }

    #[test]
    fn indicator_cost_examples() {
        let cost = StageCost::min_time(dvector![0.0, 0.0, 0.0]);
        assert_eq!(cost.eval(&dvector![0.0, 0.0, 0.0], &dvector![0.0, 0.0]), 0.0);
        assert_eq!(cost.eval(&dvector![1.0, 0.0, 0.0], &dvector![0.0, 0.0]), 1.0);
    }

    #[test]
    fn quadratic_positive_away_from_target() {
        // Eq-6-style positivity, spot checked on a deterministic sample grid.
        let cost = StageCost::quadratic(dvector![0.0, 0.0]).unwrap();
        let mut v: f64 = 0.37;
        for _ in 0..200 {
            v = (v * 1103.515245 + 1.2345).rem_euclid(8.0) - 4.0;
            let w = (v * 7.7).rem_euclid(2.0) - 1.0;
            let x = dvector![v, w];
            let u = dvector![w * 0.5];
            if v != 0.0 || w != 0.0 {
                assert!(cost.eval(&x, &u) > 0.0);
            }
        }
        assert_eq!(cost.eval(&dvector![0.0, 0.0], &dvector![0.0]), 0.0);
    }

    #[test]
    fn feasibility_examples() {
        let cs = ConstraintSet::new(
            dvector![-4.0, -4.0],
            dvector![4.0, 4.0],
            dvector![-1.0],
            dvector![1.0],
            vec![],
        )
        .unwrap();
        assert!(cs.is_feasible(&dvector![-3.95, -0.05], &dvector![1.0]));
        assert!(!cs.is_feasible(&dvector![-3.95, -0.05], &dvector![1.0001]));
    }

    #[test]
    fn ellipse_boundary_examples() {
        let cs = ConstraintSet::new(
            DVector::from_element(3, f64::NEG_INFINITY),
            DVector::from_element(3, f64::INFINITY),
            DVector::from_element(2, f64::NEG_INFINITY),
            DVector::from_element(2, f64::INFINITY),
            vec![Ellipse { center: (27.0, 0.0), semi_axes: (8.0, 6.0), coords: (0, 1) }],
        )
        .unwrap();
        let u = dvector![0.0, 0.0];
        assert!(!cs.is_feasible(&dvector![27.0, 0.0, 0.0], &u));
        assert!(cs.is_feasible(&dvector![27.0, 6.01, 0.0], &u));
    }

    #[test]
    fn adaptive_cost_target_slice() {
        let cost = StageCost::adaptive_min_time(dvector![54.0, 0.0, 0.0], 10.0).unwrap();
        let at = dvector![54.0, 0.0, 0.0, 0.7, 0.0];
        assert_eq!(cost.eval(&at, &dvector![0.0, 0.0, 0.0]), 0.0);
        // e != 0 keeps the indicator on and pays the error penalty.
        let off = dvector![54.0, 0.0, 0.0, 0.25, 0.75];
        assert!((cost.eval(&off, &dvector![0.0, 0.0, 0.0]) - (10.0 * 0.5625 + 1.0)).abs() < 1e-15);
        let snapped = cost.canonicalize(&dvector![54.0 + 1e-7, -1e-7, 0.0, 0.4, 1e-7]).unwrap();
        assert_eq!(snapped, dvector![54.0, 0.0, 0.0, 0.4, 0.0]);
    }
}
