//! Dense strictly convex quadratic programming.
//!
//! Solves
//!
//! ```text
//!     minimize     1/2 z' H z + f' z
//!     subject to   A_eq z  = b_eq
//!                  A_in z <= b_in
//! ```
//!
//! with H symmetric positive definite. Equality constraints are eliminated
//! by null-space reduction, then the inequality problem is solved by a dual
//! active-set method in the Goldfarb–Idnani style: start at the
//! unconstrained optimum, repeatedly add the most violated constraint with
//! paired primal/dual steps, dropping blocking constraints along the way.
//! Iterates stay dual feasible, the dual objective increases monotonically,
//! and primal infeasibility surfaces as an unbounded dual step with a
//! Farkas certificate.
//!
//! Subproblems in this crate are tiny (a handful of variables for the
//! controller, a few hundred for the reference solves), so every step
//! re-solves its linear systems densely instead of updating factorizations.

use nalgebra::{DMatrix, DVector};

/// KKT tolerance reported optima are expected to meet.
pub const KKT_TOL: f64 = 1e-8;

const ADD_TOL: f64 = 1e-10;
const DUAL_TOL: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum QpError {
    #[error("Hessian is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("Hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("inconsistent dimensions: {0}")]
    Dimensions(String),
    #[error("iteration limit {0} exceeded")]
    IterationLimit(usize),
}

/// Problem data. Invariants: `H` symmetric within 1e-12, positive definite,
/// row dimensions consistent.
#[derive(Clone, Debug)]
pub struct QuadraticProgram {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

impl QuadraticProgram {
    pub fn new(
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        a_eq: DMatrix<f64>,
        b_eq: DVector<f64>,
        a_in: DMatrix<f64>,
        b_in: DVector<f64>,
    ) -> Result<Self, QpError> {
        let qp = Self { hessian, linear, a_eq, b_eq, a_in, b_in };
        qp.validate()?;
        Ok(qp)
    }

    /// Build without invariant checks, for callers that assemble data the
    /// solver contract does not cover (e.g. the polish step's semidefinite
    /// Hessians).
    pub fn new_unchecked(
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        a_eq: DMatrix<f64>,
        b_eq: DVector<f64>,
        a_in: DMatrix<f64>,
        b_in: DVector<f64>,
    ) -> Self {
        Self { hessian, linear, a_eq, b_eq, a_in, b_in }
    }

    pub fn num_vars(&self) -> usize {
        self.linear.len()
    }

    pub fn num_eq(&self) -> usize {
        self.a_eq.nrows()
    }

    pub fn num_in(&self) -> usize {
        self.a_in.nrows()
    }

    /// `1/2 z' H z + f' z`.
    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * (&self.hessian * z).dot(z) + self.linear.dot(z)
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.num_vars();
        if self.hessian.nrows() != n || self.hessian.ncols() != n {
            return Err(QpError::Dimensions(format!(
                "Hessian is {}x{}, expected {n}x{n}",
                self.hessian.nrows(),
                self.hessian.ncols()
            )));
        }
        if self.a_eq.ncols() != n && self.a_eq.nrows() > 0 {
            return Err(QpError::Dimensions("equality columns".into()));
        }
        if self.a_in.ncols() != n && self.a_in.nrows() > 0 {
            return Err(QpError::Dimensions("inequality columns".into()));
        }
        if self.a_eq.nrows() != self.b_eq.len() {
            return Err(QpError::Dimensions("equality rows".into()));
        }
        if self.a_in.nrows() != self.b_in.len() {
            return Err(QpError::Dimensions("inequality rows".into()));
        }
        let mut asym = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                asym = asym.max((self.hessian[(i, j)] - self.hessian[(j, i)]).abs());
            }
        }
        if asym > 1e-12 {
            return Err(QpError::NotSymmetric(asym));
        }
        if self.hessian.clone().cholesky().is_none() {
            return Err(QpError::NotPositiveDefinite);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    IterationLimit,
}

/// KKT residuals of a reported optimum: stationarity, primal feasibility,
/// complementary slackness, dual nonnegativity.
#[derive(Clone, Copy, Debug, Default)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
    pub dual: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity).max(self.dual)
    }
}

/// Farkas-style evidence of primal infeasibility: multipliers with
/// `A_in' λ + A_eq' ν ≈ 0`, `λ ≥ 0` and `b_in' λ + b_eq' ν < 0`.
#[derive(Clone, Debug)]
pub struct InfeasibilityCertificate {
    pub ineq_multipliers: DVector<f64>,
    pub eq_multipliers: DVector<f64>,
    /// `‖A_in' λ + A_eq' ν‖∞`, small for a valid certificate.
    pub residual: f64,
    /// `-(b_in' λ + b_eq' ν)`, strictly positive for a valid certificate.
    pub gap: f64,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub status: QpStatus,
    pub point: DVector<f64>,
    pub value: f64,
    pub eq_multipliers: DVector<f64>,
    pub in_multipliers: DVector<f64>,
    pub active_set: Vec<usize>,
    pub kkt: KktResiduals,
    pub certificate: Option<InfeasibilityCertificate>,
    pub iterations: usize,
}

/// Orthonormal basis pair for the row space and null space of `rows`
/// (an `p x n` matrix), via modified Gram–Schmidt with reorthogonalization
/// and largest-residual pivoting. Returns (row-space basis stacked as rows,
/// null-space basis stacked as columns, indices of independent rows).
fn orthonormal_split(rows: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, Vec<usize>) {
    let n = rows.ncols();
    let p = rows.nrows();
    let scale = rows.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let tol = 1e-12 * scale * (n as f64).sqrt();

    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut independent = Vec::new();
    for i in 0..p {
        let mut v: DVector<f64> = rows.row(i).transpose();
        for _ in 0..2 {
            for b in &basis {
                let proj = b.dot(&v);
                v -= b * proj;
            }
        }
        let norm = v.norm();
        if norm > tol {
            basis.push(v / norm);
            independent.push(i);
        }
    }
    let rank = basis.len();

    // Complete to an orthonormal basis of R^n with pivoted coordinate vectors.
    let mut null_basis: Vec<DVector<f64>> = Vec::new();
    let mut all: Vec<DVector<f64>> = basis.clone();
    while all.len() < n {
        let mut best: Option<(f64, DVector<f64>)> = None;
        for j in 0..n {
            let mut v = DVector::zeros(n);
            v[j] = 1.0;
            for _ in 0..2 {
                for b in &all {
                    let proj = b.dot(&v);
                    v -= b * proj;
                }
            }
            let norm = v.norm();
            if best.as_ref().is_none_or(|(bn, _)| norm > *bn) {
                best = Some((norm, v));
            }
        }
        let (norm, v) = best.expect("dimension exhausted");
        let v = v / norm;
        null_basis.push(v.clone());
        all.push(v);
    }

    let mut row_mat = DMatrix::zeros(rank, n);
    for (i, b) in basis.iter().enumerate() {
        row_mat.set_row(i, &b.transpose());
    }
    let mut null_mat = DMatrix::zeros(n, n - rank);
    for (j, b) in null_basis.iter().enumerate() {
        null_mat.set_column(j, b);
    }
    (row_mat, null_mat, independent)
}

struct Reduced {
    /// Particular solution of the equality system.
    x_part: DVector<f64>,
    /// Null-space basis, columns orthonormal.
    z_basis: DMatrix<f64>,
    g_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    g_vec: DVector<f64>,
    c_rows: DMatrix<f64>,
    d_vec: DVector<f64>,
}

fn kkt_residuals(qp: &QuadraticProgram, z: &DVector<f64>, nu: &DVector<f64>, mu: &DVector<f64>) -> KktResiduals {
    let mut grad = &qp.hessian * z + &qp.linear;
    if qp.num_eq() > 0 {
        grad += qp.a_eq.transpose() * nu;
    }
    if qp.num_in() > 0 {
        grad += qp.a_in.transpose() * mu;
    }
    let stationarity = grad.amax();
    let mut primal = 0.0f64;
    if qp.num_eq() > 0 {
        primal = primal.max((&qp.a_eq * z - &qp.b_eq).amax());
    }
    let mut complementarity = 0.0f64;
    let mut dual = 0.0f64;
    if qp.num_in() > 0 {
        let slack = &qp.a_in * z - &qp.b_in;
        for i in 0..slack.len() {
            primal = primal.max(slack[i]);
            complementarity = complementarity.max((mu[i] * slack[i]).abs());
            dual = dual.max(-mu[i]);
        }
    }
    KktResiduals { stationarity, primal, complementarity, dual }
}

/// Solve a strictly convex QP. See the module docs for the method.
pub fn solve_qp(qp: &QuadraticProgram) -> Result<QpSolution, QpError> {
    solve_qp_warm(qp, &[])
}

/// Solve with a warm-start guess for the optimal active set. A correct guess
/// finishes in a single equality solve; a wrong one costs one extra pass.
pub fn solve_qp_warm(qp: &QuadraticProgram, warm_active: &[usize]) -> Result<QpSolution, QpError> {
    qp.validate()?;
    solve_reduced(qp, warm_active)
}

/// Variant for Hessians that are only positive *semi*definite overall but
/// positive definite on the null space of the equality constraints (the
/// reduced Hessian the method actually factors). Dimension checks still
/// apply; the full-Hessian Cholesky check is skipped.
pub fn solve_qp_semidefinite_warm(
    qp: &QuadraticProgram,
    warm_active: &[usize],
) -> Result<QpSolution, QpError> {
    let n = qp.num_vars();
    if qp.hessian.nrows() != n || qp.hessian.ncols() != n {
        return Err(QpError::Dimensions("Hessian shape".into()));
    }
    if qp.a_eq.nrows() != qp.b_eq.len() || qp.a_in.nrows() != qp.b_in.len() {
        return Err(QpError::Dimensions("constraint rows".into()));
    }
    solve_reduced(qp, warm_active)
}

fn solve_reduced(qp: &QuadraticProgram, warm_active: &[usize]) -> Result<QpSolution, QpError> {
    let n = qp.num_vars();
    let p = qp.num_eq();

    // Null-space elimination of the equality system.
    let (x_part, z_basis) = if p == 0 {
        (DVector::zeros(n), DMatrix::identity(n, n))
    } else {
        let (row_basis, null_basis, independent) = orthonormal_split(&qp.a_eq);
        let rank = row_basis.nrows();
        let a_ind = DMatrix::from_fn(rank, n, |i, j| qp.a_eq[(independent[i], j)]);
        let b_ind = DVector::from_fn(rank, |i, _| qp.b_eq[independent[i]]);
        let gram = &a_ind * a_ind.transpose();
        let chol = gram.cholesky().ok_or(QpError::NotPositiveDefinite)?;
        let w = chol.solve(&b_ind);
        let x_part = a_ind.transpose() * w;
        let resid = (&qp.a_eq * &x_part - &qp.b_eq).amax();
        let scale = 1.0 + qp.b_eq.amax();
        if resid > KKT_TOL * scale {
            // Inconsistent equalities: the least-squares residual direction
            // is the certificate.
            let r = &qp.a_eq * &x_part - &qp.b_eq;
            let gap = -r.dot(&qp.b_eq) - r.dot(&(&qp.a_eq * &x_part - &qp.b_eq)) + r.norm_squared();
            let nu = r.clone();
            let residual = (qp.a_eq.transpose() * &nu).amax();
            return Ok(infeasible_solution(
                qp,
                x_part,
                InfeasibilityCertificate {
                    ineq_multipliers: DVector::zeros(qp.num_in()),
                    eq_multipliers: nu,
                    residual,
                    gap: gap.max(resid),
                },
            ));
        }
        (x_part, null_basis)
    };

    let n_red = z_basis.ncols();
    let h_z = &qp.hessian * &z_basis;
    let g_mat = z_basis.transpose() * &h_z;
    let g_chol = g_mat.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
    let g_vec = z_basis.transpose() * (&qp.hessian * &x_part + &qp.linear);
    let c_rows = if qp.num_in() > 0 {
        &qp.a_in * &z_basis
    } else {
        DMatrix::zeros(0, n_red)
    };
    let d_vec = if qp.num_in() > 0 {
        &qp.b_in - &qp.a_in * &x_part
    } else {
        DVector::zeros(0)
    };
    let red = Reduced { x_part, z_basis, g_chol, g_vec, c_rows, d_vec };

    let limit = 10 * (n + qp.num_in()).max(1);
    dual_active_set(qp, &red, warm_active, limit)
}

fn infeasible_solution(
    qp: &QuadraticProgram,
    point: DVector<f64>,
    certificate: InfeasibilityCertificate,
) -> QpSolution {
    QpSolution {
        status: QpStatus::Infeasible,
        value: qp.objective(&point),
        point,
        eq_multipliers: DVector::zeros(qp.num_eq()),
        in_multipliers: DVector::zeros(qp.num_in()),
        active_set: Vec::new(),
        kkt: KktResiduals::default(),
        certificate: Some(certificate),
        iterations: 0,
    }
}

/// Equality-solve on the working set: returns (y, multipliers) satisfying
/// stationarity and tightness, or None when the working-set Gram matrix is
/// numerically singular.
fn working_set_solve(red: &Reduced, active: &[usize]) -> Option<(DVector<f64>, DVector<f64>)> {
    let y_free = -red.g_chol.solve(&red.g_vec);
    if active.is_empty() {
        return Some((y_free, DVector::zeros(0)));
    }
    let k = active.len();
    let n_red = red.g_vec.len();
    let mut n_t = DMatrix::zeros(n_red, k);
    let mut d_a = DVector::zeros(k);
    for (col, &i) in active.iter().enumerate() {
        n_t.set_column(col, &red.c_rows.row(i).transpose());
        d_a[col] = red.d_vec[i];
    }
    let ginv_nt = red.g_chol.solve(&n_t);
    let m = n_t.transpose() * &ginv_nt;
    let chol = m.cholesky()?;
    // (N G^-1 N') u = -(d_A + N G^-1 g)
    let rhs = -(&d_a + n_t.transpose() * red.g_chol.solve(&red.g_vec));
    let u = chol.solve(&rhs);
    let y = -red.g_chol.solve(&(&red.g_vec + &n_t * &u));
    Some((y, u))
}

fn dual_active_set(
    qp: &QuadraticProgram,
    red: &Reduced,
    warm_active: &[usize],
    limit: usize,
) -> Result<QpSolution, QpError> {
    let n_in = qp.num_in();
    let mut active: Vec<usize> = Vec::new();
    let mut u: DVector<f64> = DVector::zeros(0);
    let mut y;

    // Warm start: equality-solve on the suggested working set, dropping
    // negative multipliers until the state is dual feasible.
    let mut seeded: Option<DVector<f64>> = None;
    if !warm_active.is_empty() && warm_active.iter().all(|&i| i < n_in) {
        let mut trial: Vec<usize> = warm_active.to_vec();
        trial.sort_unstable();
        trial.dedup();
        loop {
            match working_set_solve(red, &trial) {
                None => break,
                Some((y_w, u_w)) => {
                    if let Some(worst) = (0..trial.len())
                        .filter(|&i| u_w[i] < -DUAL_TOL)
                        .min_by(|&a, &b| u_w[a].partial_cmp(&u_w[b]).unwrap())
                    {
                        trial.remove(worst);
                        continue;
                    }
                    active = trial;
                    u = u_w.map(|v| v.max(0.0));
                    seeded = Some(y_w);
                    break;
                }
            }
        }
    }
    y = match seeded {
        Some(y_w) => y_w,
        None => -red.g_chol.solve(&red.g_vec),
    };

    let mut iterations = 0usize;
    loop {
        // Most violated inactive constraint.
        let mut worst: Option<(usize, f64)> = None;
        for i in 0..n_in {
            if active.contains(&i) {
                continue;
            }
            let slack = red.c_rows.row(i).transpose().dot(&y) - red.d_vec[i];
            if slack > ADD_TOL && worst.is_none_or(|(_, s)| slack > s) {
                worst = Some((i, slack));
            }
        }
        let Some((p_idx, _)) = worst else {
            return Ok(finish(qp, red, y, &active, &u, iterations));
        };

        // Add p with paired primal/dual steps, dropping blockers as needed.
        let c_p: DVector<f64> = red.c_rows.row(p_idx).transpose();
        let mut u_plus = 0.0f64;
        loop {
            iterations += 1;
            if iterations > limit {
                let mut sol = finish(qp, red, y, &active, &u, iterations);
                sol.status = QpStatus::IterationLimit;
                return Ok(sol);
            }
            let v = red.g_chol.solve(&c_p);
            let (z, r) = if active.is_empty() {
                (v.clone(), DVector::zeros(0))
            } else {
                let k = active.len();
                let n_red = red.g_vec.len();
                let mut n_t = DMatrix::zeros(n_red, k);
                for (col, &i) in active.iter().enumerate() {
                    n_t.set_column(col, &red.c_rows.row(i).transpose());
                }
                let ginv_nt = red.g_chol.solve(&n_t);
                let m = n_t.transpose() * &ginv_nt;
                let chol = match m.cholesky() {
                    Some(c) => c,
                    None => {
                        let mut sol = finish(qp, red, y, &active, &u, iterations);
                        sol.status = QpStatus::IterationLimit;
                        return Ok(sol);
                    }
                };
                let r = chol.solve(&(n_t.transpose() * &v));
                let z = &v - ginv_nt * &r;
                (z, r)
            };

            let slack = c_p.dot(&y) - red.d_vec[p_idx];
            if slack <= ADD_TOL {
                // Violation already resolved by earlier partial steps.
                break;
            }
            let czp = c_p.dot(&z);
            let denom_ok = czp > 1e-13 * (1.0 + c_p.norm_squared());
            let t2 = if denom_ok { slack / czp } else { f64::INFINITY };
            let mut t1 = f64::INFINITY;
            let mut blocker = None;
            for (col, &i) in active.iter().enumerate() {
                if r[col] > DUAL_TOL {
                    let ratio = u[col] / r[col];
                    if ratio < t1 {
                        t1 = ratio;
                        blocker = Some((col, i));
                    }
                }
            }

            if !t1.is_finite() && !t2.is_finite() {
                // Dual unbounded: λ = (1 on p, -r on active) certifies
                // primal infeasibility.
                let mut lambda = DVector::zeros(n_in);
                lambda[p_idx] = 1.0;
                for (col, &i) in active.iter().enumerate() {
                    lambda[i] = -r[col];
                }
                let cert = build_certificate(qp, &lambda);
                return Ok(infeasible_solution(qp, full_point(red, &y), cert));
            }

            let t = t1.min(t2);
            y -= &z * t;
            for col in 0..active.len() {
                u[col] -= t * r[col];
            }
            u_plus += t;

            if t2 <= t1 {
                // Full step: p joins the working set.
                let mut new_u = DVector::zeros(active.len() + 1);
                for col in 0..active.len() {
                    new_u[col] = u[col].max(0.0);
                }
                new_u[active.len()] = u_plus;
                active.push(p_idx);
                u = new_u;
                break;
            } else {
                // Partial step: the blocking constraint leaves, p stays
                // pending.
                let (col, _) = blocker.expect("finite t1 implies a blocker");
                active.remove(col);
                u = u.remove_row(col);
            }
        }
    }
}

fn full_point(red: &Reduced, y: &DVector<f64>) -> DVector<f64> {
    &red.x_part + &red.z_basis * y
}

fn build_certificate(qp: &QuadraticProgram, lambda: &DVector<f64>) -> InfeasibilityCertificate {
    // A_in' λ lies in the row space of A_eq; recover ν by least squares.
    let v = if qp.num_in() > 0 {
        qp.a_in.transpose() * lambda
    } else {
        DVector::zeros(qp.num_vars())
    };
    let nu = if qp.num_eq() > 0 {
        let gram = &qp.a_eq * qp.a_eq.transpose();
        match gram.cholesky() {
            Some(chol) => -chol.solve(&(&qp.a_eq * &v)),
            None => DVector::zeros(qp.num_eq()),
        }
    } else {
        DVector::zeros(0)
    };
    let mut resid = v.clone();
    if qp.num_eq() > 0 {
        resid += qp.a_eq.transpose() * &nu;
    }
    let gap = -(qp.b_in.dot(lambda) + if qp.num_eq() > 0 { qp.b_eq.dot(&nu) } else { 0.0 });
    InfeasibilityCertificate {
        ineq_multipliers: lambda.clone(),
        eq_multipliers: nu,
        residual: resid.amax(),
        gap,
    }
}

fn finish(
    qp: &QuadraticProgram,
    red: &Reduced,
    y: DVector<f64>,
    active: &[usize],
    u: &DVector<f64>,
    iterations: usize,
) -> QpSolution {
    let z = full_point(red, &y);
    let mut mu = DVector::zeros(qp.num_in());
    for (col, &i) in active.iter().enumerate() {
        mu[i] = u[col].max(0.0);
    }
    // Equality multipliers from least squares on the residual gradient.
    let mut grad = &qp.hessian * &z + &qp.linear;
    if qp.num_in() > 0 {
        grad += qp.a_in.transpose() * &mu;
    }
    let nu = if qp.num_eq() > 0 {
        let gram = &qp.a_eq * qp.a_eq.transpose();
        match gram.cholesky() {
            Some(chol) => -chol.solve(&(&qp.a_eq * &grad)),
            None => DVector::zeros(qp.num_eq()),
        }
    } else {
        DVector::zeros(0)
    };
    let kkt = kkt_residuals(qp, &z, &nu, &mu);
    let mut active_sorted = active.to_vec();
    active_sorted.sort_unstable();
    QpSolution {
        status: QpStatus::Optimal,
        value: qp.objective(&z),
        point: z,
        eq_multipliers: nu,
        in_multipliers: mu,
        active_set: active_sorted,
        kkt,
        certificate: None,
        iterations,
    }
}

/// One KKT equality re-solve on a fixed working set (LU with iterative
/// refinement); no feasibility or sign checks.
fn kkt_resolve(qp: &QuadraticProgram, active: &[usize]) -> Option<QpSolution> {
    let n = qp.num_vars();
    let p = qp.num_eq();
    let k = active.len();
    let dim = n + p + k;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&qp.hessian);
    if p > 0 {
        kkt.view_mut((0, n), (n, p)).copy_from(&qp.a_eq.transpose());
        kkt.view_mut((n, 0), (p, n)).copy_from(&qp.a_eq);
    }
    for (col, &i) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(j, n + p + col)] = qp.a_in[(i, j)];
            kkt[(n + p + col, j)] = qp.a_in[(i, j)];
        }
    }
    let mut rhs = DVector::zeros(dim);
    for j in 0..n {
        rhs[j] = -qp.linear[j];
    }
    for i in 0..p {
        rhs[n + i] = qp.b_eq[i];
    }
    for (col, &i) in active.iter().enumerate() {
        rhs[n + p + col] = qp.b_in[i];
    }
    let lu = kkt.clone().lu();
    let mut sol = lu.solve(&rhs)?;
    // Iterative refinement: the bordered system can be ill-conditioned for
    // long horizons, and one or two residual corrections recover full
    // working precision.
    for _ in 0..3 {
        let resid = &rhs - &kkt * &sol;
        if resid.amax() < 1e-15 * (1.0 + rhs.amax()) {
            break;
        }
        match lu.solve(&resid) {
            Some(corr) => sol += corr,
            None => break,
        }
    }
    let z = DVector::from_fn(n, |i, _| sol[i]);
    let nu = DVector::from_fn(p, |i, _| sol[n + i]);
    let mut mu = DVector::zeros(qp.num_in());
    for (col, &i) in active.iter().enumerate() {
        mu[i] = sol[n + p + col];
    }
    let res = kkt_residuals(qp, &z, &nu, &mu);
    let mut active_sorted = active.to_vec();
    active_sorted.sort_unstable();
    Some(QpSolution {
        status: QpStatus::Optimal,
        value: qp.objective(&z),
        point: z,
        eq_multipliers: nu,
        in_multipliers: mu,
        active_set: active_sorted,
        kkt: res,
        certificate: None,
        iterations: 0,
    })
}

/// Re-solve the KKT equations on a fixed working set with the *original*
/// (possibly only semidefinite) Hessian. Returns a solution only when it is
/// primal feasible and its KKT residuals beat `tol`. Used to remove
/// regularization bias after an active-set solve on a regularized problem.
pub fn polish_on_active_set(
    qp: &QuadraticProgram,
    active: &[usize],
    tol: f64,
) -> Option<QpSolution> {
    let sol = kkt_resolve(qp, active)?;
    if sol.kkt.max() > tol {
        return None;
    }
    Some(sol)
}
