//! The optimal-control criterion: joint Riccati/adjoint integration, the
//! closed-form profiled cost S, final/initial state estimates, the smoothed
//! trajectory with its control, and observability diagnostics.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::{check_theta, Model};
use crate::ode::{resolvant, rk4_step};
use crate::signal::OutputSignal;

/// Condition-number cutoff beyond which E(T) is treated as singular.
pub const E_CONDITION_LIMIT: f64 = 1e12;

/// Dense-grid solution (E(t), h(t)) of the Riccati/adjoint system for one
/// (theta, lambda), plus the running integrals entering the closed form of S.
#[derive(Debug, Clone)]
pub struct AdjointPath {
    pub grid: TimeGrid,
    pub e: Vec<DMatrix<f64>>,
    pub h: Vec<DVector<f64>>,
    pub lambda: f64,
    pub q0: DMatrix<f64>,
    /// int ||zeta||^2 dt over [0, T].
    pub int_zeta_sq: f64,
    /// int r^T h dt.
    pub int_r_h: f64,
    /// int ||h||^2 dt.
    pub int_h_sq: f64,
}

impl AdjointPath {
    pub fn e_at(&self, t: f64) -> DMatrix<f64> {
        let i = self.grid.bracket(t);
        let (t0, t1) = (self.grid.nodes()[i], self.grid.nodes()[i + 1]);
        let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        &self.e[i] * (1.0 - w) + &self.e[i + 1] * w
    }

    pub fn h_at(&self, t: f64) -> DVector<f64> {
        let i = self.grid.bracket(t);
        let (t0, t1) = (self.grid.nodes()[i], self.grid.nodes()[i + 1]);
        let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        &self.h[i] * (1.0 - w) + &self.h[i + 1] * w
    }
}

/// Closed-form criterion value with its final-time diagnostics.
#[derive(Debug, Clone)]
pub struct CriterionValue {
    pub s: f64,
    pub e_t: DMatrix<f64>,
    pub h_t: DVector<f64>,
    pub x_hat_t: DVector<f64>,
    pub condition_e_t: f64,
    pub lambda: f64,
    pub theta: DVector<f64>,
}

/// Reconstructed state, optimal control and endpoint estimates.
#[derive(Debug, Clone)]
pub struct SmoothedTrajectory {
    pub grid: TimeGrid,
    pub x: Vec<DVector<f64>>,
    pub u_bar: Vec<DVector<f64>>,
    pub x0_hat: DVector<f64>,
    pub xt_hat: DVector<f64>,
}

impl SmoothedTrajectory {
    pub fn x_at(&self, t: f64) -> DVector<f64> {
        let i = self.grid.bracket(t);
        let (t0, t1) = (self.grid.nodes()[i], self.grid.nodes()[i + 1]);
        let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        &self.x[i] * (1.0 - w) + &self.x[i + 1] * w
    }

    pub fn u_at(&self, t: f64) -> DVector<f64> {
        let i = self.grid.bracket(t);
        let (t0, t1) = (self.grid.nodes()[i], self.grid.nodes()[i + 1]);
        let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        &self.u_bar[i] * (1.0 - w) + &self.u_bar[i + 1] * w
    }
}

/// Observability diagnostics at the horizon T.
#[derive(Debug, Clone)]
pub struct ObservabilityReport {
    pub gramian: DMatrix<f64>,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    /// Rank of the stacked (C; CA; ...; CA^{d-1}) matrix, autonomous models only.
    pub kalman_rank: Option<usize>,
    pub passes: bool,
}

fn check_q0(q0: &DMatrix<f64>, d: usize) -> Result<()> {
    if q0.nrows() != d || q0.ncols() != d {
        return Err(Error::Domain("Q0 has wrong dimensions".into()));
    }
    if (q0 - q0.transpose()).amax() > 1e-10 * (1.0 + q0.amax()) {
        return Err(Error::Domain("Q0 must be symmetric".into()));
    }
    let eig = q0.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * (1.0 + q0.amax())) {
        return Err(Error::Domain("Q0 must be positive semidefinite".into()));
    }
    Ok(())
}

/// Forward integration of
///   E' = C^T C - A^T E - E A - E^2 / lambda,    E(0) = Q0,
///   h' = -(A^T + E/lambda) h - (C^T zeta + E r), h(0) = 0,
/// with the three integrals of the closed form accumulated by the same RK4
/// quadrature. E is symmetrized after every step.
pub fn integrate_adjoint(
    model: &dyn Model,
    theta: &DVector<f64>,
    lambda: f64,
    q0: &DMatrix<f64>,
    zeta: &dyn OutputSignal,
    grid: &TimeGrid,
) -> Result<AdjointPath> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("lambda must be > 0, got {lambda}")));
    }
    check_theta(model, theta)?;
    let d = model.state_dim();
    check_q0(q0, d)?;
    if zeta.dim() != model.obs_dim() {
        return Err(Error::Domain("zeta dimension differs from model output".into()));
    }
    let c = model.obs_matrix();
    let ctc = c.transpose() * &c;
    let ct = c.transpose();

    // packed state: [h (d), E (d^2, column-major), accumulators (3)]
    let dim = d + d * d + 3;
    let mut rhs = |t: f64, y: &DVector<f64>| {
        let h = DVector::from_column_slice(&y.as_slice()[0..d]);
        let e = DMatrix::from_column_slice(d, d, &y.as_slice()[d..d + d * d]);
        let (a, r) = model.system(t, theta);
        let z = zeta.eval(t);
        let de = &ctc - a.transpose() * &e - &e * &a - (&e * &e) / lambda;
        let dh = -(a.transpose() * &h) - (&e * &h) / lambda - (&ct * &z) - (&e * &r);
        let mut out = DVector::zeros(dim);
        out.rows_mut(0, d).copy_from(&dh);
        out.rows_mut(d, d * d)
            .copy_from(&DVector::from_column_slice(de.as_slice()));
        out[d + d * d] = z.norm_squared();
        out[d + d * d + 1] = r.dot(&h);
        out[d + d * d + 2] = h.norm_squared();
        out
    };

    let mut y = DVector::zeros(dim);
    y.rows_mut(d, d * d)
        .copy_from(&DVector::from_column_slice(q0.as_slice()));

    let nodes = grid.nodes();
    let mut e_path = Vec::with_capacity(nodes.len());
    let mut h_path = Vec::with_capacity(nodes.len());
    e_path.push(q0.clone());
    h_path.push(DVector::zeros(d));
    for i in 1..nodes.len() {
        let t = nodes[i - 1];
        y = rk4_step(&mut rhs, t, &y, nodes[i] - t);
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { node: i, t: nodes[i] });
        }
        // enforce Riccati symmetry at every node
        let mut e = DMatrix::from_column_slice(d, d, &y.as_slice()[d..d + d * d]);
        e = (&e + e.transpose()) * 0.5;
        y.rows_mut(d, d * d)
            .copy_from(&DVector::from_column_slice(e.as_slice()));
        h_path.push(DVector::from_column_slice(&y.as_slice()[0..d]));
        e_path.push(e);
    }

    Ok(AdjointPath {
        grid: grid.clone(),
        e: e_path,
        h: h_path,
        lambda,
        q0: q0.clone(),
        int_zeta_sq: y[d + d * d],
        int_r_h: y[d + d * d + 1],
        int_h_sq: y[d + d * d + 2],
    })
}

/// Symmetric solve of E(T) w = h(T) with a condition-number guard.
fn solve_final(e_t: &DMatrix<f64>, h_t: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let eig = e_t.clone().symmetric_eigen();
    let abs: Vec<f64> = eig.eigenvalues.iter().map(|l| l.abs()).collect();
    let max = abs.iter().cloned().fold(0.0f64, f64::max);
    let min = abs.iter().cloned().fold(f64::INFINITY, f64::min);
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(cond < E_CONDITION_LIMIT) {
        return Err(Error::Observability(format!(
            "E(T) is singular or ill-conditioned (condition number {cond:.3e}); \
             the final observability matrix must be nonsingular when Q0 = 0"
        )));
    }
    let proj = eig.eigenvectors.transpose() * h_t;
    let scaled = DVector::from_iterator(
        h_t.len(),
        proj.iter().zip(eig.eigenvalues.iter()).map(|(v, l)| v / l),
    );
    Ok((&eig.eigenvectors * scaled, cond))
}

/// Closed form of the profiled cost:
/// S = int (||zeta||^2 - 2 r^T h - ||h||^2 / lambda) dt - h(T)^T E(T)^-1 h(T).
pub fn criterion_s(
    model: &dyn Model,
    theta: &DVector<f64>,
    lambda: f64,
    q0: &DMatrix<f64>,
    zeta: &dyn OutputSignal,
    grid: &TimeGrid,
) -> Result<CriterionValue> {
    let path = integrate_adjoint(model, theta, lambda, q0, zeta, grid)?;
    criterion_from_path(&path, theta)
}

pub fn criterion_from_path(path: &AdjointPath, theta: &DVector<f64>) -> Result<CriterionValue> {
    let e_t = path.e.last().unwrap().clone();
    let h_t = path.h.last().unwrap().clone();
    let (w, cond) = solve_final(&e_t, &h_t)?;
    let s = path.int_zeta_sq - 2.0 * path.int_r_h - path.int_h_sq / path.lambda - h_t.dot(&w);
    Ok(CriterionValue {
        s,
        x_hat_t: -w,
        e_t,
        h_t,
        condition_e_t: cond,
        lambda: path.lambda,
        theta: theta.clone(),
    })
}

/// Final-state estimate x(T) = -E(T)^-1 h(T).
pub fn final_state(path: &AdjointPath) -> Result<DVector<f64>> {
    let (w, _) = solve_final(path.e.last().unwrap(), path.h.last().unwrap())?;
    Ok(-w)
}

/// Backward closed-loop pass: integrates
///   x' = (A + E/lambda) x + r + h/lambda,  x(T) = -E(T)^-1 h(T)
/// and returns the trajectory, the control u = (E x + h)/lambda and both
/// endpoint estimates.
pub fn smooth_trajectory(
    model: &dyn Model,
    theta: &DVector<f64>,
    path: &AdjointPath,
) -> Result<SmoothedTrajectory> {
    let xt_hat = final_state(path)?;
    let lambda = path.lambda;
    let mut rhs = |t: f64, x: &DVector<f64>| {
        let (a, r) = model.system(t, theta);
        let e = path.e_at(t);
        let h = path.h_at(t);
        a * x + (&e * x) / lambda + r + h / lambda
    };
    let nodes = path.grid.nodes();
    let n = nodes.len();
    let mut x = vec![DVector::zeros(model.state_dim()); n];
    x[n - 1] = xt_hat.clone();
    for i in (0..n - 1).rev() {
        let t = nodes[i + 1];
        let next = rk4_step(&mut rhs, t, &x[i + 1], nodes[i] - t);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { node: i, t: nodes[i] });
        }
        x[i] = next;
    }
    let u_bar: Vec<DVector<f64>> = (0..n)
        .map(|i| (&path.e[i] * &x[i] + &path.h[i]) / lambda)
        .collect();
    let x0_hat = x[0].clone();
    Ok(SmoothedTrajectory {
        grid: path.grid.clone(),
        x,
        u_bar,
        x0_hat,
        xt_hat,
    })
}

/// Signal t -> zeta(t) - C Phi(t, 0) mu realizing a prior mean on the
/// initial condition; compose with [`criterion_s`].
pub struct ShiftedSignal<'a> {
    zeta: &'a dyn OutputSignal,
    c: DMatrix<f64>,
    phi: crate::grid::MatrixTrajectory,
    mu: DVector<f64>,
}

impl OutputSignal for ShiftedSignal<'_> {
    fn dim(&self) -> usize {
        self.zeta.dim()
    }

    fn eval(&self, t: f64) -> DVector<f64> {
        self.zeta.eval(t) - &self.c * (self.phi.at(t) * &self.mu)
    }
}

pub fn apply_prior_mean<'a>(
    zeta: &'a dyn OutputSignal,
    model: &dyn Model,
    theta: &DVector<f64>,
    mu: &DVector<f64>,
    grid: &TimeGrid,
) -> Result<ShiftedSignal<'a>> {
    if !mu.iter().all(|v| v.is_finite()) {
        return Err(Error::Domain("prior mean must be finite".into()));
    }
    Ok(ShiftedSignal {
        zeta,
        c: model.obs_matrix(),
        phi: resolvant(model, theta, grid)?,
        mu: mu.clone(),
    })
}

/// O(T) = int Phi^T C^T C Phi dt by trapezoid quadrature on the grid.
pub fn observability_gramian(
    model: &dyn Model,
    theta: &DVector<f64>,
    grid: &TimeGrid,
) -> Result<ObservabilityReport> {
    let phi = resolvant(model, theta, grid)?;
    let c = model.obs_matrix();
    let ctc = c.transpose() * &c;
    let d = model.state_dim();
    let nodes = grid.nodes();
    let mut gram = DMatrix::zeros(d, d);
    let mut prev: Option<DMatrix<f64>> = None;
    for (i, &t) in nodes.iter().enumerate() {
        let f = phi.values[i].transpose() * &ctc * &phi.values[i];
        if let Some(pf) = prev {
            gram += (pf + &f) * (0.5 * (t - nodes[i - 1]));
        }
        prev = Some(f);
    }
    gram = (&gram + gram.transpose()) * 0.5;
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let passes = min > 1e-10 * max.max(0.0);
    let kalman = if model.is_autonomous() {
        let (a, _) = model.system(0.0, theta);
        Some(kalman_rank(&a, &c))
    } else {
        None
    };
    Ok(ObservabilityReport {
        gramian: gram,
        min_eigenvalue: min,
        max_eigenvalue: max,
        kalman_rank: kalman,
        passes,
    })
}

/// Numerical rank of the stacked (C; CA; ...; CA^{d-1}) matrix.
pub fn kalman_rank(a: &DMatrix<f64>, c: &DMatrix<f64>) -> usize {
    let d = a.nrows();
    let d_obs = c.nrows();
    let mut stacked = DMatrix::zeros(d_obs * d, d);
    let mut block = c.clone();
    for j in 0..d {
        stacked.rows_mut(j * d_obs, d_obs).copy_from(&block);
        block = &block * a;
    }
    let svd = stacked.svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    svd.rank(d as f64 * f64::EPSILON * smax)
}

/// Default Q0 policy: zero when the Gramian check passes, otherwise a small
/// multiple of the identity to keep E(T) invertible.
pub fn default_q0(model: &dyn Model, theta: &DVector<f64>, grid: &TimeGrid) -> Result<DMatrix<f64>> {
    let d = model.state_dim();
    let report = observability_gramian(model, theta, grid)?;
    if report.passes {
        Ok(DMatrix::zeros(d, d))
    } else {
        let scale = (report.gramian.trace() / d as f64).max(1.0);
        Ok(DMatrix::identity(d, d) * (1e-6 * scale))
    }
}
