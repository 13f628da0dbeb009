//! Parametric linear time-varying systems x' = A_theta(t) x + r_theta(t),
//! observed through a constant matrix C, plus the built-in model registry.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// A parametric linear system together with its parameter Jacobians.
///
/// Implementations must be pure: repeated evaluation at the same `(t, theta)`
/// returns the same matrices, and evaluation is safe from multiple threads.
pub trait Model: Send + Sync {
    fn name(&self) -> &str;
    /// State dimension d.
    fn state_dim(&self) -> usize;
    /// Output dimension d_obs.
    fn obs_dim(&self) -> usize;
    /// Parameter dimension p.
    fn param_dim(&self) -> usize;
    /// Box bounds per parameter.
    fn theta_domain(&self) -> Vec<(f64, f64)>;
    /// (A_theta(t), r_theta(t)). No domain check; see [`evaluate_system`].
    fn system(&self, t: f64, theta: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>);
    /// (dA/dtheta_j for j = 1..p, dr/dtheta as d x p).
    fn system_jacobians(&self, t: f64, theta: &DVector<f64>) -> (Vec<DMatrix<f64>>, DMatrix<f64>);
    /// Constant observation matrix C (d_obs x d, full row rank).
    fn obs_matrix(&self) -> DMatrix<f64>;
    fn is_autonomous(&self) -> bool;
    /// Additive perturbation v(t) applied to the true dynamics at simulation
    /// time only (misspecified-model experiments). Ignored during estimation.
    fn perturbation(&self, _t: f64) -> Option<DVector<f64>> {
        None
    }
}

/// Checks theta against the model domain and returns (A_theta(t), r_theta(t)).
pub fn evaluate_system(
    model: &dyn Model,
    theta: &DVector<f64>,
    t: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_theta(model, theta)?;
    Ok(model.system(t, theta))
}

pub fn check_theta(model: &dyn Model, theta: &DVector<f64>) -> Result<()> {
    if theta.len() != model.param_dim() {
        return Err(Error::Domain(format!(
            "theta has length {}, model '{}' expects {}",
            theta.len(),
            model.name(),
            model.param_dim()
        )));
    }
    for (i, (&v, (lo, hi))) in theta.iter().zip(model.theta_domain()).enumerate() {
        if !(v >= lo && v <= hi) {
            return Err(Error::ParameterOutOfRange {
                index: i,
                value: v,
                lo,
                hi,
            });
        }
    }
    Ok(())
}

/// Verifies the analytic Jacobians against central finite differences on
/// random (t, theta) probes; returns the worst relative error.
pub fn validate_jacobians(model: &dyn Model, t_end: f64, n_probes: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let domain = model.theta_domain();
    let mut worst: f64 = 0.0;
    for _ in 0..n_probes {
        let t = rng.uniform_in(0.0, t_end);
        let theta = DVector::from_iterator(
            domain.len(),
            domain.iter().map(|(lo, hi)| rng.uniform_in(*lo, *hi)),
        );
        let (da, dr) = model.system_jacobians(t, &theta);
        for j in 0..domain.len() {
            let step = 1e-6 * (1.0 + theta[j].abs());
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[j] += step;
            tm[j] -= step;
            let (ap, rp) = model.system(t, &tp);
            let (am, rm) = model.system(t, &tm);
            let fd_a = (ap - am) / (2.0 * step);
            let fd_r = (rp - rm) / (2.0 * step);
            let scale_a = 1.0 + fd_a.norm();
            let scale_r = 1.0 + fd_r.norm();
            worst = worst.max((&da[j] - fd_a).norm() / scale_a);
            worst = worst.max((dr.column(j) - fd_r).norm() / scale_r);
        }
    }
    worst
}

/// Sampled noisy outputs (t_i, Y_i) on [0, T].
#[derive(Debug, Clone)]
pub struct ObservationSet {
    pub times: Vec<f64>,
    pub values: Vec<DVector<f64>>,
    /// Noise standard deviation used at simulation; absent for real data.
    pub sigma: Option<f64>,
}

impl ObservationSet {
    pub fn new(times: Vec<f64>, values: Vec<DVector<f64>>, sigma: Option<f64>) -> Result<Self> {
        if times.len() < 2 || times.len() != values.len() {
            return Err(Error::Domain("need at least two (t, Y) samples".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) || times[0] < 0.0 {
            return Err(Error::Domain("observation times must be increasing and >= 0".into()));
        }
        Ok(ObservationSet {
            times,
            values,
            sigma,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }
}

/// Observation time schemes supported for simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// t_i equispaced with t_1 = 0 and t_n = T.
    Equispaced,
    /// n - 2 uniform draws in (0, T) plus the endpoints.
    UniformRandom,
}

pub fn sample_times(scheme: Sampling, n: usize, t_end: f64, rng: &mut Rng) -> Vec<f64> {
    match scheme {
        Sampling::Equispaced => {
            let h = t_end / (n - 1) as f64;
            let mut t: Vec<f64> = (0..n).map(|i| i as f64 * h).collect();
            t[n - 1] = t_end;
            t
        }
        Sampling::UniformRandom => {
            let mut inner: Vec<f64> = (0..n - 2).map(|_| rng.uniform_in(0.0, t_end)).collect();
            inner.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut t = Vec::with_capacity(n);
            t.push(0.0);
            t.extend(inner);
            t.push(t_end);
            // nudge duplicates apart
            for i in 1..n {
                if t[i] <= t[i - 1] {
                    t[i] = t[i - 1] + 1e-9 * t_end;
                }
            }
            t
        }
    }
}

/// Simulates Y_i = C X(t_i) + eps_i with eps_i iid N(0, sigma^2 I).
///
/// The true dynamics include the model perturbation v(t) when present.
pub fn simulate_observations(
    model: &dyn Model,
    theta_star: &DVector<f64>,
    x0_star: &DVector<f64>,
    times: &[f64],
    sigma: f64,
    seed: u64,
) -> Result<ObservationSet> {
    check_theta(model, theta_star)?;
    if sigma < 0.0 {
        return Err(Error::Domain("sigma must be >= 0".into()));
    }
    let x = simulate_truth(model, theta_star, x0_star, times)?;
    let c = model.obs_matrix();
    let mut rng = Rng::new(seed);
    let values = x
        .iter()
        .map(|xi| {
            let mut y = &c * xi;
            for k in 0..y.len() {
                y[k] += sigma * rng.gaussian();
            }
            y
        })
        .collect();
    ObservationSet::new(times.to_vec(), values, Some(sigma))
}

/// True state at the requested times (perturbation included), noise-free.
pub fn simulate_truth(
    model: &dyn Model,
    theta_star: &DVector<f64>,
    x0_star: &DVector<f64>,
    times: &[f64],
) -> Result<Vec<DVector<f64>>> {
    let t_end = *times
        .last()
        .ok_or_else(|| Error::Domain("empty time list".into()))?;
    let grid = crate::grid::TimeGrid::dense_with(t_end, (20 * times.len()).max(2000), times)?;
    let traj = crate::ode::solve_ivp(
        |t, x| {
            let (a, r) = model.system(t, theta_star);
            let mut dx = a * x + r;
            if let Some(v) = model.perturbation(t) {
                dx += v;
            }
            dx
        },
        x0_star,
        &grid,
    )?;
    Ok(times.iter().map(|&t| traj.at(t)).collect())
}

// ---------------------------------------------------------------------------
// Built-in models
// ---------------------------------------------------------------------------

/// Three-compartment decay chain observed through (x2, x3).
///
/// x1' = -(k1 + k2) x1, x2' = k1 x1, x3' = k2 x1.
#[derive(Debug, Clone, Copy)]
pub struct ToyModel {
    /// When set, simulation adds v(t) with entries 0.4 sin(t/5) to the dynamics.
    pub perturbed: bool,
}

impl ToyModel {
    pub const THETA_STAR: [f64; 2] = [0.0593, 0.0296];

    pub fn a_matrix(k1: f64, k2: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 3, &[-(k1 + k2), 0.0, 0.0, k1, 0.0, 0.0, k2, 0.0, 0.0])
    }
}

impl Model for ToyModel {
    fn name(&self) -> &str {
        if self.perturbed {
            "toy2"
        } else {
            "toy1"
        }
    }

    fn state_dim(&self) -> usize {
        3
    }

    fn obs_dim(&self) -> usize {
        2
    }

    fn param_dim(&self) -> usize {
        2
    }

    fn theta_domain(&self) -> Vec<(f64, f64)> {
        vec![(1e-4, 1.0), (1e-4, 1.0)]
    }

    fn system(&self, _t: f64, theta: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        (
            Self::a_matrix(theta[0], theta[1]),
            DVector::zeros(3),
        )
    }

    fn system_jacobians(
        &self,
        _t: f64,
        _theta: &DVector<f64>,
    ) -> (Vec<DMatrix<f64>>, DMatrix<f64>) {
        let dk1 = DMatrix::from_row_slice(3, 3, &[-1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let dk2 = DMatrix::from_row_slice(3, 3, &[-1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        (vec![dk1, dk2], DMatrix::zeros(3, 2))
    }

    fn obs_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
    }

    fn is_autonomous(&self) -> bool {
        true
    }

    fn perturbation(&self, t: f64) -> Option<DVector<f64>> {
        if self.perturbed {
            let v = 0.4 * (t / 5.0).sin();
            Some(DVector::from_element(3, v))
        } else {
            None
        }
    }
}

/// Methanation isotope-exchange model (4 states, forcing term, nonlinear in
/// the parameters theta = (C_col, C_os, v5, v6)).
///
/// Known constants follow the original reactor study; the gas-phase
/// concentrations are fixed at plausible magnitudes that keep the slowest
/// mode on the experimental horizon.
#[derive(Debug, Clone, Copy)]
pub struct MethanationModel;

impl MethanationModel {
    pub const THETA_STAR: [f64; 4] = [0.1, 11.1, 0.35, 0.008];

    const F_IN: f64 = 0.59;
    const F_OUT: f64 = 0.45;
    const Z_IN: f64 = 0.132;
    const V: f64 = 0.124;
    const V_PRIME: f64 = 0.01;
    const W: f64 = 0.744;
    const BETA: f64 = 206.1;
    const C_CO: f64 = 0.002;
    const C_H2O: f64 = 0.002;
    const C_CO2: f64 = 0.0002;

    fn d_h2o() -> f64 {
        Self::BETA * Self::C_H2O / Self::W
    }

    fn d_co2() -> f64 {
        Self::BETA * Self::C_CO2 / Self::W
    }
}

impl Model for MethanationModel {
    fn name(&self) -> &str {
        "methanation"
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn obs_dim(&self) -> usize {
        3
    }

    fn param_dim(&self) -> usize {
        4
    }

    fn theta_domain(&self) -> Vec<(f64, f64)> {
        Self::THETA_STAR
            .iter()
            .map(|&v| (v / 10.0, v * 10.0))
            .collect()
    }

    fn system(&self, _t: f64, theta: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let (c_col, c_os, v5, v6) = (theta[0], theta[1], theta[2], theta[3]);
        let d_co = Self::BETA * Self::C_CO / Self::W + c_col;
        let vv = Self::V + Self::V_PRIME;
        let (dh, dc) = (Self::d_h2o(), Self::d_co2());
        let mut a = DMatrix::zeros(4, 4);
        a[(0, 0)] = -(vv + Self::F_OUT / Self::W) / d_co;
        a[(1, 0)] = vv / dh;
        a[(1, 1)] = -(vv + v5) / dh;
        a[(1, 3)] = v5 / dh;
        a[(2, 0)] = Self::V_PRIME / dc;
        a[(2, 2)] = -(Self::V_PRIME + v6) / dc;
        a[(2, 3)] = v6 / dc;
        a[(3, 1)] = v5 / c_os;
        a[(3, 2)] = v6 / c_os;
        a[(3, 3)] = -(v5 + v6) / c_os;
        let mut r = DVector::zeros(4);
        r[0] = Self::F_IN * Self::Z_IN / d_co;
        (a, r)
    }

    fn system_jacobians(&self, _t: f64, theta: &DVector<f64>) -> (Vec<DMatrix<f64>>, DMatrix<f64>) {
        let (c_col, c_os, v5, v6) = (theta[0], theta[1], theta[2], theta[3]);
        let d_co = Self::BETA * Self::C_CO / Self::W + c_col;
        let vv = Self::V + Self::V_PRIME;
        let (dh, dc) = (Self::d_h2o(), Self::d_co2());

        let mut d_col = DMatrix::zeros(4, 4);
        d_col[(0, 0)] = (vv + Self::F_OUT / Self::W) / (d_co * d_co);

        let mut d_os = DMatrix::zeros(4, 4);
        d_os[(3, 1)] = -v5 / (c_os * c_os);
        d_os[(3, 2)] = -v6 / (c_os * c_os);
        d_os[(3, 3)] = (v5 + v6) / (c_os * c_os);

        let mut d_v5 = DMatrix::zeros(4, 4);
        d_v5[(1, 1)] = -1.0 / dh;
        d_v5[(1, 3)] = 1.0 / dh;
        d_v5[(3, 1)] = 1.0 / c_os;
        d_v5[(3, 3)] = -1.0 / c_os;

        let mut d_v6 = DMatrix::zeros(4, 4);
        d_v6[(2, 2)] = -1.0 / dc;
        d_v6[(2, 3)] = 1.0 / dc;
        d_v6[(3, 2)] = 1.0 / c_os;
        d_v6[(3, 3)] = -1.0 / c_os;

        let mut dr = DMatrix::zeros(4, 4);
        dr[(0, 0)] = -Self::F_IN * Self::Z_IN / (d_co * d_co);
        (vec![d_col, d_os, d_v5, d_v6], dr)
    }

    fn obs_matrix(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(3, 4);
        c[(0, 0)] = 1.0;
        c[(1, 1)] = 1.0;
        c[(2, 2)] = 1.0;
        c
    }

    fn is_autonomous(&self) -> bool {
        true
    }
}

/// Closure-backed model for custom registration and test systems.
pub struct ClosureModel {
    pub name: String,
    pub d: usize,
    pub d_obs: usize,
    pub p: usize,
    pub domain: Vec<(f64, f64)>,
    pub a: Box<dyn Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync>,
    pub r: Box<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>,
    pub c: DMatrix<f64>,
    pub da: Box<dyn Fn(f64, &DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync>,
    pub dr: Box<dyn Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync>,
    pub autonomous: bool,
}

impl ClosureModel {
    /// Scalar test system x' = theta x + u observed directly.
    pub fn scalar_growth(domain: (f64, f64)) -> Self {
        ClosureModel {
            name: "scalar".into(),
            d: 1,
            d_obs: 1,
            p: 1,
            domain: vec![domain],
            a: Box::new(|_t, th| DMatrix::from_element(1, 1, th[0])),
            r: Box::new(|_t, _th| DVector::zeros(1)),
            c: DMatrix::identity(1, 1),
            da: Box::new(|_t, _th| vec![DMatrix::from_element(1, 1, 1.0)]),
            dr: Box::new(|_t, _th| DMatrix::zeros(1, 1)),
            autonomous: true,
        }
    }
}

impl Model for ClosureModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn state_dim(&self) -> usize {
        self.d
    }

    fn obs_dim(&self) -> usize {
        self.d_obs
    }

    fn param_dim(&self) -> usize {
        self.p
    }

    fn theta_domain(&self) -> Vec<(f64, f64)> {
        self.domain.clone()
    }

    fn system(&self, t: f64, theta: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        ((self.a)(t, theta), (self.r)(t, theta))
    }

    fn system_jacobians(&self, t: f64, theta: &DVector<f64>) -> (Vec<DMatrix<f64>>, DMatrix<f64>) {
        ((self.da)(t, theta), (self.dr)(t, theta))
    }

    fn obs_matrix(&self) -> DMatrix<f64> {
        self.c.clone()
    }

    fn is_autonomous(&self) -> bool {
        self.autonomous
    }
}

/// Models addressed by string name; ships the built-ins, accepts custom ones.
pub struct ModelRegistry {
    map: HashMap<String, Arc<dyn Model>>,
}

impl ModelRegistry {
    pub fn builtin() -> Self {
        let mut reg = ModelRegistry {
            map: HashMap::new(),
        };
        reg.register(Arc::new(ToyModel { perturbed: false }));
        reg.register(Arc::new(ToyModel { perturbed: true }));
        reg.register(Arc::new(MethanationModel));
        reg
    }

    pub fn register(&mut self, model: Arc<dyn Model>) {
        self.map.insert(model.name().to_string(), model);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Model>> {
        self.map
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownModel(name.to_string()))
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.map.keys().cloned().collect();
        v.sort();
        v
    }
}
